use rand::Rng;

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout keep mask: entries are `1/(1-rate)` with probability
/// `1-rate` and 0 otherwise. Outside training the mask is all ones.
pub fn dropout_mask<S: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor<S>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = S::lit(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            S::zero()
        } else {
            keep
        }
    }))
}

/// Stochastic depth on a residual branch `[B, ..]`: each sample's branch is
/// dropped with probability `rate` (kept branches rescaled by `1/(1-rate)`),
/// then the branch is multiplied by `scale`. At inference the branch is only
/// scaled.
pub fn drop_path<'t, S: Scalar, R: Rng + ?Sized>(
    branch: Var<'t, S>,
    rate: f64,
    scale: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var<'t, S>> {
    check_rate(rate)?;
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("residual scale {scale} must be positive")));
    }
    if !training || rate == 0.0 {
        return Ok(if scale == 1.0 { branch } else { branch.scale(S::lit(scale)) });
    }
    let shape = branch.shape();
    let batch = *shape.first().unwrap_or(&1);
    let per = shape.iter().skip(1).product::<usize>();
    let kept = S::lit(scale / (1.0 - rate));
    let factors: Vec<S> = (0..batch)
        .map(|_| if rng.random::<f64>() < rate { S::zero() } else { kept })
        .collect();
    let mask = Tensor::from_fn(&shape, |i| factors[i / per.max(1)]);
    branch.mul_const(&mask)
}

/// `x·w + b` over the last axis of `x`.
pub fn linear<'t, S: Scalar>(x: Var<'t, S>, w: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    x.matmul(w)?.add_bias(b)
}

/// Gated GELU unit: `gelu(x·w) ⊙ (x·v)`.
pub fn geglu<'t, S: Scalar>(x: Var<'t, S>, w: Var<'t, S>, v: Var<'t, S>) -> Result<Var<'t, S>> {
    if w.shape() != v.shape() {
        return shape_err("geglu", &w.shape(), &v.shape());
    }
    let gate = x.matmul(w)?.gelu();
    gate.mul(x.matmul(v)?)
}
