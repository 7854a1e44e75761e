//! Fast gradient and invariance checks on a tiny encoder.

use rand::Rng as _;

use crate::autodiff::gradcheck::relative_error;
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, Graph, HeadKind, Mode};
use crate::error::Result;
use crate::jetdata::toy::generate_toy_jet;
use crate::jetdata::{build_batch, build_batch_compact, normalize_jet, ClassLabel, Jet, JetBatch, TARGET_JET_PT};
use crate::objectives::{
    cross_entropy_loss, make_mask_plan, mpm_loss, ntxent_loss, supcon_loss, vae_loss, ContrastiveBatch, MASK_RATE,
    NTXENT_TEMPERATURE, SUPCON_TEMPERATURE,
};
use crate::rng::seeded;
use crate::sampler::SamplingPolicy;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            tolerance,
            passed: value < tolerance,
        }
    }
}

const GRAD_TOL: f64 = 1e-3;
const INVARIANCE_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-4;
const COORDS_PER_PARAM: usize = 2;

/// Encoder small enough for finite differences over every parameter.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        embed_hidden: 12,
        latent_dim: 8,
        n_particle_blocks: 1,
        n_class_blocks: 1,
        n_heads: 2,
        interaction_hidden: 6,
        readout_hidden: 8,
        proj_dim: 5,
        mpm_hidden: 7,
        vae_latent: 3,
        vae_hidden: 6,
        max_particles: 12,
        ..EncoderConfig::smoke()
    }
}

fn toy_jets(seed: u64, n: usize) -> Result<Vec<Jet>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| normalize_jet(&generate_toy_jet(ClassLabel::ALL[i % ClassLabel::COUNT], &mut rng)))
        .collect()
}

/// Largest relative error between backpropagated and central-difference
/// parameter gradients of `loss`, over a few sampled coordinates of every
/// parameter. Uses the five-point stencil, whose O(h⁴) truncation stays below
/// the relative-error floor even where the loss sits at a stationary point.
pub fn encoder_gradcheck<F>(enc: &Encoder<f64>, loss: F) -> Result<f64>
where
    F: for<'t, 'm> Fn(&Graph<'t, 'm, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let g = enc.bind(&tape, |_| true);
    let l = loss(&g)?;
    let mut grads = tape.backward(l)?;
    let analytic = g.bound().collect_grads(&mut grads);
    drop(g);

    let value = |e: &Encoder<f64>| -> Result<f64> {
        let tape = Tape::new();
        let g = e.bind(&tape, |_| false);
        Ok(loss(&g)?.item())
    };
    let mut work = enc.clone();
    let mut rng = seeded(5);
    let mut worst = 0.0f64;
    for id in enc.params().ids() {
        let numel = enc.params().get(id).value.numel();
        for _ in 0..COORDS_PER_PARAM.min(numel) {
            let c = rng.random_range(0..numel);
            let orig = enc.params().get(id).value.data()[c];
            let mut at = |k: f64| -> Result<f64> {
                work.params_mut().get_mut(id).value.data_mut()[c] = orig + k * FD_STEP;
                value(&work)
            };
            let numeric = (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * FD_STEP);
            work.params_mut().get_mut(id).value.data_mut()[c] = orig;
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[c]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Reverses the real-particle slots of every jet.
fn reverse_slots(b: &JetBatch<f64>) -> JetBatch<f64> {
    let (nb, n, f) = (b.batch_size(), b.max_particles(), b.features.shape()[2]);
    let src = |j: usize, s: usize| if s < b.counts[j] { b.counts[j] - 1 - s } else { s };
    let mut out = b.clone();
    for j in 0..nb {
        for s in 0..n {
            let os = src(j, s);
            out.features.data_mut()[(j * n + s) * f..][..f].copy_from_slice(&b.features.data()[(j * n + os) * f..][..f]);
            out.types[j * n + s] = b.types[j * n + os];
            for t in 0..n {
                let ot = src(j, t);
                for c in 0..4 {
                    out.interaction.data_mut()[((j * 4 + c) * n + s) * n + t] =
                        b.interaction.data()[((j * 4 + c) * n + os) * n + ot];
                }
            }
        }
    }
    out
}

fn latent(enc: &Encoder<f64>, batch: &JetBatch<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let g = enc.bind(&tape, |_| false);
    Ok((*g.encode(batch, None)?.latent.value()).clone())
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

pub fn selfcheck() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let jets = toy_jets(3, 4)?;
    let batch: JetBatch<f64> = build_batch_compact(&jets, tiny_config().max_particles)?;
    let labels = batch.label_indices();

    for modified in [false, true] {
        let cfg = if modified { tiny_config().modified() } else { tiny_config() };
        let mut enc = Encoder::<f64>::new(cfg, Mode::Pretrain, &mut seeded(1))?;
        for h in HeadKind::ALL {
            enc.attach_head(h, &mut seeded(2))?;
        }
        let name = |plain, modif| if modified { modif } else { plain };
        out.push(CheckResult::below(
            name("gradient: encoder + cross-entropy", "gradient: modified encoder + cross-entropy"),
            encoder_gradcheck(&enc, |g| {
                let z = g.encode(&batch, None)?;
                cross_entropy_loss(g.classifier(z.latent, None)?, &labels)
            })?,
            GRAD_TOL,
        ));
        if modified {
            continue;
        }
        out.push(CheckResult::below(
            "gradient: encoder + NT-Xent",
            encoder_gradcheck(&enc, |g| {
                let z = g.projection(g.encode(&batch, None)?.latent)?;
                ntxent_loss(&ContrastiveBatch::stacked(z, None)?, NTXENT_TEMPERATURE)
            })?,
            GRAD_TOL,
        ));
        out.push(CheckResult::below(
            "gradient: encoder + SupCon",
            encoder_gradcheck(&enc, |g| {
                let z = g.projection(g.encode(&batch, None)?.latent)?;
                let lab = [labels[0], labels[1]];
                Ok(supcon_loss(&ContrastiveBatch::stacked(z, Some(&lab))?, SUPCON_TEMPERATURE)?.loss)
            })?,
            GRAD_TOL,
        ));
        let plan = make_mask_plan(&batch, MASK_RATE, &mut seeded(4))?;
        out.push(CheckResult::below(
            "gradient: encoder + MPM",
            encoder_gradcheck(&enc, |g| {
                let z = g.encode_masked(&batch, &plan, None)?;
                mpm_loss(g.mpm_decode(z.tokens, &plan)?, &plan)
            })?,
            GRAD_TOL,
        ));
        let noise = Tensor::from_fn(&[batch.batch_size(), enc.config().vae_latent], |i| 0.3 * i as f64 - 0.5);
        out.push(CheckResult::below(
            "gradient: encoder + VAE",
            encoder_gradcheck(&enc, |g| {
                let v = g.vae(g.encode(&batch, None)?.latent, &noise, batch.max_particles())?;
                Ok(vae_loss(v.mu, v.log_var, v.reconstruction, &batch.features, &batch.mask, 1.0)?.total)
            })?,
            GRAD_TOL,
        ));

        let reference = latent(&enc, &batch)?;
        out.push(CheckResult::below(
            "invariance: latent under particle permutation",
            max_diff(&reference, &latent(&enc, &reverse_slots(&batch))?),
            INVARIANCE_TOL,
        ));
        let padded: JetBatch<f64> = build_batch(&jets, enc.config().max_particles)?;
        out.push(CheckResult::below(
            "invariance: latent under padding",
            max_diff(&reference, &latent(&enc, &padded)?),
            INVARIANCE_TOL,
        ));
    }

    let pt_err = toy_jets(9, 50)?
        .iter()
        .map(|j| (j.p4().pt() - TARGET_JET_PT).abs() / TARGET_JET_PT)
        .fold(0.0, f64::max);
    out.push(CheckResult::below("normalization: jet pT", pt_err, INVARIANCE_TOL));

    let counts = SamplingPolicy::paper(27_000)?.counts();
    let expected = ClassLabel::ALL.map(|c| match c {
        ClassLabel::Qcd | ClassLabel::QqbBcs => 9000,
        ClassLabel::Bb | ClassLabel::Qq => 3000,
        _ => 1000,
    });
    out.push(CheckResult {
        name: "sampler: per-class epoch counts",
        value: counts.iter().zip(expected).map(|(&a, b)| a.abs_diff(b)).sum::<usize>() as f64,
        tolerance: 0.0,
        passed: counts == expected,
    });
    Ok(out)
}
