//! Training objectives: NT-Xent, SupCon, masked-particle reconstruction, the
//! VAE loss and cross-entropy.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::jetdata::{JetBatch, N_CONTINUOUS_FEATURES, N_FEATURES};
use crate::scalar::Scalar;

pub const NTXENT_TEMPERATURE: f64 = 0.1;
pub const SUPCON_TEMPERATURE: f64 = 0.07;
pub const MASK_RATE: f64 = 0.3;
pub const VAE_BETA: f64 = 1.0;
/// Tolerance on the unit norm of contrastive embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// L2-normalized projections of two views, with the pairing of each row to
/// its other view and optional class labels.
#[derive(Clone)]
pub struct ContrastiveBatch<'t, S: Scalar> {
    embeddings: Var<'t, S>,
    pairing: Vec<usize>,
    labels: Option<Vec<usize>>,
}

impl<'t, S: Scalar> ContrastiveBatch<'t, S> {
    pub fn new(embeddings: Var<'t, S>, pairing: Vec<usize>, labels: Option<Vec<usize>>) -> Result<Self> {
        let shape = embeddings.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!("embeddings must be 2-D, got {shape:?}")));
        }
        let n = shape[0];
        if pairing.len() != n {
            return Err(Error::InvalidArgument(format!("pairing has {} entries for {n} rows", pairing.len())));
        }
        for (i, &p) in pairing.iter().enumerate() {
            if p >= n || p == i || pairing[p] != i {
                return Err(Error::Contract(format!(
                    "pairing must be a fixed-point-free involution (row {i} -> {p})"
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidArgument(format!("{} labels for {n} rows", l.len())));
            }
        }
        let v = embeddings.value();
        let d = shape[1];
        for (i, row) in v.data().chunks(d.max(1)).enumerate() {
            let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt().to_f64_lossy();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("embedding row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            embeddings,
            pairing,
            labels,
        })
    }

    /// Rows `0..B` are the first views and `B..2B` the second; row `i` pairs
    /// with `i ± B`. `labels` are per jet (length B) and are repeated.
    pub fn stacked(embeddings: Var<'t, S>, labels: Option<&[usize]>) -> Result<Self> {
        let n = embeddings.shape().first().copied().unwrap_or(0);
        if n % 2 != 0 {
            return Err(Error::InvalidArgument(format!("{n} rows cannot hold two views")));
        }
        let b = n / 2;
        let pairing = (0..n).map(|i| if i < b { i + b } else { i - b }).collect();
        let labels = labels.map(|l| l.iter().chain(l).copied().collect());
        Self::new(embeddings, pairing, labels)
    }

    pub fn rows(&self) -> usize {
        self.pairing.len()
    }
}

/// `−Σ_ij W_ij log softmax_{k≠i}(s_ik/τ)_j / n_anchors`, the common form of
/// NT-Xent and SupCon.
fn weighted_contrastive<'t, S: Scalar>(
    cb: &ContrastiveBatch<'t, S>,
    tau: f64,
    weights: Tensor<S>,
    n_anchors: usize,
) -> Result<Var<'t, S>> {
    let n = cb.rows();
    let z = cb.embeddings;
    let sim = z.matmul(z.transpose_last()?)?;
    let logits = sim.scale(S::lit(1.0 / tau));
    let allowed: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let logp = logits.log_softmax(Some(Rc::new(allowed)))?;
    let total = logp.mul_const(&weights)?.sum();
    Ok(total.scale(S::lit(-1.0 / n_anchors as f64)))
}

/// NT-Xent: each row's positive is its paired view, all other rows except
/// itself are negatives.
pub fn ntxent_loss<'t, S: Scalar>(cb: &ContrastiveBatch<'t, S>, tau: f64) -> Result<Var<'t, S>> {
    let n = cb.rows();
    if n < 4 {
        return Err(Error::Degenerate(format!("NT-Xent needs at least 2 jets (4 views), got {n} rows")));
    }
    let mut w = Tensor::zeros(&[n, n]);
    for (i, &p) in cb.pairing.iter().enumerate() {
        w.data_mut()[i * n + p] = S::one();
    }
    weighted_contrastive(cb, tau, w, n)
}

#[derive(Debug)]
pub struct SupConLoss<'t, S: Scalar> {
    pub loss: Var<'t, S>,
    /// Anchors without any positive, excluded from the mean.
    pub skipped_anchors: usize,
}

/// Supervised contrastive loss, `L_out` form: every other row with the same
/// label is a positive and the per-anchor loss averages over positives.
pub fn supcon_loss<'t, S: Scalar>(cb: &ContrastiveBatch<'t, S>, tau: f64) -> Result<SupConLoss<'t, S>> {
    let labels = cb
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("SupCon requires labels".into()))?;
    let n = cb.rows();
    let mut w = Tensor::zeros(&[n, n]);
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&k| k != i && labels[k] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let share = S::one() / S::from_usize(pos.len()).expect("count fits");
        for k in pos {
            w.data_mut()[i * n + k] = share;
        }
    }
    if anchors == 0 {
        return Err(Error::Degenerate("SupCon loss undefined: no anchor has a positive".into()));
    }
    Ok(SupConLoss {
        loss: weighted_contrastive(cb, tau, w, anchors)?,
        skipped_anchors: n - anchors,
    })
}

/// Particles hidden from the encoder for masked-particle modeling.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan<S> {
    /// `[B·N]`, true where the particle is masked.
    pub mask: Vec<bool>,
    /// Flat slot indices of the masked particles, ascending.
    pub masked_slots: Vec<usize>,
    /// `[n_masked, 5]` continuous targets.
    pub continuous_targets: Tensor<S>,
    /// Particle-type class of each masked particle.
    pub type_targets: Vec<usize>,
}

impl<S: Scalar> MaskPlan<S> {
    pub fn n_masked(&self) -> usize {
        self.masked_slots.len()
    }
}

/// Number of particles masked in a jet with `n_real` particles.
pub fn mask_count(n_real: usize, rate: f64) -> usize {
    let k = (rate * n_real as f64).round() as usize;
    if n_real >= 2 {
        k.clamp(1, n_real - 1)
    } else {
        0
    }
}

pub fn make_mask_plan<S: Scalar, R: Rng + ?Sized>(batch: &JetBatch<S>, rate: f64, rng: &mut R) -> Result<MaskPlan<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1)")));
    }
    let n = batch.max_particles();
    let mut mask = vec![false; batch.mask.len()];
    let mut slots = Vec::new();
    for (b, &count) in batch.counts.iter().enumerate() {
        let k = mask_count(count, rate);
        let mut chosen = sample(rng, count, k).into_vec();
        chosen.sort_unstable();
        for s in chosen {
            mask[b * n + s] = true;
            slots.push(b * n + s);
        }
    }
    let feats = batch.features.data();
    let mut cont = Vec::with_capacity(slots.len() * N_CONTINUOUS_FEATURES);
    let mut types = Vec::with_capacity(slots.len());
    for &s in &slots {
        cont.extend_from_slice(&feats[s * N_FEATURES..s * N_FEATURES + N_CONTINUOUS_FEATURES]);
        let ty = batch.types[s].ok_or_else(|| Error::Contract("masked a padded slot".into()))?;
        types.push(ty.code() as usize);
    }
    Ok(MaskPlan {
        mask,
        continuous_targets: Tensor::new(&[slots.len(), N_CONTINUOUS_FEATURES], cont)?,
        masked_slots: slots,
        type_targets: types,
    })
}

/// Squared error on the continuous features summed per token and averaged
/// over masked tokens, plus mean cross-entropy on the particle type.
/// `reconstructed` is `[n_masked, F]` or `[B·N, F]` (only masked rows used).
pub fn mpm_loss<'t, S: Scalar>(reconstructed: Var<'t, S>, plan: &MaskPlan<S>) -> Result<Var<'t, S>> {
    let m = plan.n_masked();
    if m == 0 {
        return Err(Error::Degenerate("MPM loss undefined: no masked particles".into()));
    }
    let shape = reconstructed.shape();
    if shape.len() != 2 || shape[1] != N_FEATURES {
        return Err(Error::Shape {
            op: "mpm_loss",
            lhs: shape,
            rhs: vec![m, N_FEATURES],
        });
    }
    let pred = if shape[0] == m {
        reconstructed
    } else if shape[0] == plan.mask.len() {
        reconstructed.gather_rows(&plan.masked_slots)?
    } else {
        return Err(Error::Shape {
            op: "mpm_loss",
            lhs: shape,
            rhs: vec![m, N_FEATURES],
        });
    };
    let cont = pred.slice(1, 0, N_CONTINUOUS_FEATURES)?;
    let target = pred.tape().constant(plan.continuous_targets.clone());
    let mse = cont.sub(target)?.square().sum().scale(S::lit(1.0 / m as f64));
    let type_logits = pred.slice(1, N_CONTINUOUS_FEATURES, N_FEATURES - N_CONTINUOUS_FEATURES)?;
    let ce = cross_entropy_loss(type_logits, &plan.type_targets)?;
    mse.add(ce)
}

/// `½ Σ_d (μ² + e^{log σ²} − log σ² − 1)`, averaged over the batch.
pub fn kl_standard_normal<'t, S: Scalar>(mu: Var<'t, S>, log_var: Var<'t, S>) -> Result<Var<'t, S>> {
    let shape = mu.shape();
    if shape != log_var.shape() || shape.len() != 2 {
        return Err(Error::Shape {
            op: "kl",
            lhs: shape,
            rhs: log_var.shape(),
        });
    }
    let terms = mu.square().add(log_var.exp())?.sub(log_var)?.add_scalar(-S::one());
    Ok(terms.sum().scale(S::lit(0.5 / shape[0] as f64)))
}

#[derive(Debug)]
pub struct VaeLoss<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub reconstruction: Var<'t, S>,
    pub kl: Var<'t, S>,
}

/// Mean squared reconstruction error over real particles plus `β·KL`.
/// `reconstructed` and `targets` are `[B, N, F]`; `real` is `[B·N]`.
pub fn vae_loss<'t, S: Scalar>(
    mu: Var<'t, S>,
    log_var: Var<'t, S>,
    reconstructed: Var<'t, S>,
    targets: &Tensor<S>,
    real: &[bool],
    beta: f64,
) -> Result<VaeLoss<'t, S>> {
    let shape = reconstructed.shape();
    if shape != targets.shape() || shape.len() != 3 || real.len() != shape[0] * shape[1] {
        return Err(Error::Shape {
            op: "vae_loss",
            lhs: shape,
            rhs: targets.shape().to_vec(),
        });
    }
    let f = shape[2];
    let n_real = real.iter().filter(|&&r| r).count();
    if n_real == 0 {
        return Err(Error::Degenerate("VAE loss over a batch without particles".into()));
    }
    let weight = Tensor::from_fn(&shape, |i| if real[i / f] { S::one() } else { S::zero() });
    let target = reconstructed.tape().constant(targets.clone());
    let recon = reconstructed
        .sub(target)?
        .mul_const(&weight)?
        .square()
        .sum()
        .scale(S::lit(1.0 / (n_real * f) as f64));
    let kl = kl_standard_normal(mu, log_var)?;
    let total = recon.add(kl.scale(S::lit(beta)))?;
    Ok(VaeLoss {
        total,
        reconstruction: recon,
        kl,
    })
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy_loss<'t, S: Scalar>(logits: Var<'t, S>, labels: &[usize]) -> Result<Var<'t, S>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {} classes", shape[1])));
    }
    let logp = logits.log_softmax(None)?;
    Ok(logp.pick_last(labels)?.mean().neg())
}
