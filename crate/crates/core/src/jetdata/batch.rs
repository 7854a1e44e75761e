use super::{kinematics, pairwise_from_parts, wrap_phi, ClassLabel, Jet, Kinematics, ParticleType, LOG_FLOOR};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Continuous per-particle features: Δy, Δφ, ln pT, ln E, ΔR (all relative to
/// the jet axis).
pub const N_CONTINUOUS_FEATURES: usize = 5;
/// Continuous features followed by the particle-type one-hot.
pub const N_FEATURES: usize = N_CONTINUOUS_FEATURES + ParticleType::COUNT;

/// Padded encoder input for a batch of jets.
#[derive(Debug, Clone)]
pub struct JetBatch<S> {
    /// `[B, N, F]`
    pub features: Tensor<S>,
    /// `[B·N]`, true for real particles.
    pub mask: Vec<bool>,
    /// `[B, 4, N, N]`
    pub interaction: Tensor<S>,
    pub labels: Vec<ClassLabel>,
    /// Number of real particles per jet.
    pub counts: Vec<usize>,
    /// Particle-type code of every slot, `None` for padding. `[B·N]`
    pub types: Vec<Option<ParticleType>>,
}

impl<S: Scalar> JetBatch<S> {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn max_particles(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

/// Per-particle input features for a jet, in the order the particles are
/// given.
pub fn particle_features(jet: &Jet) -> Vec<[f64; N_FEATURES]> {
    let axis = jet.p4();
    let (jy, jphi) = (axis.rapidity(), axis.phi());
    jet.particles
        .iter()
        .map(|p| {
            let k = kinematics(p);
            let dy = k.rapidity - jy;
            let dphi = wrap_phi(k.phi - jphi);
            let mut f = [0.0; N_FEATURES];
            f[0] = dy;
            f[1] = dphi;
            f[2] = k.pt.max(LOG_FLOOR).ln();
            f[3] = p.energy.max(LOG_FLOOR).ln();
            f[4] = (dy * dy + dphi * dphi).sqrt();
            f[N_CONTINUOUS_FEATURES + p.type_flags.code() as usize] = 1.0;
            f
        })
        .collect()
}

/// Pads every jet to exactly `nmax` slots, keeping the `nmax` highest-pT
/// particles sorted by decreasing pT.
pub fn build_batch<S: Scalar>(jets: &[Jet], nmax: usize) -> Result<JetBatch<S>> {
    build(jets, nmax, nmax)
}

/// Like [`build_batch`] but pads only to the longest (truncated) jet in the
/// batch. Real-particle content is identical.
pub fn build_batch_compact<S: Scalar>(jets: &[Jet], nmax: usize) -> Result<JetBatch<S>> {
    let longest = jets.iter().map(|j| j.len().min(nmax)).max().unwrap_or(0);
    build(jets, nmax, longest.max(1))
}

fn build<S: Scalar>(jets: &[Jet], nmax: usize, width: usize) -> Result<JetBatch<S>> {
    if nmax == 0 {
        return Err(Error::InvalidArgument("nmax must be positive".into()));
    }
    let b = jets.len();
    let n = width;
    let nf = N_FEATURES;
    let mut features = vec![S::zero(); b * n * nf];
    let mut interaction = vec![S::zero(); b * 4 * n * n];
    let mut mask = vec![false; b * n];
    let mut types = vec![None; b * n];
    let mut counts = Vec::with_capacity(b);
    let sentinel = S::lit(LOG_FLOOR.ln());

    for (bi, jet) in jets.iter().enumerate() {
        if jet.is_empty() {
            return Err(Error::InvalidArgument(format!("jet {bi} in batch is empty")));
        }
        let feats = particle_features(jet);
        let kins: Vec<Kinematics> = jet.particles.iter().map(kinematics).collect();
        // stable sort by decreasing pT, ties broken by the feature vector so
        // the result does not depend on the input order
        let mut order: Vec<usize> = (0..jet.len()).collect();
        order.sort_by(|&x, &y| {
            kins[y]
                .pt
                .total_cmp(&kins[x].pt)
                .then_with(|| cmp_features(&feats[x], &feats[y]))
        });
        order.truncate(nmax.min(n));
        let count = order.len();
        counts.push(count);

        for (slot, &pi) in order.iter().enumerate() {
            let row = (bi * n + slot) * nf;
            for (dst, &v) in features[row..row + nf].iter_mut().zip(&feats[pi]) {
                *dst = S::lit(v);
            }
            mask[bi * n + slot] = true;
            types[bi * n + slot] = Some(jet.particles[pi].type_flags);
        }
        let p4s: Vec<_> = order.iter().map(|&i| jet.particles[i].p4()).collect();
        for s in 0..count {
            for c in 0..4 {
                interaction[((bi * 4 + c) * n + s) * n + s] = sentinel;
            }
            for t in (s + 1)..count {
                let f = pairwise_from_parts(&kins[order[s]], &p4s[s], &kins[order[t]], &p4s[t]);
                for (c, &v) in f.iter().enumerate() {
                    let v = S::lit(v);
                    interaction[((bi * 4 + c) * n + s) * n + t] = v;
                    interaction[((bi * 4 + c) * n + t) * n + s] = v;
                }
            }
        }
    }

    Ok(JetBatch {
        features: Tensor::new(&[b, n, nf], features)?,
        mask,
        interaction: Tensor::new(&[b, 4, n, n], interaction)?,
        labels: jets.iter().map(|j| j.label).collect(),
        counts,
        types,
    })
}

fn cmp_features(a: &[f64; N_FEATURES], b: &[f64; N_FEATURES]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}
