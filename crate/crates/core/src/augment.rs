//! Jet augmentations: symmetry transforms and infrared/collinear-safe
//! perturbations for JetCLR, noise-style perturbations for SupCon.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jetdata::{kinematics, wrap_phi, Jet, Particle, ParticleType, DEFAULT_MAX_PARTICLES};
use crate::rng::substream;

/// Minimum pT (GeV) of a particle eligible for a collinear split.
pub const DEFAULT_SPLIT_MIN_PT: f64 = 1.0;
/// Soft particles are added within this ΔR of the jet axis.
pub const SOFT_RADIUS: f64 = 0.8;
/// Upper bound on the soft-particle pT scale relative to the jet pT.
pub const MAX_SOFT_PT_FRAC: f64 = 1e-3;

fn jet_axis(j: &Jet) -> (f64, f64) {
    let p = j.p4();
    (p.rapidity(), p.phi())
}

fn rebuild(p: &Particle, pt: f64, y: f64, phi: f64) -> Particle {
    Particle::from_pt_y_phi(pt, y, phi, p.p4().mass(), p.type_flags)
}

/// Rigid rotation of every particle's (Δy, Δφ) about the jet axis.
pub fn rotate(j: &Jet, angle: f64) -> Jet {
    if angle == 0.0 {
        return j.clone();
    }
    let (jy, jphi) = jet_axis(j);
    let (s, c) = angle.sin_cos();
    let particles = j
        .particles
        .iter()
        .map(|p| {
            let k = kinematics(p);
            let dy = k.rapidity - jy;
            let dphi = wrap_phi(k.phi - jphi);
            rebuild(p, k.pt, jy + c * dy - s * dphi, jphi + s * dy + c * dphi)
        })
        .collect();
    Jet::new(particles, j.label)
}

/// Longitudinal boost by `d_rapidity` and azimuthal rotation by `d_phi`.
pub fn translate(j: &Jet, d_rapidity: f64, d_phi: f64) -> Jet {
    if d_rapidity == 0.0 && d_phi == 0.0 {
        return j.clone();
    }
    let (ch, sh) = (d_rapidity.cosh(), d_rapidity.sinh());
    let (s, c) = d_phi.sin_cos();
    let particles = j
        .particles
        .iter()
        .map(|p| Particle {
            px: c * p.px - s * p.py,
            py: s * p.px + c * p.py,
            pz: ch * p.pz + sh * p.energy,
            energy: ch * p.energy + sh * p.pz,
            type_flags: p.type_flags,
        })
        .collect();
    Jet::new(particles, j.label)
}

/// Replaces particle `index` by `f·p` and appends `p − f·p`. Skipped when the
/// jet already holds `nmax` particles or the particle is below `min_pt`.
pub fn collinear_split(j: &Jet, index: usize, f: f64, nmax: usize, min_pt: f64) -> Result<Jet> {
    let mut t = Tracked::new(j);
    t.collinear_split(index, f, nmax, min_pt)?;
    Ok(t.jet)
}

/// Adds up to `n_soft` particles with pT uniform in (0, pt_scale] within
/// ΔR < 0.8 of the jet axis.
pub fn soft_add<R: Rng + ?Sized>(j: &Jet, n_soft: usize, pt_scale: f64, nmax: usize, rng: &mut R) -> Jet {
    let mut t = Tracked::new(j);
    t.soft_add(n_soft, pt_scale, nmax, rng);
    t.jet
}

/// Multiplies each particle pT by `1 + ε`, `ε ~ N(0, σ_pT)`, and jitters y
/// and φ by `N(0, σ_angle)`.
pub fn smear<R: Rng + ?Sized>(j: &Jet, sigma_pt_rel: f64, sigma_angle: f64, rng: &mut R) -> Jet {
    if sigma_pt_rel == 0.0 && sigma_angle == 0.0 {
        return j.clone();
    }
    let npt = Normal::new(0.0, sigma_pt_rel).expect("finite sigma");
    let nang = Normal::new(0.0, sigma_angle).expect("finite sigma");
    let particles = j
        .particles
        .iter()
        .map(|p| {
            let k = kinematics(p);
            let pt = (k.pt * (1.0 + npt.sample(rng))).max(0.0);
            rebuild(p, pt, k.rapidity + nang.sample(rng), k.phi + nang.sample(rng))
        })
        .collect();
    Jet::new(particles, j.label)
}

/// Gaussian noise on the momentum components with standard deviation
/// `σ_rel·|p|`; the energy is recomputed from the particle's mass.
pub fn noise<R: Rng + ?Sized>(j: &Jet, sigma_rel: f64, rng: &mut R) -> Jet {
    if sigma_rel == 0.0 {
        return j.clone();
    }
    let n = Normal::new(0.0, sigma_rel).expect("finite sigma");
    let particles = j
        .particles
        .iter()
        .map(|p| {
            let m = p.p4().mass();
            let pmag = p.p4().p2().sqrt();
            let px = p.px + pmag * n.sample(rng);
            let py = p.py + pmag * n.sample(rng);
            let pz = p.pz + pmag * n.sample(rng);
            let energy = (px * px + py * py + pz * pz + m * m).sqrt();
            Particle::new(px, py, pz, energy, p.type_flags)
        })
        .collect();
    Jet::new(particles, j.label)
}

/// Drops each particle independently with probability `rate`, always keeping
/// at least one (the leading particle when all would be dropped).
pub fn particle_dropout<R: Rng + ?Sized>(j: &Jet, rate: f64, rng: &mut R) -> Jet {
    let mut t = Tracked::new(j);
    t.dropout(rate, rng);
    t.jet
}

/// A jet with, for each particle, the index of the original particle it
/// descends from (`None` for added soft particles).
#[derive(Debug, Clone)]
struct Tracked {
    jet: Jet,
    origin: Vec<Option<usize>>,
}

impl Tracked {
    fn new(j: &Jet) -> Self {
        Self {
            jet: j.clone(),
            origin: (0..j.len()).map(Some).collect(),
        }
    }

    fn collinear_split(&mut self, index: usize, f: f64, nmax: usize, min_pt: f64) -> Result<()> {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction {f} outside (0, 1)")));
        }
        let Some(&p) = self.jet.particles.get(index) else {
            return Err(Error::InvalidArgument(format!("particle index {index} out of range")));
        };
        if self.jet.len() >= nmax || p.pt() <= min_pt {
            return Ok(());
        }
        let a = p.p4().scaled(f);
        let b = crate::jetdata::FourMomentum {
            px: p.px - a.px,
            py: p.py - a.py,
            pz: p.pz - a.pz,
            energy: p.energy - a.energy,
        };
        self.jet.particles[index] = p.with_p4(a);
        self.jet.particles.push(p.with_p4(b));
        self.origin.push(self.origin[index]);
        Ok(())
    }

    fn soft_add<R: Rng + ?Sized>(&mut self, n_soft: usize, pt_scale: f64, nmax: usize, rng: &mut R) {
        let room = nmax.saturating_sub(self.jet.len());
        let n = n_soft.min(room);
        if n == 0 {
            return;
        }
        let (jy, jphi) = jet_axis(&self.jet);
        for _ in 0..n {
            let pt = pt_scale * (1.0 - rng.random::<f64>());
            let r = SOFT_RADIUS * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            let ty = if rng.random::<bool>() { ParticleType::Photon } else { ParticleType::ChargedHadron };
            let p = Particle::from_pt_y_phi(pt, jy + r * a.cos(), jphi + r * a.sin(), ty.mass(), ty);
            self.jet.particles.push(p);
            self.origin.push(None);
        }
    }

    fn dropout<R: Rng + ?Sized>(&mut self, rate: f64, rng: &mut R) {
        if rate == 0.0 {
            return;
        }
        let keep: Vec<bool> = (0..self.jet.len()).map(|_| rng.random::<f64>() >= rate).collect();
        if !keep.iter().any(|&k| k) {
            let lead = (0..self.jet.len())
                .max_by(|&a, &b| self.jet.particles[a].pt().total_cmp(&self.jet.particles[b].pt()))
                .expect("non-empty jet");
            self.jet.particles = vec![self.jet.particles[lead]];
            self.origin = vec![self.origin[lead]];
            return;
        }
        let mut it = keep.iter();
        self.jet.particles.retain(|_| *it.next().expect("mask length"));
        let mut it = keep.iter();
        self.origin.retain(|_| *it.next().expect("mask length"));
    }

    fn map(&mut self, f: impl FnOnce(&Jet) -> Jet) {
        self.jet = f(&self.jet);
    }

    /// Reverts every non-physical particle to its original ancestor and
    /// drops non-physical soft additions.
    fn sanitize(self, original: &Jet) -> Jet {
        let mut particles = Vec::with_capacity(self.jet.len());
        for (p, o) in self.jet.particles.into_iter().zip(self.origin) {
            if p.is_physical() {
                particles.push(p);
            } else if let Some(k) = o {
                particles.push(original.particles[k]);
            }
        }
        if particles.is_empty() {
            particles.push(original.particles[0]);
        }
        Jet::new(particles, original.label)
    }
}

/// One augmentation step with its application probability and magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    /// Rotation by an angle drawn from U(0, 2π).
    Rotate { prob: f64 },
    /// Translation drawn from U(−max, max) in each coordinate.
    Translate { prob: f64, max_rapidity: f64, max_phi: f64 },
    /// Up to `max_splits` splits of random eligible particles with f ~ U(0.1, 0.9).
    CollinearSplit { prob: f64, max_splits: usize, min_pt: f64 },
    /// Up to `max_soft` soft particles with pT scale `pt_frac`·jet pT.
    SoftAdd { prob: f64, max_soft: usize, pt_frac: f64 },
    Smear { prob: f64, sigma_pt_rel: f64, sigma_angle: f64 },
    Noise { prob: f64, sigma_rel: f64 },
    ParticleDropout { prob: f64, rate: f64 },
}

impl AugmentOp {
    fn prob(&self) -> f64 {
        match *self {
            AugmentOp::Rotate { prob }
            | AugmentOp::Translate { prob, .. }
            | AugmentOp::CollinearSplit { prob, .. }
            | AugmentOp::SoftAdd { prob, .. }
            | AugmentOp::Smear { prob, .. }
            | AugmentOp::Noise { prob, .. }
            | AugmentOp::ParticleDropout { prob, .. } => prob,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("augmentation {self:?}: {what}")));
        let p = self.prob();
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("probability {p} outside [0, 1]"));
        }
        match *self {
            AugmentOp::Translate {
                max_rapidity, max_phi, ..
            } if !(0.0..=1.0).contains(&max_rapidity) || !(0.0..=PI).contains(&max_phi) => {
                bad("translation caps are |Δy| ≤ 1 and |Δφ| ≤ π".into())
            }
            AugmentOp::CollinearSplit { min_pt, .. } if !(min_pt >= 0.0) => bad("min_pt must be non-negative".into()),
            AugmentOp::SoftAdd { pt_frac, .. } if !(pt_frac > 0.0 && pt_frac <= MAX_SOFT_PT_FRAC) => {
                bad(format!("pt_frac must lie in (0, {MAX_SOFT_PT_FRAC}]"))
            }
            AugmentOp::Smear {
                sigma_pt_rel,
                sigma_angle,
                ..
            } if !(0.0..=0.5).contains(&sigma_pt_rel) || !(0.0..=0.5).contains(&sigma_angle) => {
                bad("smearing widths must lie in [0, 0.5]".into())
            }
            AugmentOp::Noise { sigma_rel, .. } if !(0.0..=0.5).contains(&sigma_rel) => {
                bad("noise width must lie in [0, 0.5]".into())
            }
            AugmentOp::ParticleDropout { rate, .. } if !(0.0..1.0).contains(&rate) => {
                bad("dropout rate must lie in [0, 1)".into())
            }
            _ => Ok(()),
        }
    }

    fn changes_count(&self) -> bool {
        matches!(
            self,
            AugmentOp::CollinearSplit { .. } | AugmentOp::SoftAdd { .. } | AugmentOp::ParticleDropout { .. }
        )
    }

    fn apply<R: Rng + ?Sized>(&self, t: &mut Tracked, nmax: usize, rng: &mut R) {
        match *self {
            AugmentOp::Rotate { .. } => {
                let a = rng.random_range(0.0..2.0 * PI);
                t.map(|j| rotate(j, a));
            }
            AugmentOp::Translate {
                max_rapidity, max_phi, ..
            } => {
                let dy = if max_rapidity > 0.0 { rng.random_range(-max_rapidity..=max_rapidity) } else { 0.0 };
                let dphi = if max_phi > 0.0 { rng.random_range(-max_phi..=max_phi) } else { 0.0 };
                t.map(|j| translate(j, dy, dphi));
            }
            AugmentOp::CollinearSplit { max_splits, min_pt, .. } => {
                let n = rng.random_range(1..=max_splits.max(1));
                for _ in 0..n {
                    let eligible: Vec<usize> = (0..t.jet.len()).filter(|&i| t.jet.particles[i].pt() > min_pt).collect();
                    if eligible.is_empty() {
                        break;
                    }
                    let i = eligible[rng.random_range(0..eligible.len())];
                    let f = rng.random_range(0.1..0.9);
                    t.collinear_split(i, f, nmax, min_pt).expect("valid split arguments");
                }
            }
            AugmentOp::SoftAdd { max_soft, pt_frac, .. } => {
                let n = rng.random_range(1..=max_soft.max(1));
                let scale = pt_frac * t.jet.pt();
                t.soft_add(n, scale, nmax, rng);
            }
            AugmentOp::Smear {
                sigma_pt_rel,
                sigma_angle,
                ..
            } => t.map(|j| smear(j, sigma_pt_rel, sigma_angle, rng)),
            AugmentOp::Noise { sigma_rel, .. } => t.map(|j| noise(j, sigma_rel, rng)),
            AugmentOp::ParticleDropout { rate, .. } => t.dropout(rate, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Jetclr,
    SupconTrain,
    SupconVal,
}

/// Ordered augmentation steps, always followed by sanitization against the
/// input jet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPipeline {
    pub mode: PipelineMode,
    pub ops: Vec<AugmentOp>,
    #[serde(default = "default_nmax")]
    pub nmax: usize,
}

fn default_nmax() -> usize {
    DEFAULT_MAX_PARTICLES
}

impl AugmentationPipeline {
    pub fn new(mode: PipelineMode, ops: Vec<AugmentOp>, nmax: usize) -> Result<Self> {
        let p = Self { mode, ops, nmax };
        p.validate()?;
        Ok(p)
    }

    pub fn identity(mode: PipelineMode) -> Self {
        Self {
            mode,
            ops: Vec::new(),
            nmax: DEFAULT_MAX_PARTICLES,
        }
    }

    /// rotate → translate(±0.1) → collinear split (p 0.3, ≤3) → soft add (p 0.3, ≤5).
    pub fn jetclr_default() -> Self {
        Self {
            mode: PipelineMode::Jetclr,
            ops: vec![
                AugmentOp::Rotate { prob: 1.0 },
                AugmentOp::Translate {
                    prob: 1.0,
                    max_rapidity: 0.1,
                    max_phi: 0.1,
                },
                AugmentOp::CollinearSplit {
                    prob: 0.3,
                    max_splits: 3,
                    min_pt: DEFAULT_SPLIT_MIN_PT,
                },
                AugmentOp::SoftAdd {
                    prob: 0.3,
                    max_soft: 5,
                    pt_frac: 2e-4,
                },
            ],
            nmax: DEFAULT_MAX_PARTICLES,
        }
    }

    /// noise(0.02) → smear(0.05, 0.01) → dropout(0.05) → translate(±0.05).
    pub fn supcon_train_default() -> Self {
        Self {
            mode: PipelineMode::SupconTrain,
            ops: vec![
                AugmentOp::Noise {
                    prob: 1.0,
                    sigma_rel: 0.02,
                },
                AugmentOp::Smear {
                    prob: 1.0,
                    sigma_pt_rel: 0.05,
                    sigma_angle: 0.01,
                },
                AugmentOp::ParticleDropout { prob: 1.0, rate: 0.05 },
                AugmentOp::Translate {
                    prob: 1.0,
                    max_rapidity: 0.05,
                    max_phi: 0.05,
                },
            ],
            nmax: DEFAULT_MAX_PARTICLES,
        }
    }

    /// noise and smearing only.
    pub fn supcon_val_default() -> Self {
        Self {
            mode: PipelineMode::SupconVal,
            ops: vec![
                AugmentOp::Noise {
                    prob: 1.0,
                    sigma_rel: 0.02,
                },
                AugmentOp::Smear {
                    prob: 1.0,
                    sigma_pt_rel: 0.05,
                    sigma_angle: 0.01,
                },
            ],
            nmax: DEFAULT_MAX_PARTICLES,
        }
    }

    pub fn default_for(mode: PipelineMode) -> Self {
        match mode {
            PipelineMode::Jetclr => Self::jetclr_default(),
            PipelineMode::SupconTrain => Self::supcon_train_default(),
            PipelineMode::SupconVal => Self::supcon_val_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nmax == 0 {
            return Err(Error::Config("augmentation nmax must be positive".into()));
        }
        for op in &self.ops {
            op.validate()?;
            if self.mode == PipelineMode::SupconVal && !matches!(op, AugmentOp::Noise { .. } | AugmentOp::Smear { .. })
            {
                return Err(Error::Config(format!(
                    "supcon_val pipelines allow only noise and smear, found {op:?}"
                )));
            }
        }
        Ok(())
    }

    /// True when no step can change the particle count.
    pub fn preserves_count(&self) -> bool {
        !self.ops.iter().any(AugmentOp::changes_count)
    }

    /// Applies every step (each with its probability) and sanitizes the
    /// result against `j`.
    pub fn apply<R: Rng + ?Sized>(&self, j: &Jet, rng: &mut R) -> Jet {
        let mut t = Tracked::new(j);
        for op in &self.ops {
            if op.prob() >= 1.0 || rng.random::<f64>() < op.prob() {
                op.apply(&mut t, self.nmax, rng);
            }
        }
        t.sanitize(j)
    }
}

/// Two independently augmented views of `j`.
pub fn two_views<R: Rng + ?Sized>(j: &Jet, pipeline: &AugmentationPipeline, rng: &mut R) -> (Jet, Jet) {
    let a = pipeline.apply(j, rng);
    let b = pipeline.apply(j, rng);
    (a, b)
}

/// [`two_views`] with a random stream derived from `(seed, index)`, so the
/// result does not depend on how jets are distributed over workers.
pub fn two_views_indexed(j: &Jet, pipeline: &AugmentationPipeline, seed: u64, index: u64) -> (Jet, Jet) {
    two_views(j, pipeline, &mut substream(seed, index))
}
