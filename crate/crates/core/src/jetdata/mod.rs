//! Jet and particle data model with the physics preprocessing applied before
//! a jet reaches the encoder.

mod batch;
pub mod io;
pub mod toy;

use std::f64::consts::PI;
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{build_batch, build_batch_compact, particle_features, JetBatch, N_CONTINUOUS_FEATURES, N_FEATURES};

/// Jets are rescaled so that their transverse momentum equals this value (GeV).
pub const TARGET_JET_PT: f64 = 500.0;
/// Floor applied before every logarithm of a pairwise feature.
pub const LOG_FLOOR: f64 = 1e-8;
/// Default maximum number of particles per jet.
pub const DEFAULT_MAX_PARTICLES: usize = 128;
/// Relative tolerance on `E² ≥ |p|²`.
pub const SPACELIKE_TOL: f64 = 1e-6;
/// Relative resolution of `E² − |p|²` in double precision, a few ulps of `E²`.
pub const MASS2_RESOLUTION: f64 = 16.0 * f64::EPSILON;

/// The seven jet classes, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "bb")]
    Bb,
    #[serde(rename = "tau_h_tau_e")]
    TauHTauE,
    #[serde(rename = "tau_h_tau_mu")]
    TauHTauMu,
    #[serde(rename = "tau_h_tau_h")]
    TauHTauH,
    #[serde(rename = "qqb_bcs")]
    QqbBcs,
    #[serde(rename = "qq")]
    Qq,
    #[serde(rename = "QCD")]
    Qcd,
}

impl ClassLabel {
    pub const COUNT: usize = 7;
    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::Bb,
        ClassLabel::TauHTauE,
        ClassLabel::TauHTauMu,
        ClassLabel::TauHTauH,
        ClassLabel::QqbBcs,
        ClassLabel::Qq,
        ClassLabel::Qcd,
    ];
    /// Classes reported in the fixed-efficiency tables (background QCD excluded).
    pub const SIGNAL: [ClassLabel; 6] = [
        ClassLabel::Bb,
        ClassLabel::TauHTauE,
        ClassLabel::TauHTauMu,
        ClassLabel::TauHTauH,
        ClassLabel::QqbBcs,
        ClassLabel::Qq,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Bb => "bb",
            ClassLabel::TauHTauE => "tau_h_tau_e",
            ClassLabel::TauHTauMu => "tau_h_tau_mu",
            ClassLabel::TauHTauH => "tau_h_tau_h",
            ClassLabel::QqbBcs => "qqb_bcs",
            ClassLabel::Qq => "qq",
            ClassLabel::Qcd => "QCD",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class label {s:?}")))
    }
}

/// Reconstructed particle category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleType {
    ChargedHadron,
    NeutralHadron,
    Photon,
    Electron,
    Muon,
}

impl ParticleType {
    pub const COUNT: usize = 5;
    pub const ALL: [ParticleType; 5] = [
        ParticleType::ChargedHadron,
        ParticleType::NeutralHadron,
        ParticleType::Photon,
        ParticleType::Electron,
        ParticleType::Muon,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Nominal rest mass in GeV.
    pub fn mass(self) -> f64 {
        match self {
            ParticleType::ChargedHadron => 0.139_570,
            ParticleType::NeutralHadron => 0.497_611,
            ParticleType::Photon => 0.0,
            ParticleType::Electron => 0.000_511,
            ParticleType::Muon => 0.105_658,
        }
    }
}

/// Energy-momentum four-vector in GeV.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FourMomentum {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub energy: f64,
}

impl Add for FourMomentum {
    type Output = FourMomentum;

    fn add(self, o: FourMomentum) -> FourMomentum {
        FourMomentum {
            px: self.px + o.px,
            py: self.py + o.py,
            pz: self.pz + o.pz,
            energy: self.energy + o.energy,
        }
    }
}

impl FourMomentum {
    pub fn pt(&self) -> f64 {
        self.px.hypot(self.py)
    }

    pub fn p2(&self) -> f64 {
        self.px * self.px + self.py * self.py + self.pz * self.pz
    }

    /// Invariant mass squared, may be negative from rounding.
    pub fn m2(&self) -> f64 {
        self.energy * self.energy - self.p2()
    }

    /// Mass squared with values below the rounding resolution of `E²`
    /// (which a boost alone can produce for a massless particle) set to 0.
    pub fn m2_resolved(&self) -> f64 {
        let m2 = self.m2();
        if m2 <= MASS2_RESOLUTION * self.energy * self.energy {
            0.0
        } else {
            m2
        }
    }

    pub fn mass(&self) -> f64 {
        self.m2_resolved().sqrt()
    }

    pub fn phi(&self) -> f64 {
        self.py.atan2(self.px)
    }

    /// Rapidity, with the energy raised to `|pz| + 1e-12` when needed.
    pub fn rapidity(&self) -> f64 {
        rapidity_clamped(self.energy, self.pz).0
    }

    pub fn scaled(&self, s: f64) -> FourMomentum {
        FourMomentum {
            px: self.px * s,
            py: self.py * s,
            pz: self.pz * s,
            energy: self.energy * s,
        }
    }
}

fn rapidity_clamped(energy: f64, pz: f64) -> (f64, bool) {
    let (e, clamped) = if energy <= pz.abs() {
        (energy.max(pz.abs() + 1e-12), true)
    } else {
        (energy, false)
    };
    (0.5 * ((e + pz) / (e - pz)).ln(), clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub energy: f64,
    pub type_flags: ParticleType,
}

impl Particle {
    pub fn new(px: f64, py: f64, pz: f64, energy: f64, type_flags: ParticleType) -> Self {
        Self {
            px,
            py,
            pz,
            energy,
            type_flags,
        }
    }

    /// Builds a particle from transverse momentum, rapidity, azimuth and mass.
    pub fn from_pt_y_phi(pt: f64, y: f64, phi: f64, mass: f64, type_flags: ParticleType) -> Self {
        let mt = (pt * pt + mass * mass).sqrt();
        Self {
            px: pt * phi.cos(),
            py: pt * phi.sin(),
            pz: mt * y.sinh(),
            energy: mt * y.cosh(),
            type_flags,
        }
    }

    pub fn p4(&self) -> FourMomentum {
        FourMomentum {
            px: self.px,
            py: self.py,
            pz: self.pz,
            energy: self.energy,
        }
    }

    pub fn with_p4(&self, p: FourMomentum) -> Self {
        Self {
            px: p.px,
            py: p.py,
            pz: p.pz,
            energy: p.energy,
            type_flags: self.type_flags,
        }
    }

    pub fn pt(&self) -> f64 {
        self.px.hypot(self.py)
    }

    /// Satisfies the particle invariants: finite, non-negative energy and not
    /// spacelike beyond tolerance.
    pub fn is_physical(&self) -> bool {
        let finite = [self.px, self.py, self.pz, self.energy].iter().all(|v| v.is_finite());
        if !finite || self.energy < 0.0 {
            return false;
        }
        let e2 = self.energy * self.energy;
        e2 >= self.p4().p2() - SPACELIKE_TOL * e2
    }
}

/// Standard kinematic quantities of one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pt: f64,
    pub rapidity: f64,
    pub phi: f64,
    pub mass: f64,
    /// Set when `E ≤ |pz|` forced the rapidity clamp.
    pub clamped: bool,
}

pub fn kinematics(p: &Particle) -> Kinematics {
    let (rapidity, clamped) = rapidity_clamped(p.energy, p.pz);
    Kinematics {
        pt: p.pt(),
        rapidity,
        phi: p.py.atan2(p.px),
        mass: p.p4().mass(),
        clamped,
    }
}

/// Wraps an azimuthal difference into (−π, π].
pub fn wrap_phi(d: f64) -> f64 {
    let mut d = d % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    } else if d <= -PI {
        d += 2.0 * PI;
    }
    d
}

/// A jet: an unordered set of particles with a class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jet {
    pub particles: Vec<Particle>,
    pub label: ClassLabel,
}

impl Jet {
    pub fn new(particles: Vec<Particle>, label: ClassLabel) -> Self {
        Self { particles, label }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Component-wise sum of the particle four-momenta.
    pub fn p4(&self) -> FourMomentum {
        self.particles.iter().fold(FourMomentum::default(), |acc, p| acc + p.p4())
    }

    pub fn pt(&self) -> f64 {
        self.p4().pt()
    }
}

/// Rescales all four-vectors so the jet transverse momentum is
/// [`TARGET_JET_PT`].
pub fn normalize_jet(jet: &Jet) -> Result<Jet> {
    let pt = jet.pt();
    if !(pt > 0.0) || !pt.is_finite() {
        return Err(Error::RejectedRecord(format!("jet pT {pt} cannot be normalized")));
    }
    let s = TARGET_JET_PT / pt;
    Ok(Jet {
        particles: jet.particles.iter().map(|p| p.with_p4(p.p4().scaled(s))).collect(),
        label: jet.label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SanitizeReport {
    pub reverted: usize,
    /// Particles without a valid counterpart that had to be repaired or dropped.
    pub repaired: usize,
}

/// Reverts every non-physical particle of `jet` to its counterpart in
/// `original` (matched by position). Particles beyond the original's length
/// that are non-physical are dropped; an invalid original is repaired to a
/// massless particle along its (finite) momentum.
pub fn sanitize(jet: &Jet, original: &Jet) -> (Jet, SanitizeReport) {
    let mut report = SanitizeReport::default();
    let mut out = Vec::with_capacity(jet.len());
    for (i, p) in jet.particles.iter().enumerate() {
        if p.is_physical() {
            out.push(*p);
            continue;
        }
        match original.particles.get(i) {
            Some(o) if o.is_physical() => {
                report.reverted += 1;
                out.push(*o);
            }
            Some(o) => {
                report.repaired += 1;
                out.push(repair(o));
            }
            None => report.repaired += 1,
        }
    }
    if out.is_empty() {
        if let Some(o) = original.particles.first() {
            out.push(if o.is_physical() { *o } else { repair(o) });
        }
    }
    (Jet::new(out, jet.label), report)
}

fn repair(p: &Particle) -> Particle {
    let clean = |v: f64| if v.is_finite() { v } else { 0.0 };
    let (px, py, pz) = (clean(p.px), clean(p.py), clean(p.pz));
    let pmag = (px * px + py * py + pz * pz).sqrt();
    let energy = clean(p.energy).max(pmag);
    Particle::new(px, py, pz, energy, p.type_flags)
}

/// `(ln ΔR, ln kT, ln z, ln m²)` for a particle pair, each clamped below at
/// `ln(1e-8)`.
pub fn pairwise_features(a: &Particle, b: &Particle) -> [f64; 4] {
    pairwise_from_parts(&kinematics(a), &a.p4(), &kinematics(b), &b.p4())
}

pub(crate) fn pairwise_from_parts(ka: &Kinematics, pa: &FourMomentum, kb: &Kinematics, pb: &FourMomentum) -> [f64; 4] {
    let dy = ka.rapidity - kb.rapidity;
    let dphi = wrap_phi(ka.phi - kb.phi);
    let dr = (dy * dy + dphi * dphi).sqrt();
    let pt_min = ka.pt.min(kb.pt);
    let pt_sum = ka.pt + kb.pt;
    let kt = pt_min * dr;
    let z = if pt_sum > 0.0 { pt_min / pt_sum } else { 0.0 };
    let m2 = pair_mass2(ka, pa, kb, pb, dy, dphi);
    let ln = |v: f64| v.max(LOG_FLOOR).ln();
    [ln(dr), ln(kt), ln(z), ln(m2)]
}

/// Invariant mass squared of a pair, `(p_a + p_b)²`, written as a sum of
/// non-negative terms so nearly collinear pairs do not lose precision:
/// `m_a² + m_b² + 2(mT_a mT_b cosh Δy − pT_a pT_b cos Δφ)`.
fn pair_mass2(ka: &Kinematics, pa: &FourMomentum, kb: &Kinematics, pb: &FourMomentum, dy: f64, dphi: f64) -> f64 {
    let ma2 = pa.m2_resolved();
    let mb2 = pb.m2_resolved();
    let (pta2, ptb2) = (ka.pt * ka.pt, kb.pt * kb.pt);
    let mta = (pta2 + ma2).sqrt();
    let mtb = (ptb2 + mb2).sqrt();
    let sh = (0.5 * dy).sinh();
    let sn = (0.5 * dphi).sin();
    let denom = mta * mtb + ka.pt * kb.pt;
    // mT_a mT_b − pT_a pT_b
    let transverse = if denom > 0.0 { (ma2 * ptb2 + mb2 * pta2 + ma2 * mb2) / denom } else { 0.0 };
    ma2 + mb2 + 2.0 * (2.0 * mta * mtb * sh * sh + 2.0 * ka.pt * kb.pt * sn * sn + transverse)
}
