//! Synthetic jet generator with the schema of the real dataset.
//!
//! Each class is a resonance-like decay into prongs: QCD is a single broad,
//! busy prong; `qq` and `bb` are two-prong with different opening angles
//! (and lepton enrichment for `bb`); `qqb_bcs` is three-prong; the di-tau
//! classes are sparse with a hadronic tau and either an electron, a muon or a
//! second hadronic tau.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::io::{write_jets, Format};
use super::{ClassLabel, Jet, Particle, ParticleType};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const MIN_PARTICLES: usize = 3;
pub const MAX_PARTICLES: usize = 100;

#[derive(Debug, Clone, Copy)]
enum ProngKind {
    /// Hadronic shower with mean multiplicity and angular width.
    Hadronic { mean_mult: f64, width: f64, lepton_prob: f64 },
    TauHadronic,
    Electron,
    Muon,
}

struct Prong {
    pt: f64,
    dy: f64,
    dphi: f64,
    kind: ProngKind,
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

/// Two-body opening: returns prong offsets for momentum fractions z, 1−z.
fn two_body<R: Rng + ?Sized>(rng: &mut R, mass: f64, pt: f64, z: f64) -> ((f64, f64), (f64, f64)) {
    let dr = (mass / (pt * (z * (1.0 - z)).sqrt())).min(1.2);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (s, c) = theta.sin_cos();
    (((1.0 - z) * dr * c, (1.0 - z) * dr * s), (-z * dr * c, -z * dr * s))
}

fn hadronic(mean_mult: f64, width: f64, lepton_prob: f64) -> ProngKind {
    ProngKind::Hadronic {
        mean_mult,
        width,
        lepton_prob,
    }
}

fn prongs_for<R: Rng + ?Sized>(class: ClassLabel, pt: f64, rng: &mut R) -> Vec<Prong> {
    let split = |rng: &mut R, mass: f64, a: ProngKind, b: ProngKind| {
        let z = rng.random_range(0.25..0.75);
        let ((y1, p1), (y2, p2)) = two_body(rng, mass, pt, z);
        vec![
            Prong { pt: z * pt, dy: y1, dphi: p1, kind: a },
            Prong { pt: (1.0 - z) * pt, dy: y2, dphi: p2, kind: b },
        ]
    };
    match class {
        ClassLabel::Qcd => vec![Prong {
            pt,
            dy: 0.0,
            dphi: 0.0,
            kind: hadronic(38.0, 0.16, 0.02),
        }],
        ClassLabel::Qq => split(rng, 80.0, hadronic(10.0, 0.04, 0.0), hadronic(10.0, 0.04, 0.0)),
        ClassLabel::Bb => split(rng, 125.0, hadronic(13.0, 0.05, 0.45), hadronic(13.0, 0.05, 0.45)),
        ClassLabel::QqbBcs => {
            // top-like: b + W, W → qq
            let mut out = split(rng, 173.0, hadronic(9.0, 0.04, 0.2), hadronic(0.0, 0.0, 0.0));
            let w = out.pop().expect("two prongs");
            let z = rng.random_range(0.3..0.7);
            let ((y1, p1), (y2, p2)) = two_body(rng, 80.0, w.pt, z);
            for (f, dy, dphi) in [(z, y1, p1), (1.0 - z, y2, p2)] {
                out.push(Prong {
                    pt: f * w.pt,
                    dy: w.dy + dy,
                    dphi: w.dphi + dphi,
                    kind: hadronic(8.0, 0.04, 0.0),
                });
            }
            out
        }
        ClassLabel::TauHTauE => split(rng, 125.0, ProngKind::TauHadronic, ProngKind::Electron),
        ClassLabel::TauHTauMu => split(rng, 125.0, ProngKind::TauHadronic, ProngKind::Muon),
        ClassLabel::TauHTauH => split(rng, 125.0, ProngKind::TauHadronic, ProngKind::TauHadronic),
    }
}

/// Splits `total` into `n` random positive shares.
fn shares<R: Rng + ?Sized>(rng: &mut R, n: usize, total: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).map(|e: f64| e + 0.05).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| total * x / s).collect()
}

fn hadron_type<R: Rng + ?Sized>(rng: &mut R) -> ParticleType {
    let u: f64 = rng.random();
    if u < 0.62 {
        ParticleType::ChargedHadron
    } else if u < 0.9 {
        ParticleType::Photon
    } else {
        ParticleType::NeutralHadron
    }
}

/// (pT, Δy, Δφ, type) relative to the jet axis.
type Seed = (f64, f64, f64, ParticleType);

fn emit_prong<R: Rng + ?Sized>(p: &Prong, rng: &mut R, out: &mut Vec<Seed>) {
    let mut place = |rng: &mut R, pts: Vec<f64>, width: f64, types: &mut dyn FnMut(&mut R, usize) -> ParticleType| {
        for (i, pt) in pts.into_iter().enumerate() {
            let ty = types(rng, i);
            out.push((pt, p.dy + gauss(rng, width), p.dphi + gauss(rng, width), ty));
        }
    };
    match p.kind {
        ProngKind::Hadronic {
            mean_mult,
            width,
            lepton_prob,
        } => {
            let n = poisson(rng, mean_mult) + 2;
            let lepton = rng.random::<f64>() < lepton_prob;
            let mut hadron_pt = p.pt;
            if lepton {
                let frac = rng.random_range(0.1..0.3);
                hadron_pt -= frac * p.pt;
                let ty = if rng.random::<bool>() { ParticleType::Muon } else { ParticleType::Electron };
                place(rng, vec![frac * p.pt], width * 0.5, &mut |_, _| ty);
            }
            let pts = shares(rng, n, hadron_pt);
            place(rng, pts, width, &mut |r, _| hadron_type(r));
        }
        ProngKind::TauHadronic => {
            let n_charged = if rng.random::<f64>() < 0.7 { 1 } else { 3 };
            let n_photon = poisson(rng, 1.5);
            let n = n_charged + n_photon;
            let pts = shares(rng, n, p.pt);
            place(rng, pts, 0.01, &mut |_, i| {
                if i < n_charged {
                    ParticleType::ChargedHadron
                } else {
                    ParticleType::Photon
                }
            });
        }
        ProngKind::Electron | ProngKind::Muon => {
            let lead = if matches!(p.kind, ProngKind::Electron) { ParticleType::Electron } else { ParticleType::Muon };
            let n_photon = if lead == ParticleType::Electron { poisson(rng, 0.8) } else { 0 };
            let pts = shares(rng, 1 + n_photon, p.pt);
            place(rng, pts, 0.005, &mut |_, i| {
                if i == 0 {
                    lead
                } else {
                    ParticleType::Photon
                }
            });
        }
    }
}

/// Draws one jet of the given class.
pub fn generate_toy_jet<R: Rng + ?Sized>(class: ClassLabel, rng: &mut R) -> Jet {
    let jet_pt = rng.random_range(450.0..650.0);
    let jet_y = rng.random_range(-1.5..1.5);
    let jet_phi = rng.random_range(-PI..PI);

    let mut seeds = Vec::new();
    for prong in prongs_for(class, jet_pt, rng) {
        emit_prong(&prong, rng, &mut seeds);
    }
    // soft underlying activity
    let n_soft = poisson(rng, 2.0) + 1;
    for _ in 0..n_soft {
        let r = 0.8 * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..2.0 * PI);
        let pt = rng.random_range(0.3..2.0);
        seeds.push((pt, r * a.cos(), r * a.sin(), hadron_type(rng)));
    }

    seeds.sort_by(|a, b| b.0.total_cmp(&a.0));
    seeds.truncate(MAX_PARTICLES);
    while seeds.len() < MIN_PARTICLES {
        seeds.push((0.5, gauss(rng, 0.3), gauss(rng, 0.3), ParticleType::Photon));
    }
    let particles = seeds
        .into_iter()
        .map(|(pt, dy, dphi, ty)| Particle::from_pt_y_phi(pt, jet_y + dy, jet_phi + dphi, ty.mass(), ty))
        .collect();
    Jet::new(particles, class)
}

/// Parameters of a generated toy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub seed: u64,
    pub n_files: usize,
    pub jets_per_file: usize,
    /// Relative class frequencies in the files, in class order. Uniform when
    /// absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    /// Write JSON lines instead of binary records.
    #[serde(default)]
    pub jsonl: bool,
}

impl ToySpec {
    fn weights(&self) -> Result<Vec<f64>> {
        let w = self.class_weights.clone().unwrap_or_else(|| vec![1.0; ClassLabel::COUNT]);
        if w.len() != ClassLabel::COUNT || w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!(
                "class_weights must be {} non-negative numbers with a positive sum",
                ClassLabel::COUNT
            )));
        }
        Ok(w)
    }

    /// Jets of file `index`, reproducible independently of other files.
    pub fn file_jets(&self, index: usize) -> Result<Vec<Jet>> {
        let w = self.weights()?;
        let total: f64 = w.iter().sum();
        let mut rng = substream(self.seed, index as u64);
        Ok((0..self.jets_per_file)
            .map(|_| {
                let mut u = rng.random::<f64>() * total;
                let mut class = ClassLabel::Qcd;
                for (c, &wi) in ClassLabel::ALL.iter().zip(&w) {
                    if u < wi {
                        class = *c;
                        break;
                    }
                    u -= wi;
                }
                generate_toy_jet(class, &mut rng)
            })
            .collect())
    }

    /// Writes `n_files` jet files into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let ext = if self.jsonl { "jsonl" } else { "jetb" };
        let mut paths = Vec::with_capacity(self.n_files);
        for i in 0..self.n_files {
            let path = dir.join(format!("toy_{i:04}.{ext}"));
            write_jets(&path, &self.file_jets(i)?)?;
            debug_assert_eq!(Format::from_path(&path) == Format::JsonLines, self.jsonl);
            paths.push(path);
        }
        Ok(paths)
    }
}
