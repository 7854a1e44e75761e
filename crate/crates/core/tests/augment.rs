use std::f64::consts::PI;

use jetbench::augment::{
    collinear_split, noise, particle_dropout, rotate, smear, soft_add, translate, two_views, AugmentationPipeline,
    PipelineMode,
};
use jetbench::jetdata::toy::generate_toy_jet;
use jetbench::jetdata::{kinematics, normalize_jet, pairwise_features, sanitize, wrap_phi, ClassLabel, Jet, Particle, ParticleType};
use jetbench::rng::seeded;
use proptest::prelude::*;

fn toy(seed: u64, i: usize) -> Jet {
    let mut rng = seeded(seed);
    normalize_jet(&generate_toy_jet(ClassLabel::ALL[i % 7], &mut rng)).unwrap()
}

fn delta_r_matrix(j: &Jet) -> Vec<f64> {
    let ks: Vec<_> = j.particles.iter().map(kinematics).collect();
    let mut out = Vec::new();
    for a in &ks {
        for b in &ks {
            let dy = a.rapidity - b.rapidity;
            let dphi = wrap_phi(a.phi - b.phi);
            out.push((dy * dy + dphi * dphi).sqrt());
        }
    }
    out
}

/// Largest deviation per pairwise feature between two equally long jets.
fn pair_feature_dev(a: &Jet, b: &Jet) -> [f64; 4] {
    let mut dev = [0.0f64; 4];
    for i in 0..a.len() {
        for k in (i + 1)..a.len() {
            let fa = pairwise_features(&a.particles[i], &a.particles[k]);
            let fb = pairwise_features(&b.particles[i], &b.particles[k]);
            for c in 0..4 {
                dev[c] = dev[c].max((fa[c] - fb[c]).abs());
            }
        }
    }
    dev
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn p4_close(a: &Jet, b: &Jet, tol: f64) -> bool {
    a.len() == b.len()
        && a.particles.iter().zip(&b.particles).all(|(p, q)| {
            let s = p.energy.abs().max(1.0);
            (p.px - q.px).abs() < tol * s
                && (p.py - q.py).abs() < tol * s
                && (p.pz - q.pz).abs() < tol * s
                && (p.energy - q.energy).abs() < tol * s
        })
}

#[test]
fn rotate_identities() {
    let j = toy(1, 0);
    assert_eq!(rotate(&j, 0.0), j);
    assert!(p4_close(&rotate(&j, 2.0 * PI), &j, 1e-9));
}

#[test]
fn translate_identities() {
    let j = toy(2, 3);
    assert_eq!(translate(&j, 0.0, 0.0), j);
    let back = translate(&translate(&j, 0.7, -2.5), -0.7, 2.5);
    assert!(p4_close(&back, &j, 1e-9));
}

#[test]
fn collinear_split_example_and_cap() {
    let p = Particle::new(10.0, 0.0, 0.0, 10.0, ParticleType::Photon);
    let j = Jet::new(vec![p], ClassLabel::Qq);
    let s = collinear_split(&j, 0, 0.5, 128, 1.0).unwrap();
    assert_eq!(s.len(), 2);
    for q in &s.particles {
        assert_eq!((q.px, q.py, q.pz, q.energy), (5.0, 0.0, 0.0, 5.0));
    }
    let full = collinear_split(&j, 0, 0.5, 1, 1.0).unwrap();
    assert_eq!(full, j);
}

#[test]
fn collinear_split_preserves_observables() {
    let mut rng = seeded(4);
    use rand::Rng;
    for t in 0..1000 {
        let j = toy(100 + t, t as usize);
        let eligible: Vec<usize> = (0..j.len()).filter(|&i| j.particles[i].pt() > 1.0).collect();
        let i = eligible[rng.random_range(0..eligible.len())];
        let f = rng.random_range(0.01..0.99);
        let s = collinear_split(&j, i, f, 128, 1.0).unwrap();
        let (a, b) = (j.p4(), s.p4());
        assert!((a.pt() - b.pt()).abs() < 1e-9 * a.pt());
        assert!((a.mass() - b.mass()).abs() < 1e-9 * a.energy);
        let weighted = |j: &Jet| {
            j.particles
                .iter()
                .map(|p| p.pt() * (1.0 + p.type_flags.code() as f64))
                .sum::<f64>()
        };
        assert!((weighted(&j) - weighted(&s)).abs() < 1e-9 * weighted(&j));
    }
}

#[test]
fn soft_add_bounds_and_irc_proxy() {
    let j = toy(5, 6);
    let mut rng = seeded(5);
    assert_eq!(soft_add(&j, 0, 0.1, 128, &mut rng), j);
    let axis = j.p4();
    let (jy, jphi) = (axis.rapidity(), axis.phi());
    let centroid = |j: &Jet| {
        let (mut sy, mut sphi, mut w) = (0.0, 0.0, 0.0);
        for p in &j.particles {
            let k = kinematics(p);
            sy += k.pt * (k.rapidity - jy);
            sphi += k.pt * wrap_phi(k.phi - jphi);
            w += k.pt;
        }
        (sy / w, sphi / w)
    };
    let c0 = centroid(&j);
    let scale = 2e-4 * j.pt();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = soft_add(&j, 5, scale, 128, &mut rng);
        assert!((s.pt() - j.pt()).abs() < 5.0 * scale);
        let c = centroid(&s);
        worst = worst.max(((c.0 - c0.0).powi(2) + (c.1 - c0.1).powi(2)).sqrt());
    }
    assert!(worst < 1e-3, "centroid moved by {worst}");
}

#[test]
fn zero_magnitudes_are_identity() {
    let j = toy(6, 2);
    let mut rng = seeded(6);
    assert_eq!(smear(&j, 0.0, 0.0, &mut rng), j);
    assert_eq!(noise(&j, 0.0, &mut rng), j);
    assert_eq!(particle_dropout(&j, 0.0, &mut rng), j);
}

#[test]
fn dropout_frequency() {
    let mut rng = seeded(7);
    let j = Jet::new(
        (0..100)
            .map(|i| Particle::from_pt_y_phi(1.0 + i as f64, 0.0, 0.001 * i as f64, 0.0, ParticleType::Photon))
            .collect(),
        ClassLabel::Qcd,
    );
    let mut removed = 0;
    for _ in 0..1000 {
        removed += 100 - particle_dropout(&j, 0.1, &mut rng).len();
    }
    let freq = removed as f64 / 1e5;
    assert!((freq - 0.1).abs() < 0.005, "{freq}");
}

#[test]
fn smear_is_unbiased_in_jet_pt() {
    let mut rng = seeded(8);
    let mut total = 0.0;
    for t in 0..10_000 {
        let j = toy(1000 + t, t as usize);
        total += smear(&j, 0.05, 0.0, &mut rng).pt() / j.pt() - 1.0;
    }
    let mean = total / 1e4;
    assert!(mean.abs() < 0.005, "{mean}");
}

#[test]
fn identity_pipeline_views_equal_input() {
    let j = toy(9, 1);
    let p = AugmentationPipeline::identity(PipelineMode::Jetclr);
    let (a, b) = two_views(&j, &p, &mut seeded(0));
    assert_eq!(a, j);
    assert_eq!(b, j);
}

#[test]
fn jetclr_views_are_distinct() {
    let p = AugmentationPipeline::jetclr_default();
    let mut rng = seeded(10);
    let (mut n, mut distinct) = (0, 0);
    let mut t = 0;
    while n < 10_000 {
        let j = toy(20_000 + t, t as usize);
        t += 1;
        if j.len() < 5 {
            continue;
        }
        n += 1;
        let (a, b) = two_views(&j, &p, &mut rng);
        if a != b {
            distinct += 1;
        }
    }
    assert!(distinct as f64 / n as f64 > 0.99);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rotation_preserves_delta_r(seed in 0u64..10_000, angle in -10.0f64..10.0) {
        let j = toy(seed, seed as usize);
        let r = rotate(&j, angle);
        prop_assert!(max_diff(&delta_r_matrix(&j), &delta_r_matrix(&r)) < 1e-9);
        for (p, q) in j.particles.iter().zip(&r.particles) {
            prop_assert!((p.pt() - q.pt()).abs() < 1e-9 * p.pt().max(1.0));
        }
    }

    #[test]
    fn translation_preserves_pair_features(seed in 0u64..10_000, dy in -1.0f64..1.0, dphi in -PI..PI) {
        let j = toy(seed, seed as usize);
        let t = translate(&j, dy, dphi);
        let dev = pair_feature_dev(&j, &t);
        prop_assert!(dev[..3].iter().all(|&d| d < 1e-9), "{dev:?}");
        // ln m² is exact up to the resolution of E² − |p|² in the boosted
        // four-vectors, a few ulps of E² per particle
        for a in 0..j.len() {
            for b in (a + 1)..j.len() {
                let (pa, pb) = (&j.particles[a], &j.particles[b]);
                let m2 = pairwise_features(pa, pb)[3].exp();
                let bound = 64.0 * f64::EPSILON * (pa.energy.powi(2) + pb.energy.powi(2)) / m2 + 1e-11;
                let d = (pairwise_features(pa, pb)[3] - pairwise_features(&t.particles[a], &t.particles[b])[3]).abs();
                prop_assert!(d < bound, "ln m² moved {d:e}, resolution bound {bound:e}");
            }
        }
    }

    #[test]
    fn pipelines_emit_physical_sanitized_jets(seed in 0u64..10_000, mode in 0usize..3) {
        let modes = [PipelineMode::Jetclr, PipelineMode::SupconTrain, PipelineMode::SupconVal];
        let p = AugmentationPipeline::default_for(modes[mode]);
        let j = toy(seed, seed as usize);
        let (a, b) = two_views(&j, &p, &mut seeded(seed));
        for v in [&a, &b] {
            prop_assert!(v.particles.iter().all(Particle::is_physical));
            prop_assert_eq!(v.label, j.label);
            let (again, rep) = sanitize(v, v);
            prop_assert_eq!(rep.reverted + rep.repaired, 0);
            prop_assert_eq!(&again, v);
            if modes[mode] == PipelineMode::SupconVal {
                prop_assert_eq!(v.len(), j.len());
            }
        }
    }
}
