use jetbench::evalmetrics::{
    accuracy, efficiency_at_background, macro_auc, macro_f1, micro_auc, operating_point_at_background,
    operating_point_at_signal, rejection_at_efficiency, render_tables, roc_auc_binary, MetricReport, ScoreMatrix,
};
use jetbench::rng::seeded;
use jetbench::Error;
use proptest::prelude::*;
use rand::Rng;

/// O(N²) enumeration of positive–negative pairs.
fn auc_oracle(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Every empirical cut: (threshold, εS, εB) for thresholds at observed scores
/// and above the maximum.
fn all_cuts(scores: &[f64], sig: &[bool]) -> Vec<(f64, f64, f64)> {
    let ns = sig.iter().filter(|&&y| y).count() as f64;
    let nb = sig.len() as f64 - ns;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.push(f64::INFINITY);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.iter()
        .map(|&t| {
            let ps = scores.iter().zip(sig).filter(|(&v, &y)| y && v >= t).count() as f64;
            let pb = scores.iter().zip(sig).filter(|(&v, &y)| !y && v >= t).count() as f64;
            (t, ps / ns, pb / nb)
        })
        .collect()
}

fn softmaxish(rng: &mut impl Rng, n: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let z: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / z));
    }
    out
}

#[test]
fn binary_auc_examples() {
    let auc = roc_auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    assert_eq!(auc, 0.75);
    assert_eq!(roc_auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(roc_auc_binary(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert!(matches!(roc_auc_binary(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn auc_matches_pair_enumeration(seed in any::<u64>(), n in 2usize..500, levels in 1u32..50) {
        let mut rng = seeded(seed);
        // coarse score grid to force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let auc = roc_auc_binary(&scores, &pos).unwrap();
        prop_assert_eq!(auc, auc_oracle(&scores, &pos));
        let flipped: Vec<bool> = pos.iter().map(|p| !p).collect();
        prop_assert_eq!(auc + roc_auc_binary(&scores, &flipped).unwrap(), 1.0);
        for f in [|x: f64| x.exp(), |x: f64| 10.0 * x, |x: f64| x + 5.0] {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(roc_auc_binary(&t, &pos).unwrap(), auc);
        }
    }
}

#[test]
fn macro_auc_hand_case() {
    // 6 samples, 3 classes
    let scores = vec![
        0.7, 0.2, 0.1, //
        0.3, 0.3, 0.4, //
        0.2, 0.5, 0.3, //
        0.1, 0.6, 0.3, //
        0.5, 0.1, 0.4, //
        0.2, 0.2, 0.6,
    ];
    let labels = vec![0, 0, 1, 1, 2, 2];
    let sm = ScoreMatrix::new(3, scores.clone(), labels.clone()).unwrap();
    let per_class: Vec<f64> = (0..3)
        .map(|c| {
            let s: Vec<f64> = (0..6).map(|i| scores[i * 3 + c]).collect();
            let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc_oracle(&s, &y)
        })
        .collect();
    assert_eq!(macro_auc(&sm).unwrap(), per_class.iter().sum::<f64>() / 3.0);
    let pos: Vec<bool> = (0..18).map(|k| labels[k / 3] == k % 3).collect();
    assert_eq!(micro_auc(&sm).unwrap(), auc_oracle(&scores, &pos));
}

#[test]
fn macro_auc_two_class_and_null() {
    let sm = ScoreMatrix::new(2, vec![0.9, 0.1, 0.4, 0.6, 0.7, 0.3, 0.2, 0.8], vec![0, 1, 1, 0]).unwrap();
    let a0 = roc_auc_binary(&sm.column(0), &[true, false, false, true]).unwrap();
    let a1 = roc_auc_binary(&sm.column(1), &[false, true, true, false]).unwrap();
    assert_eq!(a0, a1);
    assert_eq!(macro_auc(&sm).unwrap(), a0);

    let mut rng = seeded(1);
    let n = 10_000;
    let sm = ScoreMatrix::new(7, softmaxish(&mut rng, n, 7), (0..n).map(|_| rng.random_range(0..7)).collect()).unwrap();
    assert!((macro_auc(&sm).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn macro_auc_names_missing_classes() {
    let sm = ScoreMatrix::new(7, vec![1.0 / 7.0; 14], vec![0, 3]).unwrap();
    match macro_auc(&sm) {
        Err(Error::UndefinedMetric(msg)) => {
            assert!(msg.contains("QCD") && msg.contains("tau_h_tau_e") && !msg.contains("bb,"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn score_matrix_validation() {
    assert!(ScoreMatrix::new(2, vec![0.5, 0.6], vec![0]).is_err());
    assert!(ScoreMatrix::new(2, vec![0.5, 0.5], vec![2]).is_err());
    assert!(ScoreMatrix::new(2, vec![], vec![]).is_err());
}

#[test]
fn rejection_examples() {
    let scores = [0.9, 0.8, 0.1, 0.2, 0.3, 0.4];
    let sig = [true, true, false, false, false, false];
    let r = rejection_at_efficiency(&scores, &sig, 0.5).unwrap();
    assert_eq!(r.point.threshold, 0.9);
    assert_eq!(r.point.background_eff, 0.0);
    assert!(r.saturated);
    assert_eq!(r.value, 5.0);

    let mut rng = seeded(2);
    let vals: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..1.0)).collect();
    let scores: Vec<f64> = vals.iter().chain(&vals).copied().collect();
    let sig: Vec<bool> = (0..10_000).map(|i| i < 5000).collect();
    let r = rejection_at_efficiency(&scores, &sig, 0.5).unwrap();
    assert!(!r.saturated);
    assert!((r.point.background_eff - 0.5).abs() < 1e-3);
    assert!((r.value - 2.0).abs() < 0.01);
}

proptest! {
    #[test]
    fn rejection_monotone_in_signal_efficiency(seed in any::<u64>(), n in 4usize..300) {
        let mut rng = seeded(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut sig: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        sig[0] = true;
        sig[1] = false;
        let a = rejection_at_efficiency(&scores, &sig, 0.3).unwrap().value;
        let b = rejection_at_efficiency(&scores, &sig, 0.5).unwrap().value;
        prop_assert!(a >= b);
    }

    #[test]
    fn operating_points_match_threshold_scan(seed in any::<u64>(), n in 140usize..400, es in 0.05f64..1.0) {
        let mut rng = seeded(seed);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0) * 40.0f64).round() / 40.0).collect();
        let sig: Vec<bool> = (0..n).map(|i| i < n / 4).collect();
        let cuts = all_cuts(&scores, &sig);
        let p = operating_point_at_signal(&scores, &sig, es).unwrap();
        let best = cuts.iter().filter(|c| c.1 >= es).map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(p.threshold, best);
        let q = operating_point_at_background(&scores, &sig, 1e-2).unwrap();
        let smallest = cuts.iter().filter(|c| c.2 <= 1e-2).map(|c| c.0).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(q.threshold, smallest);

        // on the upper ROC envelope both searches recover a realized cut
        for &(_, s, b) in &cuts {
            let dominated = cuts.iter().any(|c| (c.1 >= s && c.2 < b) || (c.1 > s && c.2 <= b));
            if dominated || s == 0.0 {
                continue;
            }
            let at_s = operating_point_at_signal(&scores, &sig, s).unwrap();
            prop_assert_eq!((at_s.signal_eff, at_s.background_eff), (s, b));
            if b > 0.0 && b < 1.0 && b * (n - n / 4) as f64 >= 1.0 {
                let at_b = operating_point_at_background(&scores, &sig, b).unwrap();
                prop_assert_eq!((at_b.signal_eff, at_b.background_eff), (s, b));
            }
        }
    }
}

#[test]
fn efficiency_examples() {
    let mut rng = seeded(3);
    let bkg: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
    let perfect: Vec<f64> = bkg.iter().copied().chain((0..50).map(|i| 2.0 + i as f64)).collect();
    let sig: Vec<bool> = (0..250).map(|i| i >= 200).collect();
    assert_eq!(efficiency_at_background(&perfect, &sig, 1e-2).unwrap(), 1.0);

    // 200 uniform background, 100 signal shifted by 0.5
    let shifted: Vec<f64> = bkg
        .iter()
        .copied()
        .chain((0..100).map(|_| rng.random_range(0.0..1.0) + 0.5))
        .collect();
    let sig: Vec<bool> = (0..300).map(|i| i >= 200).collect();
    let es = efficiency_at_background(&shifted, &sig, 1e-2).unwrap();
    let cuts = all_cuts(&shifted, &sig);
    let (_, oracle_es, _) = cuts
        .iter()
        .filter(|c| c.2 <= 1e-2)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .copied()
        .unwrap();
    assert_eq!(es, oracle_es);

    let vals: Vec<f64> = (0..20_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let same: Vec<f64> = vals.iter().chain(&vals).copied().collect();
    let sig: Vec<bool> = (0..40_000).map(|i| i < 20_000).collect();
    let es = efficiency_at_background(&same, &sig, 1e-2).unwrap();
    assert!((es - 0.01).abs() < 1e-3, "{es}");
}

#[test]
fn efficiency_needs_enough_background() {
    let scores: Vec<f64> = (0..150).map(|i| i as f64 / 150.0).collect();
    let sig: Vec<bool> = (0..150).map(|i| i < 60).collect();
    match efficiency_at_background(&scores, &sig, 1e-2) {
        Err(Error::UndefinedMetric(msg)) => assert!(msg.contains("100"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

/// Confusion matrix built by direct counting.
fn f1_oracle(pred: &[usize], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..c {
        let tp = pred.iter().zip(labels).filter(|(&p, &l)| p == k && l == k).count() as f64;
        let fp = pred.iter().zip(labels).filter(|(&p, &l)| p == k && l != k).count() as f64;
        let fneg = pred.iter().zip(labels).filter(|(&p, &l)| p != k && l == k).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    total / c as f64
}

#[test]
fn accuracy_and_f1() {
    let one_hot = |k: usize| (0..7).map(|c| if c == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let labels: Vec<usize> = (0..70).map(|i| i % 7).collect();
    let perfect = ScoreMatrix::new(7, labels.iter().flat_map(|&l| one_hot(l)).collect(), labels.clone()).unwrap();
    assert_eq!(accuracy(&perfect), 1.0);
    assert_eq!(macro_f1(&perfect), 1.0);

    let all_zero = ScoreMatrix::new(7, labels.iter().flat_map(|_| one_hot(0)).collect(), labels.clone()).unwrap();
    assert!((accuracy(&all_zero) - 1.0 / 7.0).abs() < 1e-15);
    assert!((macro_f1(&all_zero) - 0.25 / 7.0).abs() < 1e-15);

    // argmax ties go to the lowest index
    let tied = ScoreMatrix::new(3, vec![0.4, 0.4, 0.2, 0.1, 0.45, 0.45, 0.2, 0.3, 0.5], vec![0, 2, 1]).unwrap();
    assert_eq!(tied.predictions(), vec![0, 1, 2]);
    assert!((accuracy(&tied) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(macro_f1(&tied), f1_oracle(&[0, 1, 2], &[0, 2, 1], 3));
}

proptest! {
    #[test]
    fn f1_matches_confusion_oracle(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = seeded(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let sm = ScoreMatrix::new(7, softmaxish(&mut rng, n, 7), labels.clone()).unwrap();
        let f = macro_f1(&sm);
        prop_assert!((f - f1_oracle(&sm.predictions(), &labels, 7)).abs() < 1e-14);
    }
}

fn sample_report(seed: u64, n: usize) -> MetricReport {
    let mut rng = seeded(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 7).collect();
    let mut scores = Vec::new();
    for &l in &labels {
        let mut row: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
        row[l] += 1.5;
        let z: f64 = row.iter().sum();
        scores.extend(row.iter().map(|v| v / z));
    }
    MetricReport::compute(&ScoreMatrix::new(7, scores, labels).unwrap()).unwrap()
}

#[test]
fn report_json_and_tables() {
    let r = sample_report(4, 1400);
    assert!(r.auc.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(r.rejection_at_es50.iter().all(|&v| v >= 1.0));
    assert!(r.es_at_eb1e2.iter().all(|e| e.is_some_and(|v| (0.0..=1.0).contains(&v))));
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    for key in ["accuracy", "macro_auc", "micro_auc", "macro_f1", "auc", "rejection_at_es50", "es_at_eb1e2"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["auc"].as_array().unwrap().len(), 7);
    assert_eq!(json["rejection_at_es50"].as_array().unwrap().len(), 6);
    let back: MetricReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, r);

    let small = sample_report(5, 70);
    assert!(small.es_at_eb1e2.iter().all(Option::is_none));
    let text = render_tables(&[("Supervised", &r), ("Small", &small)]);
    assert!(text.contains("Macro AUC") && text.contains("Rej bb") && text.contains("n/a"));
    let lines: Vec<&str> = text.lines().collect();
    let head = lines.iter().position(|l| l.starts_with("Method")).unwrap();
    assert_eq!(lines[head + 2].len(), lines[head + 3].len());
}
