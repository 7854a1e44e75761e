//! Classification metrics: accuracy, macro-F1, ROC-AUC (macro, micro and
//! one-vs-rest) and fixed-efficiency operating points.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::jetdata::ClassLabel;
use crate::scalar::Scalar;

/// Tolerance on probability rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-9;
pub const SIGNAL_EFFICIENCY: f64 = 0.5;
pub const BACKGROUND_EFFICIENCY: f64 = 1e-2;

/// Class probabilities `[N × C]` with true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_classes: usize,
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(n_classes: usize, scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if n_classes == 0 || labels.is_empty() || scores.len() != labels.len() * n_classes {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} samples of {n_classes} classes",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{n_classes}")));
        }
        for (i, row) in scores.chunks(n_classes).enumerate() {
            let s: f64 = row.iter().sum();
            if !((s - 1.0).abs() <= ROW_SUM_TOL) {
                return Err(Error::InvalidArgument(format!("score row {i} sums to {s}")));
            }
        }
        Ok(Self {
            n_classes,
            scores,
            labels,
        })
    }

    /// Softmax of `[N × C]` logits, evaluated in f64.
    pub fn from_logits<S: Scalar>(logits: &Tensor<S>, labels: Vec<usize>) -> Result<Self> {
        if logits.ndim() != 2 {
            return Err(Error::InvalidArgument(format!("logits of shape {:?}", logits.shape())));
        }
        let c = logits.shape()[1];
        let mut scores = Vec::with_capacity(logits.numel());
        for row in logits.data().chunks(c) {
            let x: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            scores.extend(e.iter().map(|v| v / z));
        }
        Self::new(c, scores, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Scores of class `c` for every sample.
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.scores.iter().skip(c).step_by(self.n_classes).copied().collect()
    }

    /// Argmax per sample; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .chunks(self.n_classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    fn one_vs_rest(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        (self.column(c), self.labels.iter().map(|&l| l == c).collect())
    }
}

/// Mann–Whitney AUC, `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, from average ranks.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positive rank sum; ranks are 1-based and tie groups share
    // their average rank
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        twice_rank_sum += pos_in_group * (i as u128 + j as u128 + 2);
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (n_pos as u128) * (n_pos as u128 + 1);
    Ok(twice_u as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// One-vs-rest AUC of class `c`.
pub fn class_auc(sm: &ScoreMatrix, c: usize) -> Result<f64> {
    let (s, y) = sm.one_vs_rest(c);
    roc_auc_binary(&s, &y)
}

/// Unweighted mean of the one-vs-rest AUCs.
pub fn macro_auc(sm: &ScoreMatrix) -> Result<f64> {
    let mut present = vec![false; sm.n_classes];
    for &l in &sm.labels {
        present[l] = true;
    }
    let missing: Vec<String> = (0..sm.n_classes).filter(|&c| !present[c]).map(class_name).collect();
    if !missing.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "macro AUC needs every class; absent: {}",
            missing.join(", ")
        )));
    }
    let mut total = 0.0;
    for c in 0..sm.n_classes {
        total += class_auc(sm, c)?;
    }
    Ok(total / sm.n_classes as f64)
}

/// Binary AUC over all (score, one-hot label) pairs.
pub fn micro_auc(sm: &ScoreMatrix) -> Result<f64> {
    if sm.len() < 2 {
        return Err(Error::UndefinedMetric("micro AUC needs at least 2 samples".into()));
    }
    let c = sm.n_classes;
    let positive: Vec<bool> = (0..sm.scores.len()).map(|k| sm.labels[k / c] == k % c).collect();
    roc_auc_binary(&sm.scores, &positive)
}

pub fn accuracy(sm: &ScoreMatrix) -> f64 {
    let hits = sm.predictions().iter().zip(&sm.labels).filter(|(p, l)| p == l).count();
    hits as f64 / sm.len() as f64
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(sm: &ScoreMatrix) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; sm.n_classes]; sm.n_classes];
    for (p, &l) in sm.predictions().iter().zip(&sm.labels) {
        m[l][*p] += 1;
    }
    m
}

/// Unweighted mean of per-class F1, with 0/0 taken as 0.
pub fn macro_f1(sm: &ScoreMatrix) -> f64 {
    let m = confusion_matrix(sm);
    let c = sm.n_classes;
    let mut total = 0.0;
    for k in 0..c {
        let tp = m[k][k];
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| m[t][k]).sum();
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| m[k][p]).sum();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += (2 * tp) as f64 / denom as f64;
        }
    }
    total / c as f64
}

/// A cut `score ≥ threshold` on the empirical ROC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub signal_eff: f64,
    pub background_eff: f64,
}

/// Background rejection `1/ε_B`; when no background passes, `N_bkg + 1` is
/// reported with `saturated` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub value: f64,
    pub saturated: bool,
    pub point: OperatingPoint,
}

fn split_classes(scores: &[f64], signal: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != signal.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    let mut s: Vec<f64> = scores.iter().zip(signal).filter(|(_, &y)| y).map(|(&v, _)| v).collect();
    let mut b: Vec<f64> = scores.iter().zip(signal).filter(|(_, &y)| !y).map(|(&v, _)| v).collect();
    if s.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("operating point needs signal and background samples".into()));
    }
    s.sort_by(|a, b| b.total_cmp(a));
    b.sort_by(|a, b| b.total_cmp(a));
    Ok((s, b))
}

/// Number of entries `≥ t` in a descending slice.
fn count_at_least(desc: &[f64], t: f64) -> usize {
    desc.partition_point(|&v| v.total_cmp(&t) != Ordering::Less)
}

/// Highest threshold whose signal pass-fraction is at least `es`.
pub fn operating_point_at_signal(scores: &[f64], signal: &[bool], es: f64) -> Result<OperatingPoint> {
    if !(es > 0.0 && es <= 1.0) {
        return Err(Error::InvalidArgument(format!("signal efficiency {es} outside (0, 1]")));
    }
    let (s, b) = split_classes(scores, signal)?;
    let ns = s.len();
    let k = (1..=ns).find(|&k| k as f64 / ns as f64 >= es).unwrap_or(ns);
    let t = s[k - 1];
    Ok(OperatingPoint {
        threshold: t,
        signal_eff: count_at_least(&s, t) as f64 / ns as f64,
        background_eff: count_at_least(&b, t) as f64 / b.len() as f64,
    })
}

/// Lowest threshold whose background pass-fraction is at most `eb`.
pub fn operating_point_at_background(scores: &[f64], signal: &[bool], eb: f64) -> Result<OperatingPoint> {
    if !(eb > 0.0 && eb < 1.0) {
        return Err(Error::InvalidArgument(format!("background efficiency {eb} outside (0, 1)")));
    }
    let (s, b) = split_classes(scores, signal)?;
    let nb = b.len();
    if (nb as f64) * eb < 1.0 - 1e-12 {
        return Err(Error::UndefinedMetric(format!(
            "background efficiency {eb} is not resolvable with {nb} background samples; need at least {}",
            (1.0 / eb).ceil()
        )));
    }
    // largest admissible number of passing background samples
    let m = (0..=nb).rev().find(|&m| m as f64 / nb as f64 <= eb).unwrap_or(0);
    // smallest observed score strictly above the (m+1)-th background score;
    // m < nb because eb < 1
    let cut = b[m];
    let above = |desc: &[f64]| desc[..desc.partition_point(|&v| v > cut)].last().copied();
    let t = match (above(&s), above(&b)) {
        (Some(x), Some(y)) => x.min(y),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => f64::INFINITY,
    };
    Ok(OperatingPoint {
        threshold: t,
        signal_eff: count_at_least(&s, t) as f64 / s.len() as f64,
        background_eff: count_at_least(&b, t) as f64 / nb as f64,
    })
}

pub fn rejection_at_efficiency(scores: &[f64], signal: &[bool], es: f64) -> Result<Rejection> {
    let point = operating_point_at_signal(scores, signal, es)?;
    let nb = signal.iter().filter(|&&y| !y).count();
    Ok(if point.background_eff == 0.0 {
        Rejection {
            value: (nb + 1) as f64,
            saturated: true,
            point,
        }
    } else {
        Rejection {
            value: 1.0 / point.background_eff,
            saturated: false,
            point,
        }
    })
}

pub fn efficiency_at_background(scores: &[f64], signal: &[bool], eb: f64) -> Result<f64> {
    Ok(operating_point_at_background(scores, signal, eb)?.signal_eff)
}

fn class_name(c: usize) -> String {
    ClassLabel::from_code(c as u8).map_or_else(|| format!("class {c}"), |l| l.name().to_string())
}

/// Every metric reported for one model, for the seven-class problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub macro_f1: f64,
    pub auc: [f64; 7],
    pub rejection_at_es50: [f64; 6],
    /// True where no background passed and the rejection is `N_bkg + 1`.
    pub rejection_saturated: [bool; 6],
    /// `None` where the background sample cannot resolve `ε_B = 10⁻²`.
    pub es_at_eb1e2: [Option<f64>; 6],
    pub n_samples: usize,
}

impl MetricReport {
    pub fn compute(sm: &ScoreMatrix) -> Result<Self> {
        if sm.n_classes != ClassLabel::COUNT {
            return Err(Error::InvalidArgument(format!(
                "metric report needs {} classes, got {}",
                ClassLabel::COUNT,
                sm.n_classes
            )));
        }
        let macro_auc = macro_auc(sm)?;
        let mut auc = [0.0; 7];
        for (c, a) in auc.iter_mut().enumerate() {
            *a = class_auc(sm, c)?;
        }
        let mut rejection_at_es50 = [0.0; 6];
        let mut rejection_saturated = [false; 6];
        let mut es_at_eb1e2 = [None; 6];
        for c in 0..ClassLabel::SIGNAL.len() {
            let (s, y) = sm.one_vs_rest(c);
            let r = rejection_at_efficiency(&s, &y, SIGNAL_EFFICIENCY)?;
            rejection_at_es50[c] = r.value;
            rejection_saturated[c] = r.saturated;
            es_at_eb1e2[c] = match efficiency_at_background(&s, &y, BACKGROUND_EFFICIENCY) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
        }
        Ok(Self {
            accuracy: accuracy(sm),
            macro_auc,
            micro_auc: micro_auc(sm)?,
            macro_f1: macro_f1(sm),
            auc,
            rejection_at_es50,
            rejection_saturated,
            es_at_eb1e2,
            n_samples: sm.len(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const TABLE_CLASSES: [&str; 7] = ["bb", "tau_h tau_e", "tau_h tau_mu", "tau_h tau_h", "qqb/bcs", "qq", "QCD"];

fn table(out: &mut String, title: &str, header: &[String], rows: &[(String, Vec<String>)]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (_, cells) in rows {
        for (w, c) in widths.iter_mut().zip(std::iter::once(&String::new()).chain(cells)) {
            *w = (*w).max(c.chars().count());
        }
    }
    widths[0] = widths[0].max(rows.iter().map(|(m, _)| m.chars().count()).max().unwrap_or(0));
    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{title}");
    let head = line(header.iter().map(String::as_str).collect());
    let _ = writeln!(out, "{head}");
    let _ = writeln!(out, "{}", "-".repeat(head.chars().count()));
    for (m, cells) in rows {
        let _ = writeln!(out, "{}", line(std::iter::once(m.as_str()).chain(cells.iter().map(String::as_str)).collect()));
    }
    out.push('\n');
}

/// Aligned text rendering of the global, per-class AUC, rejection and
/// efficiency tables, one row per method.
pub fn render_tables(results: &[(&str, &MetricReport)]) -> String {
    let mut out = String::new();
    let head = |prefix: &str, n: usize| -> Vec<String> {
        std::iter::once("Method".to_string())
            .chain(TABLE_CLASSES[..n].iter().map(|c| format!("{prefix}{c}")))
            .collect()
    };
    let rows = |f: &dyn Fn(&MetricReport) -> Vec<String>| -> Vec<(String, Vec<String>)> {
        results.iter().map(|(m, r)| (m.to_string(), f(r))).collect()
    };
    table(
        &mut out,
        "Global metrics",
        &["Method", "Accuracy", "Macro AUC", "Micro AUC", "Macro-F1"].map(String::from),
        &rows(&|r| {
            [r.accuracy, r.macro_auc, r.micro_auc, r.macro_f1]
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect()
        }),
    );
    table(
        &mut out,
        "Per-class one-vs-rest ROC-AUC",
        &head("AUC ", 7),
        &rows(&|r| r.auc.iter().map(|v| format!("{v:.3}")).collect()),
    );
    table(
        &mut out,
        "Background rejection at signal efficiency 50%",
        &head("Rej ", 6),
        &rows(&|r| {
            r.rejection_at_es50
                .iter()
                .zip(&r.rejection_saturated)
                .map(|(v, &s)| if s { format!(">{v:.0}") } else { format!("{v:.0}") })
                .collect()
        }),
    );
    table(
        &mut out,
        "Signal efficiency at background efficiency 1e-2",
        &head("eS ", 6),
        &rows(&|r| {
            r.es_at_eb1e2
                .iter()
                .map(|v| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}")))
                .collect()
        }),
    );
    out
}
