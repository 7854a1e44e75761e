//! AdamW and Muon optimizers, gradient clipping and checkpoint selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamKind, ParamStore, Tensor};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_CLIP_NORM: f64 = 1.0;
/// Added to the Frobenius norm before orthogonalization.
pub const NS_NORM_EPS: f64 = 1e-7;
/// Quintic coefficients of the leading Newton–Schulz iterations.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
/// Quintic with a fixed point at 1, used for the final iterations.
pub const NS_POLISH_COEFFS: (f64, f64, f64) = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0);
const NS_POLISH_ITERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuonConfig {
    pub lr: f64,
    pub momentum: f64,
    pub ns_iterations: usize,
}

impl Default for MuonConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.95,
            ns_iterations: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    /// Muon on block matrices, AdamW on everything else.
    Muon,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub adamw: AdamWConfig,
    pub muon: MuonConfig,
}

/// Scales all gradients so their global L2 norm is at most `max_norm` and
/// returns the applied factor.
pub fn clip_gradients<S: Scalar>(grads: &mut [Option<Tensor<S>>], max_norm: S) -> S {
    let total = grads.iter().flatten().map(Tensor::norm_sq).sum::<S>().sqrt();
    if total <= max_norm || !total.is_finite() {
        return S::one();
    }
    let scale = max_norm / total;
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    scale
}

/// One AdamW update with decoupled weight decay; `t` is the 1-based step of
/// this parameter.
pub fn adamw_update<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    m: &mut Tensor<S>,
    v: &mut Tensor<S>,
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for other in [grad.shape(), m.shape(), v.shape()] {
        if other != param.shape() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: param.shape().to_vec(),
                rhs: other.to_vec(),
            });
        }
    }
    let lr = S::lit(cfg.lr);
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let decay = S::one() - lr * S::lit(cfg.weight_decay);
    let c1 = S::one() - b1.powi(t as i32);
    let c2 = S::one() - b2.powi(t as i32);
    let eps = S::lit(cfg.eps);
    let p = param.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        let mi = &mut m.data_mut()[i];
        *mi = b1 * *mi + (S::one() - b1) * g;
        let mhat = *mi / c1;
        let vi = &mut v.data_mut()[i];
        *vi = b2 * *vi + (S::one() - b2) * g * g;
        let vhat = *vi / c2;
        p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Approximate orthogonalization `U·Vᵀ` of a matrix `U·Σ·Vᵀ` by a quintic
/// Newton–Schulz iteration on the Frobenius-normalized input.
pub fn newton_schulz<S: Scalar>(b: &Tensor<S>, iterations: usize) -> Result<Tensor<S>> {
    if b.ndim() != 2 {
        return Err(Error::Contract(format!(
            "Newton-Schulz needs a matrix, got shape {:?}",
            b.shape()
        )));
    }
    let tall = b.shape()[0] > b.shape()[1];
    let mut x = if tall { b.transpose2d()? } else { b.clone() };
    let inv = S::one() / (x.norm() + S::lit(NS_NORM_EPS));
    x = x.scale(inv);
    let polish = iterations.min(NS_POLISH_ITERS);
    for k in 0..iterations {
        let (a, bc, c) = if k < iterations - polish { NS_COEFFS } else { NS_POLISH_COEFFS };
        let gram = x.matmul(&x.transpose2d()?)?;
        let mut poly = gram.matmul(&gram)?.scale(S::lit(c));
        poly.axpy(S::lit(bc), &gram)?;
        let mut next = poly.matmul(&x)?;
        next.axpy(S::lit(a), &x)?;
        x = next;
    }
    if tall {
        x.transpose2d()
    } else {
        Ok(x)
    }
}

/// One Muon update: momentum accumulation followed by a step along the
/// orthogonalized buffer scaled by `lr·√max(m, n)`.
pub fn muon_update<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    buf: &mut Tensor<S>,
    cfg: &MuonConfig,
) -> Result<()> {
    if param.ndim() != 2 {
        return Err(Error::Contract(format!(
            "Muon applies to 2-D weights, got shape {:?}",
            param.shape()
        )));
    }
    if grad.shape() != param.shape() || buf.shape() != param.shape() {
        return Err(Error::Shape {
            op: "muon",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let mu = S::lit(cfg.momentum);
    for (bv, &g) in buf.data_mut().iter_mut().zip(grad.data()) {
        *bv = mu * *bv + g;
    }
    let dir = newton_schulz(buf, cfg.ns_iterations)?;
    let scale = S::lit(cfg.lr * (param.shape()[0].max(param.shape()[1]) as f64).sqrt());
    param.axpy(-scale, &dir)
}

#[derive(Debug, Clone, PartialEq)]
enum Slot<S> {
    Empty,
    Adam { t: u64, m: Tensor<S>, v: Tensor<S> },
    Muon { buf: Tensor<S> },
}

/// Optimizer hyperparameters and per-parameter moment buffers, in parameter
/// store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<S> {
    pub config: OptimizerConfig,
    step: u64,
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn routes_to_muon(&self, kind: ParamKind) -> bool {
        self.config.kind == OptimizerKind::Muon && kind == ParamKind::Matrix
    }

    /// Applies one update to every parameter with a gradient; `None` entries
    /// are frozen.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), Slot::Empty);
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for (id, grad) in ids.into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let muon = self.routes_to_muon(store.get(id).kind);
            let entry = store.get_mut(id);
            let slot = &mut self.slots[id.index()];
            if matches!(slot, Slot::Empty) {
                let z = Tensor::zeros(entry.value.shape());
                *slot = if muon {
                    Slot::Muon { buf: z }
                } else {
                    Slot::Adam {
                        t: 0,
                        m: z.clone(),
                        v: z,
                    }
                };
            }
            match slot {
                Slot::Muon { buf } => muon_update(&mut entry.value, grad, buf, &self.config.muon)?,
                Slot::Adam { t, m, v } => {
                    *t += 1;
                    adamw_update(&mut entry.value, grad, m, v, *t, &self.config.adamw)?
                }
                Slot::Empty => unreachable!(),
            }
        }
        Ok(())
    }

    /// Verifies that every buffer mirrors the shape of its parameter.
    pub fn check_against(&self, store: &ParamStore<S>) -> Result<()> {
        if self.slots.len() > store.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer has {} buffers for {} parameters",
                self.slots.len(),
                store.len()
            )));
        }
        for ((_, entry), slot) in store.iter().zip(&self.slots) {
            let shape = match slot {
                Slot::Empty => continue,
                Slot::Adam { m, .. } => m.shape(),
                Slot::Muon { buf } => buf.shape(),
            };
            if shape != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "buffer for {} has shape {shape:?}, parameter {:?}",
                    entry.name,
                    entry.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        let c = &self.config;
        w.u8(match c.kind {
            OptimizerKind::Adamw => 0,
            OptimizerKind::Muon => 1,
        });
        for v in [c.adamw.lr, c.adamw.beta1, c.adamw.beta2, c.adamw.eps, c.adamw.weight_decay] {
            w.f64(v);
        }
        w.f64(c.muon.lr);
        w.f64(c.muon.momentum);
        w.u64(c.muon.ns_iterations as u64);
        w.u64(self.step);
        w.u64(self.slots.len() as u64);
        for s in &self.slots {
            match s {
                Slot::Empty => w.u8(0),
                Slot::Adam { t, m, v } => {
                    w.u8(1);
                    w.u64(*t);
                    w.tensor(m);
                    w.tensor(v);
                }
                Slot::Muon { buf } => {
                    w.u8(2);
                    w.tensor(buf);
                }
            }
        }
    }

    pub(crate) fn decode(r: &mut Reader) -> Result<Self> {
        let kind = match r.u8()? {
            0 => OptimizerKind::Adamw,
            1 => OptimizerKind::Muon,
            k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
        };
        let adamw = AdamWConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };
        let muon = MuonConfig {
            lr: r.f64()?,
            momentum: r.f64()?,
            ns_iterations: r.u64()? as usize,
        };
        let step = r.u64()?;
        let n = r.u64()? as usize;
        let mut slots = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            slots.push(match r.u8()? {
                0 => Slot::Empty,
                1 => Slot::Adam {
                    t: r.u64()?,
                    m: r.tensor()?,
                    v: r.tensor()?,
                },
                2 => Slot::Muon { buf: r.tensor()? },
                k => return Err(Error::Checkpoint(format!("unknown optimizer slot {k}"))),
            });
        }
        Ok(Self {
            config: OptimizerConfig { kind, adamw, muon },
            step,
            slots,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let out = Self::decode(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(out)
    }
}

/// Training phase, which decides the checkpoint selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// 1-based epoch.
    pub epoch: usize,
    pub loss: f64,
    pub macro_auc: Option<f64>,
}

/// Epoch of the selected checkpoint: lowest validation loss when
/// pretraining, highest macro AUC otherwise; ties go to the earliest epoch.
pub fn select_checkpoint(history: &[ValidationRecord], phase: Phase) -> Result<usize> {
    let score = |r: &ValidationRecord| -> Result<f64> {
        let s = match phase {
            Phase::Pretrain => -r.loss,
            Phase::Finetune | Phase::Supervised => r.macro_auc.ok_or_else(|| {
                Error::InvalidArgument(format!("epoch {} has no macro AUC", r.epoch))
            })?,
        };
        Ok(if s.is_nan() { f64::NEG_INFINITY } else { s })
    };
    let mut best: Option<(f64, usize)> = None;
    for r in history {
        let s = score(r)?;
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, r.epoch));
        }
    }
    best.map(|(_, e)| e)
        .ok_or_else(|| Error::InvalidArgument("no completed validation round".into()))
}
