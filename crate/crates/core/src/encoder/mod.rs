//! Particle-transformer backbone with pairwise interaction bias, class-token
//! pooling and the attachable task and pretraining heads.
//!
//! Parameters live in an [`Encoder`]; a forward pass binds them to a fresh
//! [`Tape`] through [`Encoder::bind`] and runs on the returned [`Graph`].

mod checkpoint;
mod config;

use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{drop_path, dropout_mask, geglu, linear, Bound, ParamEntry, ParamKind, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{shape_err, Error, Result};
use crate::jetdata::JetBatch;
use crate::objectives::MaskPlan;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EncoderConfig, EncoderPreset};

/// Standard deviation of the learned-token initialization.
pub const TOKEN_INIT_STD: f64 = 0.02;

/// Whether pretraining heads may be attached and run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classifier,
    Projection,
    Mpm,
    Vae,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Classifier, HeadKind::Projection, HeadKind::Mpm, HeadKind::Vae];

    pub fn is_pretraining(self) -> bool {
        !matches!(self, HeadKind::Classifier)
    }


    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

/// Whether a parameter belongs to the backbone rather than a head.
pub fn is_backbone_param(name: &str) -> bool {
    !name.starts_with("head.")
}

/// Backbone parameters plus attached heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    config: EncoderConfig,
    mode: Mode,
    heads: Vec<HeadKind>,
    params: ParamStore<S>,
}

struct Init<'a> {
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn weight<S: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<S> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(&[fan_in, fan_out], |_| S::lit(self.rng.random_range(-bound..=bound)))
    }

    fn normal<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let d = Normal::new(0.0, TOKEN_INIT_STD).expect("positive std");
        Tensor::from_fn(shape, |_| S::lit(d.sample(self.rng)))
    }
}

fn add_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    weight_kind: ParamKind,
    bias_kind: ParamKind,
) -> Result<()> {
    store.insert(format!("{name}.w"), weight_kind, init.weight(fan_in, fan_out))?;
    store.insert(format!("{name}.b"), bias_kind, Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn add_norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.g"), ParamKind::Vector, Tensor::ones(&[dim]))?;
    store.insert(format!("{name}.b"), ParamKind::Vector, Tensor::zeros(&[dim]))?;
    Ok(())
}

fn add_block<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, cfg: &EncoderConfig, name: &str) -> Result<()> {
    let d = cfg.latent_dim;
    let (m, v) = (ParamKind::Matrix, ParamKind::Vector);
    add_norm(store, &format!("{name}.ln1"), d)?;
    for proj in ["q", "k", "v", "o"] {
        add_linear(store, init, &format!("{name}.attn.{proj}"), d, d, m, v)?;
    }
    add_norm(store, &format!("{name}.ln2"), d)?;
    let h = cfg.ffn_hidden();
    if cfg.use_geglu {
        store.insert(format!("{name}.ffn.wg"), m, init.weight(d, h))?;
        store.insert(format!("{name}.ffn.wv"), m, init.weight(d, h))?;
    } else {
        add_linear(store, init, &format!("{name}.ffn.1"), d, h, m, v)?;
    }
    add_linear(store, init, &format!("{name}.ffn.2"), h, d, m, v)
}

fn add_head<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, cfg: &EncoderConfig, head: HeadKind) -> Result<()> {
    let hk = ParamKind::Head;
    let d = cfg.latent_dim;
    match head {
        HeadKind::Classifier if cfg.wide_readout => {
            add_linear(store, init, "head.cls.0", d, cfg.readout_hidden, hk, hk)?;
            add_linear(store, init, "head.cls.1", cfg.readout_hidden, cfg.n_classes, hk, hk)
        }
        HeadKind::Classifier => add_linear(store, init, "head.cls.0", d, cfg.n_classes, hk, hk),
        HeadKind::Projection => {
            add_linear(store, init, "head.proj.0", d, d, hk, hk)?;
            add_linear(store, init, "head.proj.1", d, cfg.proj_dim, hk, hk)
        }
        HeadKind::Mpm => {
            store.insert("head.mpm.mask_token", hk, init.normal(&[d]))?;
            add_linear(store, init, "head.mpm.0", d, cfg.mpm_hidden, hk, hk)?;
            add_linear(store, init, "head.mpm.1", cfg.mpm_hidden, cfg.input_features, hk, hk)
        }
        HeadKind::Vae => {
            add_linear(store, init, "head.vae.mu", d, cfg.vae_latent, hk, hk)?;
            add_linear(store, init, "head.vae.log_var", d, cfg.vae_latent, hk, hk)?;
            add_linear(store, init, "head.vae.dec.z", cfg.vae_latent, cfg.vae_hidden, hk, hk)?;
            store.insert("head.vae.dec.pos", hk, init.normal(&[cfg.max_particles, cfg.vae_hidden]))?;
            add_linear(store, init, "head.vae.dec.out", cfg.vae_hidden, cfg.input_features, hk, hk)
        }
    }
}

impl<S: Scalar> Encoder<S> {
    /// Freshly initialized backbone with no heads.
    pub fn new(config: EncoderConfig, mode: Mode, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { rng };
        let cfg = &config;
        let (e, v) = (ParamKind::Embedding, ParamKind::Vector);

        let mut width = cfg.input_features;
        for l in 0..cfg.embed_layers {
            let out = if l + 1 == cfg.embed_layers { cfg.latent_dim } else { cfg.embed_hidden };
            add_linear(&mut params, &mut init, &format!("embed.{l}"), width, out, e, v)?;
            width = out;
        }
        let mut width = cfg.interaction_features;
        for l in 0..cfg.interaction_layers {
            let out = if l + 1 == cfg.interaction_layers { cfg.n_heads } else { cfg.interaction_hidden };
            add_linear(&mut params, &mut init, &format!("interaction.{l}"), width, out, e, v)?;
            width = out;
        }
        for l in 0..cfg.n_particle_blocks {
            add_block(&mut params, &mut init, cfg, &format!("particle.{l}"))?;
        }
        params.insert("cls_token", e, init.normal(&[cfg.latent_dim]))?;
        for l in 0..cfg.n_class_blocks {
            add_block(&mut params, &mut init, cfg, &format!("class.{l}"))?;
        }
        add_norm(&mut params, "norm", cfg.latent_dim)?;

        Ok(Self {
            config,
            mode,
            heads: Vec::new(),
            params,
        })
    }

    /// Adds a freshly initialized head. Pretraining heads are refused in
    /// fine-tune mode.
    pub fn attach_head(&mut self, head: HeadKind, rng: &mut Rng) -> Result<()> {
        if head.is_pretraining() && self.mode == Mode::Finetune {
            return Err(Error::Contract(format!("{head:?} head cannot be attached in fine-tune mode")));
        }
        if self.heads.contains(&head) {
            return Err(Error::InvalidArgument(format!("{head:?} head already attached")));
        }
        add_head(&mut self.params, &mut Init { rng }, &self.config, head)?;
        self.heads.push(head);
        Ok(())
    }

    /// Drops every head and switches to fine-tune mode.
    pub fn into_finetune(self) -> Self {
        let mut params = ParamStore::new();
        for (_, e) in self.params.iter().filter(|(_, e)| is_backbone_param(&e.name)) {
            params
                .insert(e.name.clone(), e.kind, e.value.clone())
                .expect("names are unique in the source store");
        }
        Self {
            config: self.config,
            mode: Mode::Finetune,
            heads: Vec::new(),
            params,
        }
    }

    /// Copies every backbone tensor from `source`, whose backbone table must
    /// match this encoder's exactly.
    pub fn load_backbone(&mut self, source: &ParamStore<S>) -> Result<()> {
        let theirs: Vec<_> = source.iter().filter(|(_, e)| is_backbone_param(&e.name)).collect();
        let ours: Vec<_> = self.params.ids().filter(|&id| is_backbone_param(&self.params.get(id).name)).collect();
        if theirs.len() != ours.len() {
            return Err(Error::Checkpoint(format!(
                "backbone has {} tensors, source has {}",
                ours.len(),
                theirs.len()
            )));
        }
        for (id, (_, src)) in ours.into_iter().zip(theirs) {
            let dst = self.params.get_mut(id);
            if dst.name != src.name || dst.kind != src.kind || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} {:?} does not match source {} {:?} {:?}",
                    dst.name,
                    dst.kind,
                    dst.value.shape(),
                    src.name,
                    src.kind,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn heads(&self) -> &[HeadKind] {
        &self.heads
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Number of backbone scalars (heads excluded).
    pub fn backbone_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, e)| is_backbone_param(&e.name))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Records the parameters on `tape`. Those rejected by `trainable` become
    /// constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: impl Fn(&ParamEntry<S>) -> bool) -> Graph<'t, '_, S> {
        Graph {
            model: self,
            tape,
            bound: self.params.bind(tape, trainable),
        }
    }
}

/// Per-call stochasticity: `None` runs in inference mode.
pub type Train<'r> = Option<&'r mut Rng>;

/// Output of [`Graph::encode`].
pub struct Encoded<'t, S: Scalar> {
    /// `[B, D]` normalized class-token latent.
    pub latent: Var<'t, S>,
    /// `[B, N, D]` normalized particle tokens after the particle blocks.
    pub tokens: Var<'t, S>,
}

/// Output of an attention block.
pub struct BlockOutput<'t, S: Scalar> {
    pub tokens: Var<'t, S>,
    /// `[B, H, Q, K]` attention weights.
    pub attention: Var<'t, S>,
}

/// Output of [`Graph::vae`].
pub struct VaeOutput<'t, S: Scalar> {
    pub mu: Var<'t, S>,
    pub log_var: Var<'t, S>,
    /// `[B, N, F]`
    pub reconstruction: Var<'t, S>,
}

/// Parameters of one [`Encoder`] bound to a tape.
pub struct Graph<'t, 'm, S: Scalar> {
    model: &'m Encoder<S>,
    tape: &'t Tape<S>,
    bound: Bound<'t, S>,
}

impl<'t, 'm, S: Scalar> Graph<'t, 'm, S> {
    pub fn bound(&self) -> &Bound<'t, S> {
        &self.bound
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    fn p(&self, name: &str) -> Result<Var<'t, S>> {
        self.model
            .params
            .id(name)
            .map(|id| self.bound.var(id))
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not part of this model")))
    }

    fn lin(&self, x: Var<'t, S>, name: &str) -> Result<Var<'t, S>> {
        linear(x, self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?)
    }

    fn norm(&self, x: Var<'t, S>, name: &str) -> Result<Var<'t, S>> {
        x.layer_norm(self.p(&format!("{name}.g"))?, self.p(&format!("{name}.b"))?, S::lit(LAYER_NORM_EPS))
    }

    fn require_head(&self, head: HeadKind) -> Result<()> {
        if head.is_pretraining() && self.model.mode == Mode::Finetune {
            return Err(Error::Contract(format!("{head:?} head invoked in fine-tune mode")));
        }
        if !self.model.heads.contains(&head) {
            return Err(Error::Contract(format!("{head:?} head is not attached")));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &JetBatch<S>) -> Result<(usize, usize)> {
        let sh = batch.features.shape();
        let cfg = &self.model.config;
        if sh.len() != 3 || sh[2] != cfg.input_features {
            return shape_err("encoder input", sh, &[0, 0, cfg.input_features]);
        }
        let (b, n) = (sh[0], sh[1]);
        if b == 0 || n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let ish = batch.interaction.shape();
        if ish != [b, cfg.interaction_features, n, n] {
            return shape_err("interaction input", ish, &[b, cfg.interaction_features, n, n]);
        }
        if batch.mask.len() != b * n {
            return shape_err("particle mask", &[batch.mask.len()], &[b * n]);
        }
        Ok((b, n))
    }

    /// Pointwise embedding MLP `[B, N, F] → [B, N, D]` with padded rows zeroed.
    pub fn embed_particles(&self, batch: &JetBatch<S>) -> Result<Var<'t, S>> {
        let (b, n) = self.check_batch(batch)?;
        let mut x = self.tape.constant(batch.features.clone());
        let layers = self.model.config.embed_layers;
        for l in 0..layers {
            x = self.lin(x, &format!("embed.{l}"))?;
            if l + 1 < layers {
                x = x.gelu();
            }
        }
        let d = self.model.config.latent_dim;
        let keep = Tensor::from_fn(&[b, n, d], |i| if batch.mask[i / d] { S::one() } else { S::zero() });
        x.mul_const(&keep)
    }

    /// Pointwise conv stack over pair features `[B, C, N, N] → [B, H, N, N]`.
    pub fn embed_interactions(&self, batch: &JetBatch<S>) -> Result<Var<'t, S>> {
        self.check_batch(batch)?;
        self.interaction_bias(batch.interaction.clone())
    }

    fn interaction_bias(&self, pairs: Tensor<S>) -> Result<Var<'t, S>> {
        let mut x = self.tape.constant(pairs).permute(&[0, 2, 3, 1])?;
        let layers = self.model.config.interaction_layers;
        for l in 0..layers {
            x = self.lin(x, &format!("interaction.{l}"))?;
            if l + 1 < layers {
                x = x.gelu();
            }
        }
        x.permute(&[0, 3, 1, 2])
    }

    fn ffn(&self, x: Var<'t, S>, name: &str) -> Result<Var<'t, S>> {
        let h = if self.model.config.use_geglu {
            geglu(x, self.p(&format!("{name}.ffn.wg"))?, self.p(&format!("{name}.ffn.wv"))?)?
        } else {
            self.lin(x, &format!("{name}.ffn.1"))?.gelu()
        };
        self.lin(h, &format!("{name}.ffn.2"))
    }

    fn residual(&self, x: Var<'t, S>, branch: Var<'t, S>, train: &mut Train) -> Result<Var<'t, S>> {
        let cfg = &self.model.config;
        let branch = match train.as_deref_mut() {
            Some(rng) => drop_path(branch, cfg.droppath_rate, cfg.residual_scale, rng, true)?,
            None if cfg.residual_scale == 1.0 => branch,
            None => branch.scale(S::lit(cfg.residual_scale)),
        };
        x.add(branch)
    }

    /// Splits `[B, L, D]` into heads `[B, H, L, dh]`.
    fn split_heads(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let sh = x.shape();
        let cfg = &self.model.config;
        x.reshape(&[sh[0], sh[1], cfg.n_heads, cfg.head_dim()])?.permute(&[0, 2, 1, 3])
    }

    fn merge_heads(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let sh = x.shape();
        x.permute(&[0, 2, 1, 3])?.reshape(&[sh[0], sh[2], sh[1] * sh[3]])
    }

    /// Multi-head attention of `queries` over `keys` (both pre-normed).
    /// `key_mask` is `[B·K]`.
    fn attend(
        &self,
        name: &str,
        queries: Var<'t, S>,
        keys: Var<'t, S>,
        bias: Option<Var<'t, S>>,
        key_mask: Rc<Vec<bool>>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let cfg = &self.model.config;
        let q = self.split_heads(self.lin(queries, &format!("{name}.attn.q"))?)?;
        let k = self.split_heads(self.lin(keys, &format!("{name}.attn.k"))?)?;
        let v = self.split_heads(self.lin(keys, &format!("{name}.attn.v"))?)?;
        let mut logits = q.bmm(k, true)?.scale(S::lit(1.0 / (cfg.head_dim() as f64).sqrt()));
        if let Some(bias) = bias {
            logits = logits.add(bias)?;
        }
        let n_queries = queries.shape()[1];
        let attention = logits.masked_softmax(key_mask, cfg.n_heads * n_queries)?;
        let out = self.merge_heads(attention.bmm(v, false)?)?;
        Ok((self.lin(out, &format!("{name}.attn.o"))?, attention))
    }

    /// Pre-norm self-attention block over particle tokens with the interaction
    /// bias added to the logits; padded keys are excluded.
    pub fn particle_block(
        &self,
        index: usize,
        tokens: Var<'t, S>,
        bias: Var<'t, S>,
        mask: &Rc<Vec<bool>>,
        train: &mut Train,
    ) -> Result<BlockOutput<'t, S>> {
        let name = format!("particle.{index}");
        let h = self.norm(tokens, &format!("{name}.ln1"))?;
        let (a, attention) = self.attend(&name, h, h, Some(bias), mask.clone())?;
        let x = self.residual(tokens, a, train)?;
        let f = self.ffn(self.norm(x, &format!("{name}.ln2"))?, &name)?;
        Ok(BlockOutput {
            tokens: self.residual(x, f, train)?,
            attention,
        })
    }

    /// Class-attention block: the class token `[B, 1, D]` attends over itself
    /// and the particle tokens, without interaction bias.
    pub fn class_block(
        &self,
        index: usize,
        cls: Var<'t, S>,
        tokens: Var<'t, S>,
        mask: &Rc<Vec<bool>>,
        train: &mut Train,
    ) -> Result<BlockOutput<'t, S>> {
        let name = format!("class.{index}");
        let (b, n) = (tokens.shape()[0], tokens.shape()[1]);
        let joint = Var::concat(&[cls, tokens], 1)?;
        let h = self.norm(joint, &format!("{name}.ln1"))?;
        let q = h.slice(1, 0, 1)?;
        let key_mask: Vec<bool> = (0..b)
            .flat_map(|bi| std::iter::once(true).chain(mask[bi * n..(bi + 1) * n].iter().copied()))
            .collect();
        let (a, attention) = self.attend(&name, q, h, None, Rc::new(key_mask))?;
        let x = self.residual(cls, a, train)?;
        let f = self.ffn(self.norm(x, &format!("{name}.ln2"))?, &name)?;
        Ok(BlockOutput {
            tokens: self.residual(x, f, train)?,
            attention,
        })
    }

    /// Full backbone: embedding, particle blocks, class blocks, final norm.
    pub fn encode(&self, batch: &JetBatch<S>, train: Train) -> Result<Encoded<'t, S>> {
        self.encode_inner(batch, None, train)
    }

    /// Backbone pass with the masked particles of `plan` hidden: their tokens
    /// are replaced by the learned mask embedding and their pair features are
    /// zeroed.
    pub fn encode_masked(&self, batch: &JetBatch<S>, plan: &MaskPlan<S>, train: Train) -> Result<Encoded<'t, S>> {
        self.require_head(HeadKind::Mpm)?;
        if plan.mask.len() != batch.mask.len() {
            return shape_err("mask plan", &[plan.mask.len()], &[batch.mask.len()]);
        }
        self.encode_inner(batch, Some(plan), train)
    }

    fn encode_inner(&self, batch: &JetBatch<S>, plan: Option<&MaskPlan<S>>, mut train: Train) -> Result<Encoded<'t, S>> {
        let (b, n) = self.check_batch(batch)?;
        let d = self.model.config.latent_dim;
        let mut tokens = self.embed_particles(batch)?;
        let bias = match plan {
            None => self.interaction_bias(batch.interaction.clone())?,
            Some(plan) => {
                let flat = tokens.reshape(&[b * n, d])?;
                let masked = flat.replace_rows(Rc::new(plan.mask.clone()), self.p("head.mpm.mask_token")?)?;
                tokens = masked.reshape(&[b, n, d])?;
                let c = self.model.config.interaction_features;
                let mut pairs = batch.interaction.clone();
                let data = pairs.data_mut();
                for bi in 0..b {
                    for ch in 0..c {
                        for s in 0..n {
                            for t in 0..n {
                                if plan.mask[bi * n + s] || plan.mask[bi * n + t] {
                                    data[((bi * c + ch) * n + s) * n + t] = S::zero();
                                }
                            }
                        }
                    }
                }
                self.interaction_bias(pairs)?
            }
        };
        let mask = Rc::new(batch.mask.clone());
        for l in 0..self.model.config.n_particle_blocks {
            tokens = self.particle_block(l, tokens, bias, &mask, &mut train)?.tokens;
        }
        let mut cls = self.p("cls_token")?.expand(0, b)?.reshape(&[b, 1, d])?;
        for l in 0..self.model.config.n_class_blocks {
            cls = self.class_block(l, cls, tokens, &mask, &mut train)?.tokens;
        }
        Ok(Encoded {
            latent: self.norm(cls.reshape(&[b, d])?, "norm")?,
            tokens: self.norm(tokens, "norm")?,
        })
    }

    /// Classification logits `[B, n_classes]`.
    pub fn classifier(&self, latent: Var<'t, S>, train: Train) -> Result<Var<'t, S>> {
        self.require_head(HeadKind::Classifier)?;
        let cfg = &self.model.config;
        if !cfg.wide_readout {
            return self.lin(latent, "head.cls.0");
        }
        let h = self.lin(latent, "head.cls.0")?.gelu();
        let h = match train {
            Some(rng) => h.mul_const(&dropout_mask(&h.shape(), cfg.readout_dropout, rng, true)?)?,
            None => h,
        };
        self.lin(h, "head.cls.1")
    }

    /// Projection MLP with ReLU followed by row-wise L2 normalization.
    pub fn projection(&self, latent: Var<'t, S>) -> Result<Var<'t, S>> {
        self.require_head(HeadKind::Projection)?;
        let h = self.lin(latent, "head.proj.0")?.relu();
        Ok(self.lin(h, "head.proj.1")?.l2_normalize_rows())
    }

    /// Reconstructs the masked particles from the encoder tokens: `[m, F]`.
    pub fn mpm_decode(&self, tokens: Var<'t, S>, plan: &MaskPlan<S>) -> Result<Var<'t, S>> {
        self.require_head(HeadKind::Mpm)?;
        let sh = tokens.shape();
        if sh.len() != 3 || sh[0] * sh[1] != plan.mask.len() {
            return shape_err("mpm tokens", &sh, &[plan.mask.len()]);
        }
        let picked = tokens.reshape(&[sh[0] * sh[1], sh[2]])?.gather_rows(&plan.masked_slots)?;
        let h = self.lin(picked, "head.mpm.0")?.gelu();
        self.lin(h, "head.mpm.1")
    }

    /// Gaussian posterior head and per-particle decoder. `noise` is the
    /// `[B, dz]` standard-normal draw of the reparameterized sample; `n` is
    /// the number of particle slots to reconstruct.
    pub fn vae(&self, latent: Var<'t, S>, noise: &Tensor<S>, n: usize) -> Result<VaeOutput<'t, S>> {
        self.require_head(HeadKind::Vae)?;
        let cfg = &self.model.config;
        let b = latent.shape()[0];
        if noise.shape() != [b, cfg.vae_latent] {
            return shape_err("vae noise", noise.shape(), &[b, cfg.vae_latent]);
        }
        if n == 0 || n > cfg.max_particles {
            return Err(Error::InvalidArgument(format!(
                "cannot decode {n} particles (table covers {})",
                cfg.max_particles
            )));
        }
        let mu = self.lin(latent, "head.vae.mu")?;
        let log_var = self.lin(latent, "head.vae.log_var")?;
        let std = log_var.scale(S::lit(0.5)).exp();
        let z = mu.add(std.mul_const(noise)?)?;
        let h = self.lin(z, "head.vae.dec.z")?.expand(1, n)?;
        let h = h.add_bias(self.p("head.vae.dec.pos")?.slice(0, 0, n)?)?.gelu();
        let reconstruction = self.lin(h, "head.vae.dec.out")?;
        Ok(VaeOutput {
            mu,
            log_var,
            reconstruction,
        })
    }
}
