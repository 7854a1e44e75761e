//! Training lifecycle: pretraining, fine-tuning, supervised baselines,
//! linear probes and evaluation, with per-epoch validation and checkpoints.

mod config;
mod data;
mod selfcheck;

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::*;
pub use data::{generate_toy_data, load_split, toy_manifest, Dataset};
pub use selfcheck::{encoder_gradcheck, selfcheck, tiny_config, CheckResult};

use crate::augment::{two_views_indexed, AugmentationPipeline};
use crate::autodiff::{ParamEntry, Tape, Tensor, Var};
use crate::encoder::{Checkpoint, Encoder, Graph, HeadKind, Mode};
use crate::error::{Error, Result};
use crate::evalmetrics::{MetricReport, ScoreMatrix};
use crate::jetdata::{build_batch_compact, Jet, JetBatch, N_CONTINUOUS_FEATURES};
use crate::objectives::{
    cross_entropy_loss, make_mask_plan, mpm_loss, ntxent_loss, supcon_loss, vae_loss, ContrastiveBatch, MaskPlan,
    MASK_RATE, NTXENT_TEMPERATURE, SUPCON_TEMPERATURE, VAE_BETA,
};
use crate::optim::{clip_gradients, select_checkpoint, Optimizer, Phase, ValidationRecord};
use crate::rng::{substream, Rng};
use crate::sampler::{draw_epoch, ClassPools, SamplingPolicy, Split};

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_VAL: u64 = 5;
const STREAM_HEAD: u64 = 6;

/// Kind of run, which fixes the head, the loss, the selection rule and the
/// file prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Supervised,
    Probe,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Supervised => "supervised",
            Stage::Probe => "probe",
        }
    }

    pub fn phase(self) -> Phase {
        match self {
            Stage::Pretrain => Phase::Pretrain,
            Stage::Finetune | Stage::Probe => Phase::Finetune,
            Stage::Supervised => Phase::Supervised,
        }
    }

    fn stream_base(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Finetune => 100,
            Stage::Supervised => 200,
            Stage::Probe => 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_report: Option<MetricReport>,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub objective: Objective,
    pub stage: Stage,
    pub seed: u64,
    /// Validation of the initial model, before any update.
    pub initial_val_loss: f64,
    pub initial_val_report: Option<MetricReport>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn validation_history(&self) -> Vec<ValidationRecord> {
        self.epochs.iter().map(validation_record).collect()
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Record of a run plus its selected checkpoint.
pub struct RunOutcome {
    pub record: RunRecord,
    pub best: Checkpoint<f64>,
}

/// Loss computed per batch.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Task {
    Classify,
    Ntxent,
    Supcon,
    Mpm,
    Vae,
}

impl Task {
    fn for_pretraining(objective: Objective) -> Result<Self> {
        Ok(match objective {
            Objective::Jetclr => Task::Ntxent,
            Objective::Supcon => Task::Supcon,
            Objective::Mpm => Task::Mpm,
            Objective::ClipVae => Task::Vae,
            o => return Err(Error::Config(format!("{o} is not a pretraining objective"))),
        })
    }

    fn head(self) -> HeadKind {
        match self {
            Task::Classify => HeadKind::Classifier,
            Task::Ntxent | Task::Supcon => HeadKind::Projection,
            Task::Mpm => HeadKind::Mpm,
            Task::Vae => HeadKind::Vae,
        }
    }
}

/// Randomness and augmentation available to one batch.
struct BatchCtx<'a> {
    nmax: usize,
    rng: &'a mut Rng,
    training: bool,
    pipeline: &'a AugmentationPipeline,
    aug_seed: u64,
    /// Index of the first jet of the batch within its stream.
    offset: u64,
}

fn batch_loss<'t>(g: &Graph<'t, '_, f64>, task: Task, jets: &[Jet], ctx: &mut BatchCtx) -> Result<Var<'t, f64>> {
    match task {
        Task::Classify => {
            let batch: JetBatch<f64> = build_batch_compact(jets, ctx.nmax)?;
            let mut train = ctx.training.then_some(&mut *ctx.rng);
            let enc = g.encode(&batch, train.as_deref_mut())?;
            let logits = g.classifier(enc.latent, train)?;
            cross_entropy_loss(logits, &batch.label_indices())
        }
        Task::Ntxent | Task::Supcon => {
            let (mut first, mut second) = (Vec::with_capacity(jets.len()), Vec::with_capacity(jets.len()));
            for (i, j) in jets.iter().enumerate() {
                let (a, b) = two_views_indexed(j, ctx.pipeline, ctx.aug_seed, ctx.offset + i as u64);
                first.push(a);
                second.push(b);
            }
            first.extend(second);
            let batch: JetBatch<f64> = build_batch_compact(&first, ctx.nmax)?;
            let enc = g.encode(&batch, ctx.training.then_some(&mut *ctx.rng))?;
            let z = g.projection(enc.latent)?;
            if task == Task::Ntxent {
                ntxent_loss(&ContrastiveBatch::stacked(z, None)?, NTXENT_TEMPERATURE)
            } else {
                let labels: Vec<usize> = jets.iter().map(|j| j.label.index()).collect();
                Ok(supcon_loss(&ContrastiveBatch::stacked(z, Some(&labels))?, SUPCON_TEMPERATURE)?.loss)
            }
        }
        Task::Mpm => {
            let batch: JetBatch<f64> = build_batch_compact(jets, ctx.nmax)?;
            let plan = make_mask_plan(&batch, MASK_RATE, ctx.rng)?;
            let enc = g.encode_masked(&batch, &plan, ctx.training.then_some(&mut *ctx.rng))?;
            mpm_loss(g.mpm_decode(enc.tokens, &plan)?, &plan)
        }
        Task::Vae => {
            let batch: JetBatch<f64> = build_batch_compact(jets, ctx.nmax)?;
            let noise = normal_tensor(&[batch.batch_size(), g.config().vae_latent], ctx.rng);
            let enc = g.encode(&batch, ctx.training.then_some(&mut *ctx.rng))?;
            let out = g.vae(enc.latent, &noise, batch.max_particles())?;
            Ok(vae_loss(out.mu, out.log_var, out.reconstruction, &batch.features, &batch.mask, VAE_BETA)?.total)
        }
    }
}

fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn finite(loss: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Degenerate(format!("non-finite loss {loss} in {}", what())))
    }
}

/// Contrastive losses need at least two views of two jets.
fn min_batch(task: Task) -> usize {
    match task {
        Task::Ntxent | Task::Supcon => 2,
        _ => 1,
    }
}

/// Class-probability logits `[N, C]` of `jets` in eval mode.
pub fn predict(encoder: &Encoder<f64>, jets: &[Jet], nmax: usize, batch_size: usize) -> Result<ScoreMatrix> {
    let c = encoder.config().n_classes;
    let mut logits = Vec::with_capacity(jets.len() * c);
    for chunk in jets.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        let g = encoder.bind(&tape, |_| false);
        let batch: JetBatch<f64> = build_batch_compact(chunk, nmax)?;
        let enc = g.encode(&batch, None)?;
        logits.extend_from_slice(g.classifier(enc.latent, None)?.value().data());
    }
    let labels = jets.iter().map(|j| j.label.index()).collect();
    ScoreMatrix::from_logits(&Tensor::new(&[jets.len(), c], logits)?, labels)
}

/// Full metric report of `encoder` on `jets`.
pub fn evaluate(encoder: &Encoder<f64>, jets: &[Jet], nmax: usize, batch_size: usize) -> Result<MetricReport> {
    MetricReport::compute(&predict(encoder, jets, nmax, batch_size)?)
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    stage: Stage,
    task: Task,
    epochs: usize,
    trainable: fn(&ParamEntry<f64>) -> bool,
}

fn all_params(_: &ParamEntry<f64>) -> bool {
    true
}

fn head_params(e: &ParamEntry<f64>) -> bool {
    !crate::encoder::is_backbone_param(&e.name)
}

impl Trainer<'_> {
    fn stream(&self, k: u64) -> Rng {
        substream(self.cfg.seed, self.stage.stream_base() + k)
    }

    /// Mean validation loss plus the metric report for classification. The
    /// same masks, noise and views are drawn at every epoch.
    fn validate(&self, encoder: &Encoder<f64>) -> Result<(f64, Option<MetricReport>)> {
        let bs = self.cfg.training.batch_size;
        let nmax = self.cfg.data.nmax;
        if self.task == Task::Classify {
            let sm = predict(encoder, &self.data.val, nmax, bs)?;
            let report = MetricReport::compute(&sm)?;
            let mut loss = 0.0;
            for (i, &y) in sm.labels().iter().enumerate() {
                loss -= sm.row(i)[y].max(f64::MIN_POSITIVE).ln();
            }
            return Ok((loss / sm.len() as f64, Some(report)));
        }
        let mut rng = self.stream(STREAM_VAL);
        let aug = self.cfg.augmentation();
        let aug_seed = self.stream(STREAM_VAL).random();
        let (mut total, mut count) = (0.0, 0usize);
        for (k, chunk) in self.data.val.chunks(bs).enumerate() {
            if chunk.len() < min_batch(self.task) {
                continue;
            }
            let tape = Tape::new();
            let g = encoder.bind(&tape, |_| false);
            let mut ctx = BatchCtx {
                nmax,
                rng: &mut rng,
                training: false,
                pipeline: &aug.val,
                aug_seed,
                offset: (k * bs) as u64,
            };
            let loss = batch_loss(&g, self.task, chunk, &mut ctx)?.item();
            total += finite(loss, || "validation".into())? * chunk.len() as f64;
            count += chunk.len();
        }
        if count == 0 {
            return Err(Error::Config("validation set too small for one batch".into()));
        }
        Ok((total / count as f64, None))
    }

    fn checkpoint(&self, encoder: &Encoder<f64>, optimizer: &Optimizer<f64>, epoch: usize) -> Checkpoint<f64> {
        Checkpoint {
            encoder: encoder.clone(),
            optimizer: Some(optimizer.clone()),
            metadata: json!({
                "objective": self.cfg.objective,
                "stage": self.stage,
                "epoch": epoch,
                "seed": self.cfg.seed,
                "batch_size": self.cfg.training.batch_size,
                "data": self.cfg.data,
            }),
        }
    }

    fn run(&self, mut encoder: Encoder<f64>) -> Result<RunOutcome> {
        let cfg = self.cfg;
        let t = &cfg.training;
        let out_dir = cfg.output.dir.as_deref();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let policy = SamplingPolicy::paper(t.epoch_size)?;
        let mut pools = ClassPools::from_jets(self.data.train.iter().cloned());
        let mut sampler_rng = self.stream(STREAM_SAMPLER);
        let mut train_rng = self.stream(STREAM_TRAIN);
        let aug_seed: u64 = self.stream(STREAM_AUGMENT).random();
        let aug = cfg.augmentation();
        let mut optimizer = Optimizer::new(cfg.optimizer);

        let (initial_val_loss, initial_val_report) = self.validate(&encoder)?;
        log::info!(
            "{} {} epoch 0: val loss {initial_val_loss:.5}{}",
            cfg.objective,
            self.stage.name(),
            auc_note(&initial_val_report)
        );
        let mut epochs = Vec::with_capacity(self.epochs);
        let mut best: Option<Checkpoint<f64>> = None;
        for epoch in 1..=self.epochs {
            let start = Instant::now();
            let jets: Vec<Jet> = draw_epoch(&policy, &mut pools, &mut sampler_rng)?.collect();
            let (mut total, mut count) = (0.0, 0usize);
            for (k, chunk) in jets.chunks(t.batch_size).enumerate() {
                if chunk.len() < min_batch(self.task) {
                    continue;
                }
                let tape = Tape::new();
                let g = encoder.bind(&tape, self.trainable);
                let mut ctx = BatchCtx {
                    nmax: cfg.data.nmax,
                    rng: &mut train_rng,
                    training: true,
                    pipeline: &aug.train,
                    aug_seed,
                    offset: ((epoch - 1) * t.epoch_size + k * t.batch_size) as u64,
                };
                let loss = batch_loss(&g, self.task, chunk, &mut ctx)?;
                let value = finite(loss.item(), || format!("epoch {epoch} batch {k}"))?;
                let mut grads = tape.backward(loss)?;
                let mut grads = g.bound().collect_grads(&mut grads);
                drop(g);
                clip_gradients(&mut grads, t.clip_norm);
                optimizer.step(encoder.params_mut(), &grads)?;
                total += value * chunk.len() as f64;
                count += chunk.len();
            }
            let (val_loss, val_report) = self.validate(&encoder)?;
            let ckpt = self.checkpoint(&encoder, &optimizer, epoch);
            let path = match out_dir {
                Some(dir) => {
                    let p = dir.join(format!("{}_epoch{epoch:03}.ckpt", self.stage.name()));
                    ckpt.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            let record = EpochRecord {
                epoch,
                train_loss: total / count.max(1) as f64,
                val_loss,
                val_report,
                checkpoint: path,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "{} {} epoch {epoch}: train loss {:.5}, val loss {val_loss:.5}{} ({:.1} s)",
                cfg.objective,
                self.stage.name(),
                record.train_loss,
                auc_note(&record.val_report),
                record.wall_seconds
            );
            epochs.push(record);
            let history: Vec<ValidationRecord> = epochs.iter().map(validation_record).collect();
            if select_checkpoint(&history, self.stage.phase())? == epoch {
                best = Some(ckpt);
            }
        }
        let history: Vec<ValidationRecord> = epochs.iter().map(validation_record).collect();
        let best_epoch = select_checkpoint(&history, self.stage.phase())?;
        let best = best.ok_or_else(|| Error::Contract("no checkpoint selected".into()))?;
        let best_checkpoint = match out_dir {
            Some(dir) => {
                let p = dir.join(format!("{}_best.ckpt", self.stage.name()));
                best.save(&p)?;
                Some(p)
            }
            None => None,
        };
        let record = RunRecord {
            objective: cfg.objective,
            stage: self.stage,
            seed: cfg.seed,
            initial_val_loss,
            initial_val_report,
            epochs,
            best_epoch,
            best_checkpoint,
        };
        if let Some(dir) = out_dir {
            std::fs::write(dir.join(format!("{}_record.json", self.stage.name())), record.to_json()?)?;
        }
        Ok(RunOutcome { record, best })
    }
}

fn validation_record(e: &EpochRecord) -> ValidationRecord {
    ValidationRecord {
        epoch: e.epoch,
        loss: e.val_loss,
        macro_auc: e.val_report.as_ref().map(|r| r.macro_auc),
    }
}

fn auc_note(r: &Option<MetricReport>) -> String {
    r.as_ref().map(|r| format!(", val macro AUC {:.4}", r.macro_auc)).unwrap_or_default()
}

fn init_encoder(cfg: &RunConfig, stage: Stage, mode: Mode) -> Result<Encoder<f64>> {
    Encoder::new(
        cfg.encoder_config(),
        mode,
        &mut substream(cfg.seed, stage.stream_base() + STREAM_INIT),
    )
}

fn head_rng(cfg: &RunConfig, stage: Stage) -> Rng {
    substream(cfg.seed, stage.stream_base() + STREAM_HEAD)
}

/// Trains the encoder with the objective-specific head; the best epoch has
/// the lowest validation loss.
pub fn run_pretrain(cfg: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let task = Task::for_pretraining(cfg.objective)?;
    let mut encoder = init_encoder(cfg, Stage::Pretrain, Mode::Pretrain)?;
    encoder.attach_head(task.head(), &mut head_rng(cfg, Stage::Pretrain))?;
    Trainer {
        cfg,
        data,
        stage: Stage::Pretrain,
        task,
        epochs: cfg.training.pretrain_epochs,
        trainable: all_params,
    }
    .run(encoder)
}

/// Loads the pretrained backbone, attaches a fresh classifier and trains
/// everything end to end; the best epoch has the highest macro AUC.
pub fn run_finetune(cfg: &RunConfig, data: &Dataset, pretrained: &Checkpoint<f64>) -> Result<RunOutcome> {
    cfg.validate()?;
    if pretrained.encoder.config() != &cfg.encoder_config() {
        return Err(Error::Config(
            "pretrained checkpoint was built with a different encoder config".into(),
        ));
    }
    let mut encoder = pretrained.encoder.clone().into_finetune();
    encoder.attach_head(HeadKind::Classifier, &mut head_rng(cfg, Stage::Finetune))?;
    Trainer {
        cfg,
        data,
        stage: Stage::Finetune,
        task: Task::Classify,
        epochs: cfg.training.finetune_epochs,
        trainable: all_params,
    }
    .run(encoder)
}

/// Cross-entropy training from scratch.
pub fn run_supervised(cfg: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut encoder = init_encoder(cfg, Stage::Supervised, Mode::Finetune)?;
    encoder.attach_head(HeadKind::Classifier, &mut head_rng(cfg, Stage::Supervised))?;
    Trainer {
        cfg,
        data,
        stage: Stage::Supervised,
        task: Task::Classify,
        epochs: cfg.training.supervised_epochs(),
        trainable: all_params,
    }
    .run(encoder)
}

/// Linear classifier trained on a frozen, randomly initialized encoder for
/// the fine-tuning budget.
pub fn run_linear_probe(cfg: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut config = cfg.encoder_config();
    config.wide_readout = false;
    let mut encoder = Encoder::new(
        config,
        Mode::Finetune,
        &mut substream(cfg.seed, Stage::Probe.stream_base() + STREAM_INIT),
    )?;
    encoder.attach_head(HeadKind::Classifier, &mut head_rng(cfg, Stage::Probe))?;
    Trainer {
        cfg,
        data,
        stage: Stage::Probe,
        task: Task::Classify,
        epochs: cfg.training.finetune_epochs,
        trainable: head_params,
    }
    .run(encoder)
}

/// Metric report of a classifier checkpoint on a split of the data the
/// checkpoint was trained on.
pub fn run_evaluate(checkpoint: &Checkpoint<f64>, split: Split) -> Result<MetricReport> {
    let meta = &checkpoint.metadata;
    let data: DataConfig = serde_json::from_value(
        meta.get("data")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata has no data section".into()))?,
    )?;
    let batch_size = meta.get("batch_size").and_then(|v| v.as_u64()).unwrap_or(256) as usize;
    let jets = load_split(&data, split, data.eval_jets)?;
    evaluate(&checkpoint.encoder, &jets, data.nmax, batch_size)
}

/// Outcome of pretrain → fine-tune → test evaluation, or of a supervised
/// run followed by test evaluation.
pub struct Lifecycle {
    pub pretrain: Option<RunOutcome>,
    pub classifier: RunOutcome,
    pub test_report: MetricReport,
}

pub fn run_lifecycle(cfg: &RunConfig) -> Result<Lifecycle> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.data)?;
    let (pretrain, classifier) = if cfg.objective.is_pretraining() {
        let pre = run_pretrain(cfg, &data)?;
        let fine = run_finetune(cfg, &data, &pre.best)?;
        (Some(pre), fine)
    } else {
        (None, run_supervised(cfg, &data)?)
    };
    let test_report = run_evaluate(&classifier.best, Split::Test)?;
    Ok(Lifecycle {
        pretrain,
        classifier,
        test_report,
    })
}

/// Masked-particle reconstruction error of the model and of the per-feature
/// training mean, on the same masks of the validation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpmDiagnostics {
    pub model_mse: f64,
    pub mean_mse: f64,
}

/// Continuous-feature squared error summed per token, averaged over masked
/// tokens.
pub fn mpm_diagnostics(encoder: &Encoder<f64>, cfg: &RunConfig, data: &Dataset) -> Result<MpmDiagnostics> {
    let nmax = cfg.data.nmax;
    let mut sum = [0.0; N_CONTINUOUS_FEATURES];
    let mut n = 0usize;
    for chunk in data.train.chunks(cfg.training.batch_size) {
        let batch: JetBatch<f64> = build_batch_compact(chunk, nmax)?;
        let f = batch.features.shape()[2];
        for (slot, _) in batch.mask.iter().enumerate().filter(|(_, &m)| m) {
            for (k, s) in sum.iter_mut().enumerate() {
                *s += batch.features.data()[slot * f + k];
            }
            n += 1;
        }
    }
    let mean = sum.map(|s| s / n as f64);
    let mut rng = substream(cfg.seed, STREAM_VAL);
    let (mut model, mut baseline, mut masked) = (0.0, 0.0, 0usize);
    for chunk in data.val.chunks(cfg.training.batch_size) {
        let batch: JetBatch<f64> = build_batch_compact(chunk, nmax)?;
        let plan: MaskPlan<f64> = make_mask_plan(&batch, MASK_RATE, &mut rng)?;
        if plan.n_masked() == 0 {
            continue;
        }
        let tape = Tape::new();
        let g = encoder.bind(&tape, |_| false);
        let enc = g.encode_masked(&batch, &plan, None)?;
        let pred = g.mpm_decode(enc.tokens, &plan)?.value();
        let f = pred.shape()[1];
        for (r, target) in plan.continuous_targets.data().chunks(N_CONTINUOUS_FEATURES).enumerate() {
            for (k, &y) in target.iter().enumerate() {
                model += (pred.data()[r * f + k] - y).powi(2);
                baseline += (mean[k] - y).powi(2);
            }
        }
        masked += plan.n_masked();
    }
    if masked == 0 {
        return Err(Error::Degenerate("no maskable particles in the validation set".into()));
    }
    Ok(MpmDiagnostics {
        model_mse: model / masked as f64,
        mean_mse: baseline / masked as f64,
    })
}
