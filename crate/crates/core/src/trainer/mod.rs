//! Training loop: curriculum-driven patchify, teacher forcing, class dropout
//! for guidance, AdamW, clipping, metrics and checkpoints.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{seq_len_at_level, train_flops_6wn};
use crate::curriculum::{Lambda, LrSchedule, PatchSchedule};
use crate::data::{Dataset, TokenGrid};
use crate::error::{NppError, Result};
use crate::objective::{ntp_loss, patch_ce_loss_flat};
use crate::patching::{patch_positions, patchify_embeddings, patchify_labels_flat, PatchSpec};
use crate::rng::{self, Purpose};
use crate::tensor::{log_sum_exp, Array, Dtype, Float, Graph, Var};
use crate::transformer::{Model, ModelConfig, Position2D, SequenceInput};

pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Patch curriculum with patch-wise cross-entropy.
    #[default]
    Npp,
    /// Plain next-token training, the reference baseline.
    Ntp,
}

fn default_lambda() -> Lambda {
    Lambda::new(1, 2).expect("1/2")
}
fn default_levels() -> usize {
    2
}
fn default_base_lr() -> f64 {
    1e-4
}
fn default_end_lr() -> f64 {
    1e-5
}
fn default_reference_batch() -> usize {
    256
}
fn default_decay_fraction() -> f64 {
    0.2
}
fn default_batch_size() -> usize {
    256
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_log_every() -> u64 {
    100
}
fn default_dtype() -> Dtype {
    Dtype::F32
}

/// Everything a run needs. JSON keys mirror the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Total optimizer steps `T`. Exactly one of this and `epochs` is set.
    #[serde(default)]
    pub total_steps: Option<u64>,
    /// `T = epochs * ceil(dataset / batch)`.
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default = "default_lambda")]
    pub lambda: Lambda,
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Explicit side list, e.g. `[4, 1]`; overrides `levels`.
    #[serde(default)]
    pub sides: Option<Vec<usize>>,
    /// Train at one fixed side for the whole run (ablation).
    #[serde(default)]
    pub fixed_side: Option<usize>,
    #[serde(default)]
    pub objective: Objective,
    /// Learning rate at `lr_reference_batch`; scaled linearly with batch size.
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_end_lr")]
    pub end_lr: f64,
    #[serde(default = "default_reference_batch")]
    pub lr_reference_batch: usize,
    /// Per-segment warmup; `None` means one epoch.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default = "default_decay_fraction")]
    pub decay_fraction: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Zero the AdamW moments at each segment boundary.
    #[serde(default)]
    pub reset_optimizer_at_segments: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub eval_every: Option<u64>,
    /// Cap on held-out grids scored at each interval evaluation.
    #[serde(default)]
    pub eval_limit: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Default hyper-parameters around `model`, run for `total_steps`.
    pub fn new(model: ModelConfig, total_steps: u64) -> Self {
        RunConfig {
            model,
            total_steps: Some(total_steps),
            epochs: None,
            lambda: default_lambda(),
            levels: default_levels(),
            sides: None,
            fixed_side: None,
            objective: Objective::Npp,
            base_lr: default_base_lr(),
            end_lr: default_end_lr(),
            lr_reference_batch: default_reference_batch(),
            warmup_steps: None,
            decay_fraction: default_decay_fraction(),
            batch_size: default_batch_size(),
            grad_clip: default_grad_clip(),
            optimizer: AdamWConfig::default(),
            reset_optimizer_at_segments: false,
            seed: 0,
            dtype: default_dtype(),
            log_every: default_log_every(),
            eval_every: None,
            eval_limit: None,
            checkpoint_every: None,
            data: None,
            eval_data: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NppError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.total_steps.is_some() == self.epochs.is_some() {
            return Err(NppError::Config("set exactly one of total_steps and epochs".into()));
        }
        if self.batch_size == 0 || self.lr_reference_batch == 0 {
            return Err(NppError::Config(
                "batch_size and lr_reference_batch must be positive".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(NppError::Config("grad_clip must be positive".into()));
        }
        if self.log_every == 0 || self.eval_every == Some(0) || self.checkpoint_every == Some(0) {
            return Err(NppError::Config(
                "logging, eval and checkpoint intervals must be positive".into(),
            ));
        }
        self.lr_schedule(0).validate()?;
        if let Some(side) = self.fixed_side {
            PatchSpec::new(self.model.grid_h, self.model.grid_w, side)?;
        }
        if self.objective == Objective::Ntp && (self.fixed_side.is_some() || self.sides.is_some()) {
            return Err(NppError::Config("the ntp objective trains at patch side 1 only".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.batch_size).max(1) as u64
    }

    pub fn resolve_total_steps(&self, dataset_len: usize) -> u64 {
        match (self.total_steps, self.epochs) {
            (Some(t), _) => t,
            (None, Some(e)) => e * self.steps_per_epoch(dataset_len),
            (None, None) => 0,
        }
    }

    fn lr_schedule(&self, warmup_steps: u64) -> LrSchedule {
        let scale = self.batch_size as f64 / self.lr_reference_batch as f64;
        LrSchedule {
            base_lr: self.base_lr * scale,
            end_lr: self.end_lr * scale,
            warmup_steps,
            decay_fraction: self.decay_fraction,
        }
    }

    /// Patch schedule and learning-rate shape for a dataset of `dataset_len` grids.
    pub fn resolve(&self, dataset_len: usize) -> Result<(PatchSchedule, LrSchedule)> {
        self.validate()?;
        let total = self.resolve_total_steps(dataset_len);
        let schedule = match (self.objective, self.fixed_side) {
            (Objective::Ntp, _) => PatchSchedule::constant(total, 1)?,
            (Objective::Npp, Some(side)) => PatchSchedule::constant(total, side)?,
            (Objective::Npp, None) => PatchSchedule::build(total, self.lambda, self.levels, self.sides.as_deref())?,
        };
        for seg in schedule.segments() {
            PatchSpec::new(self.model.grid_h, self.model.grid_w, seg.side)?;
        }
        let warmup = self.warmup_steps.unwrap_or_else(|| self.steps_per_epoch(dataset_len));
        Ok((schedule, self.lr_schedule(warmup)))
    }

    /// Equal up to file locations and logging cadence, which may change on resume.
    pub fn check_resumable(&self, other: &RunConfig) -> Result<()> {
        let strip = |c: &RunConfig| RunConfig {
            data: None,
            eval_data: None,
            output_dir: None,
            log_every: 1,
            eval_every: None,
            eval_limit: None,
            checkpoint_every: None,
            ..c.clone()
        };
        if self.model != other.model {
            return Err(NppError::Checkpoint(format!(
                "config mismatch: model {:?} vs {:?}",
                self.model, other.model
            )));
        }
        if strip(self) != strip(other) {
            return Err(NppError::Checkpoint("config mismatch: run settings differ".into()));
        }
        Ok(())
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        check_dataset(&self.model, data)
    }
}

pub fn check_dataset(model: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.height() != model.grid_h || data.width() != model.grid_w {
        return Err(NppError::Config(format!(
            "dataset grid {}x{} does not match model grid {}x{}",
            data.height(),
            data.width(),
            model.grid_h,
            model.grid_w
        )));
    }
    if data.vocab() as usize > model.vocab_size || data.num_classes() as usize > model.num_classes {
        return Err(NppError::Config(format!(
            "dataset vocab {} / classes {} exceed model vocab {} / classes {}",
            data.vocab(),
            data.num_classes(),
            model.vocab_size,
            model.num_classes
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    /// Steps completed after this update.
    pub step: u64,
    pub patch_side: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
    pub cum_flops: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub nll: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

pub struct Trainer<T> {
    config: RunConfig,
    schedule: PatchSchedule,
    lr: LrSchedule,
    dataset_len: usize,
    model: Model<T>,
    optim: AdamW<T>,
    step: u64,
    cum_flops: u128,
}

impl<T: Float> Trainer<T> {
    /// The element type wins over `config.dtype`, which only steers the CLI.
    pub fn new(mut config: RunConfig, dataset_len: usize) -> Result<Self> {
        if dataset_len == 0 {
            return Err(NppError::Config("training dataset is empty".into()));
        }
        config.dtype = T::DTYPE;
        let (schedule, lr) = config.resolve(dataset_len)?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optim = AdamW::new(config.optimizer, model.params());
        Ok(Trainer {
            config,
            schedule,
            lr,
            dataset_len,
            model,
            optim,
            step: 0,
            cum_flops: 0,
        })
    }

    pub(crate) fn from_parts(
        config: RunConfig,
        dataset_len: usize,
        model: Model<T>,
        optim: AdamW<T>,
        step: u64,
        cum_flops: u128,
    ) -> Result<Self> {
        let (schedule, lr) = config.resolve(dataset_len)?;
        if step > schedule.total_steps() {
            return Err(NppError::Checkpoint(format!(
                "step {step} beyond schedule length {}",
                schedule.total_steps()
            )));
        }
        Ok(Trainer {
            config,
            schedule,
            lr,
            dataset_len,
            model,
            optim,
            step,
            cum_flops,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn schedule(&self) -> &PatchSchedule {
        &self.schedule
    }

    pub fn lr_schedule(&self) -> &LrSchedule {
        &self.lr
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optim
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn dataset_len(&self) -> usize {
        self.dataset_len
    }

    pub fn cum_flops(&self) -> u128 {
        self.cum_flops
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps()
    }

    /// Dataset indices for `step`: epoch-wise permutations, the final short
    /// batch of an epoch topped up from the start of the same permutation.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.dataset_len;
        let per_epoch = self.config.steps_per_epoch(n);
        let (epoch, within) = (step / per_epoch, (step % per_epoch) as usize);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(self.config.seed, Purpose::Batch, epoch));
        let b = self.config.batch_size;
        (0..b).map(|i| perm[(within * b + i) % n]).collect()
    }

    /// One optimizer step on the batch the schedule assigns to the current step.
    pub fn step_on(&mut self, data: &Dataset) -> Result<StepMetrics> {
        if data.len() != self.dataset_len {
            return Err(NppError::Config(format!(
                "trainer sized for {} grids, got {}",
                self.dataset_len,
                data.len()
            )));
        }
        let batch: Vec<&TokenGrid> = self
            .batch_indices(self.step)
            .into_iter()
            .map(|i| &data.grids()[i])
            .collect();
        self.train_step(&batch)
    }

    /// Loss and parameter gradients at the current step without updating anything.
    pub fn loss_and_grads(&self, batch: &[&TokenGrid]) -> Result<(f64, Vec<Array<T>>)> {
        let side = self.schedule.patch_side_at(self.step)?;
        batch_loss_and_grads(
            &self.model,
            self.config.objective,
            batch,
            side,
            self.config.seed,
            self.step,
            true,
        )
    }

    pub fn train_step(&mut self, batch: &[&TokenGrid]) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(NppError::Contract(format!("schedule finished at step {}", self.step)));
        }
        let started = Instant::now();
        let seg = *self.schedule.segment_at(self.step)?;
        if self.config.reset_optimizer_at_segments && self.step == seg.start && self.step > 0 {
            self.optim.reset_moments();
        }
        let lr = self.lr.lr_at(&self.schedule, self.step)?;
        let (loss, mut grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() {
            return Err(NppError::Numeric(format!(
                "non-finite loss {loss} at step {} (patch side {}, lr {lr:e})",
                self.step, seg.side
            )));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(NppError::Numeric(format!(
                "non-finite gradient norm at step {} (patch side {}, loss {loss})",
                self.step, seg.side
            )));
        }
        self.optim.update(self.model.params_mut(), &grads, lr)?;
        let cfg = &self.config.model;
        let seq = seq_len_at_level((cfg.grid_h, cfg.grid_w), seg.side, false)?;
        self.cum_flops += train_flops_6wn(cfg.param_count() as u128, seq as u128, batch.len() as u128);
        self.step += 1;
        let secs = started.elapsed().as_secs_f64();
        Ok(StepMetrics {
            step: self.step,
            patch_side: seg.side,
            lr,
            train_loss: loss,
            grad_norm,
            tokens_per_sec: (batch.len() * cfg.seq_len()) as f64 / secs.max(1e-9),
            cum_flops: self.cum_flops,
        })
    }

    /// Trains until `until` steps are complete (or the schedule ends),
    /// writing metrics and checkpoints under `output_dir` when set.
    pub fn run(&mut self, train: &Dataset, eval: Option<&Dataset>, until: Option<u64>) -> Result<Vec<MetricsRow>> {
        self.run_with(train, eval, until, |_| {})
    }

    /// [`Trainer::run`] with a callback per metrics row.
    pub fn run_with<F: FnMut(&MetricsRow)>(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        until: Option<u64>,
        mut on_row: F,
    ) -> Result<Vec<MetricsRow>> {
        self.config.check_dataset(train)?;
        if let Some(e) = eval {
            self.config.check_dataset(e)?;
        }
        let until = until.unwrap_or(u64::MAX).min(self.total_steps());
        let out_dir = self.config.output_dir.clone();
        let mut sink = match &out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| NppError::io(dir, e))?;
                Some(MetricsWriter::open(dir.join("metrics.csv"), self.step > 0)?)
            }
            None => None,
        };
        let mut rows = Vec::new();
        let mut window = Vec::new();
        while self.step < until {
            let m = self.step_on(train)?;
            window.push(m.train_loss);
            let last = self.step == until;
            if self.step.is_multiple_of(self.config.log_every) || last {
                let eval_due = self.config.eval_every.is_some_and(|k| self.step.is_multiple_of(k)) || self.is_done();
                let eval_nll = match eval {
                    Some(data) if eval_due => Some(self.evaluate_limited(data)?.nll),
                    _ => None,
                };
                let row = MetricsRow {
                    step: m.step,
                    patch_side: m.patch_side,
                    lr: m.lr,
                    train_loss: window.iter().sum::<f64>() / window.len() as f64,
                    eval_nll,
                    tokens_per_sec: m.tokens_per_sec,
                    cum_flops: m.cum_flops,
                };
                window.clear();
                if let Some(s) = sink.as_mut() {
                    s.write(&row)?;
                }
                on_row(&row);
                rows.push(row);
            }
            if let Some(dir) = &out_dir {
                if self
                    .config
                    .checkpoint_every
                    .is_some_and(|k| self.step.is_multiple_of(k))
                    || last
                {
                    self.save(dir.join(format!("step-{:08}.ckpt", self.step)))?;
                }
            }
        }
        Ok(rows)
    }

    fn evaluate_limited(&self, data: &Dataset) -> Result<EvalResult> {
        match self.config.eval_limit {
            Some(limit) if limit < data.len() => {
                let subset = Dataset::new(
                    data.vocab(),
                    data.height(),
                    data.width(),
                    data.num_classes(),
                    data.grids()[..limit].to_vec(),
                )?;
                evaluate(&self.model, &subset)
            }
            _ => evaluate(&self.model, data),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(self, path)
    }
}

/// Builds the training graph for one batch and returns the mean loss and
/// per-parameter gradients. `dropout` enables dropout and class dropout.
pub fn batch_loss_and_grads<T: Float>(
    model: &Model<T>,
    objective: Objective,
    batch: &[&TokenGrid],
    side: usize,
    seed: u64,
    step: u64,
    dropout: bool,
) -> Result<(f64, Vec<Array<T>>)> {
    let graph = Graph::<T>::new();
    let bound = model.bind(&graph, true);
    let loss = batch_loss(model, &bound, objective, batch, side, seed, step, dropout)?;
    graph.backward(loss)?;
    let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
    let grads = bound
        .vars()
        .iter()
        .map(|&v| graph.take_grad(v).unwrap_or_else(|| Array::zeros(&v.shape())))
        .collect();
    Ok((value, grads))
}

#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'g, T: Float>(
    model: &Model<T>,
    bound: &crate::transformer::BoundParams<'g, T>,
    objective: Objective,
    batch: &[&TokenGrid],
    side: usize,
    seed: u64,
    step: u64,
    dropout: bool,
) -> Result<Var<'g, T>> {
    let cfg = model.config();
    if batch.is_empty() {
        return Err(NppError::Contract("empty batch".into()));
    }
    for g in batch {
        if g.height() != cfg.grid_h || g.width() != cfg.grid_w {
            return Err(NppError::Dimension(format!(
                "grid {}x{} vs model grid {}x{}",
                g.height(),
                g.width(),
                cfg.grid_h,
                cfg.grid_w
            )));
        }
    }
    let rate = if dropout { cfg.class_dropout } else { 0.0 };
    let dropped = class_dropout_mask(seed, step, batch.len(), rate);
    let mut inputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len() * cfg.seq_len());
    let spec = PatchSpec::new(cfg.grid_h, cfg.grid_w, side)?;
    for (grid, &drop_class) in batch.iter().zip(&dropped) {
        let class = (!drop_class).then_some(grid.class_label() as usize);
        let cond = model.class_embedding(bound, class)?;
        let ids = grid.token_ids();
        let input = match objective {
            Objective::Npp => {
                let patches = patchify_embeddings(model.embed_tokens(bound, &ids)?, &spec)?;
                let m = spec.num_patches();
                let mut positions = vec![Position2D::new(0, 0)];
                positions.extend_from_slice(&patch_positions(&spec)[..m - 1]);
                let embeddings = if m > 1 {
                    Var::concat(&[cond, patches.slice(0..m - 1, 0..cfg.d_model)?], 0)?
                } else {
                    cond
                };
                labels.extend(patchify_labels_flat(&ids, &spec)?);
                SequenceInput { embeddings, positions }
            }
            Objective::Ntp => {
                if side != 1 {
                    return Err(NppError::Contract("next-token objective runs at side 1".into()));
                }
                let n = ids.len();
                let mut positions = vec![Position2D::new(0, 0)];
                positions.extend((0..n - 1).map(|i| Position2D::new(i / cfg.grid_w, i % cfg.grid_w)));
                let embeddings = if n > 1 {
                    Var::concat(&[cond, model.embed_tokens(bound, &ids[..n - 1])?], 0)?
                } else {
                    cond
                };
                labels.extend_from_slice(&ids);
                SequenceInput { embeddings, positions }
            }
        };
        inputs.push(input);
    }
    let mut drop_rng = rng::stream(seed, Purpose::Dropout, step);
    let logits = model.forward(bound, &inputs, dropout.then_some(&mut drop_rng))?;
    // Every sample has the same token count, so one normalisation by the
    // batch total equals the mean of per-sample losses.
    let total_tokens = batch.len() * cfg.seq_len();
    match objective {
        Objective::Npp => patch_ce_loss_flat(logits, &labels, spec.tokens_per_patch(), total_tokens),
        Objective::Ntp => ntp_loss(logits, &labels),
    }
}

/// Which samples of the batch at `step` swap their class for the null class.
pub fn class_dropout_mask(seed: u64, step: u64, batch_len: usize, rate: f64) -> Vec<bool> {
    let mut rng = rng::stream(seed, Purpose::ClassDrop, step);
    (0..batch_len).map(|_| rng.gen::<f64>() < rate).collect()
}

/// Teacher-forced NLL and top-1 accuracy at patch side 1.
pub fn evaluate<T: Float>(model: &Model<T>, data: &Dataset) -> Result<EvalResult> {
    check_dataset(model.config(), data)?;
    let mut acc = EvalAccumulator::default();
    for chunk in data.grids().chunks(16) {
        let graph = Graph::<T>::new();
        let bound = model.bind(&graph, false);
        let refs: Vec<&TokenGrid> = chunk.iter().collect();
        let inputs = ntp_inputs(model, &bound, &refs)?;
        let logits = model.forward::<rand_chacha::ChaCha8Rng>(&bound, &inputs, None)?.value();
        let n = model.config().seq_len();
        for (b, grid) in chunk.iter().enumerate() {
            for (i, &label) in grid.tokens().iter().enumerate() {
                let row: Vec<f64> = logits
                    .row(b * n + i)
                    .iter()
                    .map(|x| x.to_f64().unwrap_or(f64::NAN))
                    .collect();
                acc.add(&row, label as usize)?;
            }
        }
    }
    acc.finish()
}

/// Same metric with logits supplied by `predict`, one `N x V` row set per grid.
pub fn evaluate_with<F>(data: &Dataset, mut predict: F) -> Result<EvalResult>
where
    F: FnMut(&TokenGrid) -> Result<Vec<Vec<f64>>>,
{
    let mut acc = EvalAccumulator::default();
    for grid in data.grids() {
        let rows = predict(grid)?;
        if rows.len() != grid.tokens().len() {
            return Err(NppError::Dimension(format!(
                "{} logit rows for {} tokens",
                rows.len(),
                grid.tokens().len()
            )));
        }
        for (row, &label) in rows.iter().zip(grid.tokens()) {
            acc.add(row, label as usize)?;
        }
    }
    acc.finish()
}

fn ntp_inputs<'g, T: Float>(
    model: &Model<T>,
    bound: &crate::transformer::BoundParams<'g, T>,
    batch: &[&TokenGrid],
) -> Result<Vec<SequenceInput<'g, T>>> {
    let cfg = model.config();
    batch
        .iter()
        .map(|grid| {
            let ids = grid.token_ids();
            let n = ids.len();
            let cond = model.class_embedding(bound, Some(grid.class_label() as usize))?;
            let embeddings = if n > 1 {
                Var::concat(&[cond, model.embed_tokens(bound, &ids[..n - 1])?], 0)?
            } else {
                cond
            };
            let mut positions = vec![Position2D::new(0, 0)];
            positions.extend((0..n - 1).map(|i| Position2D::new(i / cfg.grid_w, i % cfg.grid_w)));
            Ok(SequenceInput { embeddings, positions })
        })
        .collect()
}

#[derive(Default)]
struct EvalAccumulator {
    nll: f64,
    correct: usize,
    tokens: usize,
}

impl EvalAccumulator {
    fn add(&mut self, logits: &[f64], label: usize) -> Result<()> {
        if label >= logits.len() {
            return Err(NppError::Index(format!("label {label} for {} logits", logits.len())));
        }
        self.nll += log_sum_exp(logits) - logits[label];
        let argmax = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > logits[best] { i } else { best });
        self.correct += usize::from(argmax == label);
        self.tokens += 1;
        Ok(())
    }

    fn finish(self) -> Result<EvalResult> {
        if self.tokens == 0 {
            return Err(NppError::Contract("nothing to evaluate".into()));
        }
        let nll = self.nll / self.tokens as f64;
        if !nll.is_finite() {
            return Err(NppError::Numeric(format!("non-finite eval NLL {nll}")));
        }
        Ok(EvalResult {
            nll,
            accuracy: self.correct as f64 / self.tokens as f64,
            tokens: self.tokens,
        })
    }
}

/// One metrics CSV line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub patch_side: usize,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub eval_nll: Option<f64>,
    pub tokens_per_sec: f64,
    pub cum_flops: u128,
}

pub const METRICS_HEADER: &str = "step,patch_side,lr,train_loss,eval_nll,tokens_per_sec,cum_flops";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let eval = self.eval_nll.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6e},{:.6},{},{:.1},{}",
            self.step, self.patch_side, self.lr, self.train_loss, eval, self.tokens_per_sec, self.cum_flops
        )
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricsWriter {
    /// Creates the file with a header, or appends when `append` and it exists.
    pub fn open(path: PathBuf, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| NppError::io(&path, e))?;
        let mut w = MetricsWriter { path, file };
        if !(append && exists) {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.line(&row.to_csv())
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text}").map_err(|e| NppError::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            vocab: 16,
            height: 4,
            width: 4,
            noise: 0.1,
            seed: 5,
        }
    }

    fn run_config(steps: u64) -> RunConfig {
        let mut model = ModelConfig::new(2, 16, 2, 16, (4, 4), 3);
        model.dropout = 0.1;
        model.class_dropout = 0.1;
        let mut c = RunConfig::new(model, steps);
        c.batch_size = 4;
        c.base_lr = 1e-3;
        c.lr_reference_batch = 4;
        c.warmup_steps = Some(2);
        c
    }

    #[test]
    fn class_dropout_rate_matches() {
        let n = 10_000;
        let dropped = (0..100u64)
            .flat_map(|step| class_dropout_mask(9, step, n / 100, 0.1))
            .filter(|&d| d)
            .count() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((dropped - 0.1 * n as f64).abs() < 3.0 * sigma, "{dropped}");
        assert!(class_dropout_mask(9, 0, 50, 0.0).iter().all(|&d| !d));
        assert!(class_dropout_mask(9, 0, 50, 1.0).iter().all(|&d| d));
    }

    #[test]
    fn class_dropout_routes_gradient_to_null_row() {
        let data = generate_dataset(&spec(), 4).unwrap();
        let batch: Vec<&TokenGrid> = data.grids().iter().collect();
        let null = 3;
        for (rate, null_only) in [(1.0, true), (0.0, false)] {
            let mut cfg = run_config(1).model;
            cfg.dropout = 0.0;
            cfg.class_dropout = rate;
            let model = Model::<f64>::new(cfg, 0).unwrap();
            let (_, grads) = batch_loss_and_grads(&model, Objective::Npp, &batch, 1, 0, 0, true).unwrap();
            let cls = &grads[1];
            for row in 0..=null {
                let touched = cls.row(row).iter().any(|&g| g != 0.0);
                let present = batch.iter().any(|g| g.class_label() as usize == row);
                let expected = if null_only { row == null } else { present };
                assert_eq!(touched, expected, "rate {rate} row {row}");
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = generate_dataset(&spec(), 24).unwrap();
        let run = || {
            let mut t = Trainer::<f32>::new(run_config(10), data.len()).unwrap();
            while !t.is_done() {
                t.step_on(&data).unwrap();
            }
            t.model().params().clone()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn warmup_first_step_is_a_no_op() {
        let data = generate_dataset(&spec(), 24).unwrap();
        let mut c = run_config(10);
        c.optimizer.weight_decay = 0.0;
        let mut t = Trainer::<f64>::new(c, data.len()).unwrap();
        let before = t.model().params().clone();
        let m = t.step_on(&data).unwrap();
        assert_eq!(m.lr, 0.0);
        assert_eq!(before.tensors(), t.model().params().tensors());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let t = Trainer::<f32>::new(run_config(10), 10).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        assert_eq!(seen.len(), 12);
        seen.truncate(10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn flops_counter_tracks_patch_side() {
        let data = generate_dataset(&spec(), 8).unwrap();
        let mut t = Trainer::<f32>::new(run_config(4), data.len()).unwrap();
        let w = t.config().model.param_count() as u128;
        let sides: Vec<usize> = (0..4).map(|_| t.step_on(&data).unwrap().patch_side).collect();
        assert_eq!(sides, vec![2, 2, 1, 1]);
        assert_eq!(t.cum_flops(), 6 * w * 4 * (4 + 4 + 16 + 16));
    }

    #[test]
    fn untrained_model_on_uniform_data_scores_ln_v() {
        let s = SyntheticSpec {
            noise: 1.0,
            num_classes: 2,
            vocab: 32,
            height: 4,
            width: 4,
            seed: 1,
        };
        let data = generate_dataset(&s, 64).unwrap();
        let model = Model::<f32>::new(ModelConfig::new(2, 16, 2, 32, (4, 4), 2), 3).unwrap();
        let r = evaluate(&model, &data).unwrap();
        assert!((r.nll / 32f64.ln() - 1.0).abs() < 0.02, "{}", r.nll);
    }

    #[test]
    fn dataset_mismatch_is_rejected() {
        let data = generate_dataset(&spec(), 4).unwrap();
        let model = Model::<f32>::new(ModelConfig::new(1, 16, 2, 16, (2, 8), 3), 3).unwrap();
        assert!(matches!(evaluate(&model, &data), Err(NppError::Config(_))));
    }

    #[test]
    fn metrics_csv_rows() {
        let data = generate_dataset(&spec(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut c = run_config(7);
        c.log_every = 2;
        c.output_dir = Some(dir.path().to_path_buf());
        let mut t = Trainer::<f32>::new(c, data.len()).unwrap();
        let rows = t.run(&data, Some(&data), None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6, 7]);
        assert_eq!(lines.len(), 5);
        assert!(rows.last().unwrap().eval_nll.is_some());
        assert!(dir.path().join("step-00000007.ckpt").exists());
    }
}
