//! Training-step rules for the replay methods and the two reference bounds.
//!
//! Every step builds one tape holding the backbone, the method's losses and
//! (optionally) the Lipschitz regularizer, then takes a single SGD step.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BoundBackbone, ForwardTrace, MlpBackbone};
use crate::benchmark::stream::{Dataset, Task};
use crate::error::{Error, Result};
use crate::lider::{LiderConfig, LiderRegularizer, RegularizationTarget};
use crate::rehearsal::buffer::{BufferEntry, MemoryBuffer, PoisonConfig, ReplayBatch};
use crate::seed;
use crate::tape::{sgd_step, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Er,
    ErAce,
    Derpp,
    Gdumb,
    Joint,
    Finetune,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Er => "er",
            MethodKind::ErAce => "er_ace",
            MethodKind::Derpp => "derpp",
            MethodKind::Gdumb => "gdumb",
            MethodKind::Joint => "joint",
            MethodKind::Finetune => "finetune",
        }
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, MethodKind::Er | MethodKind::ErAce | MethodKind::Derpp | MethodKind::Gdumb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferSettings {
    pub capacity: usize,
    pub poison_p: f64,
}

impl Default for BufferSettings {
    fn default() -> Self {
        Self {
            capacity: 50,
            poison_p: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DerppSettings {
    /// Weight of the logit-matching term.
    pub alpha: f64,
    /// Weight of the replayed-label term.
    pub beta: f64,
}

impl Default for DerppSettings {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdumbSettings {
    pub fit_epochs: usize,
}

impl Default for GdumbSettings {
    fn default() -> Self {
        Self { fit_epochs: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    #[serde(default)]
    pub buffer: BufferSettings,
    #[serde(default)]
    pub derpp: DerppSettings,
    #[serde(default)]
    pub gdumb: GdumbSettings,
}

impl MethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            buffer: BufferSettings::default(),
            derpp: DerppSettings::default(),
            gdumb: GdumbSettings::default(),
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.buffer.capacity = capacity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.buffer.poison_p) {
            return Err(Error::Config(format!(
                "buffer.poison_p {} outside [0, 1]",
                self.buffer.poison_p
            )));
        }
        if self.derpp.alpha < 0.0 || self.derpp.beta < 0.0 {
            return Err(Error::Config("derpp weights must be non-negative".into()));
        }
        if self.kind.uses_buffer() && self.buffer.capacity == 0 {
            return Err(Error::Config(format!(
                "{} needs buffer.capacity >= 1",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

/// Step decay: multiply the rate by `gamma` at each listed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Passes over each task; 1 is the single-epoch setting.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Replay batch size; defaults to `batch_size`.
    pub buffer_batch_size: Option<usize>,
    pub hidden: Vec<usize>,
    pub lr_decay: Option<StepDecay>,
    /// Power-iteration steps for the logged Lipschitz products.
    pub eval_power_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch_size: 10,
            buffer_batch_size: None,
            hidden: vec![64, 64],
            lr_decay: None,
            eval_power_iters: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.buffer_batch_size == Some(0) {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("train.hidden needs at least one non-zero width".into()));
        }
        if self.eval_power_iters == 0 {
            return Err(Error::Config("train.eval_power_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn replay_batch_size(&self) -> usize {
        self.buffer_batch_size.unwrap_or(self.batch_size)
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend_from_slice(&self.hidden);
        dims.push(classes);
        dims
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_decay {
            Some(d) => {
                let drops = d.milestones.iter().filter(|&&m| epoch >= m).count();
                self.lr * d.gamma.powi(drops as i32)
            }
            None => self.lr,
        }
    }
}

/// Mini-batch from the current task.
#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<usize>,
}

impl StreamBatch {
    pub fn from_dataset(data: &Dataset, idx: &[usize]) -> Self {
        Self {
            x: data.features.select_rows(idx),
            y: idx.iter().map(|&i| data.labels[i]).collect(),
            ids: idx.iter().map(|&i| data.ids[i]).collect(),
        }
    }
}

/// Task-level information a step needs.
#[derive(Clone, Debug)]
pub struct TaskContext {
    pub task_id: usize,
    pub classes: Vec<usize>,
    /// Classes of every task up to and including this one.
    pub seen_classes: Vec<usize>,
}

/// Losses recorded for one optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub epoch: usize,
    pub step: u64,
    pub stream_loss: f64,
    pub replay_loss: f64,
    pub lider_loss: Option<f64>,
    /// The regularizer was enabled but had no batch to run on.
    pub lider_skipped: bool,
    pub total_loss: f64,
}

/// Mutable training state of one run.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: MlpBackbone,
    pub buffer: MemoryBuffer,
    pub lider: Option<LiderRegularizer>,
    pub method: MethodConfig,
    pub train: TrainConfig,
    rng: ChaCha8Rng,
    spectral_rng: ChaCha8Rng,
    step: u64,
}

struct Objective<'t> {
    total: Var<'t>,
    stream: f64,
    replay: f64,
    designated: Option<ForwardTrace<'t>>,
}

impl Learner {
    pub fn new(
        model: MlpBackbone,
        method: MethodConfig,
        lider: Option<LiderConfig>,
        train: TrainConfig,
        run_seed: u64,
    ) -> Result<Self> {
        method.validate()?;
        train.validate()?;
        let depth = model.depth();
        let lider = lider.map(|cfg| LiderRegularizer::new(cfg, depth)).transpose()?;
        Ok(Self {
            buffer: MemoryBuffer::new(method.buffer.capacity, seed::derive(run_seed, seed::BUFFER)),
            model,
            lider,
            method,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed::derive(run_seed, seed::BATCHING)),
            spectral_rng: ChaCha8Rng::seed_from_u64(seed::derive(run_seed, seed::SPECTRAL)),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer step of the configured method on a stream batch.
    ///
    /// With `insert`, every example of the batch is then offered to the
    /// reservoir (DER++ entries carry the logits computed before the update).
    pub fn train_step(&mut self, batch: &StreamBatch, ctx: &TaskContext, lr: f64, insert: bool) -> Result<StepLog> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape, true);
        let stream_trace = bound.forward_with_trace(&batch.x)?;
        let obj = match self.method.kind {
            MethodKind::Er => self.er_objective(&bound, &stream_trace, batch)?,
            MethodKind::ErAce => self.er_ace_objective(&bound, &stream_trace, batch, ctx)?,
            MethodKind::Derpp => self.derpp_objective(&bound, &stream_trace, batch)?,
            MethodKind::Finetune | MethodKind::Joint => {
                let ce = stream_trace.logits().softmax_cross_entropy(&batch.y, None)?;
                Objective {
                    stream: ce.item()?,
                    replay: 0.0,
                    total: ce,
                    designated: None,
                }
            }
            MethodKind::Gdumb => {
                return Err(Error::Config("gdumb does not take stream steps; use gdumb_fit".into()))
            }
        };
        let designated = match self.lider.as_ref().map(|l| l.cfg.regularization_target) {
            Some(RegularizationTarget::Stream) => Some(stream_trace.clone()),
            Some(RegularizationTarget::Buffer) => obj.designated,
            None => None,
        };
        let (stream, replay) = (obj.stream, obj.replay);
        let log = self.finish_step(&tape, bound.weights(), obj.total, designated, lr, |log| {
            log.task = ctx.task_id;
            log.stream_loss = stream;
            log.replay_loss = replay;
        })?;
        if insert {
            let logits = (self.method.kind == MethodKind::Derpp).then(|| stream_trace.logits().to_tensor());
            self.insert_batch(batch, ctx, logits.as_ref());
        }
        Ok(log)
    }

    /// Offers a batch to the reservoir without training (GDumb's stream pass).
    pub fn observe(&mut self, batch: &StreamBatch, ctx: &TaskContext) {
        self.insert_batch(batch, ctx, None);
    }

    fn insert_batch(&mut self, batch: &StreamBatch, ctx: &TaskContext, logits: Option<&Tensor>) {
        let poison = (self.method.buffer.poison_p > 0.0).then(|| PoisonConfig {
            p: self.method.buffer.poison_p,
            pool: ctx.classes.clone(),
        });
        for (r, (&y, &id)) in batch.y.iter().zip(&batch.ids).enumerate() {
            let entry = BufferEntry {
                x: batch.x.row(r).to_vec(),
                y,
                true_label: y,
                stored_logits: logits.map(|l| l.row(r).to_vec()),
                task_id: ctx.task_id,
                example_id: id,
                insertion_step: self.step,
            };
            self.buffer.reservoir_insert(entry, poison.as_ref());
        }
    }

    fn replay_batch(&mut self) -> Result<ReplayBatch> {
        let n = self.train.replay_batch_size();
        let idx = self.buffer.sample_indices(n, &mut self.rng)?;
        let entries: Vec<&BufferEntry> = idx.iter().map(|&i| &self.buffer.entries()[i]).collect();
        ReplayBatch::from_entries(&entries)
    }

    /// Cross-entropy over the concatenation of the stream batch and one
    /// replay batch.
    fn er_objective<'t>(
        &mut self,
        bound: &BoundBackbone<'t>,
        stream_trace: &ForwardTrace<'t>,
        batch: &StreamBatch,
    ) -> Result<Objective<'t>> {
        let ce_s = stream_trace.logits().softmax_cross_entropy(&batch.y, None)?;
        if self.buffer.is_empty() {
            return Ok(Objective {
                stream: ce_s.item()?,
                replay: 0.0,
                total: ce_s,
                designated: None,
            });
        }
        let rb = self.replay_batch()?;
        let trace = bound.forward_with_trace(&rb.x)?;
        let ce_b = trace.logits().softmax_cross_entropy(&rb.y, None)?;
        let (ns, nb) = (batch.y.len() as f64, rb.len() as f64);
        let total = ce_s.scale(ns / (ns + nb)).add(ce_b.scale(nb / (ns + nb)))?;
        Ok(Objective {
            stream: ce_s.item()?,
            replay: ce_b.item()?,
            total,
            designated: Some(trace),
        })
    }

    /// Stream examples: cross-entropy restricted to the current task's
    /// classes. Replay examples: cross-entropy over every class seen so far.
    fn er_ace_objective<'t>(
        &mut self,
        bound: &BoundBackbone<'t>,
        stream_trace: &ForwardTrace<'t>,
        batch: &StreamBatch,
        ctx: &TaskContext,
    ) -> Result<Objective<'t>> {
        let ce_s = stream_trace
            .logits()
            .softmax_cross_entropy(&batch.y, Some(&ctx.classes))?;
        if self.buffer.is_empty() {
            return Ok(Objective {
                stream: ce_s.item()?,
                replay: 0.0,
                total: ce_s,
                designated: None,
            });
        }
        let rb = self.replay_batch()?;
        let trace = bound.forward_with_trace(&rb.x)?;
        let ce_b = trace
            .logits()
            .softmax_cross_entropy(&rb.y, Some(&ctx.seen_classes))?;
        Ok(Objective {
            stream: ce_s.item()?,
            replay: ce_b.item()?,
            total: ce_s.add(ce_b)?,
            designated: Some(trace),
        })
    }

    /// `CE(stream) + α·MSE(logits, stored logits) + β·CE(replay)`, with the
    /// two replay terms on independently sampled batches.
    fn derpp_objective<'t>(
        &mut self,
        bound: &BoundBackbone<'t>,
        stream_trace: &ForwardTrace<'t>,
        batch: &StreamBatch,
    ) -> Result<Objective<'t>> {
        let ce_s = stream_trace.logits().softmax_cross_entropy(&batch.y, None)?;
        if self.buffer.is_empty() {
            return Ok(Objective {
                stream: ce_s.item()?,
                replay: 0.0,
                total: ce_s,
                designated: None,
            });
        }
        let tape = bound.tape();
        let first = self.replay_batch()?;
        let stored = first
            .logits
            .clone()
            .ok_or_else(|| Error::Config("replayed entry has no stored logits".into()))?;
        let trace = bound.forward_with_trace(&first.x)?;
        let mse = trace.logits().mse(tape.constant(stored))?;
        let second = self.replay_batch()?;
        let ce_b = bound
            .forward_with_trace(&second.x)?
            .logits()
            .softmax_cross_entropy(&second.y, None)?;
        let replay = mse.scale(self.method.derpp.alpha).add(ce_b.scale(self.method.derpp.beta))?;
        Ok(Objective {
            stream: ce_s.item()?,
            replay: replay.item()?,
            total: ce_s.add(replay)?,
            designated: Some(trace),
        })
    }

    /// Supervised step on a replay batch, regularized on that same batch.
    fn replay_fit_step(&mut self, rb: &ReplayBatch, lr: f64) -> Result<StepLog> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape, true);
        let trace = bound.forward_with_trace(&rb.x)?;
        let ce = trace.logits().softmax_cross_entropy(&rb.y, None)?;
        let replay = ce.item()?;
        self.finish_step(&tape, bound.weights(), ce, Some(trace), lr, |log| log.replay_loss = replay)
    }

    /// Adds the regularizer, backpropagates, and updates weights and targets.
    fn finish_step<'t>(
        &mut self,
        tape: &'t Tape,
        weights: &[Var<'t>],
        base: Var<'t>,
        designated: Option<ForwardTrace<'t>>,
        lr: f64,
        fill: impl FnOnce(&mut StepLog),
    ) -> Result<StepLog> {
        let mut log = StepLog {
            step: self.step,
            ..StepLog::default()
        };
        fill(&mut log);
        let mut total = base;
        let mut terms = None;
        if let Some(reg) = self.lider.as_mut() {
            match designated {
                Some(trace) => {
                    let t = reg.terms(&trace, self.spectral_rng.next_u64())?;
                    log.lider_loss = Some(t.total.item()?);
                    total = total.add(t.total)?;
                    terms = Some(t);
                }
                None => log.lider_skipped = true,
            }
        }
        log.total_loss = total.item()?;
        if !log.total_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
        }
        let grads = tape.backward(total)?;
        let g: Vec<Tensor> = weights.iter().map(|w| grads.wrt(*w)).collect();
        sgd_step(self.model.weights_mut(), &g, lr)?;
        if let (Some(reg), Some(t)) = (self.lider.as_mut(), terms.as_ref()) {
            reg.update_targets(t, &grads, lr)?;
        }
        self.step += 1;
        Ok(log)
    }

    /// Shuffled mini-batch index lists for one pass over `n` examples.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.train.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// All epochs of one task. Reservoir insertion happens in the first
    /// epoch only; GDumb only fills its buffer here.
    pub fn train_on_task(&mut self, task: &Task, ctx: &TaskContext) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        for epoch in 0..self.train.epochs {
            let lr = self.train.lr_at(epoch);
            for idx in self.epoch_batches(task.train.len()) {
                let batch = StreamBatch::from_dataset(&task.train, &idx);
                if self.method.kind == MethodKind::Gdumb {
                    if epoch == 0 {
                        self.observe(&batch, ctx);
                    }
                    continue;
                }
                let mut log = self.train_step(&batch, ctx, lr, epoch == 0)?;
                log.epoch = epoch;
                logs.push(log);
            }
        }
        Ok(logs)
    }
}

/// Trains a freshly initialized model on buffer contents only.
///
/// The result depends only on `entries`, the configuration and `seed`.
pub fn gdumb_fit(
    entries: &[BufferEntry],
    layer_dims: &[usize],
    train: &TrainConfig,
    fit_epochs: usize,
    lider: Option<&LiderConfig>,
    seed: u64,
) -> Result<(MlpBackbone, Vec<StepLog>)> {
    if entries.is_empty() {
        return Err(Error::Empty("gdumb_fit needs a non-empty buffer".into()));
    }
    let model = MlpBackbone::new(layer_dims, seed::derive(seed, seed::MODEL_INIT))?;
    let method = MethodConfig::new(MethodKind::Gdumb).with_capacity(1);
    let mut learner = Learner::new(model, method, lider.cloned(), train.clone(), seed::derive(seed, seed::GDUMB))?;
    let mut logs = Vec::new();
    for epoch in 0..fit_epochs {
        let lr = train.lr_at(epoch);
        for idx in learner.epoch_batches(entries.len()) {
            let picked: Vec<&BufferEntry> = idx.iter().map(|&i| &entries[i]).collect();
            let rb = ReplayBatch::from_entries(&picked)?;
            let mut log = learner.replay_fit_step(&rb, lr)?;
            log.epoch = epoch;
            logs.push(log);
        }
    }
    Ok((learner.model, logs))
}

/// Sequential training on every task with no countermeasure to forgetting.
pub fn finetune_run(tasks: &[Task], layer_dims: &[usize], train: &TrainConfig, seed: u64) -> Result<MlpBackbone> {
    let model = MlpBackbone::new(layer_dims, seed::derive(seed, seed::MODEL_INIT))?;
    let mut learner = Learner::new(model, MethodConfig::new(MethodKind::Finetune), None, train.clone(), seed)?;
    let mut seen = Vec::new();
    for task in tasks {
        seen.extend_from_slice(&task.classes);
        let ctx = TaskContext {
            task_id: task.id,
            classes: task.classes.clone(),
            seen_classes: seen.clone(),
        };
        learner.train_on_task(task, &ctx)?;
    }
    Ok(learner.model)
}

/// All tasks merged into one i.i.d. task.
pub fn merge_tasks(tasks: &[Task]) -> Result<Task> {
    let trains: Vec<&Dataset> = tasks.iter().map(|t| &t.train).collect();
    let tests: Vec<&Dataset> = tasks.iter().map(|t| &t.test).collect();
    Ok(Task {
        id: 0,
        classes: tasks.iter().flat_map(|t| t.classes.iter().copied()).collect(),
        train: Dataset::concat(&trains)?,
        test: Dataset::concat(&tests)?,
    })
}

/// Upper bound: the union of all tasks trained as a single task.
pub fn joint_fit(tasks: &[Task], layer_dims: &[usize], train: &TrainConfig, seed: u64) -> Result<MlpBackbone> {
    finetune_run(&[merge_tasks(tasks)?], layer_dims, train, seed)
}
