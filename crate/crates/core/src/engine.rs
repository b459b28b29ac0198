//! The incremental-learning loop: strategy presets, per-task training
//! with freeze contracts and replay, observed evaluation in both
//! scenarios, and the accuracy matrix with its summary metrics.
//!
//! Strategy flags compose: W (warm-up on the first task), FixB (freeze
//! the backbone after warm-up), FixC (freeze classifiers of finished
//! tasks), FixBC (both), P (pre-allocate every task's classifier up
//! front), Lin/Cos (head geometry). The training softmax always spans
//! every allocated slot; frozen weights still shape the loss but receive
//! no updates.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{append_head_logits, ClassifierBank, HeadKind};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::optim::{Adam, AdamConfig};
use crate::seed::{derive_seed, rng};
use crate::stream::{LabeledExample, ReplayBuffer, Scenario, Task, TaskStream};
use crate::tensor::Tensor;
use crate::transformer::{prepare_batch, AttentionMode, Backbone};

/// Batch size used when extracting features for evaluation. Features are
/// bitwise independent of batching (padding invariance), so this only
/// affects speed.
pub const EVAL_CHUNK: usize = 64;

fn default_name() -> String {
    "custom".into()
}
fn default_epochs() -> usize {
    5
}
fn default_backbone_lr() -> f64 {
    1e-5
}
fn default_head_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_cosine_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    /// Label used in CSV rows and logs.
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: Scenario,
    pub head_kind: HeadKind,
    /// W: train the backbone jointly at the start of the first task.
    #[serde(default)]
    pub warm_up: bool,
    /// Override for the warm-up length; `None` uses the mode default
    /// (1 epoch bidirectional, 3 epochs causal).
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    /// FixB: freeze the backbone after warm-up (immediately when there is
    /// no warm-up).
    #[serde(default)]
    pub freeze_backbone: bool,
    /// FixC: freeze classifiers of finished tasks.
    #[serde(default)]
    pub freeze_old_heads: bool,
    /// P: allocate every task's classifier before training starts; future
    /// heads are trainable from allocation.
    #[serde(default)]
    pub preallocate_future: bool,
    #[serde(default)]
    pub replay_capacity_per_class: usize,
    /// Replay examples appended to each batch; `None` = batch_size / 4.
    #[serde(default)]
    pub replay_per_batch: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_backbone_lr")]
    pub backbone_lr: f64,
    #[serde(default = "default_head_lr")]
    pub head_lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_cosine_scale")]
    pub cosine_scale: f64,
    /// Sensitivity toggle: compute the loss over the current task's slots
    /// only instead of all allocated slots. Incompatible with replay and
    /// pre-allocation.
    #[serde(default)]
    pub restrict_loss_to_current_task: bool,
    /// SEQ* label: tightens the linear-head/no-replay rule from a warning
    /// to an error in class-incremental mode.
    #[serde(default)]
    pub starred: bool,
}

/// The named strategy rows the preset parser accepts.
pub const NAMED_PRESETS: [&str; 9] = [
    "SEQ(Lin)",
    "SEQ(Cos)",
    "SEQ(FixB+Cos)",
    "SEQ(FixC+Cos)",
    "SEQ(FixBC+Cos)",
    "SEQ(W+FixBC+Lin)",
    "SEQ(P+W+FixBC+Lin)",
    "SEQ*(W+FixBC+Cos)",
    "SEQ*(P+W+FixBC+Cos)",
];

/// Parse a preset label like `SEQ*(P+W+FixBC+Cos)` into a strategy with
/// default schedule values. Flags: W, P, FixB, FixC, FixBC, and exactly
/// one of Lin/Cos.
pub fn parse_preset(label: &str, scenario: Scenario) -> Result<StrategyConfig> {
    let (starred, rest) = if let Some(r) = label.strip_prefix("SEQ*(") {
        (true, r)
    } else if let Some(r) = label.strip_prefix("SEQ(") {
        (false, r)
    } else {
        return Err(Error::Validation(format!(
            "preset {label:?} must look like SEQ(<flags>) or SEQ*(<flags>)"
        )));
    };
    let flags = rest.strip_suffix(')').ok_or_else(|| {
        Error::Validation(format!("preset {label:?} is missing the closing parenthesis"))
    })?;

    let mut head_kind: Option<HeadKind> = None;
    let mut cfg = StrategyConfig {
        name: label.to_string(),
        scenario,
        head_kind: HeadKind::Linear,
        warm_up: false,
        warmup_epochs: None,
        freeze_backbone: false,
        freeze_old_heads: false,
        preallocate_future: false,
        replay_capacity_per_class: 0,
        replay_per_batch: None,
        epochs_per_task: default_epochs(),
        backbone_lr: default_backbone_lr(),
        head_lr: default_head_lr(),
        batch_size: default_batch(),
        weight_decay: default_weight_decay(),
        cosine_scale: default_cosine_scale(),
        restrict_loss_to_current_task: false,
        starred,
    };
    let set_head = |kind: HeadKind, head_kind: &mut Option<HeadKind>| -> Result<()> {
        if head_kind.replace(kind).is_some() {
            return Err(Error::Validation(format!(
                "preset {label:?} names more than one head geometry"
            )));
        }
        Ok(())
    };
    for flag in flags.split('+') {
        match flag {
            "W" => cfg.warm_up = true,
            "P" => cfg.preallocate_future = true,
            "FixB" => cfg.freeze_backbone = true,
            "FixC" => cfg.freeze_old_heads = true,
            "FixBC" => {
                cfg.freeze_backbone = true;
                cfg.freeze_old_heads = true;
            }
            "Lin" => set_head(HeadKind::Linear, &mut head_kind)?,
            "Cos" => set_head(HeadKind::CosineLinear, &mut head_kind)?,
            other => {
                return Err(Error::Validation(format!(
                    "preset {label:?} has unknown flag {other:?}"
                )))
            }
        }
    }
    cfg.head_kind = head_kind.ok_or_else(|| {
        Error::Validation(format!("preset {label:?} must name a head geometry (Lin or Cos)"))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_task == 0 {
            return Err(Error::Config("epochs_per_task must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [("backbone_lr", self.backbone_lr), ("head_lr", self.head_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.cosine_scale > 0.0 && self.cosine_scale.is_finite()) {
            return Err(Error::Config(format!(
                "cosine_scale must be positive, got {}",
                self.cosine_scale
            )));
        }
        if self.head_kind.is_prototype() {
            return Err(Error::Config(
                "observed classifiers are gradient-trained; prototype kinds are probe-only".into(),
            ));
        }
        if self.warmup_epochs.is_some() && !self.warm_up {
            return Err(Error::Config("warmup_epochs is set but warm_up is false".into()));
        }
        if self.restrict_loss_to_current_task
            && (self.replay_capacity_per_class > 0 || self.preallocate_future)
        {
            return Err(Error::Config(
                "restrict_loss_to_current_task is incompatible with replay and pre-allocation"
                    .into(),
            ));
        }
        if self.starred
            && self.head_kind == HeadKind::Linear
            && self.scenario == Scenario::Cil
            && self.replay_capacity_per_class == 0
        {
            return Err(Error::Validation(
                "SEQ* with linear heads in class-incremental mode needs replay capacity >= 1; \
                 without old data use a Cos preset"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Non-fatal advice surfaced in run logs.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.starred
            && self.head_kind == HeadKind::Linear
            && self.scenario == Scenario::Cil
            && self.replay_capacity_per_class == 0
        {
            out.push(format!(
                "{}: linear heads with no replay forget catastrophically in class-incremental \
                 mode; cosine heads are the no-replay choice",
                self.name
            ));
        }
        out
    }

    /// Warm-up epochs on the first task: explicit override, else 1 for
    /// bidirectional (encoder) backbones and 3 for causal (decoder) ones.
    pub fn resolved_warmup_epochs(&self, mode: AttentionMode) -> usize {
        if !self.warm_up {
            return 0;
        }
        self.warmup_epochs.unwrap_or(match mode {
            AttentionMode::Bidirectional => 1,
            AttentionMode::Causal => 3,
        })
    }

    pub fn resolved_replay_per_batch(&self) -> usize {
        self.replay_per_batch.unwrap_or(self.batch_size / 4)
    }
}

/// Everything one experiment owns and mutates.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub backbone: Backbone,
    pub bank: ClassifierBank,
    pub buffer: ReplayBuffer,
    pub trained_tasks: usize,
    pub master_seed: u64,
    replay_calls: u64,
}

impl EngineState {
    pub fn new(backbone: Backbone, strategy: &StrategyConfig, master_seed: u64) -> Self {
        let mut bank = ClassifierBank::new(strategy.scenario, backbone.config.d_model);
        bank.cosine_scale = strategy.cosine_scale;
        EngineState {
            backbone,
            bank,
            buffer: ReplayBuffer::new(
                strategy.replay_capacity_per_class,
                derive_seed(master_seed, "replay-buffer"),
            ),
            trained_tasks: 0,
            master_seed,
            replay_calls: 0,
        }
    }

    pub fn head_alloc_seed(&self) -> u64 {
        derive_seed(self.master_seed, "head-init")
    }
}

/// Per-task training trace for logs and cost reporting.
#[derive(Debug, Clone)]
pub struct TaskLog {
    pub task_id: usize,
    pub epoch_losses: Vec<f64>,
    pub trainable_params: usize,
    pub wall_secs: f64,
}

/// Features for a slice of examples, extracted in fixed-size chunks.
/// Returns `[N, d_model]` plus the labels in matching row order.
pub fn features_of(
    backbone: &Backbone,
    examples: &[LabeledExample],
    chunk: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to featurize".into()));
    }
    if chunk == 0 {
        return Err(Error::Config("feature chunk size must be positive".into()));
    }
    let d = backbone.config.d_model;
    let mut out = Tensor::zeros(vec![examples.len(), d]);
    for (ci, batch) in examples.chunks(chunk).enumerate() {
        let seqs: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let f = backbone.extract_features(&seqs)?;
        for (bi, _) in batch.iter().enumerate() {
            out.row_mut(ci * chunk + bi).copy_from_slice(f.row(bi));
        }
    }
    Ok((out, examples.iter().map(|e| e.label).collect()))
}

/// Add every bank head to `graph` (or only the current task's head when
/// the loss is restricted) and return the concatenated logits node.
fn append_bank_heads(
    graph: &mut Graph,
    bank: &ClassifierBank,
    features: NodeId,
    restrict_to: Option<usize>,
) -> Result<NodeId> {
    match restrict_to {
        Some(t) => {
            let head = bank.head(t)?;
            append_head_logits(
                graph,
                &format!("head.{t}"),
                &head.weight,
                head.kind,
                bank.cosine_scale,
                features,
            )
        }
        None => {
            let mut parts = Vec::with_capacity(bank.heads().len());
            for head in bank.heads() {
                parts.push(append_head_logits(
                    graph,
                    &format!("head.{}", head.task_id),
                    &head.weight,
                    head.kind,
                    bank.cosine_scale,
                    features,
                )?);
            }
            if parts.len() == 1 {
                Ok(parts.pop().expect("one part"))
            } else {
                Ok(graph.concat_cols(parts))
            }
        }
    }
}

fn absorb_heads(bank: &mut ClassifierBank, graph: &Graph) -> Result<()> {
    for head in bank.heads_mut() {
        if let Ok(t) = graph.param_tensor(&format!("head.{}", head.task_id)) {
            head.weight = t.clone();
        }
    }
    Ok(())
}

/// Train one task under the strategy. Preconditions: the task is the next
/// untrained one and its head is allocated (plus all future heads when
/// pre-allocating). On the first task the backbone trains jointly for the
/// warm-up epochs, then freezes if FixB; old heads freeze per FixC but
/// stay inside the softmax. Replay examples are appended to every batch
/// when the buffer holds anything.
pub fn train_task(
    state: &mut EngineState,
    task: &Task,
    strategy: &StrategyConfig,
) -> Result<TaskLog> {
    strategy.validate()?;
    if task.task_id != state.trained_tasks {
        return Err(Error::Contract(format!(
            "tasks must be trained in order: expected task {}, got {}",
            state.trained_tasks, task.task_id
        )));
    }
    if state.bank.head(task.task_id).is_err() {
        return Err(Error::Contract(format!(
            "task {} has no allocated classifier",
            task.task_id
        )));
    }
    if task.train.is_empty() {
        return Err(Error::Contract(format!("task {} has no training data", task.task_id)));
    }
    let started = Instant::now();

    if strategy.freeze_old_heads {
        let old: Vec<usize> = state
            .bank
            .heads()
            .iter()
            .map(|h| h.task_id)
            .filter(|&t| t < task.task_id)
            .collect();
        state.bank.freeze_heads(&old)?;
    }

    let epochs = strategy.epochs_per_task;
    let is_first = task.task_id == 0;
    let joint_epochs = if state.backbone.frozen {
        0
    } else if strategy.freeze_backbone {
        if is_first {
            strategy
                .resolved_warmup_epochs(state.backbone.config.attention_mode)
                .min(epochs)
        } else {
            0
        }
    } else {
        epochs
    };

    let restrict = strategy.restrict_loss_to_current_task.then_some(task.task_id);
    // Label -> loss target. Restricted mode indexes within the current
    // head; otherwise targets are global slots.
    let target_map: BTreeMap<usize, f64> = match restrict {
        Some(t) => state
            .bank
            .head(t)?
            .class_ids
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as f64))
            .collect(),
        None => (0..state.bank.total_slots())
            .map(|s| Ok((state.bank.class_of_slot(s)?, s as f64)))
            .collect::<Result<_>>()?,
    };
    let target_of = |label: usize| -> Result<f64> {
        target_map.get(&label).copied().ok_or_else(|| {
            Error::Contract(format!("label {label} has no loss target under this strategy"))
        })
    };

    let frozen_heads: BTreeSet<usize> =
        state.bank.heads().iter().filter(|h| h.frozen).map(|h| h.task_id).collect();
    let replay_k = strategy.resolved_replay_per_batch();
    let mut adam = Adam::new(AdamConfig::with_weight_decay(strategy.weight_decay));
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut trainable_params = None;

    // One epoch over the current task, replay mixed in per batch. The
    // batch builder maps chosen examples to graph bindings.
    let mut run_epochs = |epoch_range: std::ops::Range<usize>,
                          graph: &mut Graph,
                          loss_id: NodeId,
                          backbone_trainable: bool,
                          bind: &dyn Fn(&[&LabeledExample]) -> Result<Bindings>,
                          state_buffer: &ReplayBuffer,
                          replay_calls: &mut u64|
     -> Result<Vec<f64>> {
        for name in graph.param_names().cloned().collect::<Vec<_>>() {
            if let Some(rest) = name.strip_prefix("head.") {
                let tid: usize = rest
                    .parse()
                    .map_err(|_| Error::Contract(format!("malformed head param {name:?}")))?;
                graph.set_trainable(&name, !frozen_heads.contains(&tid))?;
            } else {
                graph.set_trainable(&name, backbone_trainable)?;
            }
        }
        if trainable_params.is_none() {
            trainable_params = Some(graph.count_trainable());
        }
        let lr_for = |name: &str| -> Option<f64> {
            if let Some(rest) = name.strip_prefix("head.") {
                let tid: usize = rest.parse().ok()?;
                (!frozen_heads.contains(&tid)).then_some(strategy.head_lr)
            } else {
                backbone_trainable.then_some(strategy.backbone_lr)
            }
        };
        let mut losses = Vec::new();
        for e in epoch_range {
            let mut order: Vec<usize> = (0..task.train.len()).collect();
            let mut r = rng(derive_seed(
                state.master_seed,
                &format!("train-shuffle-{}-{e}", task.task_id),
            ));
            order.shuffle(&mut r);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(strategy.batch_size) {
                let mut examples: Vec<&LabeledExample> =
                    chunk.iter().map(|&i| &task.train[i]).collect();
                let replay = if replay_k > 0 && !state_buffer.is_empty() {
                    let drawn = state_buffer.sample(replay_k, *replay_calls);
                    *replay_calls += 1;
                    drawn
                } else {
                    Vec::new()
                };
                examples.extend(replay.iter());
                let bindings = bind(&examples)?;
                let eval = graph.forward(&bindings)?;
                let loss = eval.value(loss_id).item()?;
                let grads = graph.backward(&eval, loss_id)?;
                adam.step(graph, &grads, &lr_for)?;
                total += loss;
                batches += 1;
            }
            losses.push(total / batches as f64);
        }
        Ok(losses)
    };

    if joint_epochs > 0 {
        let mut graph = state.backbone.build_feature_graph()?;
        let features_node = graph.output_id("features")?;
        let logits = append_bank_heads(&mut graph, &state.bank, features_node, restrict)?;
        let targets = graph.input("targets");
        let loss_id = graph.cross_entropy(logits, targets);
        let config = state.backbone.config.clone();
        let bind = |examples: &[&LabeledExample]| -> Result<Bindings> {
            let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
            let mut batch = prepare_batch(&seqs, &config)?;
            let targets: Vec<f64> =
                examples.iter().map(|e| target_of(e.label)).collect::<Result<_>>()?;
            batch
                .bindings
                .insert("targets".into(), Tensor::new(vec![examples.len()], targets)?);
            Ok(batch.bindings)
        };
        let losses = run_epochs(
            0..joint_epochs,
            &mut graph,
            loss_id,
            true,
            &bind,
            &state.buffer,
            &mut state.replay_calls,
        )?;
        epoch_losses.extend(losses);
        state.backbone.absorb_from_graph(&graph)?;
        absorb_heads(&mut state.bank, &graph)?;
    }

    if strategy.freeze_backbone {
        state.backbone.frozen = true;
    }

    if joint_epochs < epochs {
        // Backbone constant for the rest of the task: train heads on
        // cached features.
        let mut pool: Vec<LabeledExample> = task.train.clone();
        pool.extend(state.buffer.stored_examples());
        let (feats, _) = features_of(&state.backbone, &pool, EVAL_CHUNK)?;
        let row_of: std::collections::BTreeMap<(Vec<u32>, usize), usize> = pool
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.tokens.clone(), e.label), i))
            .collect();

        let mut graph = Graph::new();
        let features_node = graph.input("features");
        let logits = append_bank_heads(&mut graph, &state.bank, features_node, restrict)?;
        let targets = graph.input("targets");
        let loss_id = graph.cross_entropy(logits, targets);
        let d = state.backbone.config.d_model;
        let bind = |examples: &[&LabeledExample]| -> Result<Bindings> {
            let mut f = Tensor::zeros(vec![examples.len(), d]);
            let mut t = Vec::with_capacity(examples.len());
            for (i, e) in examples.iter().enumerate() {
                let key = (e.tokens.clone(), e.label);
                let &row = row_of.get(&key).ok_or_else(|| {
                    Error::Contract("batch example missing from the feature cache".into())
                })?;
                f.row_mut(i).copy_from_slice(feats.row(row));
                t.push(target_of(e.label)?);
            }
            let mut b = Bindings::new();
            b.insert("features".into(), f);
            b.insert("targets".into(), Tensor::new(vec![examples.len()], t)?);
            Ok(b)
        };
        let losses = run_epochs(
            joint_epochs..epochs,
            &mut graph,
            loss_id,
            false,
            &bind,
            &state.buffer,
            &mut state.replay_calls,
        )?;
        epoch_losses.extend(losses);
        absorb_heads(&mut state.bank, &graph)?;
    }

    state.trained_tasks += 1;
    Ok(TaskLog {
        task_id: task.task_id,
        epoch_losses,
        trainable_params: trainable_params.unwrap_or(0),
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Class-incremental predictions: argmax over the slots of the first
/// `learned_tasks` heads. Pre-allocated future slots are excluded.
pub fn cil_predictions(
    bank: &ClassifierBank,
    features: &Tensor,
    learned_tasks: usize,
) -> Result<Vec<usize>> {
    if learned_tasks == 0 || learned_tasks > bank.heads().len() {
        return Err(Error::Contract(format!(
            "learned task count {learned_tasks} outside 1..={}",
            bank.heads().len()
        )));
    }
    for (k, head) in bank.heads().iter().take(learned_tasks).enumerate() {
        if head.task_id != k {
            return Err(Error::Contract(
                "heads are not in task order; the learned prefix is undefined".into(),
            ));
        }
    }
    let learned_slots: usize =
        bank.heads()[..learned_tasks].iter().map(|h| h.n_classes()).sum();
    let logits = bank.logits(features, None)?;
    (0..features.shape()[0])
        .map(|i| bank.class_of_slot(Tensor::argmax_slice(&logits.row(i)[..learned_slots])))
        .collect()
}

/// Task-incremental predictions: argmax within the ground-truth task's
/// head, mapped back to global class ids.
pub fn til_predictions(
    bank: &ClassifierBank,
    features: &Tensor,
    task_id: usize,
) -> Result<Vec<usize>> {
    let head = bank.head(task_id)?;
    let logits = bank.head_logits(head, features)?;
    Ok((0..features.shape()[0])
        .map(|i| head.class_ids[Tensor::argmax_slice(logits.row(i))])
        .collect())
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Test accuracy on each of the first `t` tasks using the model's own
/// classifiers: row a_{t,1..t}. Class-incremental rows predict over all
/// learned classes; task-incremental rows predict within each task.
pub fn evaluate_observed(
    state: &EngineState,
    stream: &TaskStream,
    t: usize,
) -> Result<Vec<f64>> {
    if t == 0 || t > state.trained_tasks {
        return Err(Error::Contract(format!(
            "evaluation needs 1..={} trained tasks, got {t}",
            state.trained_tasks
        )));
    }
    let mut row = Vec::with_capacity(t);
    for task in stream.tasks.iter().take(t) {
        let (features, labels) = features_of(&state.backbone, &task.test, EVAL_CHUNK)?;
        let preds = match state.bank.scenario {
            Scenario::Cil => cil_predictions(&state.bank, &features, t)?,
            Scenario::Til => til_predictions(&state.bank, &features, task.task_id)?,
        };
        row.push(accuracy(&preds, &labels));
    }
    Ok(row)
}

/// Lower-triangular accuracy matrix: row t (1-based) holds a_{t,1..t}.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Contract(format!(
                "row {} must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        for &v in &row {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("accuracy {v} outside [0, 1]")));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Row t, 1-based.
    pub fn row(&self, t: usize) -> Result<&[f64]> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::Contract(format!(
                "row {t} outside the {} complete rows",
                self.rows.len()
            )));
        }
        Ok(&self.rows[t - 1])
    }

    /// a_{t,i}, both 1-based.
    pub fn entry(&self, t: usize, i: usize) -> Result<f64> {
        let row = self.row(t)?;
        if i == 0 || i > row.len() {
            return Err(Error::Contract(format!("entry ({t},{i}) is above the diagonal")));
        }
        Ok(row[i - 1])
    }
}

/// A_t: mean of a_{t,1..t}.
pub fn average_accuracy(matrix: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = matrix.row(t)?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean of A_1..A_T over the full matrix.
pub fn avg_incremental_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    if matrix.n_tasks() == 0 {
        return Err(Error::Contract("matrix has no rows".into()));
    }
    let mut total = 0.0;
    for t in 1..=matrix.n_tasks() {
        total += average_accuracy(matrix, t)?;
    }
    Ok(total / matrix.n_tasks() as f64)
}

/// Model state captured right after finishing a task, for probing and
/// geometry analysis.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub after_task: usize,
    pub backbone: Backbone,
    pub bank: ClassifierBank,
}

impl Snapshot {
    pub fn tag(&self) -> String {
        format!("task-{}", self.after_task)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub preset: String,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub a_t: Vec<f64>,
    pub a_bar: f64,
    pub snapshots: Vec<Snapshot>,
    pub task_logs: Vec<TaskLog>,
    pub warnings: Vec<String>,
}

impl ExperimentRecord {
    /// A_T: the average accuracy after the final task.
    pub fn final_a_t(&self) -> f64 {
        *self.a_t.last().expect("at least one task")
    }

    pub fn write_results_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "format_version,preset,seed,t,i,a,A_t,A_bar")?;
        for t in 1..=self.matrix.n_tasks() {
            for i in 1..=t {
                writeln!(
                    out,
                    "1,{},{},{t},{i},{},{},{}",
                    self.preset,
                    self.seed,
                    self.matrix.entry(t, i)?,
                    self.a_t[t - 1],
                    self.a_bar
                )?;
            }
        }
        Ok(())
    }
}

/// Train every task in order, evaluating after each and snapshotting the
/// model. The accuracy matrix ends lower-triangular with T(T+1)/2
/// entries.
pub fn run_experiment(
    stream: &TaskStream,
    backbone: Backbone,
    strategy: &StrategyConfig,
    master_seed: u64,
) -> Result<ExperimentRecord> {
    strategy.validate()?;
    stream.validate()?;
    if stream.scenario != strategy.scenario {
        return Err(Error::Contract(format!(
            "stream scenario {} does not match strategy scenario {}",
            stream.scenario, strategy.scenario
        )));
    }
    let warnings = strategy.warnings();
    let mut state = EngineState::new(backbone, strategy, master_seed);
    if strategy.preallocate_future {
        state.bank.allocate_heads(&stream.head_specs(), strategy.head_kind, state.head_alloc_seed())?;
    }

    let mut matrix = AccuracyMatrix::new();
    let mut a_t = Vec::with_capacity(stream.n_tasks());
    let mut snapshots = Vec::with_capacity(stream.n_tasks());
    let mut task_logs = Vec::with_capacity(stream.n_tasks());
    for task in &stream.tasks {
        if !strategy.preallocate_future {
            state.bank.allocate_heads(
                &[(task.task_id, task.class_ids.clone())],
                strategy.head_kind,
                state.head_alloc_seed(),
            )?;
        }
        let log = train_task(&mut state, task, strategy)?;
        let row = evaluate_observed(&state, stream, task.task_id + 1)?;
        matrix.push_row(row)?;
        a_t.push(average_accuracy(&matrix, task.task_id + 1)?);
        state.buffer.update(task);
        snapshots.push(Snapshot {
            after_task: task.task_id,
            backbone: state.backbone.clone(),
            bank: state.bank.clone(),
        });
        task_logs.push(log);
    }
    let a_bar = avg_incremental_accuracy(&matrix)?;
    Ok(ExperimentRecord {
        preset: strategy.name.clone(),
        seed: master_seed,
        matrix,
        a_t,
        a_bar,
        snapshots,
        task_logs,
        warnings,
    })
}
