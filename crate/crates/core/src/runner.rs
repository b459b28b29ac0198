//! Configuration-driven experiment runner: one JSON config in, a run
//! directory of artifacts out, byte-identical across re-runs of the same
//! config and master seed.
//!
//! A run directory holds:
//!
//! ```text
//! config.json        echo of the effective configuration
//! results.csv        per-task accuracy matrix with A_t and A-bar
//! probing.csv        probe accuracies per (snapshot, metric, task)
//! moving_distance.csv, norms.csv, histograms.csv
//! cosine-matrix-task-{s}.csv   optional dense matrices
//! snapshots/         backbone checkpoints and classifier banks per task
//! features/          cached feature extractions, one file per snapshot
//! run.log            wall-clock and parameter-count notes (not covered
//!                    by the determinism guarantee)
//! completed          marker; re-running without `force` is refused
//! ```
//!
//! Every seed a stage consumes is derived from the master seed and a
//! component name, so the nested `seed` fields in stream and backbone
//! configs are overwritten and may be omitted from config files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, read_container, save_checkpoint, write_container};
use crate::classifier::{ClassifierBank, HeadKind, TaskHead};
use crate::engine::{parse_preset, run_experiment, ExperimentRecord, Snapshot, StrategyConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    class_centers, cosine_matrix, geometry_histograms, moving_distance_series, norm_report,
    write_cosine_matrix_csv, write_histogram_csv, write_norm_csv, NormReport, DEFAULT_PAIR_CAP,
};
use crate::probe::{
    global_class_ids, parallel_map, probe_features, probe_threads, read_feature_cache,
    snapshot_features, write_feature_cache, write_probing_csv, FeatureSet, ProbeConfig,
    ProbeReport,
};
use crate::seed::derive_seed;
use crate::stream::{
    build_synthetic_stream, load_stream, IngestOptions, Scenario, SyntheticSpec, TaskStream,
};
use crate::tensor::Tensor;
use crate::transformer::{
    init_backbone, markov_corpus, pretrain_clm, Backbone, BackboneConfig, Checkpoint,
    PretrainConfig, FIRST_TOKEN_ID,
};

// ── Configuration ────────────────────────────────────────────────────────

/// Where the task stream comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSource {
    Synthetic(SyntheticSpec),
    Ingest(IngestSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSpec {
    pub train_path: PathBuf,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    pub options: IngestOptions,
}

/// Either a named preset label or a full strategy config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySource {
    Preset(String),
    Config(StrategyConfig),
}

/// Which analyses run after training and what they probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisToggles {
    #[serde(default = "default_true")]
    pub probing: bool,
    #[serde(default = "default_true")]
    pub moving_distance: bool,
    #[serde(default = "default_true")]
    pub norms: bool,
    #[serde(default = "default_true")]
    pub histograms: bool,
    /// Dump one dense cosine matrix per task at the final snapshot.
    #[serde(default)]
    pub export_cosine_matrices: bool,
    /// Metrics probed at every snapshot, in report order.
    #[serde(default = "default_probe_metrics")]
    pub probe_metrics: Vec<HeadKind>,
    /// Histogram pair-sampling cap.
    #[serde(default = "default_pair_cap")]
    pub pair_cap: usize,
}

fn default_true() -> bool {
    true
}
fn default_probe_metrics() -> Vec<HeadKind> {
    HeadKind::ALL.to_vec()
}
fn default_pair_cap() -> usize {
    DEFAULT_PAIR_CAP
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        AnalysisToggles {
            probing: true,
            moving_distance: true,
            norms: true,
            histograms: true,
            export_cosine_matrices: false,
            probe_metrics: default_probe_metrics(),
            pair_cap: default_pair_cap(),
        }
    }
}

/// Synthetic pretraining corpus shape; the vocabulary is the backbone's.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_streams: usize,
    pub stream_len: usize,
    pub branching: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub corpus: CorpusSpec,
    pub config: PretrainConfig,
    /// Include the scheduled checkpoints in the probing curve.
    #[serde(default)]
    pub probe_checkpoints: bool,
}

/// One experiment, end to end. Unknown JSON keys are hard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stream: StreamSource,
    pub backbone: BackboneConfig,
    pub strategy: StrategySource,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    #[serde(default)]
    pub pretrain: Option<PretrainSpec>,
    /// Master seed; every stage seed is derived from it by component name.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// CLI-level replacements applied after parsing. When any is set, the
/// directory's config echo records the effective values, not the input
/// file, so later re-runs against the directory agree with what ran.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub preset: Option<String>,
}

impl Overrides {
    fn is_empty(&self) -> bool {
        self.seed.is_none() && self.out_dir.is_none() && self.preset.is_none()
    }
}

/// Parse a config, reporting the JSON path of the offending field on
/// errors (`stream.synthetic.scenario: unknown variant ...`).
pub fn parse_run_config(bytes: &[u8]) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::Config(format!("config field {}: {}", e.path(), e.inner())))
}

// ── Output layout ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub run_dir: PathBuf,
    pub config_echo: PathBuf,
    pub results_csv: PathBuf,
    pub probing_csv: PathBuf,
    pub geometry_csvs: Vec<PathBuf>,
    pub snapshots_dir: PathBuf,
    pub features_dir: PathBuf,
    pub log: PathBuf,
    pub marker: PathBuf,
}

impl OutputLayout {
    fn new(run_dir: PathBuf) -> Self {
        OutputLayout {
            config_echo: run_dir.join("config.json"),
            results_csv: run_dir.join("results.csv"),
            probing_csv: run_dir.join("probing.csv"),
            geometry_csvs: Vec::new(),
            snapshots_dir: run_dir.join("snapshots"),
            features_dir: run_dir.join("features"),
            log: run_dir.join("run.log"),
            marker: run_dir.join("completed"),
            run_dir,
        }
    }

    fn create_dirs(&self) -> Result<()> {
        fs::create_dir_all(&self.snapshots_dir)?;
        fs::create_dir_all(&self.features_dir)?;
        Ok(())
    }
}

fn write_csv(path: &Path, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Appending log writer; log lines carry timings and are deliberately
/// kept out of the determinism-checked CSVs.
struct RunLog {
    file: fs::File,
}

impl RunLog {
    fn open(path: &Path) -> Result<Self> {
        Ok(RunLog { file: fs::OpenOptions::new().create(true).append(true).open(path)? })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text}")?;
        Ok(())
    }
}

// ── Stage plumbing ───────────────────────────────────────────────────────

/// Build the task stream with its seed derived from the master seed.
pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let stream = match &cfg.stream {
        StreamSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(cfg.seed, "stream");
            build_synthetic_stream(&spec)?.stream
        }
        StreamSource::Ingest(spec) => {
            let mut opts = spec.options.clone();
            opts.seed = derive_seed(cfg.seed, "ingest");
            load_stream(&spec.train_path, spec.test_path.as_deref(), &opts)?
        }
    };
    stream.validate()?;
    Ok(stream)
}

fn resolve_strategy(cfg: &RunConfig, stream: &TaskStream) -> Result<StrategyConfig> {
    match &cfg.strategy {
        StrategySource::Preset(label) => parse_preset(label, stream.scenario),
        StrategySource::Config(sc) => {
            if sc.scenario != stream.scenario {
                return Err(Error::Config(format!(
                    "config field strategy.config.scenario: {} does not match the stream scenario {}",
                    sc.scenario, stream.scenario
                )));
            }
            Ok(sc.clone())
        }
    }
}

fn make_backbone(cfg: &RunConfig, stream: &TaskStream) -> Result<(BackboneConfig, Backbone)> {
    let mut bcfg = cfg.backbone.clone();
    bcfg.init_seed = derive_seed(cfg.seed, "backbone-init");
    if bcfg.vocab_size < stream.vocab_size {
        return Err(Error::Config(format!(
            "config field backbone.vocab_size: {} is smaller than the stream vocabulary {}",
            bcfg.vocab_size, stream.vocab_size
        )));
    }
    let longest = stream
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().chain(t.test.iter()))
        .map(|e| e.tokens.len())
        .max()
        .unwrap_or(0);
    if longest > bcfg.max_seq_len {
        return Err(Error::Config(format!(
            "config field backbone.max_seq_len: {} is shorter than the longest stream example {longest}",
            bcfg.max_seq_len
        )));
    }
    let backbone = init_backbone(&bcfg)?;
    Ok((bcfg, backbone))
}

fn effective_probe_cfg(cfg: &RunConfig) -> ProbeConfig {
    let mut pc = cfg.probe.clone();
    pc.seed = derive_seed(cfg.seed, "probe");
    pc
}

// ── Snapshot persistence ─────────────────────────────────────────────────

const BANK_KIND: &str = "classifier-bank";

/// Persist a classifier bank: weights as arrays, structure in the header.
pub fn save_bank(path: &Path, bank: &ClassifierBank) -> Result<()> {
    let heads: Vec<serde_json::Value> = bank
        .heads()
        .iter()
        .map(|h| {
            serde_json::json!({
                "task_id": h.task_id,
                "class_ids": h.class_ids,
                "kind": h.kind.as_str(),
                "frozen": h.frozen,
            })
        })
        .collect();
    let meta = serde_json::json!({
        "scenario": bank.scenario.to_string(),
        "d_model": bank.d_model,
        "heads": heads,
    });
    let mut arrays = BTreeMap::new();
    for h in bank.heads() {
        arrays.insert(format!("head.{}", h.task_id), h.weight.clone());
    }
    write_container(path, BANK_KIND, meta, &arrays)
}

pub fn load_bank(path: &Path) -> Result<ClassifierBank> {
    let (kind, meta, arrays) = read_container(path)?;
    if kind != BANK_KIND {
        return Err(Error::Input(format!("expected a {BANK_KIND} container, found {kind:?}")));
    }
    let field = |name: &str| {
        meta.get(name).cloned().ok_or_else(|| Error::Input(format!("bank missing {name:?}")))
    };
    let scenario: Scenario = match field("scenario")?.as_str() {
        Some("CIL") => Scenario::Cil,
        Some("TIL") => Scenario::Til,
        other => return Err(Error::Input(format!("bank has bad scenario {other:?}"))),
    };
    let d_model = field("d_model")?
        .as_u64()
        .ok_or_else(|| Error::Input("bank d_model is not an integer".into()))?
        as usize;
    let heads = field("heads")?;
    let heads = heads.as_array().ok_or_else(|| Error::Input("bank heads is not a list".into()))?;
    let mut bank = ClassifierBank::new(scenario, d_model);
    for h in heads {
        let task_id = h["task_id"]
            .as_u64()
            .ok_or_else(|| Error::Input("bank head missing task_id".into()))?
            as usize;
        let class_ids: Vec<usize> = h["class_ids"]
            .as_array()
            .ok_or_else(|| Error::Input("bank head missing class_ids".into()))?
            .iter()
            .map(|v| v.as_u64().map(|u| u as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Input("bank head class_ids must be integers".into()))?;
        let kind: HeadKind = h["kind"]
            .as_str()
            .ok_or_else(|| Error::Input("bank head missing kind".into()))?
            .parse()?;
        let frozen =
            h["frozen"].as_bool().ok_or_else(|| Error::Input("bank head missing frozen".into()))?;
        let weight = arrays
            .get(&format!("head.{task_id}"))
            .ok_or_else(|| Error::Input(format!("bank missing weights for task {task_id}")))?
            .clone();
        bank.allocate_heads(&[(task_id, class_ids.clone())], kind, 0)?;
        bank.replace_head(TaskHead { task_id, class_ids, weight, kind, frozen })?;
    }
    Ok(bank)
}

fn save_snapshots(layout: &OutputLayout, bcfg: &BackboneConfig, record: &ExperimentRecord) -> Result<()> {
    for snap in &record.snapshots {
        let tag = snap.tag();
        let ckpt = Checkpoint {
            step: snap.after_task as u64,
            config: bcfg.clone(),
            params: snap.backbone.params().clone(),
        };
        save_checkpoint(&layout.snapshots_dir.join(format!("{tag}.bin")), &ckpt)?;
        save_bank(&layout.snapshots_dir.join(format!("{tag}.bank.bin")), &snap.bank)?;
        write_csv(&layout.snapshots_dir.join(format!("{tag}-bank.csv")), |out| {
            snap.bank.export_csv(out)
        })?;
    }
    Ok(())
}

/// Reload the per-task snapshots a run wrote, in task order.
pub fn load_snapshots(layout: &OutputLayout) -> Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    for n in 0.. {
        let ckpt_path = layout.snapshots_dir.join(format!("task-{n}.bin"));
        if !ckpt_path.exists() {
            break;
        }
        let ckpt = load_checkpoint(&ckpt_path)?;
        let bank = load_bank(&layout.snapshots_dir.join(format!("task-{n}.bank.bin")))?;
        out.push(Snapshot { after_task: n, backbone: ckpt.backbone()?, bank });
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "no task snapshots under {}; run the experiment first",
            layout.snapshots_dir.display()
        )));
    }
    Ok(out)
}

fn load_pretrain_checkpoints(layout: &OutputLayout) -> Result<Vec<(u64, Backbone)>> {
    let mut steps = Vec::new();
    for entry in fs::read_dir(&layout.snapshots_dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("pretrain-").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(step) = step.parse::<u64>() {
                steps.push(step);
            }
        }
    }
    steps.sort_unstable();
    let mut out = Vec::with_capacity(steps.len());
    for step in steps {
        let ckpt = load_checkpoint(&layout.snapshots_dir.join(format!("pretrain-{step}.bin")))?;
        out.push((step, ckpt.backbone()?));
    }
    Ok(out)
}

// ── Stages ───────────────────────────────────────────────────────────────

fn stage_pretrain(
    layout: &OutputLayout,
    cfg: &RunConfig,
    spec: &PretrainSpec,
    backbone: &mut Backbone,
    log: &mut RunLog,
) -> Result<Vec<Checkpoint>> {
    let started = Instant::now();
    let corpus = markov_corpus(
        backbone.config.vocab_size,
        spec.corpus.n_streams,
        spec.corpus.stream_len,
        spec.corpus.branching,
        derive_seed(cfg.seed, "corpus"),
    )?;
    let mut pcfg = spec.config.clone();
    pcfg.seed = derive_seed(cfg.seed, "pretrain");
    let checkpoints = pretrain_clm(backbone, &corpus, &pcfg)?;
    for ckpt in &checkpoints {
        save_checkpoint(&layout.snapshots_dir.join(format!("pretrain-{}.bin", ckpt.step)), ckpt)?;
    }
    log.line(&format!(
        "pretrain: {} steps, {} checkpoints, wall {:.1}s",
        pcfg.total_steps,
        checkpoints.len(),
        started.elapsed().as_secs_f64()
    ))?;
    Ok(checkpoints)
}

fn stage_train(
    layout: &OutputLayout,
    stream: &TaskStream,
    strategy: &StrategyConfig,
    bcfg: &BackboneConfig,
    backbone: Backbone,
    master_seed: u64,
    log: &mut RunLog,
) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let mut record =
        run_experiment(stream, backbone, strategy, derive_seed(master_seed, "train"))?;
    // CSV rows carry the config's master seed, not the derived stage seed.
    record.seed = master_seed;
    write_csv(&layout.results_csv, |out| record.write_results_csv(out))?;
    save_snapshots(layout, bcfg, &record)?;
    for tl in &record.task_logs {
        log.line(&format!(
            "task {}: {} epochs, {} trainable params, wall {:.1}s",
            tl.task_id,
            tl.epoch_losses.len(),
            tl.trainable_params,
            tl.wall_secs
        ))?;
    }
    for w in &record.warnings {
        log.line(&format!("warning: {w}"))?;
    }
    log.line(&format!(
        "train: A_T {:.4}, A_bar {:.4}, wall {:.1}s",
        record.final_a_t(),
        record.a_bar,
        started.elapsed().as_secs_f64()
    ))?;
    Ok(record)
}

/// Features for one snapshot, from the cache when a valid entry exists.
fn cached_features(
    layout: &OutputLayout,
    backbone: &Backbone,
    tag: &str,
    stream: &TaskStream,
) -> Result<FeatureSet> {
    let path = layout.features_dir.join(format!("{tag}.bin"));
    if path.exists() {
        if let Ok(set) = read_feature_cache(&path) {
            if set.tag == tag
                && set.d_model == backbone.config.d_model
                && set.test.len() == stream.n_tasks()
            {
                return Ok(set);
            }
        }
    }
    let set = snapshot_features(backbone, tag, stream)?;
    write_feature_cache(&path, &set)?;
    Ok(set)
}

/// Probe every snapshot with every configured metric. Report order is
/// snapshot-major, metric-minor, independent of the worker count.
fn stage_probe(
    layout: &OutputLayout,
    stream: &TaskStream,
    toggles: &AnalysisToggles,
    probe_cfg: &ProbeConfig,
    snapshots: &[(String, &Backbone)],
    log: &mut RunLog,
) -> Result<Vec<ProbeReport>> {
    let started = Instant::now();
    let class_ids = global_class_ids(stream);
    let per_snapshot = parallel_map(snapshots.len(), probe_threads(), &|i| {
        let (tag, backbone) = &snapshots[i];
        let set = cached_features(layout, backbone, tag, stream)?;
        let pairs = probe_features(&set, &class_ids, &toggles.probe_metrics, probe_cfg)?;
        Ok(pairs.into_iter().map(|(_, r)| r).collect::<Vec<_>>())
    })?;
    let reports: Vec<ProbeReport> = per_snapshot.into_iter().flatten().collect();
    write_csv(&layout.probing_csv, |out| write_probing_csv(&reports, out))?;
    log.line(&format!(
        "probing: {} snapshots x {} metrics, wall {:.1}s",
        snapshots.len(),
        toggles.probe_metrics.len(),
        started.elapsed().as_secs_f64()
    ))?;
    Ok(reports)
}

/// Rows of `weight` for the classes of each task `s <= t`, in task order.
/// Rows follow `class_ids` order, the global sorted class list.
fn probe_task_slices(
    weight: &Tensor,
    class_ids: &[usize],
    stream: &TaskStream,
    upto: usize,
) -> Result<Vec<Tensor>> {
    let d = weight.shape()[1];
    let mut out = Vec::with_capacity(upto + 1);
    for task in &stream.tasks[..=upto] {
        let mut data = Vec::with_capacity(task.class_ids.len() * d);
        for c in &task.class_ids {
            let row = class_ids
                .binary_search(c)
                .map_err(|_| Error::Contract(format!("class {c} missing from probe")))?;
            data.extend_from_slice(weight.row(row));
        }
        out.push(Tensor::new(vec![task.class_ids.len(), d], data)?);
    }
    Ok(out)
}

fn rows_from(t: &Tensor, start: usize) -> Result<Tensor> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    Tensor::new(vec![n - start, d], t.data()[start * d..].to_vec())
}

/// Geometry analyses over the task snapshots: moving distance from the
/// observed classifiers and from freshly trained linear probes, weight
/// norms per snapshot, similarity histograms at the final snapshot, and
/// optional dense cosine matrices.
fn stage_analyze(
    layout: &mut OutputLayout,
    cfg: &RunConfig,
    stream: &TaskStream,
    probe_cfg: &ProbeConfig,
    snapshots: &[Snapshot],
    log: &mut RunLog,
) -> Result<()> {
    let started = Instant::now();
    let toggles = &cfg.analysis;
    let last = snapshots.last().expect("at least one snapshot");

    if toggles.moving_distance {
        let observed: Vec<(&Backbone, Vec<Tensor>)> = snapshots
            .iter()
            .map(|snap| {
                let embeddings = (0..=snap.after_task)
                    .map(|s| Ok(snap.bank.head(s)?.weight.clone()))
                    .collect::<Result<Vec<_>>>()?;
                Ok((&snap.backbone, embeddings))
            })
            .collect::<Result<_>>()?;
        let mut reports = vec![moving_distance_series(&observed, stream, "observed")?];

        let class_ids = global_class_ids(stream);
        let linear_cfg = probe_cfg.with_metric(HeadKind::Linear);
        let probing: Vec<(&Backbone, Vec<Tensor>)> = snapshots
            .iter()
            .map(|snap| {
                let set = cached_features(layout, &snap.backbone, &snap.tag(), stream)?;
                let pairs = probe_features(&set, &class_ids, &[HeadKind::Linear], &linear_cfg)?;
                let (head, _) = pairs.into_iter().next().expect("one metric");
                let slices = probe_task_slices(&head.weight, &class_ids, stream, snap.after_task)?;
                Ok((&snap.backbone, slices))
            })
            .collect::<Result<_>>()?;
        reports.push(moving_distance_series(&probing, stream, "probing")?);

        let path = layout.run_dir.join("moving_distance.csv");
        write_csv(&path, |out| {
            writeln!(out, "format_version,source,i,k,md")?;
            for report in &reports {
                for e in &report.entries {
                    writeln!(out, "1,{},{},{},{}", report.source, e.task_id + 1, e.offset, e.md)?;
                }
            }
            Ok(())
        })?;
        layout.geometry_csvs.push(path);
    }

    if toggles.norms {
        let reports: Vec<NormReport> = snapshots
            .iter()
            .map(|snap| norm_report(&snap.tag(), &snap.bank))
            .collect::<Result<_>>()?;
        let path = layout.run_dir.join("norms.csv");
        write_csv(&path, |out| write_norm_csv(&reports, out))?;
        layout.geometry_csvs.push(path);
    }

    if toggles.histograms {
        let set = cached_features(layout, &last.backbone, &last.tag(), stream)?;
        let words = rows_from(last.backbone.param("wout")?, FIRST_TOKEN_ID as usize)?;
        let class_embeddings = {
            let d = last.bank.d_model;
            let mut data = Vec::new();
            let mut rows = 0;
            for h in last.bank.heads() {
                data.extend_from_slice(h.weight.data());
                rows += h.weight.shape()[0];
            }
            Tensor::new(vec![rows, d], data)?
        };
        let prototypes = class_centers(&last.backbone, stream)?;
        let populations: Vec<(&str, &Tensor)> = vec![
            ("features", &set.train),
            ("word_embeddings", &words),
            ("class_embeddings", &class_embeddings),
            ("prototypes", &prototypes),
        ];
        let report =
            geometry_histograms(&populations, toggles.pair_cap, derive_seed(cfg.seed, "hist"))?;
        let path = layout.run_dir.join("histograms.csv");
        write_csv(&path, |out| write_histogram_csv(&report, out))?;
        layout.geometry_csvs.push(path);
    }

    if toggles.export_cosine_matrices {
        let centers = class_centers(&last.backbone, stream)?;
        for s in 0..=last.after_task {
            let m = cosine_matrix(s, last.after_task, &last.bank.head(s)?.weight, &centers)?;
            let path = layout.run_dir.join(format!("cosine-matrix-task-{s}.csv"));
            write_csv(&path, |out| write_cosine_matrix_csv(&m, out))?;
            layout.geometry_csvs.push(path);
        }
    }

    log.line(&format!("analyze: wall {:.1}s", started.elapsed().as_secs_f64()))?;
    Ok(())
}

// ── Entry points ─────────────────────────────────────────────────────────

struct PreparedRun {
    cfg: RunConfig,
    layout: OutputLayout,
    stream: TaskStream,
    log: RunLog,
}

/// Parse, apply overrides, resolve the output directory, refuse completed
/// directories unless forced, create the layout, and echo the config.
fn prepare(path: &Path, force: bool, overrides: &Overrides) -> Result<PreparedRun> {
    let bytes =
        fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_run_config(&bytes)?;
    let echo_bytes = if overrides.is_empty() {
        bytes
    } else {
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        if let Some(preset) = &overrides.preset {
            cfg.strategy = StrategySource::Preset(preset.clone());
        }
        let mut pretty = serde_json::to_vec_pretty(&cfg)
            .map_err(|e| Error::Config(format!("cannot re-serialize config: {e}")))?;
        pretty.push(b'\n');
        pretty
    };
    let run_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("config field out_dir: required (or pass --out)".into()))?;
    let layout = OutputLayout::new(run_dir);
    if layout.marker.exists() && !force {
        return Err(Error::Config(format!(
            "run directory {} is already complete; pass force to overwrite",
            layout.run_dir.display()
        )));
    }
    let stream = build_stream(&cfg)?;
    resolve_strategy(&cfg, &stream)?;
    layout.create_dirs()?;
    if layout.marker.exists() {
        fs::remove_file(&layout.marker)?;
    }
    fs::write(&layout.config_echo, &echo_bytes)?;
    let log = RunLog::open(&layout.log)?;
    Ok(PreparedRun { cfg, layout, stream, log })
}

/// Execute a config end to end: optional pretraining, the incremental
/// run, the probing curve, then geometry analysis. Artifacts land in the
/// config's output directory; the completion marker is written last.
pub fn run_config(path: &Path) -> Result<OutputLayout> {
    run_config_with(path, false, &Overrides::default())
}

pub fn run_config_with(path: &Path, force: bool, overrides: &Overrides) -> Result<OutputLayout> {
    let PreparedRun { cfg, mut layout, stream, mut log } = prepare(path, force, overrides)?;
    let strategy = resolve_strategy(&cfg, &stream)?;
    let (bcfg, mut backbone) = make_backbone(&cfg, &stream)?;
    log.line(&format!(
        "run: strategy {}, seed {}, {} tasks, {} classes, vocab {}",
        strategy.name,
        cfg.seed,
        stream.n_tasks(),
        stream.total_classes(),
        stream.vocab_size
    ))?;

    let mut pretrain_checkpoints = Vec::new();
    if let Some(spec) = &cfg.pretrain {
        pretrain_checkpoints = stage_pretrain(&layout, &cfg, spec, &mut backbone, &mut log)?;
    }

    let record = stage_train(&layout, &stream, &strategy, &bcfg, backbone, cfg.seed, &mut log)?;
    let probe_cfg = effective_probe_cfg(&cfg);

    if cfg.analysis.probing {
        let probed_checkpoints: Vec<(String, Backbone)> =
            if cfg.pretrain.as_ref().is_some_and(|p| p.probe_checkpoints) {
                pretrain_checkpoints
                    .iter()
                    .map(|c| Ok((format!("pretrain-{}", c.step), c.backbone()?)))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
        let mut snapshots: Vec<(String, &Backbone)> = Vec::new();
        for (tag, backbone) in &probed_checkpoints {
            snapshots.push((tag.clone(), backbone));
        }
        for snap in &record.snapshots {
            snapshots.push((snap.tag(), &snap.backbone));
        }
        stage_probe(&layout, &stream, &cfg.analysis, &probe_cfg, &snapshots, &mut log)?;
    }

    stage_analyze(&mut layout, &cfg, &stream, &probe_cfg, &record.snapshots, &mut log)?;

    fs::write(&layout.marker, b"")?;
    Ok(layout)
}

/// Run only the pretraining stage into the output directory. The marker
/// is not written; a later full run completes the directory.
pub fn pretrain_only(path: &Path, force: bool, overrides: &Overrides) -> Result<OutputLayout> {
    let PreparedRun { cfg, layout, stream, mut log } = prepare(path, force, overrides)?;
    let spec = cfg
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("config field pretrain: required for this stage".into()))?;
    let (_, mut backbone) = make_backbone(&cfg, &stream)?;
    stage_pretrain(&layout, &cfg, spec, &mut backbone, &mut log)?;
    Ok(layout)
}

/// Load the config echo of an existing run directory.
fn load_dir(dir: &Path) -> Result<(RunConfig, OutputLayout)> {
    let layout = OutputLayout::new(dir.to_path_buf());
    let bytes = fs::read(&layout.config_echo)
        .map_err(|e| Error::Input(format!("{}: {e}", layout.config_echo.display())))?;
    let mut cfg = parse_run_config(&bytes)?;
    cfg.out_dir = Some(dir.to_path_buf());
    Ok((cfg, layout))
}

/// Recompute probing.csv for an existing run directory from its saved
/// snapshots, reusing cached features. Byte-identical to the original.
pub fn probe_dir(dir: &Path) -> Result<PathBuf> {
    let (cfg, layout) = load_dir(dir)?;
    let stream = build_stream(&cfg)?;
    let probe_cfg = effective_probe_cfg(&cfg);
    let mut log = RunLog::open(&layout.log)?;
    let task_snapshots = load_snapshots(&layout)?;
    let pretrain = if cfg.pretrain.as_ref().is_some_and(|p| p.probe_checkpoints) {
        load_pretrain_checkpoints(&layout)?
    } else {
        Vec::new()
    };
    let mut snapshots: Vec<(String, &Backbone)> = Vec::new();
    for (step, backbone) in &pretrain {
        snapshots.push((format!("pretrain-{step}"), backbone));
    }
    for snap in &task_snapshots {
        snapshots.push((snap.tag(), &snap.backbone));
    }
    stage_probe(&layout, &stream, &cfg.analysis, &probe_cfg, &snapshots, &mut log)?;
    Ok(layout.probing_csv)
}

/// Recompute the geometry CSVs for an existing run directory from its
/// saved snapshots. Byte-identical to the original.
pub fn analyze_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let (cfg, mut layout) = load_dir(dir)?;
    let stream = build_stream(&cfg)?;
    let probe_cfg = effective_probe_cfg(&cfg);
    let mut log = RunLog::open(&layout.log)?;
    let snapshots = load_snapshots(&layout)?;
    stage_analyze(&mut layout, &cfg, &stream, &probe_cfg, &snapshots, &mut log)?;
    Ok(layout.geometry_csvs)
}

// ── Aggregate reporting ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub preset: String,
    pub seed: String,
    pub a_t: f64,
    pub a_bar: f64,
    pub a_prob: Option<f64>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn parse_f64(field: &str, path: &Path) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Input(format!("{}: bad number {field:?}", path.display())))
}

/// Final-task summary of one run directory's results.csv, plus the final
/// linear-probe A_prob when probing.csv exists.
fn summarize_dir(dir: &Path) -> Result<ReportRow> {
    let results = dir.join("results.csv");
    let text = read_text(&results)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with("format_version,preset,seed,") {
        return Err(Error::Input(format!("{}: unexpected header {header:?}", results.display())));
    }
    let last = lines
        .filter(|l| !l.is_empty())
        .next_back()
        .ok_or_else(|| Error::Input(format!("{}: no data rows", results.display())))?;
    let fields: Vec<&str> = last.split(',').collect();
    if fields.len() != 8 {
        return Err(Error::Input(format!("{}: bad row {last:?}", results.display())));
    }
    let mut row = ReportRow {
        preset: fields[1].to_string(),
        seed: fields[2].to_string(),
        a_t: parse_f64(fields[6], &results)?,
        a_bar: parse_f64(fields[7], &results)?,
        a_prob: None,
    };

    let probing = dir.join("probing.csv");
    if probing.exists() {
        let text = read_text(&probing)?;
        let mut best: Option<(usize, f64)> = None;
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 || fields[2] != HeadKind::Linear.as_str() {
                continue;
            }
            if let Some(n) = fields[1].strip_prefix("task-").and_then(|s| s.parse::<usize>().ok())
            {
                if best.is_none_or(|(m, _)| n > m) {
                    best = Some((n, parse_f64(fields[5], &probing)?));
                }
            }
        }
        row.a_prob = best.map(|(_, a)| a);
    }
    Ok(row)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Aggregate completed run directories into one CSV: a row per run, then
/// per-preset mean and population-std rows keyed by the seed column.
pub fn emit_report(dirs: &[PathBuf], out: &mut impl IoWrite) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::Input("report needs at least one run directory".into()));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        rows.push(summarize_dir(dir)?);
    }
    writeln!(out, "format_version,preset,seed,A_T,A_bar,A_prob")?;
    for r in &rows {
        writeln!(out, "1,{},{},{},{},{}", r.preset, r.seed, r.a_t, r.a_bar, fmt_opt(r.a_prob))?;
    }
    let mut presets: Vec<&str> = Vec::new();
    for r in &rows {
        if !presets.contains(&r.preset.as_str()) {
            presets.push(&r.preset);
        }
    }
    for preset in presets {
        let group: Vec<&ReportRow> = rows.iter().filter(|r| r.preset == preset).collect();
        let col = |f: &dyn Fn(&ReportRow) -> f64| -> Vec<f64> { group.iter().map(|r| f(r)).collect() };
        let (at_m, at_s) = mean_std(&col(&|r| r.a_t));
        let (ab_m, ab_s) = mean_std(&col(&|r| r.a_bar));
        let probs: Vec<f64> = group.iter().filter_map(|r| r.a_prob).collect();
        let (ap_m, ap_s) = if probs.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&probs);
            (Some(m), Some(s))
        };
        writeln!(out, "1,{preset},mean,{at_m},{ab_m},{}", fmt_opt(ap_m))?;
        writeln!(out, "1,{preset},std,{at_s},{ab_s},{}", fmt_opt(ap_s))?;
    }
    Ok(())
}

// ── Grid expansion ───────────────────────────────────────────────────────

/// A preset x seed sweep over a shared base config. The base `out_dir`
/// is the parent; each run gets `{preset-slug}-s{seed}` under it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub base: RunConfig,
    pub presets: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Parse a grid config with field-path error reporting, matching
/// [`parse_run_config`].
pub fn parse_grid_spec(bytes: &[u8]) -> Result<GridSpec> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::Config(format!("config field {}: {}", e.path(), e.inner())))
}

fn preset_slug(label: &str) -> String {
    let mut out = String::with_capacity(label.len() + 4);
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if ch == '*' {
            if !out.ends_with('-') && !out.is_empty() {
                out.push('-');
            }
            out.push_str("star");
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

/// Expand a grid into per-run configs, validating every preset label up
/// front against the base stream's scenario.
pub fn expand_grid(grid: &GridSpec) -> Result<Vec<RunConfig>> {
    if grid.presets.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Config("grid needs at least one preset and one seed".into()));
    }
    let parent = grid
        .base
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("config field base.out_dir: required for a grid".into()))?;
    let scenario = match &grid.base.stream {
        StreamSource::Synthetic(spec) => spec.scenario,
        StreamSource::Ingest(spec) => spec.options.scenario,
    };
    for label in &grid.presets {
        parse_preset(label, scenario)?;
    }
    let mut out = Vec::with_capacity(grid.presets.len() * grid.seeds.len());
    for label in &grid.presets {
        for &seed in &grid.seeds {
            let mut cfg = grid.base.clone();
            cfg.strategy = StrategySource::Preset(label.clone());
            cfg.seed = seed;
            cfg.out_dir = Some(parent.join(format!("{}-s{seed}", preset_slug(label))));
            out.push(cfg);
        }
    }
    Ok(out)
}
