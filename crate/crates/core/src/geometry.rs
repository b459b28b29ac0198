//! Classifier-geometry forensics: moving distance of class embeddings,
//! cosine similarity matrices, class-embedding norms, and narrow-cone
//! histograms over features and embedding populations.
//!
//! The central object is C_t^s: the cosine matrix between ALL classes'
//! feature centres (recomputed with the backbone as it stands after task
//! t) and task s's class embeddings. Moving distance compares C at two
//! measurement times entrywise; frozen configurations pin it to exactly
//! zero.

use std::io::Write;

use crate::classifier::ClassifierBank;
use crate::engine::{features_of, EVAL_CHUNK};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};
use crate::stream::TaskStream;
use crate::tensor::{cosine, Tensor, COSINE_EPS};
use crate::transformer::Backbone;

/// Per-class mean feature over the training split, rows in global label
/// order. Each class's rows are summed in sorted order, so the result is
/// bitwise independent of sample order.
pub fn class_centers(backbone: &Backbone, stream: &TaskStream) -> Result<Tensor> {
    if stream.tasks.is_empty() {
        return Err(Error::Contract("cannot compute centers of an empty stream".into()));
    }
    let train_pool: Vec<_> =
        stream.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let (features, labels) = features_of(backbone, &train_pool, EVAL_CHUNK)?;
    let class_ids = crate::probe::global_class_ids(stream);
    let d = backbone.config.d_model;
    let mut out = Tensor::zeros(vec![class_ids.len(), d]);
    for (r, class_id) in class_ids.iter().enumerate() {
        let mut rows: Vec<&[f64]> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| *l == class_id)
            .map(|(i, _)| features.row(i))
            .collect();
        if rows.is_empty() {
            return Err(Error::Input(format!("class {class_id} has no training samples")));
        }
        rows.sort_by(|a, b| {
            a.iter().map(|v| v.to_bits()).cmp(b.iter().map(|v| v.to_bits()))
        });
        let dst = out.row_mut(r);
        for row in &rows {
            for j in 0..d {
                dst[j] += row[j];
            }
        }
        for v in dst.iter_mut() {
            *v /= rows.len() as f64;
        }
    }
    Ok(out)
}

/// Cosine matrix C_t^s between all-class centres (rows) and one task's
/// class embeddings (columns), measured after training task `measured_after`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix {
    /// Task whose class embeddings fill the columns.
    pub task_id: usize,
    /// Snapshot index t at which centres and embeddings were read.
    pub measured_after: usize,
    /// `[|Y_all|, |Y_s|]`, entries in [-1, 1].
    pub values: Tensor,
}

/// Entry [m, n] = cosine(center_m, embedding_n), zero-norm guarded.
pub fn cosine_matrix(
    task_id: usize,
    measured_after: usize,
    embeddings: &Tensor,
    centers: &Tensor,
) -> Result<CosineMatrix> {
    if embeddings.rank() != 2 || centers.rank() != 2 {
        return Err(Error::Contract("cosine_matrix needs rank-2 inputs".into()));
    }
    if embeddings.shape()[1] != centers.shape()[1] {
        return Err(Error::Contract(format!(
            "dimension mismatch: centers are {}-d, embeddings are {}-d",
            centers.shape()[1],
            embeddings.shape()[1]
        )));
    }
    let (m, n) = (centers.shape()[0], embeddings.shape()[0]);
    let mut values = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            values.set2(i, j, cosine(centers.row(i), embeddings.row(j), COSINE_EPS));
        }
    }
    Ok(CosineMatrix { task_id, measured_after, values })
}

/// Mean absolute entrywise difference between two cosine matrices of the
/// same task. Zero when nothing moved.
pub fn moving_distance(c_ref: &CosineMatrix, c_now: &CosineMatrix) -> Result<f64> {
    if c_ref.task_id != c_now.task_id {
        return Err(Error::Contract(format!(
            "moving distance compares one task against itself, got tasks {} and {}",
            c_ref.task_id, c_now.task_id
        )));
    }
    if c_ref.values.shape() != c_now.values.shape() {
        return Err(Error::Contract(format!(
            "shape mismatch: {:?} vs {:?}",
            c_ref.values.shape(),
            c_now.values.shape()
        )));
    }
    let total: f64 = c_ref
        .values
        .data()
        .iter()
        .zip(c_now.values.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / c_ref.values.numel() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MovingDistanceEntry {
    /// Reference task i (its C_i^i is the baseline).
    pub task_id: usize,
    /// Offset k; the compared matrix is C_{i+k}^i.
    pub offset: usize,
    pub md: f64,
}

/// MD_{i+k}^i for every task i and offset k with i+k inside the snapshot
/// range, tagged with the classifier source ("observed" or "probing").
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MovingDistanceReport {
    pub source: String,
    pub entries: Vec<MovingDistanceEntry>,
}

/// Compute the full moving-distance table from per-snapshot state.
///
/// `snapshots[t]` holds the backbone after training task t plus one class
/// embedding matrix per task trained so far (`embeddings[s]` has one row
/// per class of task s). Centres are recomputed with each snapshot's
/// backbone, once per snapshot.
pub fn moving_distance_series(
    snapshots: &[(&Backbone, Vec<Tensor>)],
    stream: &TaskStream,
    source: &str,
) -> Result<MovingDistanceReport> {
    if snapshots.is_empty() {
        return Err(Error::Contract("moving distance needs at least one snapshot".into()));
    }
    let mut matrices: Vec<Vec<CosineMatrix>> = Vec::with_capacity(snapshots.len());
    for (t, (backbone, embeddings)) in snapshots.iter().enumerate() {
        if embeddings.len() < t + 1 {
            return Err(Error::Contract(format!(
                "snapshot {t} must carry embeddings for tasks 0..={t}, got {}",
                embeddings.len()
            )));
        }
        let centers = class_centers(backbone, stream)?;
        let mut per_task = Vec::with_capacity(embeddings.len());
        for (s, emb) in embeddings.iter().enumerate() {
            per_task.push(cosine_matrix(s, t, emb, &centers)?);
        }
        matrices.push(per_task);
    }
    let mut entries = Vec::new();
    for i in 0..snapshots.len() {
        for t in i..snapshots.len() {
            let md = moving_distance(&matrices[i][i], &matrices[t][i])?;
            entries.push(MovingDistanceEntry { task_id: i, offset: t - i, md });
        }
    }
    Ok(MovingDistanceReport { source: source.to_string(), entries })
}

/// Class-embedding norms of one bank snapshot: per-task means plus
/// per-class values, unsorted (class order) and sorted descending
/// (presentation view).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NormReport {
    pub tag: String,
    /// (task_id, mean row L2 norm), task order.
    pub per_task: Vec<(usize, f64)>,
    /// (class_id, row L2 norm), slot order.
    pub per_class: Vec<(usize, f64)>,
    /// Norms sorted descending.
    pub per_class_sorted: Vec<f64>,
}

pub fn norm_report(tag: &str, bank: &ClassifierBank) -> Result<NormReport> {
    if bank.heads().is_empty() {
        return Err(Error::Contract("norm report needs a non-empty bank".into()));
    }
    let mut per_task = Vec::new();
    let mut per_class = Vec::new();
    for head in bank.heads() {
        let mut sum = 0.0;
        for (j, &class_id) in head.class_ids.iter().enumerate() {
            let norm = head.weight.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            per_class.push((class_id, norm));
            sum += norm;
        }
        per_task.push((head.task_id, sum / head.class_ids.len() as f64));
    }
    let mut per_class_sorted: Vec<f64> = per_class.iter().map(|&(_, n)| n).collect();
    per_class_sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(NormReport { tag: tag.to_string(), per_task, per_class, per_class_sorted })
}

/// One 100-bin histogram with recorded edges.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

pub const HIST_BINS: usize = 100;

impl Histogram {
    fn new(lo: f64, hi: f64) -> Self {
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Histogram { lo, hi, counts: vec![0; HIST_BINS] }
    }

    fn add(&mut self, v: f64) {
        let unit = (v - self.lo) / (self.hi - self.lo);
        let bin = ((unit * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the bin containing `v` (clamped to the edge bins).
    pub fn bin_of(&self, v: f64) -> usize {
        let unit = (v - self.lo) / (self.hi - self.lo);
        ((unit.max(0.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
    }
}

/// Narrow-cone evidence: pairwise-cosine histograms for every population
/// pair and an L2-norm histogram per population.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct HistogramReport {
    /// Keyed "a|b" with populations in input order; within-population
    /// entries use "a|a".
    pub cosine: Vec<(String, Histogram)>,
    /// Keyed by population name.
    pub norms: Vec<(String, Histogram)>,
}

pub const DEFAULT_PAIR_CAP: usize = 1_000_000;

/// Build the histogram report over the four standard populations. Cosine
/// histograms span [-1, 1]; norm ranges are data-driven with recorded
/// edges. Pair sets larger than `pair_cap` are subsampled uniformly with
/// replacement from a seeded stream, so reports are deterministic.
pub fn geometry_histograms(
    populations: &[(&str, &Tensor)],
    pair_cap: usize,
    seed: u64,
) -> Result<HistogramReport> {
    if populations.is_empty() {
        return Err(Error::Contract("histograms need at least one population".into()));
    }
    let d = populations[0].1.shape().get(1).copied().unwrap_or(0);
    for (name, t) in populations {
        if t.rank() != 2 || t.shape()[1] != d || t.shape()[0] == 0 {
            return Err(Error::Contract(format!(
                "population {name:?} must be a non-empty [n, {d}] matrix, got {:?}",
                t.shape()
            )));
        }
    }
    if pair_cap == 0 {
        return Err(Error::Config("pair cap must be positive".into()));
    }

    let mut cosine_hists = Vec::new();
    for (ai, (a_name, a)) in populations.iter().enumerate() {
        for (b_name, b) in populations.iter().skip(ai) {
            let within = std::ptr::eq(*a, *b) || a_name == b_name;
            let n_a = a.shape()[0];
            let n_b = b.shape()[0];
            let total_pairs = if within { n_a * (n_a.saturating_sub(1)) / 2 } else { n_a * n_b };
            let mut hist = Histogram::new(-1.0, 1.0);
            if total_pairs == 0 {
                cosine_hists.push((format!("{a_name}|{b_name}"), hist));
                continue;
            }
            let mut record = |i: usize, j: usize| {
                let c = cosine(a.row(i), b.row(j), COSINE_EPS).clamp(-1.0, 1.0);
                hist.add(c);
            };
            if total_pairs <= pair_cap {
                if within {
                    for i in 0..n_a {
                        for j in (i + 1)..n_a {
                            record(i, j);
                        }
                    }
                } else {
                    for i in 0..n_a {
                        for j in 0..n_b {
                            record(i, j);
                        }
                    }
                }
            } else {
                let mut r =
                    rng(derive_seed(seed, &format!("hist-pairs-{a_name}-{b_name}")));
                use rand::Rng as _;
                for _ in 0..pair_cap {
                    if within {
                        let i = r.gen_range(0..n_a);
                        let j = r.gen_range(0..n_a - 1);
                        let j = if j >= i { j + 1 } else { j };
                        record(i, j);
                    } else {
                        let i = r.gen_range(0..n_a);
                        let j = r.gen_range(0..n_b);
                        record(i, j);
                    }
                }
            }
            cosine_hists.push((format!("{a_name}|{b_name}"), hist));
        }
    }

    let mut norm_hists = Vec::new();
    for (name, t) in populations {
        let norms: Vec<f64> = (0..t.shape()[0])
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut hist = Histogram::new(lo, hi);
        for v in norms {
            hist.add(v);
        }
        norm_hists.push((name.to_string(), hist));
    }
    Ok(HistogramReport { cosine: cosine_hists, norms: norm_hists })
}

/// CSV writers. Every file carries a header row and a format-version
/// column.
pub fn write_moving_distance_csv(
    report: &MovingDistanceReport,
    out: &mut impl Write,
) -> Result<()> {
    writeln!(out, "format_version,source,i,k,md")?;
    for e in &report.entries {
        writeln!(out, "1,{},{},{},{}", report.source, e.task_id + 1, e.offset, e.md)?;
    }
    Ok(())
}

pub fn write_norm_csv(reports: &[NormReport], out: &mut impl Write) -> Result<()> {
    writeln!(out, "format_version,tag,scope,key,value")?;
    for r in reports {
        for (task_id, v) in &r.per_task {
            writeln!(out, "1,{},task_mean,{},{}", r.tag, task_id + 1, v)?;
        }
        for (class_id, v) in &r.per_class {
            writeln!(out, "1,{},class,{},{}", r.tag, class_id, v)?;
        }
        for (rank, v) in r.per_class_sorted.iter().enumerate() {
            writeln!(out, "1,{},class_sorted,{},{}", r.tag, rank, v)?;
        }
    }
    Ok(())
}

pub fn write_histogram_csv(report: &HistogramReport, out: &mut impl Write) -> Result<()> {
    writeln!(out, "format_version,histogram,kind,bin,lo,hi,count")?;
    let mut emit = |name: &str, kind: &str, h: &Histogram| -> Result<()> {
        let width = (h.hi - h.lo) / HIST_BINS as f64;
        for (b, count) in h.counts.iter().enumerate() {
            let lo = h.lo + b as f64 * width;
            writeln!(out, "1,{name},{kind},{b},{lo},{},{count}", lo + width)?;
        }
        Ok(())
    };
    for (name, h) in &report.cosine {
        emit(name, "cosine", h)?;
    }
    for (name, h) in &report.norms {
        emit(name, "norm", h)?;
    }
    Ok(())
}

pub fn write_cosine_matrix_csv(m: &CosineMatrix, out: &mut impl Write) -> Result<()> {
    writeln!(out, "format_version,task_id,measured_after,row,col,value")?;
    for i in 0..m.values.shape()[0] {
        for j in 0..m.values.shape()[1] {
            writeln!(
                out,
                "1,{},{},{},{},{}",
                m.task_id + 1,
                m.measured_after + 1,
                i,
                j,
                m.values.get2(i, j)
            )?;
        }
    }
    Ok(())
}
