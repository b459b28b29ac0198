//! Task streams: the class-incremental / task-incremental scenario type,
//! synthetic stream generation with a Bayes-rate oracle, text ingestion
//! from TSV or JSON-lines files, and the replay buffer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};
use crate::transformer::{FIRST_TOKEN_ID, UNK_ID};

/// How tasks are evaluated. Class-incremental prediction ranges over every
/// class seen so far; task-incremental prediction knows the task id and
/// ranges over that task's classes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "CIL")]
    Cil,
    #[serde(rename = "TIL")]
    Til,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Cil => "CIL",
            Scenario::Til => "TIL",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CIL" => Ok(Scenario::Cil),
            "TIL" => Ok(Scenario::Til),
            "DIL" => Err(Error::Validation(
                "scenario DIL is not supported; use CIL or TIL".into(),
            )),
            other => Err(Error::Validation(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<u32>,
    /// Global class id, an index into `TaskStream::class_names`.
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub tasks: Vec<Task>,
    /// Class name per global class id.
    pub class_names: Vec<String>,
    pub vocab_size: usize,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.class_names.len()
    }

    /// (task id, class ids) pairs in stream order, the shape expected by
    /// classifier allocation.
    pub fn head_specs(&self) -> Vec<(usize, Vec<usize>)> {
        self.tasks.iter().map(|t| (t.task_id, t.class_ids.clone())).collect()
    }

    pub fn task_of_class(&self, class_id: usize) -> Option<usize> {
        self.tasks.iter().find(|t| t.class_ids.contains(&class_id)).map(|t| t.task_id)
    }

    /// Structural checks: task ids are 0..T in order, labels belong to the
    /// task that holds them, tokens fit the vocabulary, class-incremental
    /// label sets are disjoint, and no split is empty.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Validation("stream has no tasks".into()));
        }
        let mut seen_classes: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, task) in self.tasks.iter().enumerate() {
            if task.task_id != i {
                return Err(Error::Validation(format!(
                    "task ids must be 0..{} in order, found {} at position {i}",
                    self.tasks.len(),
                    task.task_id
                )));
            }
            if task.class_ids.is_empty() {
                return Err(Error::Validation(format!("task {i} has no classes")));
            }
            for &c in &task.class_ids {
                if c >= self.class_names.len() {
                    return Err(Error::Validation(format!(
                        "task {i} lists class {c} but only {} names are registered",
                        self.class_names.len()
                    )));
                }
                if let Some(prev) = seen_classes.insert(c, i) {
                    if self.scenario == Scenario::Cil {
                        return Err(Error::Validation(format!(
                            "class {c} appears in tasks {prev} and {i}; class-incremental label sets must be disjoint"
                        )));
                    }
                }
            }
            if task.train.is_empty() || task.test.is_empty() {
                return Err(Error::Validation(format!("task {i} has an empty split")));
            }
            for ex in task.train.iter().chain(task.test.iter()) {
                if !task.class_ids.contains(&ex.label) {
                    return Err(Error::Validation(format!(
                        "task {i} holds an example labeled {} outside its class set",
                        ex.label
                    )));
                }
                if ex.tokens.is_empty() {
                    return Err(Error::Validation(format!("task {i} holds an empty sequence")));
                }
                for &tok in &ex.tokens {
                    if tok as usize >= self.vocab_size {
                        return Err(Error::Validation(format!(
                            "token {tok} exceeds vocab size {}",
                            self.vocab_size
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Canonical class order: sort names, then apply a seeded permutation.
/// Duplicate names are rejected.
pub fn order_classes(names: &[String], seed: u64) -> Result<Vec<String>> {
    let mut sorted = names.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("duplicate class name".into()));
    }
    let mut r = rng(derive_seed(seed, "class-order"));
    sorted.shuffle(&mut r);
    Ok(sorted)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub vocab_size: usize,
    /// Mixture weight on each class's preferred token subset; 0 < s <= 1.
    pub separation: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// The experiment runner overwrites this from its master seed.
    #[serde(default)]
    pub seed: u64,
    pub scenario: Scenario,
}

impl SyntheticSpec {
    /// Desk-scale default: 5 tasks x 4 classes, 100 train / 50 test per
    /// class, vocabulary 200, lengths 8..=16, separation 0.95.
    pub fn desk_default(scenario: Scenario, seed: u64) -> Self {
        SyntheticSpec {
            n_tasks: 5,
            classes_per_task: 4,
            train_per_class: 100,
            test_per_class: 50,
            vocab_size: 200,
            separation: 0.95,
            min_len: 8,
            max_len: 16,
            seed,
            scenario,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("need at least one task and one class per task".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("need at least one example per class and split".into()));
        }
        if !(self.separation > 0.0 && self.separation <= 1.0) {
            return Err(Error::Config(format!(
                "separation must be in (0, 1], got {}",
                self.separation
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 0 < min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        let n_classes = self.n_tasks * self.classes_per_task;
        let usable = self.vocab_size.saturating_sub(FIRST_TOKEN_ID as usize);
        if usable < n_classes {
            return Err(Error::Config(format!(
                "vocab size {} leaves {usable} usable tokens for {n_classes} classes; every class needs a nonempty preferred subset",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// A generated stream plus the class-conditional token distributions it
/// was sampled from, so the Bayes rate can be evaluated exactly.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub stream: TaskStream,
    /// Per class: probability of each token id in `0..vocab_size`.
    /// Reserved ids (pad, unknown) have probability zero.
    class_dists: Vec<Vec<f64>>,
}

impl SyntheticStream {
    /// Exact Bayes-classifier accuracy on `examples`: argmax over classes
    /// of the sequence log-likelihood under each class distribution.
    pub fn bayes_accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Input("no examples to score".into()));
        }
        let mut correct = 0usize;
        for ex in examples {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (c, dist) in self.class_dists.iter().enumerate() {
                let mut ll = 0.0;
                for &tok in &ex.tokens {
                    let p = dist[tok as usize];
                    ll += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
                }
                if ll > best.0 {
                    best = (ll, c);
                }
            }
            if best.1 == ex.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    pub fn all_test_examples(&self) -> Vec<LabeledExample> {
        self.stream.tasks.iter().flat_map(|t| t.test.iter().cloned()).collect()
    }
}

fn sample_from_cdf(cdf: &[f64], r: &mut impl Rng) -> usize {
    let u: f64 = r.gen();
    match cdf.binary_search_by(|p| p.partial_cmp(&u).expect("finite cdf")) {
        Ok(i) | Err(i) => i.min(cdf.len() - 1)
    }
}

/// Generate a labeled stream of token sequences. Each class draws tokens
/// i.i.d. from a mixture: weight `separation` on a uniform distribution
/// over the class's preferred token subset, the rest uniform over all
/// usable tokens. Preferred subsets are disjoint across classes, so
/// separation near 1 makes classes nearly decodable from any single
/// token.
pub fn build_synthetic_stream(spec: &SyntheticSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let n_classes = spec.n_tasks * spec.classes_per_task;
    let first = FIRST_TOKEN_ID as usize;
    let usable = spec.vocab_size - first;
    let subset = usable / n_classes;

    let mut class_dists = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let lo = first + c * subset;
        let hi = lo + subset;
        let mut dist = vec![0.0; spec.vocab_size];
        let base = (1.0 - spec.separation) / usable as f64;
        for t in first..spec.vocab_size {
            dist[t] = base;
        }
        for t in lo..hi {
            dist[t] += spec.separation / subset as f64;
        }
        class_dists.push(dist);
    }
    let cdfs: Vec<Vec<f64>> = class_dists
        .iter()
        .map(|d| {
            d.iter()
                .scan(0.0, |acc, p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();

    let draw_split = |c: usize, count: usize, split: &str| -> Vec<LabeledExample> {
        let mut r = rng(derive_seed(spec.seed, &format!("synthetic-{split}-class-{c}")));
        (0..count)
            .map(|_| {
                let len = r.gen_range(spec.min_len..=spec.max_len);
                let tokens = (0..len).map(|_| sample_from_cdf(&cdfs[c], &mut r) as u32).collect();
                LabeledExample { tokens, label: c }
            })
            .collect()
    };

    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let class_ids: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &class_ids {
            train.extend(draw_split(c, spec.train_per_class, "train"));
            test.extend(draw_split(c, spec.test_per_class, "test"));
        }
        let mut r = rng(derive_seed(spec.seed, &format!("synthetic-shuffle-{t}")));
        train.shuffle(&mut r);
        tasks.push(Task { task_id: t, class_ids, train, test });
    }

    let class_names = (0..n_classes).map(|c| format!("class_{c:02}")).collect();
    let stream =
        TaskStream { scenario: spec.scenario, tasks, class_names, vocab_size: spec.vocab_size };
    stream.validate()?;
    Ok(SyntheticStream { stream, class_dists })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamFormat {
    /// One example per line: text, a single tab, label.
    Tsv,
    /// One JSON object per line with "text" and "label" fields.
    JsonLines,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    pub format: StreamFormat,
    pub scenario: Scenario,
    /// Chunk the ordered class list into tasks of this size. Mutually
    /// exclusive with `label_tasks`.
    #[serde(default)]
    pub classes_per_task: Option<usize>,
    /// Explicit label name -> task index map.
    #[serde(default)]
    pub label_tasks: Option<BTreeMap<String, usize>>,
    /// Seed for the class order permutation and the held-out split. The
    /// experiment runner overwrites this from its master seed.
    #[serde(default)]
    pub seed: u64,
    /// Sequences are truncated to this many tokens.
    pub max_seq_len: usize,
    /// Used only when no test file is supplied: per-class fraction held
    /// out for evaluation.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    text: String,
    label: String,
}

fn parse_rows(path: &Path, format: StreamFormat) -> Result<Vec<(Vec<String>, String)>> {
    let file = File::open(path)
        .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = match format {
            StreamFormat::Tsv => match line.split_once('\t') {
                Some((t, l)) => (t.to_string(), l.trim().to_string()),
                None => {
                    return Err(Error::Ingestion(format!(
                        "{}:{}: expected <text>\\t<label>",
                        path.display(),
                        lineno + 1
                    )))
                }
            },
            StreamFormat::JsonLines => {
                let row: JsonRow = serde_json::from_str(&line).map_err(|e| {
                    Error::Ingestion(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
                (row.text, row.label)
            }
        };
        if label.is_empty() {
            return Err(Error::Ingestion(format!(
                "{}:{}: empty label",
                path.display(),
                lineno + 1
            )));
        }
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        rows.push((tokens, label));
    }
    if rows.is_empty() {
        return Err(Error::Ingestion(format!("{} holds no examples", path.display())));
    }
    Ok(rows)
}

/// Load a labeled text stream. The vocabulary is frequency-ranked over
/// the training split only (ties broken lexically); tokens outside it map
/// to the unknown id. Classes are ordered by `order_classes` and split
/// into tasks either by an explicit label -> task map or by chunking.
/// Without a test file, a seeded per-class fraction of the training rows
/// is held out.
pub fn load_stream(
    train_path: &Path,
    test_path: Option<&Path>,
    opts: &IngestOptions,
) -> Result<TaskStream> {
    if !(opts.test_fraction > 0.0 && opts.test_fraction < 1.0) && test_path.is_none() {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {}",
            opts.test_fraction
        )));
    }
    if opts.max_seq_len == 0 {
        return Err(Error::Config("max_seq_len must be positive".into()));
    }
    let train_rows = parse_rows(train_path, opts.format)?;

    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for (tokens, _) in &train_rows {
        for t in tokens {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let token_ids: BTreeMap<&str, u32> = ranked
        .iter()
        .enumerate()
        .map(|(i, (tok, _))| (*tok, FIRST_TOKEN_ID + i as u32))
        .collect();
    let vocab_size = FIRST_TOKEN_ID as usize + token_ids.len();

    let mut label_names: Vec<String> = Vec::new();
    for (_, label) in &train_rows {
        if !label_names.contains(label) {
            label_names.push(label.clone());
        }
    }
    let ordered = order_classes(&label_names, opts.seed)?;
    let class_id: BTreeMap<&str, usize> =
        ordered.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let task_of: BTreeMap<usize, usize> = match (&opts.label_tasks, opts.classes_per_task) {
        (Some(map), None) => {
            for name in &ordered {
                if !map.contains_key(name) {
                    return Err(Error::Ingestion(format!(
                        "label {name:?} appears in the data but not in label_tasks"
                    )));
                }
            }
            for name in map.keys() {
                if !class_id.contains_key(name.as_str()) {
                    return Err(Error::Ingestion(format!(
                        "label_tasks names {name:?} which never appears in the data"
                    )));
                }
            }
            map.iter().map(|(name, &t)| (class_id[name.as_str()], t)).collect()
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(Error::Config("classes_per_task must be positive".into()));
            }
            ordered
                .iter()
                .enumerate()
                .map(|(i, name)| (class_id[name.as_str()], i / n))
                .collect()
        }
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "label_tasks and classes_per_task are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config(
                "need either label_tasks or classes_per_task".into(),
            ))
        }
    };
    let n_tasks = task_of.values().max().map_or(0, |m| m + 1);
    for t in 0..n_tasks {
        if !task_of.values().any(|&v| v == t) {
            return Err(Error::Config(format!("task {t} has no classes assigned")));
        }
    }

    let encode = |tokens: &[String]| -> Vec<u32> {
        let mut ids: Vec<u32> = tokens
            .iter()
            .take(opts.max_seq_len)
            .map(|t| token_ids.get(t.as_str()).copied().unwrap_or(UNK_ID))
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    };
    let to_examples = |rows: &[(Vec<String>, String)], source: &Path| -> Result<Vec<LabeledExample>> {
        rows.iter()
            .map(|(tokens, label)| {
                let &label = class_id.get(label.as_str()).ok_or_else(|| {
                    Error::Ingestion(format!(
                        "{}: label {label:?} is not registered in the training split",
                        source.display()
                    ))
                })?;
                Ok(LabeledExample { tokens: encode(tokens), label })
            })
            .collect()
    };

    let train_examples = to_examples(&train_rows, train_path)?;
    let (train_examples, test_examples) = match test_path {
        Some(p) => (train_examples, to_examples(&parse_rows(p, opts.format)?, p)?),
        None => {
            let mut by_class: BTreeMap<usize, Vec<LabeledExample>> = BTreeMap::new();
            for ex in train_examples {
                by_class.entry(ex.label).or_default().push(ex);
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (c, mut examples) in by_class {
                if examples.len() < 2 {
                    return Err(Error::Ingestion(format!(
                        "class {} needs at least 2 examples to split",
                        ordered[c]
                    )));
                }
                let mut r = rng(derive_seed(opts.seed, &format!("held-out-{c}")));
                examples.shuffle(&mut r);
                let n_test = ((examples.len() as f64 * opts.test_fraction) as usize).max(1);
                test.extend(examples.split_off(examples.len() - n_test));
                train.extend(examples);
            }
            (train, test)
        }
    };

    let mut tasks: Vec<Task> = (0..n_tasks)
        .map(|t| {
            let mut class_ids: Vec<usize> =
                task_of.iter().filter(|(_, &v)| v == t).map(|(&c, _)| c).collect();
            class_ids.sort_unstable();
            Task { task_id: t, class_ids, train: Vec::new(), test: Vec::new() }
        })
        .collect();
    for ex in train_examples {
        tasks[task_of[&ex.label]].train.push(ex);
    }
    for ex in test_examples {
        tasks[task_of[&ex.label]].test.push(ex);
    }
    for task in &mut tasks {
        let mut r = rng(derive_seed(opts.seed, &format!("ingest-shuffle-{}", task.task_id)));
        task.train.shuffle(&mut r);
    }

    let stream = TaskStream { scenario: opts.scenario, tasks, class_names: ordered, vocab_size };
    stream.validate()?;
    Ok(stream)
}

/// Fixed-capacity episodic memory: keeps up to `capacity_per_class`
/// uniformly chosen examples of every class it has been shown.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity_per_class: usize,
    stored: BTreeMap<usize, Vec<LabeledExample>>,
    seed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity_per_class: usize, seed: u64) -> Self {
        ReplayBuffer { capacity_per_class, stored: BTreeMap::new(), seed }
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn len(&self) -> usize {
        self.stored.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        self.stored.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Store up to capacity examples per class from a finished task,
    /// sampled uniformly without replacement. Re-observing a class
    /// replaces its stored slice.
    pub fn update(&mut self, task: &Task) {
        if self.capacity_per_class == 0 {
            return;
        }
        let mut by_class: BTreeMap<usize, Vec<&LabeledExample>> = BTreeMap::new();
        for ex in &task.train {
            by_class.entry(ex.label).or_default().push(ex);
        }
        for (c, examples) in by_class {
            let mut r = rng(derive_seed(self.seed, &format!("buffer-class-{c}")));
            let chosen: Vec<LabeledExample> = examples
                .choose_multiple(&mut r, self.capacity_per_class.min(examples.len()))
                .map(|&ex| ex.clone())
                .collect();
            self.stored.insert(c, chosen);
        }
    }

    /// Everything stored, flattened in class order. Deterministic, so a
    /// frozen-backbone trainer can cache features per stored example.
    pub fn stored_examples(&self) -> Vec<LabeledExample> {
        self.stored.values().flatten().cloned().collect()
    }

    /// Draw `k` examples uniformly with replacement across everything
    /// stored; empty buffers yield an empty batch. `call_index` must be
    /// distinct per call site to decorrelate draws while keeping runs
    /// reproducible.
    pub fn sample(&self, k: usize, call_index: u64) -> Vec<LabeledExample> {
        let flat: Vec<&LabeledExample> = self.stored.values().flatten().collect();
        if flat.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut r = rng(derive_seed(self.seed, &format!("buffer-sample-{call_index}")));
        (0..k).map(|_| flat[r.gen_range(0..flat.len())].clone()).collect()
    }
}
