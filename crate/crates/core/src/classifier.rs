//! Per-task classifier heads and the bank that owns them.
//!
//! A head is one weight matrix, one row per class, no bias. Kinds:
//! `linear` (dot product), `cosine_linear` (cosine similarity, trained),
//! `prototype` (rows are class feature centres), `cosine_prototype`
//! (cosine against centres). The bank maps every class to a global logit
//! slot in allocation order, concatenates per-head logits for
//! class-incremental evaluation, and enforces freeze contracts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seed::{derive_seed, rng};
use crate::stream::Scenario;
use crate::tensor::{cosine, dot, Tensor, COSINE_EPS};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Linear,
    CosineLinear,
    Prototype,
    CosinePrototype,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] =
        [HeadKind::Linear, HeadKind::CosineLinear, HeadKind::Prototype, HeadKind::CosinePrototype];

    pub fn is_cosine(self) -> bool {
        matches!(self, HeadKind::CosineLinear | HeadKind::CosinePrototype)
    }

    /// Prototype kinds are fit from feature centres and carry no trainable
    /// parameters.
    pub fn is_prototype(self) -> bool {
        matches!(self, HeadKind::Prototype | HeadKind::CosinePrototype)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::CosineLinear => "cosine_linear",
            HeadKind::Prototype => "prototype",
            HeadKind::CosinePrototype => "cosine_prototype",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "cosine_linear" => Ok(HeadKind::CosineLinear),
            "prototype" => Ok(HeadKind::Prototype),
            "cosine_prototype" => Ok(HeadKind::CosinePrototype),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

/// One task's classifier: `weight[r]` is the class embedding of
/// `class_ids[r]`.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub weight: Tensor,
    pub kind: HeadKind,
    pub frozen: bool,
}

impl TaskHead {
    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// All heads of one run plus the class-to-slot map.
#[derive(Debug, Clone)]
pub struct ClassifierBank {
    pub scenario: Scenario,
    pub d_model: usize,
    heads: Vec<TaskHead>,
    /// Global class id per logit slot, in allocation order.
    slots: Vec<usize>,
    slot_of: BTreeMap<usize, usize>,
    /// Multiplier applied to every cosine-kind logit.
    pub cosine_scale: f64,
    /// Score prototype heads by (shifted) negative squared Euclidean
    /// distance instead of the dot product. Argmax-equivalent to nearest
    /// centre.
    pub prototype_euclidean: bool,
}

impl ClassifierBank {
    pub fn new(scenario: Scenario, d_model: usize) -> Self {
        ClassifierBank {
            scenario,
            d_model,
            heads: Vec::new(),
            slots: Vec::new(),
            slot_of: BTreeMap::new(),
            cosine_scale: 1.0,
            prototype_euclidean: false,
        }
    }

    /// Append heads for `specs` (task id, class ids), one weight row per
    /// class, scaled-normal initialized from `seed` and the task id so the
    /// weights do not depend on how allocation is batched. New heads are
    /// trainable.
    pub fn allocate_heads(
        &mut self,
        specs: &[(usize, Vec<usize>)],
        kind: HeadKind,
        seed: u64,
    ) -> Result<()> {
        for (task_id, class_ids) in specs {
            if class_ids.is_empty() {
                return Err(Error::Allocation(format!("task {task_id} has no classes")));
            }
            if self.heads.iter().any(|h| h.task_id == *task_id) {
                return Err(Error::Allocation(format!("task {task_id} already has a head")));
            }
            let mut seen = class_ids.to_vec();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != class_ids.len() {
                return Err(Error::Allocation(format!("task {task_id} repeats a class id")));
            }
            if self.scenario == Scenario::Cil {
                for c in class_ids {
                    if self.slot_of.contains_key(c) {
                        return Err(Error::Allocation(format!(
                            "class {c} is already allocated; class-incremental label sets must be disjoint"
                        )));
                    }
                }
            }
            let mut r = rng(derive_seed(seed, &format!("head-init-{task_id}")));
            let dist = Normal::new(0.0, 0.02).expect("valid std");
            let data: Vec<f64> =
                (0..class_ids.len() * self.d_model).map(|_| dist.sample(&mut r)).collect();
            let weight = Tensor::new(vec![class_ids.len(), self.d_model], data)?;
            for c in class_ids {
                self.slot_of.insert(*c, self.slots.len());
                self.slots.push(*c);
            }
            self.heads.push(TaskHead {
                task_id: *task_id,
                class_ids: class_ids.clone(),
                weight,
                kind,
                frozen: false,
            });
        }
        Ok(())
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> impl Iterator<Item = &mut TaskHead> {
        self.heads.iter_mut()
    }

    pub fn head(&self, task_id: usize) -> Result<&TaskHead> {
        self.heads
            .iter()
            .find(|h| h.task_id == task_id)
            .ok_or_else(|| Error::Lookup(format!("no head for task {task_id}")))
    }

    pub fn head_mut(&mut self, task_id: usize) -> Result<&mut TaskHead> {
        self.heads
            .iter_mut()
            .find(|h| h.task_id == task_id)
            .ok_or_else(|| Error::Lookup(format!("no head for task {task_id}")))
    }

    /// Replace a head fit outside the bank (prototype refits).
    pub fn replace_head(&mut self, head: TaskHead) -> Result<()> {
        let existing = self.head_mut(head.task_id)?;
        if existing.class_ids != head.class_ids {
            return Err(Error::Contract("replacement head lists different classes".into()));
        }
        *existing = head;
        Ok(())
    }

    pub fn freeze_heads(&mut self, task_ids: &[usize]) -> Result<()> {
        for &t in task_ids {
            self.head_mut(t)?.frozen = true;
        }
        Ok(())
    }

    pub fn total_slots(&self) -> usize {
        self.slots.len()
    }

    /// Global class id stored in a logit slot.
    pub fn class_of_slot(&self, slot: usize) -> Result<usize> {
        self.slots
            .get(slot)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("slot {slot} is not allocated")))
    }

    pub fn slot_of_class(&self, class_id: usize) -> Result<usize> {
        self.slot_of
            .get(&class_id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("class {class_id} is not allocated")))
    }

    /// Logits of one head against `features` `[N, D]`.
    pub fn head_logits(&self, head: &TaskHead, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.shape()[1] != self.d_model {
            return Err(Error::dim(
                "bank_logits",
                format!("features must be [N, {}], got {:?}", self.d_model, features.shape()),
            ));
        }
        let n = features.shape()[0];
        let c = head.n_classes();
        let mut out = Tensor::zeros(vec![n, c]);
        for i in 0..n {
            let f = features.row(i);
            for j in 0..c {
                let w = head.weight.row(j);
                let v = match head.kind {
                    HeadKind::Linear => dot(f, w),
                    HeadKind::CosineLinear | HeadKind::CosinePrototype => {
                        cosine(f, w, COSINE_EPS) * self.cosine_scale
                    }
                    HeadKind::Prototype => {
                        if self.prototype_euclidean {
                            dot(f, w) - 0.5 * dot(w, w)
                        } else {
                            dot(f, w)
                        }
                    }
                };
                out.set2(i, j, v);
            }
        }
        Ok(out)
    }

    /// Bank logits. With `task_id = None` (class-incremental use) this is
    /// the column concatenation over every allocated head in slot order,
    /// including pre-allocated future heads. With `task_id = Some(t)` it
    /// is head `t` alone. Task-incremental banks require a task id.
    pub fn logits(&self, features: &Tensor, task_id: Option<usize>) -> Result<Tensor> {
        match task_id {
            Some(t) => self.head_logits(self.head(t)?, features),
            None => {
                if self.scenario == Scenario::Til {
                    return Err(Error::Contract(
                        "task-incremental logits require a task id".into(),
                    ));
                }
                if self.heads.is_empty() {
                    return Err(Error::Contract("bank has no allocated heads".into()));
                }
                let parts: Vec<Tensor> = self
                    .heads
                    .iter()
                    .map(|h| self.head_logits(h, features))
                    .collect::<Result<_>>()?;
                let n = features.shape()[0];
                let total = self.total_slots();
                let mut out = Tensor::zeros(vec![n, total]);
                for i in 0..n {
                    let mut col = 0usize;
                    for p in &parts {
                        let c = p.shape()[1];
                        out.row_mut(i)[col..col + c].copy_from_slice(p.row(i));
                        col += c;
                    }
                }
                Ok(out)
            }
        }
    }

    /// SHA-256 over head metadata and weights; equal iff bitwise equal.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        for head in &self.heads {
            h.update(head.task_id.to_le_bytes());
            for c in &head.class_ids {
                h.update(c.to_le_bytes());
            }
            for v in head.weight.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// One CSV row per class embedding: task id, class id, then the
    /// weight vector.
    pub fn export_csv(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "format_version,task_id,class_id")?;
        for j in 0..self.d_model {
            write!(out, ",w{j}")?;
        }
        writeln!(out)?;
        for head in &self.heads {
            for (r, class_id) in head.class_ids.iter().enumerate() {
                write!(out, "1,{},{}", head.task_id, class_id)?;
                for v in head.weight.row(r) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Register a head weight as a trainable graph parameter and return its
/// logits node against `features` (`[N, D]`). Used by gradient-trained
/// heads only: prototype kinds are fit from centres, never trained, so
/// they take the plain dot-product branch here.
pub fn append_head_logits(
    graph: &mut Graph,
    name: &str,
    weight: &Tensor,
    kind: HeadKind,
    cosine_scale: f64,
    features: NodeId,
) -> Result<NodeId> {
    let w = graph.param(name, weight.clone())?;
    let logits = match kind {
        HeadKind::Linear | HeadKind::Prototype => {
            let wt = graph.transpose_last(w);
            graph.matmul(features, wt)
        }
        HeadKind::CosineLinear | HeadKind::CosinePrototype => {
            let c = graph.cosine(features, w);
            graph.scale(c, cosine_scale)
        }
    };
    Ok(logits)
}

/// Mean feature per class, rows following `class_ids` order. Every class
/// must have at least one sample.
pub fn mean_rows_per_class(
    features: &Tensor,
    labels: &[usize],
    class_ids: &[usize],
) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::dim(
            "mean_rows_per_class",
            format!("features {:?} vs {} labels", features.shape(), labels.len()),
        ));
    }
    let d = features.shape()[1];
    let mut out = Tensor::zeros(vec![class_ids.len(), d]);
    for (r, class_id) in class_ids.iter().enumerate() {
        let mut count = 0usize;
        for (i, l) in labels.iter().enumerate() {
            if l == class_id {
                let row = features.row(i);
                let dst = out.row_mut(r);
                for j in 0..d {
                    dst[j] += row[j];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Input(format!("class {class_id} has no samples")));
        }
        let dst = out.row_mut(r);
        for v in dst.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(out)
}

/// Build a prototype head from features: each row is the class feature
/// centre. The result is frozen (prototype heads are never
/// gradient-trained).
pub fn fit_prototype_head(
    task_id: usize,
    class_ids: &[usize],
    features: &Tensor,
    labels: &[usize],
    kind: HeadKind,
) -> Result<TaskHead> {
    if !kind.is_prototype() {
        return Err(Error::Contract(format!(
            "fit_prototype_head requires a prototype kind, got {kind}"
        )));
    }
    let weight = mean_rows_per_class(features, labels, class_ids)?;
    Ok(TaskHead { task_id, class_ids: class_ids.to_vec(), weight, kind, frozen: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_logit_of_parallel_vectors_is_one() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 2);
        bank.allocate_heads(&[(0, vec![0])], HeadKind::CosineLinear, 1).unwrap();
        bank.head_mut(0).unwrap().weight = features(&[vec![6.0, 8.0]]);
        let logits = bank.logits(&features(&[vec![3.0, 4.0]]), None).unwrap();
        assert!((logits.get2(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_logit_is_dot_product() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 2);
        bank.allocate_heads(&[(0, vec![0])], HeadKind::Linear, 1).unwrap();
        bank.head_mut(0).unwrap().weight = features(&[vec![6.0, 8.0]]);
        let logits = bank.logits(&features(&[vec![3.0, 4.0]]), None).unwrap();
        assert_eq!(logits.get2(0, 0), 50.0);
    }

    #[test]
    fn slots_number_in_allocation_order() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 4);
        let specs: Vec<(usize, Vec<usize>)> =
            (0..3).map(|t| (t, (t * 4..t * 4 + 4).collect())).collect();
        bank.allocate_heads(&specs, HeadKind::Linear, 7).unwrap();
        assert_eq!(bank.total_slots(), 12);
        for slot in 0..12 {
            assert_eq!(bank.class_of_slot(slot).unwrap(), slot);
            assert_eq!(bank.slot_of_class(slot).unwrap(), slot);
        }
    }

    #[test]
    fn duplicate_class_in_cil_is_allocation_error() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 4);
        bank.allocate_heads(&[(0, vec![0, 1])], HeadKind::Linear, 7).unwrap();
        let err = bank.allocate_heads(&[(1, vec![1, 2])], HeadKind::Linear, 7).unwrap_err();
        assert!(matches!(err, Error::Allocation(_)));
    }

    #[test]
    fn til_allows_overlapping_class_ids() {
        let mut bank = ClassifierBank::new(Scenario::Til, 4);
        bank.allocate_heads(&[(0, vec![0, 1]), (1, vec![0, 1])], HeadKind::Linear, 7).unwrap();
        assert_eq!(bank.total_slots(), 4);
    }

    #[test]
    fn til_logits_without_task_is_contract_error() {
        let mut bank = ClassifierBank::new(Scenario::Til, 2);
        bank.allocate_heads(&[(0, vec![0, 1])], HeadKind::Linear, 7).unwrap();
        let err = bank.logits(&features(&[vec![1.0, 0.0]]), None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn head_init_independent_of_allocation_batching() {
        let mut together = ClassifierBank::new(Scenario::Cil, 3);
        together
            .allocate_heads(&[(0, vec![0, 1]), (1, vec![2, 3])], HeadKind::Linear, 5)
            .unwrap();
        let mut incremental = ClassifierBank::new(Scenario::Cil, 3);
        incremental.allocate_heads(&[(0, vec![0, 1])], HeadKind::Linear, 5).unwrap();
        incremental.allocate_heads(&[(1, vec![2, 3])], HeadKind::Linear, 5).unwrap();
        assert_eq!(together.weight_hash(), incremental.weight_hash());
    }

    #[test]
    fn prototype_of_two_samples_is_their_mean() {
        let f = features(&[vec![1.0, 0.0], vec![3.0, 0.0]]);
        let head = fit_prototype_head(0, &[7], &f, &[7, 7], HeadKind::Prototype).unwrap();
        assert_eq!(head.weight.row(0), &[2.0, 0.0]);
        assert!(head.frozen);
    }

    #[test]
    fn prototype_fit_rejects_missing_class_and_wrong_kind() {
        let f = features(&[vec![1.0, 0.0]]);
        assert!(matches!(
            fit_prototype_head(0, &[7, 8], &f, &[7], HeadKind::Prototype),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            fit_prototype_head(0, &[7], &f, &[7], HeadKind::Linear),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn euclidean_prototype_prefers_nearest_centre() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 2);
        bank.allocate_heads(&[(0, vec![0, 1])], HeadKind::Prototype, 1).unwrap();
        bank.prototype_euclidean = true;
        // Centres at (0,0) and (10,0); feature at (1,0) is nearest the
        // first even though the dot product prefers the second.
        bank.head_mut(0).unwrap().weight = features(&[vec![0.0, 0.0], vec![10.0, 0.0]]);
        let logits = bank.logits(&features(&[vec![1.0, 0.0]]), None).unwrap();
        assert!(logits.get2(0, 0) > logits.get2(0, 1));
        bank.prototype_euclidean = false;
        let logits = bank.logits(&features(&[vec![1.0, 0.0]]), None).unwrap();
        assert!(logits.get2(0, 1) > logits.get2(0, 0));
    }

    #[test]
    fn cosine_argmax_is_scale_invariant() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 3);
        bank.allocate_heads(&[(0, vec![0, 1, 2])], HeadKind::CosineLinear, 3).unwrap();
        let f = features(&[vec![0.3, -0.7, 0.2]]);
        let base = bank.logits(&f, None).unwrap();
        let scaled = bank.logits(&f.map(|v| v * 1734.5), None).unwrap();
        assert_eq!(
            Tensor::argmax_slice(base.row(0)),
            Tensor::argmax_slice(scaled.row(0))
        );
    }

    #[test]
    fn cosine_logits_bounded_by_scale() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 3);
        bank.allocate_heads(&[(0, vec![0, 1])], HeadKind::CosinePrototype, 9).unwrap();
        bank.cosine_scale = 4.0;
        let logits = bank
            .logits(&features(&[vec![5.0, -2.0, 1.0], vec![-1.0, -1.0, -1.0]]), None)
            .unwrap();
        for &v in logits.data() {
            assert!(v.abs() <= 4.0 + 1e-12);
        }
    }

    #[test]
    fn freeze_unknown_task_is_lookup_error() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 2);
        assert!(matches!(bank.freeze_heads(&[3]), Err(Error::Lookup(_))));
    }

    #[test]
    fn csv_export_has_header_and_one_row_per_class() {
        let mut bank = ClassifierBank::new(Scenario::Cil, 2);
        bank.allocate_heads(&[(0, vec![0, 1]), (1, vec![2])], HeadKind::Linear, 2).unwrap();
        let mut buf = Vec::new();
        bank.export_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "format_version,task_id,class_id,w0,w1");
        assert!(lines[1].starts_with("1,0,0,"));
        assert!(lines[3].starts_with("1,1,2,"));
    }
}
