//! Central-finite-difference verification for every differentiable
//! operation. Each case projects the op output against a fixed random
//! tensor so adjoints are non-uniform, then compares analytic gradients
//! with (L(x+h) - L(x-h)) / 2h at h = 1e-5.

use rand::Rng;
use seqlab_core::graph::{Bindings, Graph, NodeId};
use seqlab_core::seed::rng;
use seqlab_core::tensor::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| r.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Project `out` to a scalar with a fixed random weighting and gradcheck it.
fn check(graph: &mut Graph, out: NodeId, out_shape: Vec<usize>, bindings: &Bindings, seed: u64) {
    let weights = graph.constant(random_tensor(out_shape, seed ^ 0xABCD));
    let weighted = graph.mul(out, weights);
    let loss = graph.sum(weighted);
    let report = graph.grad_check(bindings, loss, STEP, TOL).unwrap();
    assert!(
        report.passed(),
        "gradcheck failed: max rel error {:.3e}, failing params {:?}",
        report.max_rel_error,
        report.failed
    );
}

#[test]
fn add_with_broadcast() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![2, 3, 4], 1)).unwrap();
    let b = g.param("b", random_tensor(vec![4], 2)).unwrap();
    let out = g.add(a, b);
    check(&mut g, out, vec![2, 3, 4], &Bindings::new(), 3);
}

#[test]
fn add_with_middle_broadcast_dim() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![2, 3, 2, 2], 4)).unwrap();
    let b = g.param("b", random_tensor(vec![2, 1, 2, 2], 5)).unwrap();
    let out = g.add(a, b);
    check(&mut g, out, vec![2, 3, 2, 2], &Bindings::new(), 6);
}

#[test]
fn mul_with_broadcast() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![3, 4], 7)).unwrap();
    let b = g.param("b", random_tensor(vec![1, 4], 8)).unwrap();
    let out = g.mul(a, b);
    check(&mut g, out, vec![3, 4], &Bindings::new(), 9);
}

#[test]
fn scale_op() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![5], 10)).unwrap();
    let out = g.scale(a, -2.5);
    check(&mut g, out, vec![5], &Bindings::new(), 11);
}

#[test]
fn matmul_2d() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![3, 4], 12)).unwrap();
    let b = g.param("b", random_tensor(vec![4, 2], 13)).unwrap();
    let out = g.matmul(a, b);
    check(&mut g, out, vec![3, 2], &Bindings::new(), 14);
}

#[test]
fn matmul_3d_by_2d() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![2, 3, 4], 15)).unwrap();
    let b = g.param("b", random_tensor(vec![4, 5], 16)).unwrap();
    let out = g.matmul(a, b);
    check(&mut g, out, vec![2, 3, 5], &Bindings::new(), 17);
}

#[test]
fn matmul_batched_4d() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![2, 2, 3, 4], 18)).unwrap();
    let b = g.param("b", random_tensor(vec![2, 2, 4, 3], 19)).unwrap();
    let out = g.matmul(a, b);
    check(&mut g, out, vec![2, 2, 3, 3], &Bindings::new(), 20);
}

#[test]
fn transpose_last_op() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![2, 3, 4], 21)).unwrap();
    let out = g.transpose_last(a);
    check(&mut g, out, vec![2, 4, 3], &Bindings::new(), 22);
}

#[test]
fn split_and_merge_heads() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![2, 3, 6], 23)).unwrap();
    let split = g.split_heads(a, 2);
    let merged = g.merge_heads(split);
    check(&mut g, merged, vec![2, 3, 6], &Bindings::new(), 24);
}

#[test]
fn softmax_rows() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![3, 5], 25)).unwrap();
    let out = g.softmax(a);
    check(&mut g, out, vec![3, 5], &Bindings::new(), 26);
}

#[test]
fn layer_norm_all_three_inputs() {
    let mut g = Graph::new();
    let x = g.param("x", random_tensor(vec![4, 6], 27)).unwrap();
    let gain = g.param("gain", random_tensor(vec![6], 28)).unwrap();
    let offset = g.param("offset", random_tensor(vec![6], 29)).unwrap();
    let out = g.layer_norm(x, gain, offset);
    check(&mut g, out, vec![4, 6], &Bindings::new(), 30);
}

#[test]
fn gelu_op() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![7], 31)).unwrap();
    let out = g.gelu(a);
    check(&mut g, out, vec![7], &Bindings::new(), 32);
}

#[test]
fn embedding_table_gradient() {
    let mut g = Graph::new();
    let table = g.param("table", random_tensor(vec![5, 3], 33)).unwrap();
    let ids = g.input("ids");
    let out = g.embedding(table, ids);
    let mut bind = Bindings::new();
    // Repeated id 2 exercises scatter-add accumulation.
    bind.insert("ids".into(), Tensor::new(vec![2, 2], vec![0.0, 2.0, 2.0, 4.0]).unwrap());
    check(&mut g, out, vec![2, 2, 3], &bind, 34);
}

#[test]
fn gather_rows_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", random_tensor(vec![2, 4, 3], 35)).unwrap();
    let pos = g.input("pos");
    let out = g.gather_rows(x, pos);
    let mut bind = Bindings::new();
    bind.insert("pos".into(), Tensor::new(vec![2], vec![3.0, 0.0]).unwrap());
    check(&mut g, out, vec![2, 3], &bind, 36);
}

#[test]
fn concat_cols_gradient() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![3, 2], 37)).unwrap();
    let b = g.param("b", random_tensor(vec![3, 4], 38)).unwrap();
    let c = g.param("c", random_tensor(vec![3, 1], 39)).unwrap();
    let out = g.concat_cols(vec![a, b, c]);
    check(&mut g, out, vec![3, 7], &Bindings::new(), 40);
}

#[test]
fn cosine_gradient_both_sides() {
    let mut g = Graph::new();
    let f = g.param("f", random_tensor(vec![3, 4], 41)).unwrap();
    let w = g.param("w", random_tensor(vec![2, 4], 42)).unwrap();
    let out = g.cosine(f, w);
    check(&mut g, out, vec![3, 2], &Bindings::new(), 43);
}

#[test]
fn cross_entropy_with_ignored_rows() {
    let mut g = Graph::new();
    let logits = g.param("logits", random_tensor(vec![4, 5], 44)).unwrap();
    let targets = g.input("targets");
    let loss = g.cross_entropy(logits, targets);
    let mut bind = Bindings::new();
    bind.insert("targets".into(), Tensor::new(vec![4], vec![1.0, -1.0, 4.0, 0.0]).unwrap());
    let report = g.grad_check(&bind, loss, STEP, TOL).unwrap();
    assert!(report.passed(), "max rel error {:.3e}", report.max_rel_error);
}

#[test]
fn mean_op() {
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![2, 3], 45)).unwrap();
    let out = g.mean(a);
    let report = g.grad_check(&Bindings::new(), out, STEP, TOL).unwrap();
    assert!(report.passed());
}

#[test]
fn composite_expression() {
    // gelu(layer_norm(a @ b + bias)) summed through softmax.
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(vec![3, 4], 46)).unwrap();
    let b = g.param("b", random_tensor(vec![4, 6], 47)).unwrap();
    let bias = g.param("bias", random_tensor(vec![6], 48)).unwrap();
    let gain = g.param("gain", random_tensor(vec![6], 49)).unwrap();
    let offset = g.param("offset", random_tensor(vec![6], 50)).unwrap();
    let mm = g.matmul(a, b);
    let shifted = g.add(mm, bias);
    let normed = g.layer_norm(shifted, gain, offset);
    let act = g.gelu(normed);
    let soft = g.softmax(act);
    check(&mut g, soft, vec![3, 6], &Bindings::new(), 51);
}
