//! End-to-end backbone checks: gradients of the complete transformer
//! against finite differences, and causal-LM pretraining behaviour.

use seqlab_core::tensor::Tensor;
use seqlab_core::transformer::{
    clm_loss, init_backbone, markov_corpus, prepare_batch, pretrain_clm, AttentionMode,
    BackboneConfig, FeatureMode, PretrainConfig,
};

fn config(n_layers: usize, seed: u64) -> BackboneConfig {
    BackboneConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 10,
        max_seq_len: 6,
        attention_mode: AttentionMode::Causal,
        feature_mode: FeatureMode::LastToken,
        init_seed: seed,
    }
}

#[test]
fn one_block_gradcheck_under_1e4() {
    let backbone = init_backbone(&config(1, 21)).unwrap();
    let graph = backbone.build_lm_graph().unwrap();
    let loss = graph.output_id("loss").unwrap();
    let mut batch = prepare_batch(&[&[2, 3, 4, 5], &[6, 7]], &backbone.config).unwrap();
    batch.bindings.insert(
        "targets".into(),
        Tensor::new(vec![2, 4], vec![3.0, 4.0, 5.0, 2.0, 7.0, 8.0, -1.0, -1.0]).unwrap(),
    );
    let report = graph.grad_check(&batch.bindings, loss, 1e-5, 1e-4).unwrap();
    assert!(
        report.passed(),
        "max rel error {:.3e}, failing {:?}",
        report.max_rel_error,
        report.failed
    );
}

#[test]
fn two_layer_transformer_gradcheck_under_1e4() {
    let backbone = init_backbone(&config(2, 22)).unwrap();
    let graph = backbone.build_lm_graph().unwrap();
    let loss = graph.output_id("loss").unwrap();
    let mut batch = prepare_batch(&[&[2, 5, 8], &[9, 3, 4]], &backbone.config).unwrap();
    batch.bindings.insert(
        "targets".into(),
        Tensor::new(vec![2, 3], vec![5.0, 8.0, 2.0, 3.0, 4.0, 9.0]).unwrap(),
    );
    let report = graph.grad_check(&batch.bindings, loss, 1e-5, 1e-4).unwrap();
    assert!(
        report.passed(),
        "max rel error {:.3e}, failing {:?}",
        report.max_rel_error,
        report.failed
    );
}

#[test]
fn pretraining_reduces_loss_on_repetitive_corpus() {
    let mut backbone = init_backbone(&config(2, 23)).unwrap();
    let corpus = markov_corpus(10, 4, 60, 1, 7).unwrap();
    let before = clm_loss(&backbone, &corpus, 6).unwrap();
    let cfg = PretrainConfig {
        total_steps: 200,
        schedule: vec![0, 200],
        lr: 1e-3,
        batch_size: 8,
        window: 6,
        seed: 1,
    };
    let ckpts = pretrain_clm(&mut backbone, &corpus, &cfg).unwrap();
    let after = clm_loss(&backbone, &corpus, 6).unwrap();
    assert!(
        after < before,
        "loss did not improve: before {before:.4}, after {after:.4}"
    );
    assert_eq!(ckpts.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 200]);
    // The step-0 checkpoint is the untouched initialization.
    let init = init_backbone(&config(2, 23)).unwrap();
    assert_eq!(ckpts[0].backbone().unwrap().weight_hash(), init.weight_hash());
    // The final checkpoint matches the trained backbone.
    assert_eq!(ckpts[1].backbone().unwrap().weight_hash(), backbone.weight_hash());
}

#[test]
fn overfit_two_token_pattern_recovers_it_greedily() {
    let mut backbone = init_backbone(&config(2, 24)).unwrap();
    // A strictly alternating pattern: 2 3 2 3 ...
    let stream: Vec<u32> = (0..40).map(|i| if i % 2 == 0 { 2 } else { 3 }).collect();
    let corpus = vec![stream];
    let cfg = PretrainConfig {
        total_steps: 300,
        schedule: vec![],
        lr: 3e-3,
        batch_size: 4,
        window: 6,
        seed: 2,
    };
    pretrain_clm(&mut backbone, &corpus, &cfg).unwrap();
    let logits = backbone.lm_logits(&[&[2, 3, 2, 3]]).unwrap();
    let v = backbone.config.vocab_size;
    for pos in 0..4 {
        let row = &logits.data()[pos * v..(pos + 1) * v];
        let pred = Tensor::argmax_slice(row) as u32;
        let expect = if pos % 2 == 0 { 3 } else { 2 };
        assert_eq!(pred, expect, "position {pos} predicted {pred}");
    }
}

#[test]
fn pretraining_is_deterministic() {
    let corpus = markov_corpus(10, 4, 60, 2, 8).unwrap();
    let cfg = PretrainConfig {
        total_steps: 50,
        schedule: vec![16, 50],
        lr: 1e-3,
        batch_size: 4,
        window: 6,
        seed: 3,
    };
    let mut a = init_backbone(&config(1, 25)).unwrap();
    let mut b = init_backbone(&config(1, 25)).unwrap();
    let ca = pretrain_clm(&mut a, &corpus, &cfg).unwrap();
    let cb = pretrain_clm(&mut b, &corpus, &cfg).unwrap();
    assert_eq!(a.weight_hash(), b.weight_hash());
    for (x, y) in ca.iter().zip(&cb) {
        assert_eq!(x.backbone().unwrap().weight_hash(), y.backbone().unwrap().weight_hash());
    }
}

#[test]
fn schedule_beyond_total_steps_is_config_error() {
    let mut backbone = init_backbone(&config(1, 26)).unwrap();
    let corpus = markov_corpus(10, 2, 40, 1, 9).unwrap();
    let cfg = PretrainConfig {
        total_steps: 10,
        schedule: vec![0, 20],
        lr: 1e-3,
        batch_size: 2,
        window: 6,
        seed: 4,
    };
    let err = pretrain_clm(&mut backbone, &corpus, &cfg).unwrap_err();
    assert!(matches!(err, seqlab_core::Error::Config(_)));
}
