//! End-to-end checks of the incremental-learning loop on a small
//! synthetic stream: freeze contracts (bitwise), pre-allocation effects,
//! loss descent, evaluation shape, and run determinism.

use seqlab_core::classifier::ClassifierBank;
use seqlab_core::engine::{
    parse_preset, run_experiment, train_task, EngineState, StrategyConfig,
};
use seqlab_core::error::Error;
use seqlab_core::seed::derive_seed;
use seqlab_core::stream::{build_synthetic_stream, Scenario, SyntheticSpec, TaskStream};
use seqlab_core::transformer::{
    init_backbone, AttentionMode, Backbone, BackboneConfig, FeatureMode,
};

fn small_stream(scenario: Scenario) -> TaskStream {
    let spec = SyntheticSpec {
        n_tasks: 3,
        classes_per_task: 2,
        train_per_class: 15,
        test_per_class: 8,
        vocab_size: 80,
        separation: 0.9,
        min_len: 4,
        max_len: 8,
        seed: 40,
        scenario,
    };
    build_synthetic_stream(&spec).unwrap().stream
}

fn small_backbone(seed: u64) -> Backbone {
    let config = BackboneConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 80,
        max_seq_len: 12,
        attention_mode: AttentionMode::Causal,
        feature_mode: FeatureMode::LastToken,
        init_seed: seed,
    };
    init_backbone(&config).unwrap()
}

fn fast(mut cfg: StrategyConfig) -> StrategyConfig {
    cfg.epochs_per_task = 3;
    cfg
}

#[test]
fn training_loss_decreases_over_epochs_on_separable_data() {
    let stream = small_stream(Scenario::Cil);
    let cfg = parse_preset("SEQ(Lin)", Scenario::Cil).unwrap();
    let record = run_experiment(&stream, small_backbone(1), &cfg, 7).unwrap();
    let losses = &record.task_logs[0].epoch_losses;
    assert_eq!(losses.len(), 5);
    assert!(
        losses[4] < losses[0],
        "epoch losses did not decrease: {losses:?}"
    );
}

#[test]
fn fixb_without_warmup_keeps_backbone_bitwise_unchanged() {
    let stream = small_stream(Scenario::Cil);
    let backbone = small_backbone(2);
    let before = backbone.weight_hash();
    let cfg = fast(parse_preset("SEQ(FixB+Cos)", Scenario::Cil).unwrap());
    let record = run_experiment(&stream, backbone, &cfg, 7).unwrap();
    for snap in &record.snapshots {
        assert_eq!(snap.backbone.weight_hash(), before);
        assert!(snap.backbone.frozen);
    }
}

#[test]
fn warmup_trains_the_backbone_then_fixb_freezes_it() {
    let stream = small_stream(Scenario::Cil);
    let backbone = small_backbone(3);
    let before = backbone.weight_hash();
    let cfg = fast(parse_preset("SEQ*(W+FixBC+Cos)", Scenario::Cil).unwrap());
    let record = run_experiment(&stream, backbone, &cfg, 7).unwrap();
    let after_first = record.snapshots[0].backbone.weight_hash();
    assert_ne!(after_first, before, "warm-up must update the backbone");
    for snap in &record.snapshots[1..] {
        assert_eq!(snap.backbone.weight_hash(), after_first);
    }
}

#[test]
fn fixc_keeps_old_head_weights_bitwise_unchanged() {
    let stream = small_stream(Scenario::Cil);
    let cfg = fast(parse_preset("SEQ(FixC+Cos)", Scenario::Cil).unwrap());
    let record = run_experiment(&stream, small_backbone(4), &cfg, 7).unwrap();
    let first = record.snapshots[0].bank.head(0).unwrap().weight.clone();
    let last = record.snapshots.last().unwrap().bank.head(0).unwrap();
    assert_eq!(last.weight, first);
    assert!(last.frozen);
}

#[test]
fn plain_seq_moves_old_head_weights() {
    let stream = small_stream(Scenario::Cil);
    let cfg = fast(parse_preset("SEQ(Cos)", Scenario::Cil).unwrap());
    let record = run_experiment(&stream, small_backbone(4), &cfg, 7).unwrap();
    let first = record.snapshots[0].bank.head(0).unwrap().weight.clone();
    let last = record.snapshots.last().unwrap().bank.head(0).unwrap();
    assert_ne!(last.weight, first);
}

#[test]
fn preallocation_trains_future_heads_during_the_first_task() {
    let stream = small_stream(Scenario::Cil);
    let cfg = fast(parse_preset("SEQ(P+W+FixBC+Lin)", Scenario::Cil).unwrap());
    assert_eq!(cfg.warnings().len(), 1, "Lin in CIL with no replay should warn");
    let master = 7;
    let record = run_experiment(&stream, small_backbone(5), &cfg, master).unwrap();
    // Rebuild the initial allocation to compare against.
    let mut initial = ClassifierBank::new(Scenario::Cil, 16);
    initial
        .allocate_heads(&stream.head_specs(), cfg.head_kind, derive_seed(master, "head-init"))
        .unwrap();
    let after_first = &record.snapshots[0].bank;
    assert_eq!(after_first.total_slots(), 6, "all heads allocated up front");
    for t in 1..3 {
        assert_ne!(
            after_first.head(t).unwrap().weight,
            initial.head(t).unwrap().weight,
            "future head {t} should receive gradients through the shared softmax"
        );
    }
}

#[test]
fn runs_are_bit_deterministic() {
    let stream = small_stream(Scenario::Cil);
    let cfg = fast(parse_preset("SEQ(Cos)", Scenario::Cil).unwrap());
    let a = run_experiment(&stream, small_backbone(6), &cfg, 11).unwrap();
    let b = run_experiment(&stream, small_backbone(6), &cfg, 11).unwrap();
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.write_results_csv(&mut csv_a).unwrap();
    b.write_results_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(
        a.snapshots.last().unwrap().backbone.weight_hash(),
        b.snapshots.last().unwrap().backbone.weight_hash()
    );
    assert_eq!(
        a.snapshots.last().unwrap().bank.weight_hash(),
        b.snapshots.last().unwrap().bank.weight_hash()
    );
}

#[test]
fn matrix_is_lower_triangular_with_one_row_per_task() {
    let stream = small_stream(Scenario::Cil);
    let cfg = fast(parse_preset("SEQ(Lin)", Scenario::Cil).unwrap());
    let record = run_experiment(&stream, small_backbone(7), &cfg, 7).unwrap();
    assert_eq!(record.matrix.n_tasks(), 3);
    let mut entries = 0;
    for t in 1..=3 {
        let row = record.matrix.row(t).unwrap();
        assert_eq!(row.len(), t);
        for &a in row {
            assert!((0.0..=1.0).contains(&a));
        }
        entries += row.len();
    }
    assert_eq!(entries, 3 * 4 / 2);
    assert_eq!(record.a_t.len(), 3);
    assert_eq!(record.snapshots.len(), 3);
}

#[test]
fn til_run_keeps_current_task_accuracy_high() {
    let stream = small_stream(Scenario::Til);
    let mut cfg = parse_preset("SEQ(Lin)", Scenario::Til).unwrap();
    // The tiny stream yields one default-size batch per epoch; smaller
    // batches and a faster head give the optimizer enough steps to fit.
    cfg.batch_size = 8;
    cfg.head_lr = 5e-3;
    let record = run_experiment(&stream, small_backbone(8), &cfg, 7).unwrap();
    let last = record.matrix.row(3).unwrap();
    assert!(
        last[2] >= 0.75,
        "current-task accuracy {} too low for separable data",
        last[2]
    );
}

#[test]
fn replay_never_hurts_old_task_accuracy_here() {
    let stream = small_stream(Scenario::Cil);
    let plain = parse_preset("SEQ(Lin)", Scenario::Cil).unwrap();
    let mut replay = plain.clone();
    replay.replay_capacity_per_class = 8;
    replay.name = "SEQ(Lin)+ER".into();
    let old_mean = |record: &seqlab_core::engine::ExperimentRecord| {
        let row = record.matrix.row(3).unwrap();
        (row[0] + row[1]) / 2.0
    };
    let a = run_experiment(&stream, small_backbone(9), &plain, 7).unwrap();
    let b = run_experiment(&stream, small_backbone(9), &replay, 7).unwrap();
    assert!(
        old_mean(&b) >= old_mean(&a),
        "replay {} vs plain {}",
        old_mean(&b),
        old_mean(&a)
    );
}

#[test]
fn scenario_mismatch_is_a_contract_error() {
    let stream = small_stream(Scenario::Cil);
    let cfg = parse_preset("SEQ(Lin)", Scenario::Til).unwrap();
    let err = run_experiment(&stream, small_backbone(10), &cfg, 7).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn train_task_enforces_order_and_allocation() {
    let stream = small_stream(Scenario::Cil);
    let cfg = fast(parse_preset("SEQ(Lin)", Scenario::Cil).unwrap());
    let mut state = EngineState::new(small_backbone(11), &cfg, 7);
    // No head allocated yet.
    let err = train_task(&mut state, &stream.tasks[0], &cfg).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    state
        .bank
        .allocate_heads(&stream.head_specs(), cfg.head_kind, state.head_alloc_seed())
        .unwrap();
    // Out of order.
    let err = train_task(&mut state, &stream.tasks[1], &cfg).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    train_task(&mut state, &stream.tasks[0], &cfg).unwrap();
    assert_eq!(state.trained_tasks, 1);
}
