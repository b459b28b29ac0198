//! End-to-end runner coverage on a miniature synthetic configuration:
//! artifact layout, determinism, re-run semantics, and aggregation.

use std::fs;
use std::path::{Path, PathBuf};

use seqlab_core::runner::{
    analyze_dir, emit_report, expand_grid, parse_run_config, probe_dir, run_config,
    run_config_with, GridSpec, Overrides, StrategySource,
};

fn config_json(out_dir: &Path, seed: u64) -> String {
    serde_json::json!({
        "seed": seed,
        "stream": {"synthetic": {
            "n_tasks": 3, "classes_per_task": 2,
            "train_per_class": 12, "test_per_class": 6,
            "vocab_size": 60, "separation": 0.95,
            "min_len": 4, "max_len": 8, "scenario": "CIL"
        }},
        "backbone": {
            "n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32,
            "vocab_size": 60, "max_seq_len": 8,
            "attention_mode": "causal", "feature_mode": "last_token"
        },
        "strategy": {"config": {
            "scenario": "CIL", "head_kind": "linear",
            "epochs_per_task": 2, "batch_size": 16
        }},
        "probe": {"epochs": 4},
        "analysis": {"export_cosine_matrices": true},
        "out_dir": out_dir
    })
    .to_string()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_produces_artifacts_and_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    let cfg_a = write_config(tmp.path(), "a.json", &config_json(&run_a, 3));
    let cfg_b = write_config(tmp.path(), "b.json", &config_json(&run_b, 3));

    let layout = run_config(&cfg_a).unwrap();
    assert_eq!(layout.run_dir, run_a);

    // Echo is byte-identical to the parsed input.
    assert_eq!(read(&cfg_a), read(&layout.config_echo));

    for file in ["results.csv", "probing.csv", "moving_distance.csv", "norms.csv",
        "histograms.csv", "run.log", "completed"]
    {
        assert!(run_a.join(file).exists(), "missing {file}");
    }
    for n in 0..3 {
        assert!(layout.snapshots_dir.join(format!("task-{n}.bin")).exists());
        assert!(layout.snapshots_dir.join(format!("task-{n}.bank.bin")).exists());
        assert!(layout.features_dir.join(format!("task-{n}.bin")).exists());
        assert!(run_a.join(format!("cosine-matrix-task-{n}.csv")).exists());
    }

    // Every CSV starts with a format_version header field.
    for file in ["results.csv", "probing.csv", "moving_distance.csv", "norms.csv",
        "histograms.csv"]
    {
        let text = String::from_utf8(read(&run_a.join(file))).unwrap();
        assert!(text.starts_with("format_version,"), "{file}: {text:.40}");
        assert!(text.lines().nth(1).unwrap().starts_with("1,"), "{file}");
    }
    let md = String::from_utf8(read(&run_a.join("moving_distance.csv"))).unwrap();
    assert!(md.contains(",observed,"), "{md}");
    assert!(md.contains(",probing,"), "{md}");

    // A second run refuses the completed directory unless forced.
    let err = run_config(&cfg_a).unwrap_err().to_string();
    assert!(err.contains("force"), "{err}");

    // Same config and seed in a fresh directory: byte-identical CSVs.
    run_config(&cfg_b).unwrap();
    assert_eq!(read(&run_a.join("results.csv")), read(&run_b.join("results.csv")));
    assert_eq!(read(&run_a.join("probing.csv")), read(&run_b.join("probing.csv")));

    // A forced re-run over the existing directory reproduces the bytes.
    let results_before = read(&run_a.join("results.csv"));
    let probing_before = read(&run_a.join("probing.csv"));
    run_config_with(&cfg_a, true, &Overrides::default()).unwrap();
    assert_eq!(results_before, read(&run_a.join("results.csv")));
    assert_eq!(probing_before, read(&run_a.join("probing.csv")));

    // The probe and analyze stages re-run standalone from the directory.
    let md_before = read(&run_a.join("moving_distance.csv"));
    let norms_before = read(&run_a.join("norms.csv"));
    fs::remove_file(run_a.join("probing.csv")).unwrap();
    fs::remove_file(run_a.join("moving_distance.csv")).unwrap();
    fs::remove_file(run_a.join("norms.csv")).unwrap();
    probe_dir(&run_a).unwrap();
    analyze_dir(&run_a).unwrap();
    assert_eq!(probing_before, read(&run_a.join("probing.csv")));
    assert_eq!(md_before, read(&run_a.join("moving_distance.csv")));
    assert_eq!(norms_before, read(&run_a.join("norms.csv")));

    // Overrides land in the echo so directory re-runs stay consistent.
    let run_c = tmp.path().join("c");
    let over =
        Overrides { seed: Some(9), out_dir: Some(run_c.clone()), preset: Some("SEQ(Cos)".into()) };
    run_config_with(&cfg_a, false, &over).unwrap();
    let echoed = parse_run_config(&read(&run_c.join("config.json"))).unwrap();
    assert_eq!(echoed.seed, 9);
    match echoed.strategy {
        StrategySource::Preset(p) => assert_eq!(p, "SEQ(Cos)"),
        other => panic!("expected preset, got {other:?}"),
    }
}

#[test]
fn scenario_mismatch_and_missing_inputs_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");

    let mismatched = config_json(&run, 1).replace(
        r#""head_kind":"linear","scenario":"CIL""#,
        r#""head_kind":"linear","scenario":"TIL""#,
    );
    assert_ne!(mismatched, config_json(&run, 1));
    let path = write_config(tmp.path(), "mismatch.json", &mismatched);
    let err = run_config(&path).unwrap_err().to_string();
    assert!(err.contains("strategy.config.scenario"), "{err}");

    let err = run_config(Path::new("/nonexistent/config.json")).unwrap_err().to_string();
    assert!(err.contains("nonexistent"), "{err}");

    let no_out = config_json(&run, 1).replace(&format!(r#","out_dir":{}"#,
        serde_json::json!(run)), "");
    let path = write_config(tmp.path(), "no-out.json", &no_out);
    let err = run_config(&path).unwrap_err().to_string();
    assert!(err.contains("out_dir"), "{err}");
}

#[test]
fn report_aggregates_runs_with_mean_and_std_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for seed in [1u64, 2] {
        let run = tmp.path().join(format!("s{seed}"));
        let cfg = write_config(tmp.path(), &format!("s{seed}.json"), &config_json(&run, seed));
        run_config(&cfg).unwrap();
        dirs.push(run);
    }
    let mut buf = Vec::new();
    emit_report(&dirs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "format_version,preset,seed,A_T,A_bar,A_prob");
    assert_eq!(lines.len(), 5, "{text}");
    assert!(lines[3].contains(",mean,"), "{text}");
    assert!(lines[4].contains(",std,"), "{text}");
    for (row, seed) in lines[1..3].iter().zip(["1", "2"]) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6, "{row}");
        // Rows carry the config's master seed, not a derived stage seed.
        assert_eq!(fields[2], seed, "{row}");
        assert!(fields[5].parse::<f64>().is_ok(), "A_prob missing in {row}");
    }

    let missing = vec![tmp.path().join("missing")];
    assert!(emit_report(&missing, &mut Vec::new()).is_err());
}

#[test]
fn grid_expands_presets_by_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let base = parse_run_config(config_json(&tmp.path().join("grid"), 0).as_bytes()).unwrap();
    let grid = GridSpec {
        base,
        presets: vec!["SEQ(Lin)".into(), "SEQ*(P+W+FixBC+Cos)".into()],
        seeds: vec![1, 2, 3],
    };
    let runs = expand_grid(&grid).unwrap();
    assert_eq!(runs.len(), 6);
    let dirs: Vec<String> = runs
        .iter()
        .map(|r| r.out_dir.clone().unwrap().file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(dirs.contains(&"seq-lin-s1".to_string()), "{dirs:?}");
    assert!(dirs.contains(&"seq-star-p-w-fixbc-cos-s3".to_string()), "{dirs:?}");
    assert_eq!(runs.iter().filter(|r| r.seed == 2).count(), 2);

    let bad = GridSpec { presets: vec!["SEQ(Bogus)".into()], ..grid.clone() };
    assert!(expand_grid(&bad).is_err());
    let empty = GridSpec { seeds: vec![], ..grid };
    assert!(expand_grid(&empty).is_err());
}

#[test]
fn pretrain_checkpoints_are_saved_and_probed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("pre");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&config_json(&run, 5)).unwrap();
    cfg["pretrain"] = serde_json::json!({
        "corpus": {"n_streams": 4, "stream_len": 40, "branching": 3},
        "config": {"total_steps": 6, "schedule": [0, 6], "batch_size": 8, "window": 6},
        "probe_checkpoints": true
    });
    let path = write_config(tmp.path(), "pre.json", &cfg.to_string());
    let layout = run_config(&path).unwrap();
    assert!(layout.snapshots_dir.join("pretrain-0.bin").exists());
    assert!(layout.snapshots_dir.join("pretrain-6.bin").exists());
    let probing = String::from_utf8(read(&layout.probing_csv)).unwrap();
    assert!(probing.contains("pretrain-0"), "{probing}");
    assert!(probing.contains("pretrain-6"), "{probing}");
    assert!(probing.contains("task-2"), "{probing}");
}
