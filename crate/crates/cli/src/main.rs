//! `seqlab`: run incremental-learning experiments from JSON configs and
//! work with the directories they produce.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use seqlab_core::runner::{
    analyze_dir, emit_report, expand_grid, parse_grid_spec, pretrain_only, probe_dir,
    run_config_with, Overrides,
};

#[derive(Parser)]
#[command(
    name = "seqlab",
    version,
    about = "Sequential fine-tuning experiments: train, probe, analyze, report"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). `run` also accepts a grid config with
    /// base/presets/seeds keys.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (for a grid: the parent directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a completed run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a config end to end: pretrain, train, probe, analyze.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Replace the strategy with a named preset.
        #[arg(long)]
        preset: Option<String>,
        /// Concurrent runs in grid mode, one process each.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run only the pretraining stage of a config.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Recompute probing.csv for an existing run directory.
    Probe {
        /// Run directory produced by `run`.
        dir: PathBuf,
    },
    /// Recompute the geometry CSVs for an existing run directory.
    Analyze {
        /// Run directory produced by `run`.
        dir: PathBuf,
    },
    /// Aggregate run directories into one summary CSV.
    Report {
        /// Completed run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { config, preset, jobs } => cmd_run(config, preset, jobs),
        Cmd::Pretrain { config } => {
            let over = Overrides { seed: config.seed, out_dir: config.out, preset: None };
            let layout = pretrain_only(&config.config, config.force, &over)?;
            println!("pretraining complete: {}", layout.snapshots_dir.display());
            Ok(())
        }
        Cmd::Probe { dir } => {
            let path = probe_dir(&dir)?;
            println!("probing complete: {}", path.display());
            Ok(())
        }
        Cmd::Analyze { dir } => {
            let paths = analyze_dir(&dir)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Cmd::Report { dirs, out } => {
            let mut buf = Vec::new();
            emit_report(&dirs, &mut buf)?;
            match out {
                Some(path) => {
                    fs::write(&path, buf).with_context(|| path.display().to_string())?;
                    println!("wrote {}", path.display());
                }
                None => std::io::stdout().write_all(&buf)?,
            }
            Ok(())
        }
    }
}

fn cmd_run(args: ConfigArgs, preset: Option<String>, jobs: usize) -> Result<()> {
    let bytes =
        fs::read(&args.config).with_context(|| args.config.display().to_string())?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .with_context(|| format!("{} is not valid JSON", args.config.display()))?;
    if value.get("base").is_none() {
        let over = Overrides { seed: args.seed, out_dir: args.out, preset };
        let layout = run_config_with(&args.config, args.force, &over)?;
        println!("run complete: {}", layout.run_dir.display());
        return Ok(());
    }

    if args.seed.is_some() || preset.is_some() {
        bail!("--seed and --preset do not apply to a grid config; set seeds and presets there");
    }
    let mut grid = parse_grid_spec(&bytes)?;
    if let Some(out) = args.out {
        grid.base.out_dir = Some(out);
    }
    let runs = expand_grid(&grid)?;
    let mut pending = Vec::with_capacity(runs.len());
    for cfg in &runs {
        let dir = cfg.out_dir.clone().expect("grid runs have out dirs");
        fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
        let mut body = serde_json::to_vec_pretty(cfg)?;
        body.push(b'\n');
        let path = dir.join("config.json");
        fs::write(&path, body).with_context(|| path.display().to_string())?;
        pending.push((dir, path));
    }
    run_pool(&pending, jobs.max(1), args.force)?;
    println!("grid complete: {} runs", runs.len());
    Ok(())
}

/// Launch one child process per run, at most `parallel` at a time, and
/// wait for all of them before reporting failures.
fn run_pool(pending: &[(PathBuf, PathBuf)], parallel: usize, force: bool) -> Result<()> {
    let exe = std::env::current_exe().context("cannot locate the seqlab binary")?;
    let mut queue = pending.iter();
    let mut active: Vec<(Child, &Path)> = Vec::new();
    let mut failed: Vec<PathBuf> = Vec::new();
    loop {
        while active.len() < parallel {
            let Some((dir, config)) = queue.next() else { break };
            let mut cmd = Command::new(&exe);
            cmd.arg("run").arg("--config").arg(config);
            if force {
                cmd.arg("--force");
            }
            let child =
                cmd.spawn().with_context(|| format!("cannot spawn run for {}", dir.display()))?;
            active.push((child, dir));
        }
        if active.is_empty() {
            break;
        }
        let mut i = 0;
        let mut progressed = false;
        while i < active.len() {
            if let Some(status) = active[i].0.try_wait()? {
                let (_, dir) = active.swap_remove(i);
                if !status.success() {
                    failed.push(dir.to_path_buf());
                }
                progressed = true;
            } else {
                i += 1;
            }
        }
        if !progressed {
            std::thread::sleep(Duration::from_millis(25));
        }
    }
    if !failed.is_empty() {
        let list: Vec<String> = failed.iter().map(|d| d.display().to_string()).collect();
        bail!("{} of {} runs failed: {}", failed.len(), pending.len(), list.join(", "));
    }
    Ok(())
}
