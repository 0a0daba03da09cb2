//! `run` command plumbing: output directory, manifest, metric files.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::datasets;
use crate::error::{Error, Result};
use crate::harness::{run_experiment, InitRow, MetricRow, Report, RunOptions};

pub const OUT_ENV: &str = "GENAGG_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// Written before any computation starts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub config_hash: String,
}

/// SHA-256 of the resolved config in git blob form
/// (`"blob <len>\0" + content`).
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let body = cfg.to_toml();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `--out` beats `output.dir`, which beats `$GENAGG_OUT`, then `runs`.
pub fn output_root(cfg: &ExperimentConfig, cli: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

pub fn run_dir(root: &Path, config_path: Option<&Path>, hash: &str) -> PathBuf {
    let stem = config_path
        .and_then(|p| p.file_stem())
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    root.join(format!("{stem}-{}", &hash[..12]))
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a> {
    pub method: &'static str,
    pub seed: u64,
    pub config_hash: &'a str,
    pub rounds: usize,
    pub warmup_rounds: usize,
    pub n_clients: usize,
    pub final_accuracy: f64,
    pub final_before_ft: f64,
    pub final_after_ft: f64,
    pub failures_before_ft: usize,
    pub generated_rounds: &'a [usize],
    pub diffusion_steps: usize,
    pub clients: &'a [crate::harness::ClientSummary],
    pub wall_clock_seconds: f64,
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub report: Report,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "client_id", "phase", "accuracy", "loss"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            r.phase.as_str().to_string(),
            r.accuracy.to_string(),
            r.loss.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}

pub fn loss_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

pub fn init_csv(rows: &[InitRow]) -> String {
    let mut out = String::from("client_id,mode,round,accuracy,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.client_id, r.mode, r.round, r.accuracy, r.loss));
    }
    out
}

/// Resolves the output directory, writes the manifest, runs the experiment
/// and writes `metrics.csv`, `summary.json`, `diffusion_loss.csv` and, when
/// new clients joined, `init_metrics.csv`.
pub fn execute(cfg: &ExperimentConfig, config_path: Option<&Path>, out_root: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = config_hash(cfg);
    let root = output_root(cfg, out_root);
    let dir = run_dir(&root, config_path, &hash);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = RunManifest {
        config_path: config_path.map(Path::to_path_buf),
        config: cfg.clone(),
        seed: cfg.seed,
        output_dir: dir.clone(),
        config_hash: hash.clone(),
    };
    write_file(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;

    let pool = datasets::load(&cfg.data, cfg.seed)?;
    let opts = RunOptions {
        checkpoint_dir: Some(dir.join("checkpoints")),
    };
    let report = run_experiment(cfg, &pool, &opts)?;

    write_file(&dir.join("metrics.csv"), metrics_csv(&report.rows).as_bytes())?;
    write_file(&dir.join("diffusion_loss.csv"), loss_csv(&report.diffusion_loss).as_bytes())?;
    if !report.init_rows.is_empty() {
        write_file(&dir.join("init_metrics.csv"), init_csv(&report.init_rows).as_bytes())?;
    }
    let summary = Summary {
        method: report.method.as_str(),
        seed: report.seed,
        config_hash: &hash,
        rounds: report.rounds,
        warmup_rounds: report.warmup_rounds,
        n_clients: cfg.n_clients,
        final_accuracy: report.final_accuracy,
        final_before_ft: report.final_before_ft,
        final_after_ft: report.final_after_ft,
        failures_before_ft: report.failures_before_ft,
        generated_rounds: &report.generated_rounds,
        diffusion_steps: report.diffusion_loss.len(),
        clients: &report.clients,
        wall_clock_seconds: report.wall_clock_seconds,
    };
    write_file(
        &dir.join("summary.json"),
        &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(RunOutput { dir, report })
}
