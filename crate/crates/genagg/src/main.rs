use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use genagg::config::ExperimentConfig;
use genagg::container::{self, tags, Container};
use genagg::{demos, runner, Error};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "genagg", version, about = "Federated learning with diffusion-based parameter aggregation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Dotted-path override, e.g. `partition.s_percent=20`. Repeatable; last wins.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Cap on worker threads (overrides `workers`).
        #[arg(long)]
        workers: Option<usize>,
        /// Output root (default: `output.dir`, then $GENAGG_OUT, then `runs`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named demonstration and print its verdict.
    Demo {
        /// collapse | inversion-roundtrip | mixture-ddpm | new-client
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the contents of a checkpoint container.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Run {
            config,
            mut overrides,
            workers,
            out,
        } => {
            if let Some(w) = workers {
                overrides.push(format!("workers={w}"));
            }
            cmd_run(&config, &overrides, out.as_deref())
        }
        Cmd::Demo { name, out } => cmd_demo(&name, out.as_deref()),
        Cmd::Inspect { path } => cmd_inspect(&path),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_run(config: &Path, overrides: &[String], out: Option<&Path>) -> Result<u8, Error> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let res = runner::execute(&cfg, Some(config), out)?;
    let r = &res.report;
    println!("method {}  seed {}  rounds {}", r.method.as_str(), r.seed, r.rounds);
    println!(
        "final accuracy {:.4}  (before FT {:.4}, after FT {:.4})",
        r.final_accuracy, r.final_before_ft, r.final_after_ft
    );
    println!("outputs in {}", res.dir.display());
    Ok(0)
}

fn cmd_demo(name: &str, out: Option<&Path>) -> Result<u8, Error> {
    let report = demos::run(name)?;
    for line in &report.summary {
        println!("{line}");
    }
    let root = out
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(runner::OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(runner::DEFAULT_OUT));
    let dir = root.join(format!("demo-{name}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (file, body) in &report.files {
        let p = dir.join(file);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    println!("data written to {}", dir.display());
    println!("{}: {}", report.name, if report.passed { "PASS" } else { "FAIL" });
    Ok(if report.passed { 0 } else { 1 })
}

fn summarize(name: &str, v: &[f64]) {
    if v.is_empty() {
        println!("  {name}: empty");
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    println!("  {name}: n={} mean={mean:.6e} min={lo:.6e} max={hi:.6e}", v.len());
}

fn cmd_inspect(path: &Path) -> Result<u8, Error> {
    let c = Container::read(path)?;
    println!("{}: container version {}, {} sections", path.display(), container::VERSION, c.sections.len());
    for (tag, payload) in &c.sections {
        println!("[{}] {} bytes", container::tag_name(*tag), payload.len());
        match *tag {
            tags::META | tags::MANIFEST => {
                let v: serde_json::Value = serde_json::from_slice(payload)
                    .map_err(|e| Error::format("JSON section", e.to_string()))?;
                let text = serde_json::to_string_pretty(&v).expect("value serializes");
                let lines: Vec<&str> = text.lines().collect();
                for l in lines.iter().take(40) {
                    println!("  {l}");
                }
                if lines.len() > 40 {
                    println!("  ... ({} more lines)", lines.len() - 40);
                }
            }
            tags::LAYOUT | tags::AE_LAYOUT => {
                let l = container::decode_layout(payload)?;
                println!("  {} layers, {} values", l.layers().len(), l.total());
                for s in l.layers() {
                    println!("  {:<24} {:?} @ {}", s.name, s.shape, s.offset);
                }
            }
            tags::VALUES | tags::AE_VALUES => {
                let (v, p) = container::decode_values(payload)?;
                println!("  stored as {p:?}");
                summarize("values", &v);
            }
            tags::MASK => println!("  generated layers: {}", container::decode_names(payload)?.join(", ")),
            tags::NORM => {
                let n = container::decode_norm(payload)?;
                println!("  dim {} floor {:e}", n.dim(), n.floor);
                summarize("mean", &n.mean);
                summarize("std", &n.std);
                let floored = n.std.iter().filter(|s| **s <= n.floor).count();
                println!("  {floored} dimensions at the std floor");
            }
            tags::SCHEDULE => {
                let s = container::decode_schedule(payload)?;
                let (b0, b1) = s.beta_range();
                println!(
                    "  {:?}, T={}, beta {b0:e} -> {b1:e}, alpha_bar_T {:.6e}, id {:016x}",
                    s.kind(),
                    s.steps(),
                    s.alpha_bar(s.steps()),
                    s.id()
                );
            }
            tags::LATENTS => {
                let codes = container::decode_latents(payload)?;
                for (i, c) in codes.iter().enumerate() {
                    println!("  latent {i}: dim {}, T {}, schedule {:016x}", c.dim(), c.steps(), c.schedule_id);
                }
            }
            _ => println!("  (unknown section, skipped)"),
        }
    }
    Ok(0)
}
