//! `conslab`: run delayed-consensus scenarios and write CSV, JSON and SVG artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod pipeline;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::Scenario;
use pipeline::Report;

/// Output root used when neither `--out` nor this variable is set: `./conslab-out`.
const OUT_ENV: &str = "CONSLAB_OUT";

const BUNDLED: [(&str, &str); 8] = [
    ("two-agent-symmetric", include_str!("../scenarios/two-agent-symmetric.json")),
    ("intermittent-chain", include_str!("../scenarios/intermittent-chain.json")),
    ("appendix-a-counterexample", include_str!("../scenarios/appendix-a-counterexample.json")),
    ("nits-type-symmetric", include_str!("../scenarios/nits-type-symmetric.json")),
    ("discrete-reduction", include_str!("../scenarios/discrete-reduction.json")),
    ("containment-two-leaders", include_str!("../scenarios/containment-two-leaders.json")),
    ("target-ball-aggregation", include_str!("../scenarios/target-ball-aggregation.json")),
    ("vanishing-disturbance", include_str!("../scenarios/vanishing-disturbance.json")),
];

#[derive(Parser)]
#[command(name = "conslab", version, about = "Delayed averaging consensus scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario from a JSON file or a bundled name.
    Run {
        scenario: String,
        /// Output directory (default `$CONSLAB_OUT/<name>` or `./conslab-out/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the integration step.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Print the bundled scenarios.
    List,
    /// Run every `*.json` scenario in a directory concurrently.
    Batch {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("conslab-out"))
}

/// Scenario text with the directory its file references resolve against.
fn load(target: &str) -> Result<(Scenario, PathBuf)> {
    let path = Path::new(target);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        return Ok((Scenario::parse(&text, target)?, base));
    }
    if let Some((name, text)) = BUNDLED.iter().find(|(n, _)| *n == target) {
        return Ok((Scenario::parse(text, name)?, PathBuf::from(".")));
    }
    bail!("{target}: no such scenario file or bundled scenario (see `conslab list`)")
}

fn summary(r: &Report) -> String {
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    format!(
        "{}: {} (final diameter {:.4e}, consensus {}{})",
        r.name,
        if r.pass { "PASS" } else { "FAIL" },
        r.final_diameter,
        r.consensus,
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
    )
}

fn run_one(target: &str, out: Option<PathBuf>, step: Option<f64>) -> Result<Report> {
    let (sc, base) = load(target)?;
    let out = out.unwrap_or_else(|| out_root().join(&sc.name));
    let report = pipeline::run(&sc, &base, &out, step).with_context(|| format!("scenario {}", sc.name))?;
    Ok(report)
}

fn batch(dir: &Path, out: Option<PathBuf>) -> Result<Vec<(PathBuf, Result<Report>)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let root = out.unwrap_or_else(out_root);
    Ok(std::thread::scope(|s| {
        let handles: Vec<_> = files
            .iter()
            .map(|f| {
                let root = root.clone();
                s.spawn(move || {
                    let (sc, base) = load(&f.to_string_lossy())?;
                    let out = root.join(&sc.name);
                    pipeline::run(&sc, &base, &out, None).with_context(|| format!("scenario {}", sc.name))
                })
            })
            .collect();
        files
            .iter()
            .cloned()
            .zip(handles)
            .map(|(f, h)| (f, h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("scenario thread panicked")))))
            .collect()
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::List => {
            for (name, text) in BUNDLED {
                match Scenario::parse(text, name) {
                    Ok(sc) => println!("{name}\t{}\tcovers: {}", sc.description, sc.covers),
                    Err(e) => println!("{name}\tunreadable: {e:#}"),
                }
            }
            Ok(true)
        }
        Command::Run { scenario, out, step } => run_one(&scenario, out, step).map(|r| {
            println!("{}", summary(&r));
            r.pass
        }),
        Command::Batch { dir, out } => batch(&dir, out).map(|results| {
            let mut pass = true;
            let mut errored = false;
            for (file, r) in results {
                match r {
                    Ok(r) => {
                        pass &= r.pass;
                        println!("{}", summary(&r));
                    }
                    Err(e) => {
                        errored = true;
                        eprintln!("error: {}: {e:#}", file.display());
                    }
                }
            }
            if errored {
                return None;
            }
            Some(pass)
        })
        .and_then(|v| v.context("one or more scenarios failed to run")),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
