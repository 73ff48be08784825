use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use disagg_core::experiments;
use disagg_core::{
    compare, read_summary, run_experiment, write_outputs, Error, ExperimentConfig, WorkloadClass,
};

#[derive(Parser)]
#[command(
    name = "disagg",
    version,
    about = "Run and compare inference-serving simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write summary.json and requests.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the ratio table of run `a` against baseline `b`.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Print the ratios as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run every config matching a glob, in parallel.
    Sweep {
        #[arg(long)]
        configs: String,
        /// Output root; each config writes to `<out>/<file stem>`.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        /// Run this many consecutive seeds per config, starting at its own.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Print a built-in experiment config as JSON.
    Preset {
        /// disaggregated, coupled or flip
        name: String,
        #[arg(long, default_value = "mixed")]
        class: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run_one(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let exp = run_experiment(cfg)?;
    write_outputs(out, &exp)?;
    let r = &exp.summary.requests;
    println!(
        "{}: {} requests, TTFT mean {:.1} ms, JCT mean {:.1} ms, resource {:.3} s -> {}",
        cfg.name,
        r.requests,
        r.ttft.mean_us / 1e3,
        r.jct.mean_us / 1e3,
        exp.summary.resource_usage_us as f64 / 1e6,
        out.display()
    );
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config).map_err(Error::from)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run_one(&cfg, out)?;
    Ok(())
}

fn print_comparison(a: &Path, b: &Path, json: bool) -> Result<()> {
    let sa = read_summary(a).with_context(|| format!("reading {}", a.display()))?;
    let sb = read_summary(b).with_context(|| format!("reading {}", b.display()))?;
    let c = compare(&sa, &sb)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&c)?);
        return Ok(());
    }
    println!("{:<16} {:>8}", "metric", "a / b");
    for (name, v) in [
        ("ttft_mean", c.ttft_mean),
        ("ttft_p99", c.ttft_p99),
        ("jct_mean", c.jct_mean),
        ("jct_p99", c.jct_p99),
        ("resource_usage", c.resource_usage),
        ("perf_per_dollar", c.perf_per_dollar),
    ] {
        println!("{name:<16} {v:>8.3}");
    }
    println!(
        "TTFT improvement {:.1}%, JCT improvement {:.1}%",
        c.ttft_improvement() * 100.0,
        c.jct_improvement() * 100.0
    );
    Ok(())
}

fn sweep(pattern: &str, out: &Path, seeds: Option<u64>) -> Result<()> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad glob `{pattern}`"))?
        .collect::<Result<_, _>>()?;
    if paths.is_empty() {
        bail!("no configs match `{pattern}`");
    }
    let mut jobs = Vec::new();
    for p in &paths {
        let cfg = ExperimentConfig::load(p).map_err(Error::from)?;
        let stem = p
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        match seeds {
            None => jobs.push((cfg, out.join(&stem))),
            Some(n) => {
                for k in 0..n {
                    let mut c = cfg.clone();
                    c.seed = cfg.seed + k;
                    jobs.push((c, out.join(&stem).join(format!("seed-{}", cfg.seed + k))));
                }
            }
        }
    }
    log::info!("sweeping {} runs from {} configs", jobs.len(), paths.len());
    let mut results: Vec<(PathBuf, Result<(), Error>)> = jobs
        .par_iter()
        .map(|(cfg, dir)| (dir.clone(), run_one(cfg, dir)))
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut first_err = None;
    for (dir, r) in results {
        if let Err(e) = r {
            eprintln!("{}: {e}", dir.display());
            first_err.get_or_insert(e);
        }
    }
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn preset(name: &str, class: &str, seed: u64) -> Result<()> {
    let class: WorkloadClass = class.parse().map_err(Error::from)?;
    let label = format!("{}-{name}", class.to_string().to_lowercase());
    let cfg = match name {
        "disaggregated" => ExperimentConfig {
            name: label,
            ..experiments::disaggregated(class, seed)
        },
        "coupled" => ExperimentConfig {
            name: label,
            ..experiments::coupled(class, seed)
        },
        "flip" => experiments::flip_study(seed),
        other => bail!("unknown preset `{other}` (expected disaggregated, coupled or flip)"),
    };
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, seed, out } => run(config, *seed, out),
        Command::Compare { a, b, json } => print_comparison(a, b, *json),
        Command::Sweep {
            configs,
            out,
            seeds,
        } => sweep(configs, out, *seeds),
        Command::Preset { name, class, seed } => preset(name, class, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
