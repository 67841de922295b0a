//! Command-line runner.
//!
//! Config precedence, lowest first: built-in defaults, `--preset`,
//! `--config` file, then individual flags. Runs land in `--out`, or in
//! `$GFN_OUT_DIR/<name>-<method>-seed<seed>` (root defaults to `runs`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gflownet::experiments::{
    self, dump_oracle, eval_checkpoint, figure_data, read_metrics, ExperimentConfig, ExperimentError, Method, Preset,
};

#[derive(Parser)]
#[command(name = "gfn", version, about = "Flow-network samplers on the hypergrid")]
struct Cli {
    /// TOML config; its keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration: fig3, fig7, offline or active.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for sweeps: the root of all runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    budget_states: Option<usize>,
    /// Overrides the corners reward's R0.
    #[arg(long, global = true)]
    r0: Option<f64>,
    /// Root for default output directories.
    #[arg(long, env = "GFN_OUT_DIR", default_value = "runs", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow network online or from an offline dataset.
    TrainGfn,
    /// Run Metropolis-Hastings chains.
    RunMcmc,
    /// Train the PPO baseline.
    TrainPpo,
    /// Run the multi-round active-learning loop.
    RunActive,
    /// Dump exact per-state tables for the configured grid.
    Oracle,
    /// Evaluate a flow checkpoint against the exact target.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every method, R0 and seed of a preset.
    Sweep {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Average metrics files into figure data points.
    Figdata {
        /// Destination CSV; stdout if omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        files: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli, method: Option<Method>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = cli.preset.map(ExperimentConfig::preset).unwrap_or_default();
    if let Some(path) = &cli.config {
        cfg = cfg.overlay_toml(&fs::read_to_string(path)?)?;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.budget_states {
        cfg.budget_states = b;
    }
    if let Some(r0) = cli.r0 {
        cfg.env.r0 = r0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("{}-{}-seed{}", cfg.name, cfg.method.as_str(), cfg.seed))
}

fn run_one(cli: &Cli, method: Method) -> Result<(), ExperimentError> {
    let cfg = resolve(cli, Some(method))?;
    let out = cli.out.clone().unwrap_or_else(|| default_dir(&cli.out_root, &cfg));
    let s = experiments::run(&cfg, &out)?;
    println!("{}", serde_json::to_string(&s).expect("summary serializes"));
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn sweep(cli: &Cli, seeds: u64) -> Result<(), ExperimentError> {
    let base = resolve(cli, None)?;
    let root = cli.out.clone().unwrap_or_else(|| cli.out_root.join(&base.name));
    let (methods, r0s): (Vec<Method>, Vec<f64>) = match cli.preset {
        Some(Preset::Fig3) => (vec![Method::Gflownet, Method::Mcmc, Method::Ppo], vec![0.1, 0.01, 0.001]),
        Some(Preset::Active) => (vec![Method::Active], vec![base.env.r0]),
        _ => (vec![base.method], vec![base.env.r0]),
    };
    let r0s = if cli.r0.is_some() { vec![base.env.r0] } else { r0s };
    let first = cli.seed.unwrap_or(0);
    for &r0 in &r0s {
        for &m in &methods {
            for seed in first..first + seeds {
                let mut cfg = base.clone();
                cfg.method = m;
                cfg.seed = seed;
                cfg.env.r0 = r0;
                let generators = if m == Method::Active { vec![Method::Gflownet, Method::Ppo] } else { vec![cfg.active.generator] };
                for g in generators {
                    cfg.active.generator = g;
                    let label = if m == Method::Active { g.as_str() } else { m.as_str() };
                    let out = root.join(format!("{label}-r0_{r0}-seed{seed}"));
                    let s = experiments::run(&cfg, &out)?;
                    println!("{}", serde_json::to_string(&s).expect("summary serializes"));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainGfn => run_one(&cli, Method::Gflownet),
        Command::RunMcmc => run_one(&cli, Method::Mcmc),
        Command::TrainPpo => run_one(&cli, Method::Ppo),
        Command::RunActive => run_one(&cli, Method::Active),
        Command::Oracle => resolve(&cli, None).and_then(|cfg| {
            let out = cli.out.clone().unwrap_or_else(|| cli.out_root.join(format!("{}-oracle", cfg.name)));
            let path = dump_oracle(&cfg, &out)?;
            println!("{}", path.display());
            Ok(())
        }),
        Command::Eval { checkpoint } => resolve(&cli, None).and_then(|cfg| {
            let e = eval_checkpoint(&cfg, checkpoint)?;
            let text = serde_json::to_string_pretty(&e).expect("eval serializes");
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("eval.json"), format!("{text}\n"))?;
            }
            println!("{text}");
            Ok(())
        }),
        Command::Sweep { seeds } => sweep(&cli, *seeds),
        Command::Figdata { output, files } => (|| {
            let parsed = files
                .iter()
                .map(|f| read_metrics(&fs::read_to_string(f)?))
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let text = figure_data(&parsed);
            match output {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
