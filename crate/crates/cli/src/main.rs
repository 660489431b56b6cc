use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cllora_core::harness::{
    self, gradcheck, run_ablation, run_experiment, Axis, ExperimentConfig, Preset, RunReport, RunRngs,
};

#[derive(Parser)]
#[command(name = "cllora", version, about = "Continual low-rank adaptation on a small vision transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config; keys not given take the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData,
    /// Train and evaluate every task; `--out` is a directory for the report
    /// and artifacts.
    Run,
    /// Sweep the cross product of the given axes.
    Ablate {
        /// Comma list of kd, gr, bw, l-sweep, fixB, flip, rank, attach,
        /// downproj; `name=v1:v2` overrides the values.
        #[arg(long)]
        axes: String,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Fail when the worst relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Pretty-print a run report.
    Report {
        /// `report.json` or the run directory holding it.
        path: PathBuf,
    },
}

fn load_config(common: &Common, fallback: ExperimentConfig) -> Result<ExperimentConfig> {
    let preset: Option<Preset> = common.preset.as_deref().map(str::parse).transpose()?;
    Ok(match (&common.config, preset) {
        (Some(path), p) => ExperimentConfig::load(path, p.unwrap_or(Preset::Desk))
            .with_context(|| format!("loading config {}", path.display()))?,
        (None, Some(p)) => ExperimentConfig::preset(p),
        (None, None) => fallback,
    })
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => harness::write_atomic(p, text.as_bytes())?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(common, ExperimentConfig::desk())?;
            let Some(out) = &common.out else {
                bail!("gen-data needs --out <file>");
            };
            let mut rngs = RunRngs::new(common.seed);
            let ds = cllora_core::streams::gen_synthetic(&cfg.synthetic_spec(), &mut rngs.data)?;
            ds.save(out)?;
            eprintln!(
                "wrote {} train and {} test samples to {}",
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Run => {
            let cfg = load_config(common, ExperimentConfig::desk())?;
            let outcome = run_experiment(&cfg, common.seed, common.out.as_deref())?;
            println!("{}", outcome.report.render());
        }
        Command::Ablate { axes, runs } => {
            let cfg = load_config(common, ExperimentConfig::desk())?;
            let axes = Axis::parse_list(axes, &cfg)?;
            if *runs == 0 {
                bail!("--runs must be at least 1");
            }
            let seeds: Vec<u64> = (0..*runs).map(|i| common.seed + i).collect();
            let sweep = run_ablation(&cfg, &axes, &seeds, common.out.as_deref())?;
            print!("{}", sweep.to_csv());
        }
        Command::Gradcheck { step, tolerance } => {
            let cfg = load_config(common, ExperimentConfig::micro())?;
            let report = gradcheck(&cfg, common.seed, *step)?;
            match &common.out {
                Some(p) => harness::write_atomic(p, report.to_json_pretty()?.as_bytes())?,
                None => println!("{}", report.render()),
            }
            if report.max_rel_error > *tolerance || !report.zero_lr_unchanged {
                bail!(
                    "gradient check failed: max relative error {:.3e} (tolerance {:.1e})",
                    report.max_rel_error,
                    tolerance
                );
            }
        }
        Command::Report { path } => {
            let file = if path.is_dir() { path.join("report.json") } else { path.clone() };
            let report = RunReport::load(&file).with_context(|| format!("reading {}", file.display()))?;
            write_out(common.out.as_deref(), &report.render())?;
        }
    }
    Ok(())
}
