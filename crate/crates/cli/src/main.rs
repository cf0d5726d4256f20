use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use suan_core::check::run_checks;
use suan_core::config::{parse_config, ExperimentConfig};
use suan_core::experiment::{run_bound, run_experiment, run_sweep};
use suan_core::Mode;

/// Margin-vector weighted adversarial adaptation on synthetic scenarios.
#[derive(Parser, Debug)]
#[command(name = "suan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one experiment and write its reports.
    Run(Overrides),
    /// Run every (value, seed) pair of the `[sweep]` section.
    Sweep(Overrides),
    /// Evaluate the target-risk bound from `[bound]` inputs without training.
    Bound(Overrides),
    /// Run the built-in invariant checks.
    Check,
}

/// Each flag replaces exactly one configuration field.
#[derive(Args, Debug)]
struct Overrides {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `seed`, propagated to data, initialization, batching and oracles.
    #[arg(long)]
    seed: Option<u64>,
    /// `train.mode`: suan, source_only, unweighted_adversarial or uan_weighting.
    #[arg(long)]
    mode: Option<Mode>,
    /// `output_dir`.
    #[arg(long, visible_alias = "output-dir")]
    out: Option<PathBuf>,
    /// `eval_threshold`.
    #[arg(long, visible_alias = "eval-threshold")]
    threshold: Option<f64>,
    /// `train.w0`.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
    w0: Option<u8>,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                parse_config(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        if let Some(mode) = self.mode {
            config.train.mode = mode;
        }
        if let Some(out) = &self.out {
            config.output_dir = Some(out.clone());
        }
        if let Some(t) = self.threshold {
            config.eval_threshold = t;
        }
        if let Some(w0) = self.w0 {
            config.train.w0 = Some(w0);
        }
        config.validate()?;
        let dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok((config, dir))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(o) => {
            let (config, dir) = o.resolve()?;
            let outcome = run_experiment(&config, &dir)?;
            println!(
                "mode {} seed {}: averaged accuracy {:.4}, {} register updates",
                config.train.mode.as_str(),
                config.seed,
                outcome.report.averaged_accuracy,
                outcome.fit.register.update_count()
            );
            if let Some(b) = &outcome.bound {
                println!("bound {:.4} (target risk on common classes {:.4})", b.decomposition.total, b.empirical_target_risk);
            }
            println!("reports in {}", dir.display());
        }
        Command::Sweep(o) => {
            let (config, dir) = o.resolve()?;
            if config.sweep.is_none() {
                bail!("the configuration has no [sweep] section");
            }
            let rows = run_sweep(&config, &dir)?;
            for r in &rows {
                println!("{} = {} seed {}: averaged accuracy {:.4}", r.parameter, r.value, r.seed, r.averaged_accuracy);
            }
            println!("{} rows in {}", rows.len(), dir.display());
        }
        Command::Bound(o) => {
            let (config, dir) = o.resolve()?;
            let calc = run_bound(&config, &dir)?;
            let d = &calc.decomposition;
            println!(
                "bound {:.6} = source risk {:.6} + divergence/2 {:.6} + complexity {:.6} + lambda {:.6}",
                d.total, d.source_risk, d.divergence_term, d.complexity, d.lambda
            );
            println!("xi {:.6} (printed closed form gives {:.6})", calc.xi, calc.xi_printed_formula);
            println!("reports in {}", dir.display());
        }
        Command::Check => {
            let results = run_checks();
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                println!("{failed} check(s) failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
