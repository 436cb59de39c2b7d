use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use isac_core::config::ExperimentConfig;
use isac_core::experiments;

#[derive(Parser)]
#[command(
    name = "isac",
    version,
    about = "Virtual-aperture OFDM sensing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localization RMSE of oracle, IMU and EKF autofocus versus SNR.
    RmseSweep(Common),
    /// Baseline, MPE-limit and proposed EIRP versus distance.
    EirpCurves(Common),
    /// Images and trajectories of one matched-seed draw.
    ImagingDemo(Common),
    /// Known-aperture and Bayesian bounds versus SNR.
    BoundsTable(Common),
    /// Quick internal consistency checks.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Monte Carlo trials per SNR point (overrides the config).
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.sweep.trials = t;
        }
        cfg.validate()?;
        if self.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build_global()
                .context("configuring the thread pool")?;
        }
        Ok(cfg)
    }
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn selftest(out: &Path) -> Result<bool> {
    let results = experiments::selftest();
    let mut all = true;
    let mut lines = vec!["check,passed,detail".to_string()];
    for (name, ok, detail) in &results {
        println!("{} {name}: {detail}", if *ok { "ok  " } else { "FAIL" });
        all &= ok;
        lines.push(format!(
            "{name},{},\"{}\"",
            *ok as u8,
            detail.replace('"', "'")
        ));
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("selftest.csv");
    std::fs::write(&path, lines.join("\n") + "\n")?;
    println!("wrote {}", path.display());
    Ok(all)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::RmseSweep(c) => report(&experiments::write_rmse_sweep(&c.load()?, &c.out)?),
        Command::EirpCurves(c) => report(&experiments::write_eirp_curves(&c.load()?, &c.out)?),
        Command::ImagingDemo(c) => report(&experiments::write_imaging_demo(&c.load()?, &c.out)?),
        Command::BoundsTable(c) => report(&experiments::write_bounds_table(&c.load()?, &c.out)?),
        Command::Selftest(c) => {
            c.load()?;
            return selftest(&c.out);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
