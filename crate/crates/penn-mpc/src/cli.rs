//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::commands::{self, ablation_table, ExploreOptions};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::report::eval_report_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Collect,
    Train,
    AblateHistory,
    Explore,
    Deploy,
    Eval,
}

/// Learned vehicle dynamics with ensemble disagreement and MPPI.
#[derive(Debug, Parser)]
#[command(name = "penn-mpc", version)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Config file of `key=value` lines; every key has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dataset directory or manifest; overrides `io.data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file; overrides `io.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Collection budget in minutes; overrides `collect.minutes`.
    #[arg(long)]
    pub minutes: Option<f64>,
    /// Logging rate in Hz; sets `plant.dt = 1 / rate`.
    #[arg(long)]
    pub rate: Option<f64>,
    /// `mpc` or `random`; overrides `explore.policy`.
    #[arg(long)]
    pub policy: Option<String>,
    /// `direct` or `safe`; overrides `deploy.mode`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Overrides `deploy.laps`.
    #[arg(long)]
    pub laps: Option<usize>,
    /// Overrides `explore.rounds`.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Overrides `explore.steps_per_round`.
    #[arg(long)]
    pub steps_per_round: Option<usize>,
    /// Stop `explore` after this round; a later run in the same `--out` resumes.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Extra `key=value` overrides.
    pub overrides: Vec<String>,
}

impl Cli {
    /// Effective configuration: defaults, file, positional overrides, then flags.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push(format!("{k}={v}"));
            }
        };
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("io.data", self.data.as_ref().map(|p| p.display().to_string()));
        flag("io.checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        flag("collect.minutes", self.minutes.map(|v| v.to_string()));
        if let Some(rate) = self.rate {
            if !(rate > 0.0) {
                return Err(Error::Config(format!("--rate must be positive, got {rate}")));
            }
            flag("plant.dt", Some((1.0 / rate).to_string()));
        }
        flag("explore.policy", self.policy.clone());
        flag("deploy.mode", self.mode.clone());
        flag("deploy.laps", self.laps.map(|v| v.to_string()));
        flag("explore.rounds", self.rounds.map(|v| v.to_string()));
        flag("explore.steps_per_round", self.steps_per_round.map(|v| v.to_string()));
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn required<'a>(value: &'a str, key: &str) -> Result<&'a Path> {
    if value.is_empty() {
        Err(Error::Config(format!("this command needs `{key}` (or its flag)")))
    } else {
        Ok(Path::new(value))
    }
}

/// Runs one command and returns the text to print.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = cli.config()?;
    let out = cli.out.as_path();
    let data = || required(&cfg.io.data, "io.data");
    let checkpoint = || required(&cfg.io.checkpoint, "io.checkpoint");
    Ok(match cli.command {
        Command::Collect => commands::collect(&cfg, out)?.text(),
        Command::Train => eval_report_text(&commands::train(&cfg, data()?, out)?.report),
        Command::Eval => eval_report_text(&commands::eval(&cfg, checkpoint()?, data()?, out)?),
        Command::AblateHistory => ablation_table(&commands::ablate_history(&cfg, data()?, out)?),
        Command::Explore => {
            let s = commands::explore(&cfg, out, ExploreOptions { stop_after: cli.stop_after })?;
            let mut text = String::new();
            for r in &s.curve {
                text.push_str(&format!(
                    "round {:>3}  steps {:>6}  pre-round jrd {:.4}  held-out RMSE {:.6}\n",
                    r.round, r.cumulative_steps, r.pre_round_jrd, r.report.rmse_total
                ));
            }
            if !s.finished {
                text.push_str("stopped early; rerun with the same --out to resume\n");
            }
            text
        }
        Command::Deploy => {
            let data = (!cfg.io.data.is_empty()).then(|| Path::new(&cfg.io.data));
            let s = commands::deploy(&cfg, checkpoint()?, data, out)?;
            if s.off_track {
                return Err(Error::Runtime(format!(
                    "vehicle left the track after {} steps ({:.2} laps); partial summary in {}",
                    s.steps,
                    s.laps,
                    out.join("summary.txt").display()
                )));
            }
            s.text()
        }
    })
}
