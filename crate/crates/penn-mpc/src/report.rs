//! Plain-text and CSV outputs shared by the commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use penn_mpc_core::penn::{EpochRecord, EvalReport};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::numfmt::exact;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Header plus rows of already formatted fields.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let res = (|| {
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok::<_, csv::Error>(())
    })();
    res.map_err(|e| Error::format(path, e.to_string()))
}

/// Row labels of the RMSE tables, in table order.
pub const RMSE_ROWS: [&str; 4] = ["Total", "vx [m/s]", "vy [m/s]", "r [rad/s]"];

pub fn rmse_values(r: &EvalReport) -> [f64; 4] {
    [r.rmse_total, r.rmse_vx, r.rmse_vy, r.rmse_r]
}

/// Four-row RMSE table.
pub fn eval_report_text(r: &EvalReport) -> String {
    let mut s = format!("{:<12}{:>12}\n", "", "RMSE");
    for (label, v) in RMSE_ROWS.iter().zip(rmse_values(r)) {
        let _ = writeln!(s, "{label:<12}{v:>12.6}");
    }
    let _ = writeln!(s, "samples     {:>12}", r.n_samples);
    s
}

/// Machine-readable twin of [`eval_report_text`] at full precision.
pub fn write_eval_report(dir: &Path, r: &EvalReport) -> Result<()> {
    write_text(&dir.join("report.txt"), &eval_report_text(r))?;
    let rows: Vec<Vec<String>> = RMSE_ROWS
        .iter()
        .zip(rmse_values(r))
        .map(|(l, v)| vec![l.to_string(), exact(v)])
        .collect();
    write_csv(&dir.join("report.csv"), &["row", "rmse"], &rows)
}

/// Parses `report.csv` back into `(label, value)` pairs.
pub fn read_eval_report(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let v = rec[1].parse().map_err(|_| Error::parse(path, line, "invalid rmse"))?;
        out.push((rec[0].to_string(), v));
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|h| {
            let t = &h.test;
            vec![
                h.epoch.to_string(),
                exact(h.train_loss),
                exact(t.rmse_total),
                exact(t.rmse_vx),
                exact(t.rmse_vy),
                exact(t.rmse_r),
            ]
        })
        .collect();
    write_csv(
        path,
        &["epoch", "train_loss", "test_total", "test_vx", "test_vy", "test_r"],
        &rows,
    )
}

/// `""` for a missing value.
pub fn opt(v: Option<f64>) -> String {
    v.map(exact).unwrap_or_default()
}

/// Output directory of one command run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates the directory and records the effective config and its hash.
    pub fn create(path: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        create_dir(path)?;
        let failed = path.join(FAILED);
        if failed.exists() {
            std::fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
        }
        write_text(&path.join("config.txt"), &cfg.dump())?;
        let manifest = format!(
            "command={command}\nseed={}\nconfig_hash={}\npenn_mpc_version={}\ncore_version={}\n",
            cfg.seed,
            cfg.hash(),
            env!("CARGO_PKG_VERSION"),
            penn_mpc_core::VERSION,
        );
        write_text(&path.join("manifest.txt"), &manifest)?;
        Ok(RunDir {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Flag file left in the output directory when a command fails.
pub const FAILED: &str = "FAILED";

pub fn write_failure(dir: &Path, code: i32, message: &str) {
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join(FAILED), format!("exit_code={code}\nerror={message}\n"));
    }
}
