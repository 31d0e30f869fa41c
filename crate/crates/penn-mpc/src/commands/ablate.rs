use std::fmt::Write as _;
use std::path::Path;

use penn_mpc_core::dataset::Sample;
use penn_mpc_core::penn::{EvalReport, PennConfig};

use crate::commands::fit;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::numfmt::exact;
use crate::report::{rmse_values, write_csv, write_text, RunDir, RMSE_ROWS};
use crate::store::{load_dataset, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub history: usize,
    pub report: EvalReport,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// History length with the lowest pooled test RMSE.
    pub best: usize,
}

impl AblationReport {
    pub fn row(&self, history: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.history == history)
    }
}

/// Windows at `history`, keeping only targets every `H <= h_max` can predict.
pub fn ablation_samples(ds: &Dataset, history: usize, h_max: usize) -> Result<Vec<Sample>> {
    Ok(ds
        .samples_at(history)?
        .into_iter()
        .filter(|s| s.t_index + 1 >= h_max)
        .collect())
}

/// Same split, seeds and epochs for every `H` in `[h_min, h_max]`.
pub fn run_ablation(cfg: &ExperimentConfig, ds: &Dataset) -> Result<AblationReport> {
    let (h_min, h_max) = (cfg.ablate.h_min, cfg.ablate.h_max);
    let mut rows = Vec::new();
    for h in h_min..=h_max {
        let samples = ablation_samples(ds, h, h_max)?;
        let model = PennConfig {
            history: h,
            ..cfg.penn_config()
        };
        let (outcome, _) = fit(cfg, &model, &samples)?;
        let report = outcome.best_report();
        log::info!("H={h}: total RMSE {:.6} (best epoch {})", report.rmse_total, outcome.best_epoch);
        rows.push(AblationRow {
            history: h,
            report,
            best_epoch: outcome.best_epoch,
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.report.rmse_total.total_cmp(&b.report.rmse_total))
        .map(|r| r.history)
        .ok_or_else(|| Error::Runtime("empty ablation range".into()))?;
    Ok(AblationReport { rows, best })
}

/// RMSE rows against `H` columns; `*` marks the best column.
pub fn ablation_table(r: &AblationReport) -> String {
    let mut s = format!("{:<12}", "H");
    for row in &r.rows {
        let _ = write!(s, "{:>10}", row.history);
    }
    s.push('\n');
    for (i, label) in RMSE_ROWS.iter().enumerate() {
        let _ = write!(s, "{label:<12}");
        for row in &r.rows {
            let v = format!("{:.4}{}", rmse_values(&row.report)[i], if row.history == r.best { "*" } else { " " });
            let _ = write!(s, "{v:>10}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "best H = {}", r.best);
    s
}

/// `ablate-history`: trains one ensemble per history length on one dataset.
pub fn ablate_history(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<AblationReport> {
    let ds = load_dataset(data)?;
    if (ds.meta.dt - cfg.plant.dt).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "plant.dt={} does not match dataset dt={}",
            cfg.plant.dt, ds.meta.dt
        )));
    }
    let run = RunDir::create(out, "ablate-history", cfg)?;
    let report = run_ablation(cfg, &ds)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.history.to_string()];
            v.extend(rmse_values(&r.report).iter().map(|&x| exact(x)));
            v.push(r.report.n_samples.to_string());
            v.push(r.best_epoch.to_string());
            v.push((r.history == report.best).to_string());
            v
        })
        .collect();
    write_csv(
        &run.file("ablation.csv"),
        &["H", "total", "vx", "vy", "r", "n_test", "best_epoch", "best"],
        &rows,
    )?;
    write_text(&run.file("ablation.txt"), &ablation_table(&report))?;
    Ok(report)
}
