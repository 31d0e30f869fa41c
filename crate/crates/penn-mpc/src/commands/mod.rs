//! The six experiment commands.

mod ablate;
mod collect;
mod deploy;
mod eval;
mod explore;
mod train;

pub use ablate::{ablate_history, ablation_samples, ablation_table, run_ablation, AblationReport, AblationRow};
pub use collect::{collect, collect_dataset, CollectSummary};
pub use deploy::{deploy, jrd_quantile, run_deploy, DeploySummary};
pub use eval::{eval, subset_samples};
pub use explore::{explore, eval_episodes, ExploreOptions, ExploreSummary, RoundRecord};
pub use train::{fit, train, TrainSummary};

use penn_mpc_core::jrd::jrd_flat;
use penn_mpc_core::mppi::EnsembleDynamics;
use penn_mpc_core::penn::PennModel;
use penn_mpc_core::state::STATE_DIM;
use penn_mpc_core::HistoryWindow;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::store::Dataset;

/// Requires the dataset sidecar to match the model's history and rate.
pub(crate) fn check_dataset(ds: &Dataset, what: &str, history: usize, dt: f64) -> Result<()> {
    if ds.meta.history != history {
        return Err(Error::Config(format!(
            "{what} H={history} does not match dataset H={}",
            ds.meta.history
        )));
    }
    if (ds.meta.dt - dt).abs() > 1e-12 * dt.abs().max(1.0) {
        return Err(Error::Config(format!(
            "{what} dt={dt} does not match dataset dt={}",
            ds.meta.dt
        )));
    }
    Ok(())
}

pub(crate) fn check_model(cfg: &ExperimentConfig, model: &PennModel) -> Result<()> {
    let dt = model.config().dt;
    if (dt - cfg.plant.dt).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "checkpoint dt={dt} does not match plant.dt={}",
            cfg.plant.dt
        )));
    }
    Ok(())
}

/// Ensemble disagreement at one executed `(window, action)`; `None` without variances.
pub fn executed_jrd<M: EnsembleDynamics>(model: &M, window: &HistoryWindow) -> Result<Option<f64>> {
    if !model.has_variance() {
        return Ok(None);
    }
    let raw = window.raw_features();
    let b = model.ensemble_size();
    let mut means = vec![0.0; b * STATE_DIM];
    let mut vars = vec![0.0; b * STATE_DIM];
    for m in 0..b {
        let r = m * STATE_DIM..(m + 1) * STATE_DIM;
        model.predict_rows(m, &raw, 1, &mut means[r.clone()], &mut vars[r])?;
    }
    if means.iter().chain(&vars).any(|v| !v.is_finite()) {
        return Ok(None);
    }
    Ok(Some(jrd_flat(&means, &vars, STATE_DIM)?))
}
