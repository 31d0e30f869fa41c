use std::path::Path;

use penn_mpc_core::dataset::{split, Sample, SplitDataset};
use penn_mpc_core::penn::{train as train_model, EvalReport, PennConfig, TrainOutcome};

use crate::checkpoint::save_checkpoint;
use crate::commands::check_dataset;
use crate::config::{tags, ExperimentConfig};
use crate::error::Result;
use crate::report::{write_eval_report, write_metrics, RunDir};
use crate::store::load_dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub report: EvalReport,
    pub best_epoch: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Splits `samples` with the experiment's split seed and trains `model`.
pub fn fit(cfg: &ExperimentConfig, model: &PennConfig, samples: &[Sample]) -> Result<(TrainOutcome, SplitDataset)> {
    let d = split(samples, cfg.train.split, cfg.derive_seed(tags::SPLIT, 0))?;
    let tc = cfg.train_config(cfg.derive_seed(tags::TRAIN, 0));
    let out = train_model(model, &d.train, &d.test, &tc)?;
    Ok((out, d))
}

/// `train`: checkpoint of the best epoch, per-epoch metrics and the final report.
pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    let ds = load_dataset(data)?;
    let model_cfg = cfg.penn_config();
    check_dataset(&ds, "model", model_cfg.history, model_cfg.dt)?;
    let run = RunDir::create(out, "train", cfg)?;
    let samples = ds.samples()?;
    let (outcome, d) = fit(cfg, &model_cfg, &samples)?;
    save_checkpoint(&run.file("checkpoint.txt"), &outcome.best)?;
    write_metrics(&run.file("metrics.csv"), &outcome.history)?;
    let report = outcome.best_report();
    write_eval_report(out, &report)?;
    log::info!(
        "best epoch {} of {}: total RMSE {:.6}",
        outcome.best_epoch,
        outcome.history.len(),
        report.rmse_total
    );
    Ok(TrainSummary {
        report,
        best_epoch: outcome.best_epoch,
        train_samples: d.train.len(),
        test_samples: d.test.len(),
    })
}
