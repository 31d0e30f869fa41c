use std::path::Path;

use penn_mpc_core::dataset::{split, Sample};
use penn_mpc_core::penn::{evaluate_rmse, EvalReport};

use crate::checkpoint::load_checkpoint;
use crate::commands::check_dataset;
use crate::config::{tags, EvalSubset, ExperimentConfig};
use crate::error::Result;
use crate::report::{write_eval_report, RunDir};
use crate::store::load_dataset;

/// The samples of `subset` under the experiment's split.
pub fn subset_samples(cfg: &ExperimentConfig, samples: Vec<Sample>, subset: EvalSubset) -> Result<Vec<Sample>> {
    if subset == EvalSubset::All {
        return Ok(samples);
    }
    let d = split(&samples, cfg.train.split, cfg.derive_seed(tags::SPLIT, 0))?;
    Ok(match subset {
        EvalSubset::Train => d.train,
        _ => d.test,
    })
}

/// `eval`: RMSE report of a checkpoint on a dataset subset.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    check_dataset(&ds, "checkpoint", model.history(), model.config().dt)?;
    let run = RunDir::create(out, "eval", cfg)?;
    let samples = subset_samples(cfg, ds.samples()?, cfg.eval.subset)?;
    let report = evaluate_rmse(&model, &samples)?;
    write_eval_report(&run.path, &report)?;
    Ok(report)
}
