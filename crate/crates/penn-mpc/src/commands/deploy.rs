use std::path::Path;

use penn_mpc_core::dataset::Sample;
use penn_mpc_core::mppi::{Controller, CostSpec, CostWeights, EnsembleDynamics, Reference, RolloutContext};
use penn_mpc_core::penn::{ModelMode, PennModel};
use penn_mpc_core::sim::{plant_step, PlantParams, PlantState, Track};

use crate::checkpoint::load_checkpoint;
use crate::commands::{check_dataset, check_model, executed_jrd, subset_samples};
use crate::config::{tags, DeployMode, EvalSubset, ExperimentConfig, JrdThreshold};
use crate::error::{Error, Result};
use crate::numfmt::{exact, sig9};
use crate::report::{opt, write_csv, write_text, RunDir};
use crate::store::load_dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct DeploySummary {
    pub mode: DeployMode,
    pub steps: usize,
    /// Laps driven, fractional.
    pub laps: f64,
    /// Fraction of the requested laps driven, capped at 1.
    pub completion: f64,
    pub completed: bool,
    /// Time of the first full lap [s].
    pub lap_time: Option<f64>,
    /// Disagreement at the executed `(history, action)` of every step.
    pub mean_jrd: Option<f64>,
    pub max_jrd: Option<f64>,
    pub max_abs_e_lat: f64,
    pub off_track: bool,
    pub jrd_threshold: f64,
}

impl DeploySummary {
    pub fn text(&self) -> String {
        let o = |v: Option<f64>| v.map_or_else(|| "none".to_string(), exact);
        format!(
            "mode={}\nsteps={}\nlaps={}\ncompletion={}\ncompleted={}\nlap_time={}\nmean_jrd={}\nmax_jrd={}\nmax_abs_e_lat={}\noff_track={}\njrd_threshold={}\n",
            self.mode.name(),
            self.steps,
            exact(self.laps),
            exact(self.completion),
            self.completed,
            o(self.lap_time),
            o(self.mean_jrd),
            o(self.max_jrd),
            exact(self.max_abs_e_lat),
            self.off_track,
            exact(self.jrd_threshold),
        )
    }
}

/// Per-step CSV rows of a deployment run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeployLogs {
    pub trajectory: Vec<Vec<String>>,
    pub diagnostics: Vec<Vec<String>>,
}

const TRAJECTORY_HEADER: [&str; 12] = ["t", "vx", "vy", "r", "steer", "throttle", "x", "y", "yaw", "s", "e_lat", "jrd"];
const DIAGNOSTICS_HEADER: [&str; 8] = [
    "t",
    "mode",
    "applied_steer",
    "applied_throttle",
    "best_cost",
    "mean_jrd",
    "max_jrd",
    "n_invalid",
];

/// `q`-quantile of executed-style disagreement over `samples`.
pub fn jrd_quantile(model: &PennModel, samples: &[Sample], q: f64) -> Result<f64> {
    let mut v = Vec::with_capacity(samples.len());
    for s in samples {
        if let Some(j) = executed_jrd(model, &s.window)? {
            v.push(j);
        }
    }
    if v.is_empty() {
        return Err(Error::Runtime("no samples to compute the disagreement quantile from".into()));
    }
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    Ok(v[idx])
}

fn wrap_progress(ds: f64, length: f64) -> f64 {
    if ds > 0.5 * length {
        ds - length
    } else if ds < -0.5 * length {
        ds + length
    } else {
        ds
    }
}

/// Closed-loop laps of `track` with `model` inside MPPI.
///
/// Stops after `cfg.deploy.laps` laps, after `cfg.deploy.max_seconds`, or
/// when the vehicle leaves the track.
pub fn run_deploy<M: EnsembleDynamics>(
    cfg: &ExperimentConfig,
    plant: &PlantParams,
    model: &M,
    track: &Track,
    mode: DeployMode,
    jrd_threshold: f64,
) -> Result<(DeploySummary, DeployLogs)> {
    let weights = CostWeights {
        jrd_threshold,
        ..cfg.costs.weights
    };
    let reference = Reference {
        track: track.clone(),
        v_target: cfg.costs.v_target,
    };
    let spec = CostSpec::deploy(mode.cost_mode(), weights, reference)?;
    let seed = cfg.derive_seed(tags::DEPLOY, 0);
    let mut ctrl = Controller::new(cfg.mppi_config(seed), spec, cfg.mppi.propagation)?;

    let dt = plant.dt;
    let mut state = PlantState::new(cfg.deploy.start_speed, 0.0, 0.0, track.pose_at(0.0));
    let mut ctx = RolloutContext::at_rest(state.triple(), state.pose(), model.history(), dt)?;
    let goal = cfg.deploy.laps as f64 * track.total_length;
    let max_steps = (cfg.deploy.max_seconds / dt).round() as usize;
    let mut frame = track.track_frame(&state.pose())?;
    let mut progress = 0.0;
    let mut lap_time = None;
    let mut off_track = false;
    let mut max_e_lat: f64 = frame.e_lat.abs();
    let mut jrds = Vec::new();
    let mut logs = DeployLogs::default();

    for i in 0..max_steps {
        let t = i as f64 * dt;
        let out = ctrl.step(model, &ctx)?;
        let a = out.action;
        let mut w = ctx.window.clone();
        let last = w.pairs.len() - 1;
        w.pairs[last].1 = a;
        let jrd = executed_jrd(model, &w)?;
        jrds.extend(jrd);
        let s = state.triple();
        let d = &out.diagnostics;
        logs.trajectory.push(
            [t, s.vx, s.vy, s.r, a.steer, a.throttle, state.x, state.y, state.yaw, frame.s, frame.e_lat]
                .iter()
                .map(|&v| sig9(v))
                .chain([jrd.map(sig9).unwrap_or_default()])
                .collect(),
        );
        logs.diagnostics.push(vec![
            sig9(t),
            mode.cost_mode().name().to_string(),
            exact(a.steer),
            exact(a.throttle),
            exact(d.best_cost),
            opt(d.mean_jrd),
            opt(d.max_jrd),
            d.n_invalid.to_string(),
        ]);

        state = plant_step(&state, a, plant);
        let next = match track.track_frame_near(&state.pose(), frame.index, 40) {
            Ok(f) if f.e_lat.abs() <= track.half_width && plant.bounds.contains(&state.triple()) => f,
            other => {
                if let Ok(f) = other {
                    max_e_lat = max_e_lat.max(f.e_lat.abs());
                }
                log::warn!("left the track at t = {:.1} s", t + dt);
                off_track = true;
                break;
            }
        };
        progress += wrap_progress(next.s - frame.s, track.total_length);
        frame = next;
        max_e_lat = max_e_lat.max(frame.e_lat.abs());
        if lap_time.is_none() && progress >= track.total_length {
            lap_time = Some(t + dt);
        }
        if progress >= goal {
            break;
        }
        ctx.advance(a, state.triple(), state.pose());
    }

    let n = jrds.len();
    let summary = DeploySummary {
        mode,
        steps: logs.diagnostics.len(),
        laps: progress / track.total_length,
        completion: (progress / goal).clamp(0.0, 1.0),
        completed: progress >= goal,
        lap_time,
        mean_jrd: (n > 0).then(|| jrds.iter().sum::<f64>() / n as f64),
        max_jrd: jrds.iter().copied().reduce(f64::max),
        max_abs_e_lat: max_e_lat,
        off_track,
        jrd_threshold,
    };
    Ok((summary, logs))
}

/// Resolves δ for the configured mode.
fn threshold(cfg: &ExperimentConfig, model: &PennModel, data: Option<&Path>) -> Result<f64> {
    if cfg.deploy.mode == DeployMode::Direct {
        return Ok(match cfg.costs.jrd_threshold {
            JrdThreshold::Value(v) => v,
            JrdThreshold::Auto => f64::INFINITY,
        });
    }
    match cfg.costs.jrd_threshold {
        JrdThreshold::Value(v) => Ok(v),
        JrdThreshold::Auto => {
            let data = data.ok_or_else(|| {
                Error::Config("costs.jrd_threshold=auto needs a dataset (--data or io.data) for the quantile".into())
            })?;
            let ds = load_dataset(data)?;
            check_dataset(&ds, "checkpoint", model.history(), model.config().dt)?;
            let train = subset_samples(cfg, ds.samples()?, EvalSubset::Train)?;
            jrd_quantile(model, &train, cfg.costs.jrd_quantile)
        }
    }
}

/// `deploy`: closed-loop run with a checkpoint; writes trajectory, diagnostics and summary.
pub fn deploy(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>, out: &Path) -> Result<DeploySummary> {
    let model = load_checkpoint(checkpoint)?;
    check_model(cfg, &model)?;
    if cfg.deploy.mode == DeployMode::Safe && model.mode() != ModelMode::Probabilistic {
        return Err(Error::Config(
            "safe deployment needs a probabilistic checkpoint; this one is deterministic".into(),
        ));
    }
    let delta = threshold(cfg, &model, data)?;
    let run = RunDir::create(out, "deploy", cfg)?;
    let track = cfg.build_track()?;
    let (summary, logs) = run_deploy(cfg, &cfg.plant, &model, &track, cfg.deploy.mode, delta)?;
    write_csv(&run.file("trajectory.csv"), &TRAJECTORY_HEADER, &logs.trajectory)?;
    write_csv(&run.file("diagnostics.csv"), &DIAGNOSTICS_HEADER, &logs.diagnostics)?;
    write_text(&run.file("summary.txt"), &summary.text())?;
    log::info!(
        "{} deployment: {:.2} laps in {} steps, mean jrd {:?}, off track {}",
        cfg.deploy.mode.name(),
        summary.laps,
        summary.steps,
        summary.mean_jrd,
        summary.off_track
    );
    Ok(summary)
}
