use std::path::Path;

use penn_mpc_core::dataset::{split, window_episodes, Sample};
use penn_mpc_core::mppi::{Controller, CostSpec, RolloutContext};
use penn_mpc_core::penn::{evaluate_rmse, train as train_model, EvalReport, ModelMode, PennModel};
use penn_mpc_core::rng;
use penn_mpc_core::sim::{plant_step, scripted_maneuver, Direction, EpisodeLog, ManeuverKind, PlantState, Pose};
use penn_mpc_core::Action;
use rand::Rng as _;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::commands::executed_jrd;
use crate::config::{tags, ExperimentConfig, Policy};
use crate::error::{Error, Result};
use crate::logs::{quantize_episode, read_episode, write_episode};
use crate::numfmt::exact;
use crate::report::{create_dir, rmse_values, write_csv, write_text, RunDir};
use crate::store::{save_dataset, Dataset, DatasetMeta};

#[derive(Debug, Clone, Copy, Default)]
pub struct ExploreOptions {
    /// Return after this round has been checkpointed.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub cumulative_steps: usize,
    /// Mean executed-step disagreement under the model the round started with.
    pub pre_round_jrd: f64,
    /// Held-out RMSE of the model retrained after the round.
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreSummary {
    pub curve: Vec<RoundRecord>,
    /// `false` when stopped early by [`ExploreOptions::stop_after`].
    pub finished: bool,
}

impl ExploreSummary {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.curve.last().map(|r| &r.report)
    }

    pub fn mean_pre_round_jrd(&self) -> f64 {
        self.curve.iter().map(|r| r.pre_round_jrd).sum::<f64>() / self.curve.len() as f64
    }
}

/// Held-out scripted episodes: every maneuver kind in both directions.
pub fn eval_episodes(cfg: &ExperimentConfig) -> Result<Vec<EpisodeLog>> {
    let track = cfg.build_track()?;
    let mut eps = Vec::new();
    for kind in ManeuverKind::ALL {
        for dir in [Direction::Ccw, Direction::Cw] {
            let seed = cfg.derive_seed(tags::EVAL_SET, eps.len() as u64);
            eps.push(scripted_maneuver(kind, cfg.explore.eval_seconds, dir, seed, &track, &cfg.plant)?.log);
        }
    }
    Ok(eps)
}

enum Driver<'a> {
    Random(rng::Rng),
    Mpc(Box<Controller<CostSpec>>, &'a PennModel),
}

/// Drives the plant on an open plane; stops early if the state leaves its bounds.
///
/// Returns the log and the executed-step disagreement under `model`.
fn drive(
    cfg: &ExperimentConfig,
    model: Option<&PennModel>,
    policy: Policy,
    seed: u64,
    steps: usize,
    tag: &str,
) -> Result<(EpisodeLog, Vec<f64>)> {
    let p = &cfg.plant;
    let h = cfg.model.history;
    let mut driver = match (policy, model) {
        (Policy::Mpc, Some(m)) => {
            let spec = CostSpec::explore(cfg.costs.weights)?;
            Driver::Mpc(Box::new(Controller::new(cfg.mppi_config(seed), spec, cfg.mppi.propagation)?), m)
        }
        _ => Driver::Random(rng::rng(seed)),
    };
    let mut state = PlantState::new(cfg.explore.start_speed, 0.0, 0.0, Pose::default());
    let mut ctx = RolloutContext::at_rest(state.triple(), state.pose(), h, p.dt)?;
    let mut log = EpisodeLog::new(p.dt, tag);
    let mut jrds = Vec::new();
    for i in 0..steps {
        let action = match &mut driver {
            Driver::Random(r) => Action::new(r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0)),
            Driver::Mpc(c, m) => c.step(*m, &ctx)?.action,
        };
        if let Some(m) = model {
            let mut w = ctx.window.clone();
            let last = w.pairs.len() - 1;
            w.pairs[last].1 = action;
            if let Some(j) = executed_jrd(m, &w)? {
                jrds.push(j);
            }
        }
        log.push(state.triple(), action, state.pose());
        state = plant_step(&state, action, p);
        if !p.bounds.contains(&state.triple()) {
            log::warn!("{tag}: plant left its state bounds after {} steps", i + 1);
            break;
        }
        ctx.advance(action, state.triple(), state.pose());
    }
    Ok((quantize_episode(&log), jrds))
}

fn retrain(cfg: &ExperimentConfig, buffer: &Dataset, round: usize) -> Result<PennModel> {
    let samples = buffer.samples()?;
    let d = split(&samples, cfg.train.split, cfg.derive_seed(tags::SPLIT, round as u64))?;
    let tc = cfg.train_config(cfg.derive_seed(tags::ROUND_TRAIN, round as u64));
    Ok(train_model(&cfg.penn_config(), &d.train, &d.test, &tc)?.best)
}

const PROGRESS: &str = "progress.txt";

fn round_dir(out: &Path, k: usize) -> std::path::PathBuf {
    out.join("rounds").join(format!("round_{k:03}"))
}

fn record_line(r: &RoundRecord) -> Vec<String> {
    let mut v = vec![
        r.round.to_string(),
        r.cumulative_steps.to_string(),
        exact(r.pre_round_jrd),
    ];
    v.extend(rmse_values(&r.report).iter().map(|&x| exact(x)));
    v.push(r.report.n_samples.to_string());
    v
}

const CURVE_HEADER: [&str; 8] = ["round", "cumulative_steps", "pre_round_jrd", "total", "vx", "vy", "r", "n_eval"];

fn parse_record(path: &Path) -> Result<RoundRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: Vec<&str> = text.trim().split(',').collect();
    let bad = || Error::format(path, "malformed round record");
    if f.len() != CURVE_HEADER.len() {
        return Err(bad());
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
    Ok(RoundRecord {
        round: f[0].parse().map_err(|_| bad())?,
        cumulative_steps: f[1].parse().map_err(|_| bad())?,
        pre_round_jrd: num(2)?,
        report: EvalReport {
            rmse_total: num(3)?,
            rmse_vx: num(4)?,
            rmse_vy: num(5)?,
            rmse_r: num(6)?,
            n_samples: f[7].parse().map_err(|_| bad())?,
        },
    })
}

struct State {
    buffer: Dataset,
    model: PennModel,
    curve: Vec<RoundRecord>,
    next_round: usize,
}

/// Reloads the rounds completed by an earlier run in `out`, if any.
fn resume(cfg: &ExperimentConfig, out: &Path) -> Result<Option<State>> {
    let progress = out.join(PROGRESS);
    if !progress.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&progress).map_err(|e| Error::io(&progress, e))?;
    let mut hash = None;
    let mut done = None;
    for line in text.lines() {
        match line.split_once('=') {
            Some(("config_hash", v)) => hash = Some(v.to_string()),
            Some(("round", v)) => done = v.parse::<usize>().ok(),
            _ => return Err(Error::format(&progress, format!("unexpected line `{line}`"))),
        }
    }
    if hash.as_deref() != Some(cfg.hash().as_str()) {
        return Err(Error::Config(format!(
            "{} belongs to a run with a different configuration; use a fresh output directory",
            out.display()
        )));
    }
    let done = done.ok_or_else(|| Error::format(&progress, "missing round"))?;
    let mut buffer = Dataset::new(DatasetMeta {
        history: cfg.model.history,
        dt: cfg.plant.dt,
    });
    let mut curve = Vec::new();
    for k in 0..=done {
        let dir = round_dir(out, k);
        let tag = if k == 0 { "warmup" } else { policy_tag(cfg.explore.policy) };
        let ep = read_episode(&dir.join("episode.csv"), cfg.plant.dt, tag)?;
        buffer.push(&ep, "-", policy_seed(cfg, k), false);
        if k > 0 {
            curve.push(parse_record(&dir.join("record.csv"))?);
        }
    }
    let model = load_checkpoint(&round_dir(out, done).join("checkpoint.txt"))?;
    log::info!("resuming exploration after round {done}");
    Ok(Some(State {
        buffer,
        model,
        curve,
        next_round: done + 1,
    }))
}

fn policy_tag(p: Policy) -> &'static str {
    match p {
        Policy::Mpc => "explore",
        Policy::Random => "random",
    }
}

fn policy_seed(cfg: &ExperimentConfig, round: usize) -> u64 {
    if round == 0 {
        cfg.derive_seed(tags::WARMUP, 0)
    } else {
        cfg.derive_seed(tags::POLICY, round as u64)
    }
}

fn save_round(cfg: &ExperimentConfig, out: &Path, k: usize, ep: &EpisodeLog, model: &PennModel, rec: Option<&RoundRecord>) -> Result<()> {
    let dir = round_dir(out, k);
    create_dir(&dir)?;
    write_episode(&dir.join("episode.csv"), ep)?;
    save_checkpoint(&dir.join("checkpoint.txt"), model)?;
    if let Some(r) = rec {
        write_text(&dir.join("record.csv"), &(record_line(r).join(",") + "\n"))?;
    }
    write_text(&out.join(PROGRESS), &format!("config_hash={}\nround={k}\n", cfg.hash()))
}

/// `explore`: random warmup, then rounds of drive, append, retrain, evaluate.
pub fn explore(cfg: &ExperimentConfig, out: &Path, opts: ExploreOptions) -> Result<ExploreSummary> {
    if cfg.explore.policy == Policy::Mpc && cfg.model.mode != ModelMode::Probabilistic {
        return Err(Error::Config("exploration needs model.mode=probabilistic".into()));
    }
    let resumed = resume(cfg, out)?;
    let run = RunDir::create(out, "explore", cfg)?;
    let h = cfg.model.history;
    let eval_samples: Vec<Sample> = window_episodes(&eval_episodes(cfg)?, h)?;

    let mut st = match resumed {
        Some(s) => s,
        None => {
            let mut buffer = Dataset::new(DatasetMeta {
                history: h,
                dt: cfg.plant.dt,
            });
            let seed = policy_seed(cfg, 0);
            let (ep, _) = drive(cfg, None, Policy::Random, seed, cfg.explore.warmup_steps, "warmup")?;
            buffer.push(&ep, "-", seed, false);
            let model = retrain(cfg, &buffer, 0)?;
            save_round(cfg, out, 0, &ep, &model, None)?;
            State {
                buffer,
                model,
                curve: Vec::new(),
                next_round: 1,
            }
        }
    };

    for k in st.next_round..=cfg.explore.rounds {
        if opts.stop_after.is_some_and(|s| k > s) {
            break;
        }
        let seed = policy_seed(cfg, k);
        let tag = policy_tag(cfg.explore.policy);
        let (ep, jrds) = drive(cfg, Some(&st.model), cfg.explore.policy, seed, cfg.explore.steps_per_round, tag)?;
        let pre_round_jrd = if jrds.is_empty() {
            f64::NAN
        } else {
            jrds.iter().sum::<f64>() / jrds.len() as f64
        };
        st.buffer.push(&ep, "-", seed, false);
        st.model = retrain(cfg, &st.buffer, k)?;
        let rec = RoundRecord {
            round: k,
            cumulative_steps: st.buffer.total_rows(),
            pre_round_jrd,
            report: evaluate_rmse(&st.model, &eval_samples)?,
        };
        log::info!(
            "round {k}: {} steps, pre-round jrd {:.4}, held-out RMSE {:.6}",
            rec.cumulative_steps,
            rec.pre_round_jrd,
            rec.report.rmse_total
        );
        save_round(cfg, out, k, &ep, &st.model, Some(&rec))?;
        st.curve.push(rec);
    }
    let finished = st.curve.len() == cfg.explore.rounds;
    if finished {
        let rows: Vec<Vec<String>> = st.curve.iter().map(record_line).collect();
        write_csv(&run.file("learning_curve.csv"), &CURVE_HEADER, &rows)?;
        save_checkpoint(&run.file("checkpoint.txt"), &st.model)?;
        save_dataset(&run.file("buffer"), &st.buffer)?;
    }
    Ok(ExploreSummary {
        curve: st.curve,
        finished,
    })
}
