//! Flat `key=value` experiment configuration with dotted section keys.
//!
//! Every key has a default; unknown keys are rejected. [`ExperimentConfig::dump`]
//! writes every effective value so the dump reloads to an identical config.

use std::collections::BTreeSet;
use std::path::Path;

use penn_mpc_core::mppi::{CostMode, CostWeights, MppiConfig, Propagation, Smoothing};
use penn_mpc_core::nn::{Activation, AdamConfig};
use penn_mpc_core::penn::{ModelMode, PennConfig, TrainConfig};
use penn_mpc_core::rng;
use penn_mpc_core::sim::{build_track, ManeuverKind, PlantParams, Track, TrackSpec, DESK_HALF_WIDTH};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Seed stream tags, one per stochastic stage of an experiment.
pub mod tags {
    pub const COLLECT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const MPPI: u64 = 4;
    pub const EVAL_SET: u64 = 5;
    pub const WARMUP: u64 = 6;
    pub const POLICY: u64 = 7;
    pub const ROUND_TRAIN: u64 = 8;
    pub const DEPLOY: u64 = 9;
}

/// Text form of one configuration value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a number, got `{s}`"))
    }
    fn render(&self) -> String {
        crate::numfmt::exact(*self)
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<ManeuverKind> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| ManeuverKind::from_name(p.trim()).ok_or_else(|| format!("unknown maneuver `{}`", p.trim())))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! named_value {
    ($ty:ty, $what:literal, $from:expr, $to:expr) => {
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                $from(s).ok_or_else(|| format!(concat!("unknown ", $what, " `{}`"), s))
            }
            fn render(&self) -> String {
                $to(*self).to_string()
            }
        }
    };
}

named_value!(ModelMode, "model mode", ModelMode::from_name, ModelMode::name);
named_value!(Activation, "activation", Activation::from_name, Activation::name);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackKind {
    Desk,
    Circle,
}

named_value!(
    TrackKind,
    "track kind",
    |s| match s {
        "desk" => Some(TrackKind::Desk),
        "circle" => Some(TrackKind::Circle),
        _ => None,
    },
    |k| match k {
        TrackKind::Desk => "desk",
        TrackKind::Circle => "circle",
    }
);

named_value!(
    Propagation,
    "propagation",
    |s| match s {
        "ts" => Some(Propagation::TrajectorySampling),
        "mean" => Some(Propagation::Mean),
        _ => None,
    },
    |p| match p {
        Propagation::TrajectorySampling => "ts",
        Propagation::Mean => "mean",
    }
);

/// Exploration data source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Mpc,
    Random,
}

named_value!(
    Policy,
    "policy",
    |s| match s {
        "mpc" => Some(Policy::Mpc),
        "random" => Some(Policy::Random),
        _ => None,
    },
    |p| match p {
        Policy::Mpc => "mpc",
        Policy::Random => "random",
    }
);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeployMode {
    Direct,
    Safe,
}

impl DeployMode {
    pub fn cost_mode(self) -> CostMode {
        match self {
            DeployMode::Direct => CostMode::DeployDirect,
            DeployMode::Safe => CostMode::DeploySafe,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeployMode::Direct => "direct",
            DeployMode::Safe => "safe",
        }
    }
}

named_value!(
    DeployMode,
    "deploy mode",
    |s| match s {
        "direct" => Some(DeployMode::Direct),
        "safe" => Some(DeployMode::Safe),
        _ => None,
    },
    DeployMode::name
);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSubset {
    All,
    Train,
    Test,
}

named_value!(
    EvalSubset,
    "evaluation subset",
    |s| match s {
        "all" => Some(EvalSubset::All),
        "train" => Some(EvalSubset::Train),
        "test" => Some(EvalSubset::Test),
        _ => None,
    },
    |e| match e {
        EvalSubset::All => "all",
        EvalSubset::Train => "train",
        EvalSubset::Test => "test",
    }
);

impl ConfigValue for Smoothing {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            return Ok(Smoothing::None);
        }
        s.strip_prefix("moving_average:")
            .and_then(|w| w.parse().ok())
            .map(Smoothing::MovingAverage)
            .ok_or_else(|| format!("expected `none` or `moving_average:<w>`, got `{s}`"))
    }
    fn render(&self) -> String {
        match self {
            Smoothing::None => "none".into(),
            Smoothing::MovingAverage(w) => format!("moving_average:{w}"),
        }
    }
}

/// Disagreement threshold δ of the safe deployment cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JrdThreshold {
    /// Quantile of training-set disagreement, computed at deploy setup.
    Auto,
    Value(f64),
}

impl ConfigValue for JrdThreshold {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(JrdThreshold::Auto)
        } else {
            f64::parse_value(s).map(JrdThreshold::Value)
        }
    }
    fn render(&self) -> String {
        match self {
            JrdThreshold::Auto => "auto".into(),
            JrdThreshold::Value(v) => v.render(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSection {
    pub kind: TrackKind,
    pub half_width: f64,
    /// Radius of the `circle` layout [m].
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub split: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiSection {
    pub samples: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub sigma_steer: f64,
    pub sigma_throttle: f64,
    pub smoothing: Smoothing,
    pub propagation: Propagation,
    /// Rollouts per batched model call; 0 evaluates all at once.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSection {
    pub weights: CostWeights,
    pub jrd_threshold: JrdThreshold,
    /// Quantile of train-split executed JRD taken as `auto` threshold; 1 is the maximum.
    pub jrd_quantile: f64,
    pub v_target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectSection {
    pub minutes: f64,
    pub episode_seconds: f64,
    pub mix: Vec<ManeuverKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreSection {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub policy: Policy,
    pub warmup_steps: usize,
    /// Length of each held-out evaluation episode [s].
    pub eval_seconds: f64,
    pub start_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploySection {
    pub mode: DeployMode,
    pub laps: usize,
    pub max_seconds: f64,
    pub start_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    pub h_min: usize,
    pub h_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub subset: EvalSubset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoSection {
    /// Dataset manifest (or its directory); empty when unused.
    pub data: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub plant: PlantParams,
    pub track: TrackSection,
    pub model: PennConfig,
    pub train: TrainSection,
    pub mppi: MppiSection,
    pub costs: CostSection,
    pub collect: CollectSection,
    pub explore: ExploreSection,
    pub deploy: DeploySection,
    pub ablate: AblateSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mppi = MppiConfig::default();
        let weights = CostWeights::default();
        ExperimentConfig {
            seed: 0,
            plant: PlantParams::default(),
            track: TrackSection {
                kind: TrackKind::Desk,
                half_width: DESK_HALF_WIDTH,
                radius: 30.0,
            },
            model: PennConfig::default(),
            train: TrainSection {
                epochs: 200,
                batch: 64,
                lr: AdamConfig::default().lr,
                split: 0.7,
            },
            mppi: MppiSection {
                samples: mppi.samples,
                horizon: mppi.horizon,
                lambda: mppi.lambda,
                sigma_steer: mppi.sigma[0],
                sigma_throttle: mppi.sigma[1],
                smoothing: mppi.smoothing,
                propagation: Propagation::TrajectorySampling,
                batch: mppi.batch,
            },
            costs: CostSection {
                weights,
                jrd_threshold: JrdThreshold::Auto,
                jrd_quantile: 1.0,
                v_target: 6.0,
            },
            collect: CollectSection {
                minutes: 7.0,
                episode_seconds: 60.0,
                mix: ManeuverKind::ALL.to_vec(),
            },
            explore: ExploreSection {
                rounds: 10,
                steps_per_round: 600,
                policy: Policy::Mpc,
                warmup_steps: 100,
                eval_seconds: 30.0,
                start_speed: 3.0,
            },
            deploy: DeploySection {
                mode: DeployMode::Safe,
                laps: 1,
                max_seconds: 180.0,
                start_speed: 3.0,
            },
            ablate: AblateSection { h_min: 1, h_max: 10 },
            eval: EvalSection { subset: EvalSubset::Test },
            io: IoSection {
                data: String::new(),
                checkpoint: String::new(),
            },
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        impl ExperimentConfig {
            /// Every recognised key, in dump order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` for every key.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, <$ty as ConfigValue>::render(&self.$($field).+))),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed: u64,
    "plant.mass" => plant.mass: f64,
    "plant.yaw_inertia" => plant.yaw_inertia: f64,
    "plant.lf" => plant.lf: f64,
    "plant.lr" => plant.lr: f64,
    "plant.front.b_stiff" => plant.front.b_stiff: f64,
    "plant.front.c_shape" => plant.front.c_shape: f64,
    "plant.front.mu" => plant.front.mu: f64,
    "plant.rear.b_stiff" => plant.rear.b_stiff: f64,
    "plant.rear.c_shape" => plant.rear.c_shape: f64,
    "plant.rear.mu" => plant.rear.mu: f64,
    "plant.drag" => plant.drag: f64,
    "plant.max_steer" => plant.max_steer: f64,
    "plant.max_accel" => plant.max_accel: f64,
    "plant.dt" => plant.dt: f64,
    "plant.substeps" => plant.substeps: usize,
    "plant.steer_delay" => plant.steer_delay: usize,
    "plant.throttle_delay" => plant.throttle_delay: usize,
    "plant.steer_tau" => plant.steer_tau: f64,
    "plant.accel_tau" => plant.accel_tau: f64,
    "plant.min_slip_speed" => plant.min_slip_speed: f64,
    "plant.bounds.vx" => plant.bounds.vx: f64,
    "plant.bounds.vy" => plant.bounds.vy: f64,
    "plant.bounds.r" => plant.bounds.r: f64,
    "track.kind" => track.kind: TrackKind,
    "track.half_width" => track.half_width: f64,
    "track.radius" => track.radius: f64,
    "model.H" => model.history: usize,
    "model.B" => model.ensemble_size: usize,
    "model.hidden" => model.hidden: Vec<usize>,
    "model.activation" => model.activation: Activation,
    "model.mode" => model.mode: ModelMode,
    "model.var_min" => model.var_bounds.min: f64,
    "model.var_max" => model.var_bounds.max: f64,
    "train.epochs" => train.epochs: usize,
    "train.batch" => train.batch: usize,
    "train.lr" => train.lr: f64,
    "train.split" => train.split: f64,
    "mppi.K" => mppi.samples: usize,
    "mppi.T" => mppi.horizon: usize,
    "mppi.lambda" => mppi.lambda: f64,
    "mppi.sigma_steer" => mppi.sigma_steer: f64,
    "mppi.sigma_throttle" => mppi.sigma_throttle: f64,
    "mppi.smoothing" => mppi.smoothing: Smoothing,
    "mppi.propagation" => mppi.propagation: Propagation,
    "mppi.batch" => mppi.batch: usize,
    "costs.w_track" => costs.weights.w_track: f64,
    "costs.w_speed" => costs.weights.w_speed: f64,
    "costs.w_ctrl" => costs.weights.w_ctrl: f64,
    "costs.w_unc" => costs.weights.w_unc: f64,
    "costs.penalty_big" => costs.weights.penalty_big: f64,
    "costs.explore_vx_min" => costs.weights.explore_vx_min: f64,
    "costs.explore_vx_max" => costs.weights.explore_vx_max: f64,
    "costs.jrd_threshold" => costs.jrd_threshold: JrdThreshold,
    "costs.jrd_quantile" => costs.jrd_quantile: f64,
    "costs.v_target" => costs.v_target: f64,
    "collect.minutes" => collect.minutes: f64,
    "collect.episode_seconds" => collect.episode_seconds: f64,
    "collect.mix" => collect.mix: Vec<ManeuverKind>,
    "explore.rounds" => explore.rounds: usize,
    "explore.steps_per_round" => explore.steps_per_round: usize,
    "explore.policy" => explore.policy: Policy,
    "explore.warmup_steps" => explore.warmup_steps: usize,
    "explore.eval_seconds" => explore.eval_seconds: f64,
    "explore.start_speed" => explore.start_speed: f64,
    "deploy.mode" => deploy.mode: DeployMode,
    "deploy.laps" => deploy.laps: usize,
    "deploy.max_seconds" => deploy.max_seconds: f64,
    "deploy.start_speed" => deploy.start_speed: f64,
    "ablate.h_min" => ablate.h_min: usize,
    "ablate.h_max" => ablate.h_max: usize,
    "eval.subset" => eval.subset: EvalSubset,
    "io.data" => io.data: String,
    "io.checkpoint" => io.checkpoint: String,
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults. `origin` only labels errors.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_assignment(line)
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key=value`, got `{line}`", i + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: duplicate key `{key}`", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    /// Defaults, then the file (when given), then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ExperimentConfig::from_text(&text, &p.display().to_string())?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) =
                split_assignment(o).ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every effective value, one `key=value` per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// `sha256:<hex>` of [`ExperimentConfig::dump`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        format!("sha256:{}", hex_digest(&digest))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.penn_config().validate()?;
        self.mppi_config(0).validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.track.half_width > 0.0 && self.track.radius > 0.0) {
            return bad("track.half_width and track.radius must be positive".into());
        }
        if !(self.train.split > 0.0 && self.train.split < 1.0) {
            return bad(format!("train.split must lie in (0, 1), got {}", self.train.split));
        }
        if self.train.epochs == 0 || self.train.batch == 0 || !(self.train.lr > 0.0) {
            return bad("train.epochs, train.batch and train.lr must be positive".into());
        }
        if !(self.costs.jrd_quantile > 0.0 && self.costs.jrd_quantile <= 1.0) {
            return bad("costs.jrd_quantile must lie in (0, 1]".into());
        }
        if let JrdThreshold::Value(v) = self.costs.jrd_threshold {
            if v.is_nan() {
                return bad("costs.jrd_threshold must be a number or `auto`".into());
            }
        }
        let w = &self.costs.weights;
        if [w.w_track, w.w_speed, w.w_ctrl, w.w_unc, w.penalty_big].iter().any(|v| !(*v >= 0.0)) {
            return bad("cost weights must be non-negative".into());
        }
        if !(w.explore_vx_min < w.explore_vx_max) {
            return bad("costs.explore_vx_min must be below costs.explore_vx_max".into());
        }
        if !(self.collect.minutes > 0.0 && self.collect.episode_seconds > 0.0) || self.collect.mix.is_empty() {
            return bad("collect needs positive minutes and episode_seconds and a non-empty mix".into());
        }
        let e = &self.explore;
        if e.rounds == 0 || e.steps_per_round <= self.model.history || e.warmup_steps <= self.model.history {
            return bad(format!(
                "explore needs rounds >= 1 and warmup_steps, steps_per_round > model.H ({})",
                self.model.history
            ));
        }
        if !(e.eval_seconds > 0.0 && e.start_speed >= 0.0) {
            return bad("explore.eval_seconds must be positive and explore.start_speed non-negative".into());
        }
        if self.deploy.laps == 0 || !(self.deploy.max_seconds > 0.0) || !(self.deploy.start_speed >= 0.0) {
            return bad("deploy needs laps >= 1, positive max_seconds and non-negative start_speed".into());
        }
        if self.ablate.h_min == 0 || self.ablate.h_min > self.ablate.h_max {
            return bad(format!(
                "ablation range must satisfy 1 <= h_min <= h_max, got {}..{}",
                self.ablate.h_min, self.ablate.h_max
            ));
        }
        Ok(())
    }

    /// Seed of stream `(tag, index)` under the root seed.
    pub fn derive_seed(&self, tag: u64, index: u64) -> u64 {
        rng::derive(self.seed, tag, index)
    }

    pub fn penn_config(&self) -> PennConfig {
        PennConfig {
            dt: self.plant.dt,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch,
            seed,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
        }
    }

    pub fn mppi_config(&self, seed: u64) -> MppiConfig {
        let m = &self.mppi;
        MppiConfig {
            samples: m.samples,
            horizon: m.horizon,
            lambda: m.lambda,
            sigma: [m.sigma_steer, m.sigma_throttle],
            seed,
            smoothing: m.smoothing,
            batch: m.batch,
        }
    }

    pub fn track_spec(&self) -> TrackSpec {
        match self.track.kind {
            TrackKind::Desk => TrackSpec::desk(self.track.half_width),
            TrackKind::Circle => TrackSpec::circle(self.track.radius, self.track.half_width),
        }
    }

    pub fn build_track(&self) -> Result<Track> {
        Ok(build_track(&self.track_spec())?)
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
