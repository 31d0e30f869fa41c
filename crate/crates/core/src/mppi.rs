//! Model predictive path integral control over an ensemble dynamics model.
//!
//! Each control step samples `K` perturbed action sequences around a nominal
//! sequence, rolls every one of them through the learned model for `T` steps,
//! and moves the nominal toward the exponentially cost-weighted average of
//! the perturbations. Two objectives plug into the same loop: exploration
//! rewards ensemble disagreement, deployment tracks a reference path and may
//! penalize it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::jrd::jrd_flat;
use crate::penn::PennModel;
use crate::rng;
use crate::sim::plant::Pose;
use crate::sim::track::Track;
use crate::state::{clamp_unit, Action, HistoryWindow, StateTriple, ACTION_DIM, PAIR_DIM, STATE_DIM};

const TAG_STEP: u64 = 0x6d70_7069;

/// Batched access to the members of a one-step Δ-state ensemble.
pub trait EnsembleDynamics {
    /// Number of `(state, action)` pairs per input window.
    fn history(&self) -> usize;
    fn ensemble_size(&self) -> usize;
    /// `false` when the members carry no meaningful predictive variance.
    fn has_variance(&self) -> bool;
    /// Δ-state means and variances of `member` for `n` raw feature rows.
    ///
    /// Rows the model cannot evaluate come back as NaN.
    fn predict_rows(&self, member: usize, raw: &[f64], n: usize, means: &mut [f64], vars: &mut [f64]) -> Result<()>;
}

impl EnsembleDynamics for PennModel {
    fn history(&self) -> usize {
        PennModel::history(self)
    }

    fn ensemble_size(&self) -> usize {
        PennModel::ensemble_size(self)
    }

    fn has_variance(&self) -> bool {
        self.mode() == crate::penn::ModelMode::Probabilistic
    }

    fn predict_rows(&self, member: usize, raw: &[f64], n: usize, means: &mut [f64], vars: &mut [f64]) -> Result<()> {
        self.predict_deltas(member, raw, n, means, vars)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// Centered moving average over `w` steps, truncated at the ends.
    MovingAverage(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiConfig {
    /// `K`
    pub samples: usize,
    /// `T`
    pub horizon: usize,
    pub lambda: f64,
    /// Perturbation std for (steer, throttle).
    pub sigma: [f64; ACTION_DIM],
    pub seed: u64,
    pub smoothing: Smoothing,
    /// Rollouts evaluated per model call; 0 evaluates all `K` at once.
    pub batch: usize,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            samples: 512,
            horizon: 25,
            lambda: 1.0,
            sigma: [0.3, 0.3],
            seed: 0,
            smoothing: Smoothing::MovingAverage(3),
            batch: 0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Config(format!("mppi needs at least 2 samples, got {}", self.samples)));
        }
        if self.horizon < 1 {
            return Err(Error::Config("mppi horizon must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("mppi lambda must be positive, got {}", self.lambda)));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("mppi sigma must be non-negative, got {:?}", self.sigma)));
        }
        if self.smoothing == Smoothing::MovingAverage(0) {
            return Err(Error::Config("moving average window must be at least 1".into()));
        }
        Ok(())
    }
}

/// `T` actions, each channel in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub actions: Vec<Action>,
}

impl ControlSequence {
    pub fn new(actions: Vec<Action>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Config("control sequence is empty".into()));
        }
        if let Some(a) = actions
            .iter()
            .find(|a| !(a.steer.abs() <= 1.0 && a.throttle.abs() <= 1.0))
        {
            return Err(Error::Control(format!("action {a:?} leaves [-1, 1]")));
        }
        Ok(ControlSequence { actions })
    }

    pub fn zeros(horizon: usize) -> Self {
        ControlSequence {
            actions: vec![Action::default(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Drops the first action and repeats the last one.
    pub fn shifted(&self) -> Self {
        let mut actions = self.actions[1..].to_vec();
        actions.push(self.actions[self.actions.len() - 1]);
        ControlSequence { actions }
    }
}

/// Writes the `T x 2` perturbation of sample `k` into `out`.
///
/// The values depend only on `(seed, k)`.
pub fn sample_perturbation(cfg: &MppiConfig, seed: u64, k: usize, out: &mut [f64]) {
    let mut r = rng::rng_stream(seed, k as u64);
    for pair in out.chunks_exact_mut(ACTION_DIM) {
        for (v, s) in pair.iter_mut().zip(cfg.sigma) {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = s * z;
        }
    }
}

/// `K x T x 2` i.i.d. Gaussian perturbations, sample-major.
pub fn sample_perturbations(cfg: &MppiConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let per = cfg.horizon * ACTION_DIM;
    let mut eps = vec![0.0; cfg.samples * per];
    for (k, chunk) in eps.chunks_exact_mut(per).enumerate() {
        sample_perturbation(cfg, seed, k, chunk);
    }
    Ok(eps)
}

/// How a rollout turns member predictions into its next state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberAssignment {
    /// Follow one member's mean for the whole horizon.
    Member(usize),
    /// Follow the ensemble-mean Δ.
    Mean,
}

/// Where the vehicle is when a plan is made.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutContext {
    /// Last `H` pairs; the newest pair holds the current state and its
    /// action slot is replaced by each candidate action.
    pub window: HistoryWindow,
    pub pose: Pose,
    /// Action applied on the previous step, for the effort term.
    pub prev_action: Action,
}

impl RolloutContext {
    /// Vehicle at rest history-wise: `H` copies of `state` with zero action.
    pub fn at_rest(state: StateTriple, pose: Pose, history: usize, dt: f64) -> Result<Self> {
        Ok(RolloutContext {
            window: HistoryWindow::filled(state, Action::default(), history, dt)?,
            pose,
            prev_action: Action::default(),
        })
    }

    /// Advances by one executed step.
    pub fn advance(&mut self, applied: Action, next: StateTriple, pose: Pose) {
        let last = self.window.pairs.len() - 1;
        self.window.pairs[last].1 = applied;
        self.window.push(next, applied);
        self.pose = pose;
        self.prev_action = applied;
    }
}

/// One transition seen by an objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub index: usize,
    pub state: StateTriple,
    pub next: StateTriple,
    pub action: Action,
    pub prev_action: Action,
    pub jrd: Option<f64>,
    pub dt: f64,
}

/// Per-step cost of a rollout.
pub trait Objective {
    /// Per-rollout bookkeeping, built once per plan and cloned per rollout.
    type Tracker: Clone;

    fn uses_jrd(&self) -> bool;
    fn start(&self, ctx: &RolloutContext) -> Self::Tracker;
    /// Cost of one stage; `+∞` or NaN invalidates the rollout.
    fn stage_cost(&self, tracker: &mut Self::Tracker, stage: &Stage) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Predicted states, the current one first. Shorter than `T + 1` when
    /// the rollout became invalid.
    pub states: Vec<StateTriple>,
    pub jrd: Option<Vec<f64>>,
    pub cost: f64,
    pub valid: bool,
}

/// Rolls one action sequence through the model.
pub fn rollout<M: EnsembleDynamics, O: Objective>(
    model: &M,
    ctx: &RolloutContext,
    seq: &ControlSequence,
    objective: &O,
    assignment: MemberAssignment,
) -> Result<RolloutResult> {
    let mut r = rollout_batch(model, ctx, core::slice::from_ref(seq), &[assignment], objective)?;
    Ok(r.remove(0))
}

/// Rolls many action sequences through the model with one batched network
/// call per member and step.
///
/// When the objective needs disagreement, every member is evaluated on every
/// rollout at every step and the per-step JRD of the resulting mixture is
/// passed to the objective; otherwise each member only sees its own rows.
pub fn rollout_batch<M: EnsembleDynamics, O: Objective>(
    model: &M,
    ctx: &RolloutContext,
    seqs: &[ControlSequence],
    assignments: &[MemberAssignment],
    objective: &O,
) -> Result<Vec<RolloutResult>> {
    let n = seqs.len();
    let h = model.history();
    let b = model.ensemble_size();
    if n == 0 {
        return Ok(Vec::new());
    }
    if b == 0 {
        return Err(Error::Model("ensemble has no members".into()));
    }
    crate::error::shape("rollout history", h, ctx.window.len())?;
    crate::error::shape("member assignments", n, assignments.len())?;
    let horizon = seqs[0].horizon();
    if let Some(s) = seqs.iter().find(|s| s.horizon() != horizon) {
        return Err(Error::Shape {
            what: "control sequence horizon",
            expected: horizon,
            actual: s.horizon(),
        });
    }
    for a in assignments {
        if let MemberAssignment::Member(m) = *a {
            if m >= b {
                return Err(Error::Shape {
                    what: "member index",
                    expected: b,
                    actual: m,
                });
            }
        }
    }
    let uses_jrd = objective.uses_jrd();
    if uses_jrd && !model.has_variance() {
        return Err(Error::Model(
            "objective needs ensemble disagreement but the model has no predictive variance".into(),
        ));
    }
    let all_members = uses_jrd || assignments.contains(&MemberAssignment::Mean);

    let feat = h * PAIR_DIM;
    let base = ctx.window.raw_features();
    let mut raw = Vec::with_capacity(n * feat);
    for _ in 0..n {
        raw.extend_from_slice(&base);
    }
    let start = objective.start(ctx);
    let mut trackers = vec![start; n];
    let current = ctx.window.last_state();
    let mut results: Vec<RolloutResult> = (0..n)
        .map(|_| {
            let mut states = Vec::with_capacity(horizon + 1);
            states.push(current);
            RolloutResult {
                states,
                jrd: uses_jrd.then(|| Vec::with_capacity(horizon)),
                cost: 0.0,
                valid: true,
            }
        })
        .collect();

    let mut means = vec![0.0; if all_members { b } else { 1 } * n * STATE_DIM];
    let mut vars = vec![0.0; means.len()];
    let mut deltas = vec![0.0; n * STATE_DIM];
    let mut jrds = vec![0.0; n];
    let mut mix_m = vec![0.0; b * STATE_DIM];
    let mut mix_v = vec![0.0; b * STATE_DIM];
    let mut sub_raw = Vec::new();
    let mut rows = Vec::new();
    let last_action = (h - 1) * PAIR_DIM + STATE_DIM;

    for j in 0..horizon {
        for k in 0..n {
            let a = seqs[k].actions[j];
            raw[k * feat + last_action] = a.steer;
            raw[k * feat + last_action + 1] = a.throttle;
        }
        if all_members {
            let stride = n * STATE_DIM;
            for m in 0..b {
                model.predict_rows(
                    m,
                    &raw,
                    n,
                    &mut means[m * stride..(m + 1) * stride],
                    &mut vars[m * stride..(m + 1) * stride],
                )?;
            }
            for k in 0..n {
                if !results[k].valid {
                    continue;
                }
                let d = &mut deltas[k * STATE_DIM..(k + 1) * STATE_DIM];
                match assignments[k] {
                    MemberAssignment::Member(m) => {
                        d.copy_from_slice(&means[m * stride + k * STATE_DIM..m * stride + (k + 1) * STATE_DIM])
                    }
                    MemberAssignment::Mean => {
                        d.fill(0.0);
                        for m in 0..b {
                            for (x, v) in d.iter_mut().zip(&means[m * stride + k * STATE_DIM..]) {
                                *x += v;
                            }
                        }
                        d.iter_mut().for_each(|x| *x /= b as f64);
                    }
                }
                if uses_jrd {
                    for m in 0..b {
                        let src = m * stride + k * STATE_DIM..m * stride + (k + 1) * STATE_DIM;
                        mix_m[m * STATE_DIM..(m + 1) * STATE_DIM].copy_from_slice(&means[src.clone()]);
                        mix_v[m * STATE_DIM..(m + 1) * STATE_DIM].copy_from_slice(&vars[src]);
                    }
                    jrds[k] = jrd_flat(&mix_m, &mix_v, STATE_DIM).unwrap_or(f64::NAN);
                }
            }
        } else {
            for m in 0..b {
                rows.clear();
                rows.extend((0..n).filter(|&k| results[k].valid && assignments[k] == MemberAssignment::Member(m)));
                if rows.is_empty() {
                    continue;
                }
                sub_raw.clear();
                for &k in &rows {
                    sub_raw.extend_from_slice(&raw[k * feat..(k + 1) * feat]);
                }
                let len = rows.len() * STATE_DIM;
                model.predict_rows(m, &sub_raw, rows.len(), &mut means[..len], &mut vars[..len])?;
                for (i, &k) in rows.iter().enumerate() {
                    deltas[k * STATE_DIM..(k + 1) * STATE_DIM]
                        .copy_from_slice(&means[i * STATE_DIM..(i + 1) * STATE_DIM]);
                }
            }
        }

        for k in 0..n {
            let res = &mut results[k];
            if !res.valid {
                continue;
            }
            let d = &deltas[k * STATE_DIM..(k + 1) * STATE_DIM];
            let state = res.states[res.states.len() - 1];
            let next = state.add([d[0], d[1], d[2]]);
            let jrd = uses_jrd.then_some(jrds[k]);
            if !next.is_finite() || jrd.is_some_and(|v| !v.is_finite()) {
                res.valid = false;
                res.cost = f64::INFINITY;
                continue;
            }
            let stage = Stage {
                index: j,
                state,
                next,
                action: seqs[k].actions[j],
                prev_action: if j == 0 { ctx.prev_action } else { seqs[k].actions[j - 1] },
                jrd,
                dt: ctx.window.dt,
            };
            let c = objective.stage_cost(&mut trackers[k], &stage);
            if !c.is_finite() {
                res.valid = false;
                res.cost = f64::INFINITY;
                continue;
            }
            res.cost += c;
            res.states.push(next);
            if let (Some(v), Some(js)) = (jrd, res.jrd.as_mut()) {
                js.push(v);
            }
            let row = &mut raw[k * feat..(k + 1) * feat];
            row.copy_within(PAIR_DIM.., 0);
            let tail = &mut row[(h - 1) * PAIR_DIM..];
            tail[..STATE_DIM].copy_from_slice(&next.to_array());
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Explore,
    DeployDirect,
    DeploySafe,
}

impl CostMode {
    pub fn name(self) -> &'static str {
        match self {
            CostMode::Explore => "explore",
            CostMode::DeployDirect => "deploy_direct",
            CostMode::DeploySafe => "deploy_safe",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [CostMode::Explore, CostMode::DeployDirect, CostMode::DeploySafe]
            .into_iter()
            .find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub w_track: f64,
    pub w_speed: f64,
    pub w_ctrl: f64,
    /// `γ`, used by `DeploySafe` only.
    pub w_unc: f64,
    /// `δ`, used by `DeploySafe` only.
    pub jrd_threshold: f64,
    pub penalty_big: f64,
    /// Predicted speeds outside `[explore_vx_min, explore_vx_max]` are
    /// penalized while exploring.
    pub explore_vx_min: f64,
    pub explore_vx_max: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_track: 1.0,
            w_speed: 0.5,
            w_ctrl: 0.1,
            w_unc: 5.0,
            jrd_threshold: f64::INFINITY,
            penalty_big: 1000.0,
            explore_vx_min: 0.5,
            explore_vx_max: 10.0,
        }
    }
}

/// Path to follow while deploying.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub track: Track,
    pub v_target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub mode: CostMode,
    pub weights: CostWeights,
    pub reference: Option<Reference>,
}

impl CostSpec {
    pub fn explore(weights: CostWeights) -> Result<Self> {
        let c = CostSpec {
            mode: CostMode::Explore,
            weights,
            reference: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn deploy(mode: CostMode, weights: CostWeights, reference: Reference) -> Result<Self> {
        let c = CostSpec {
            mode,
            weights,
            reference: Some(reference),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let nonneg = [w.w_track, w.w_speed, w.w_ctrl, w.w_unc, w.penalty_big];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("cost weights must be finite and non-negative: {w:?}")));
        }
        if w.jrd_threshold.is_nan() {
            return Err(Error::Config("jrd threshold is NaN".into()));
        }
        match self.mode {
            CostMode::Explore => {
                if !(w.explore_vx_min < w.explore_vx_max) {
                    return Err(Error::Config(format!(
                        "explore speed band [{}, {}] is empty",
                        w.explore_vx_min, w.explore_vx_max
                    )));
                }
            }
            CostMode::DeployDirect | CostMode::DeploySafe => {
                let r = self
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{} needs a reference track", self.mode.name())))?;
                if !(r.v_target >= 0.0 && r.v_target.is_finite()) {
                    return Err(Error::Config(format!("target speed must be non-negative, got {}", r.v_target)));
                }
                if self.mode == CostMode::DeploySafe && !(w.w_unc > 0.0) {
                    return Err(Error::Config("deploy_safe needs a positive uncertainty weight".into()));
                }
            }
        }
        Ok(())
    }
}

fn effort(a: Action, prev: Action) -> f64 {
    let (ds, dt) = (a.steer - prev.steer, a.throttle - prev.throttle);
    ds * ds + dt * dt
}

fn explore_stage(w: &CostWeights, next: &StateTriple, jrd: f64, a: Action, prev: Action) -> f64 {
    let outside = next.vx < w.explore_vx_min || next.vx > w.explore_vx_max;
    -jrd + w.w_ctrl * effort(a, prev) + if outside { w.penalty_big } else { 0.0 }
}

fn deploy_stage(
    mode: CostMode,
    w: &CostWeights,
    half_width: f64,
    v_target: f64,
    next: &StateTriple,
    e_lat: Option<f64>,
    jrd: f64,
    a: Action,
    prev: Action,
) -> f64 {
    let Some(e) = e_lat else {
        return f64::INFINITY;
    };
    let dv = next.vx - v_target;
    let mut c = w.w_track * e * e + w.w_speed * dv * dv + w.w_ctrl * effort(a, prev);
    if e.abs() > half_width {
        c += w.penalty_big;
    }
    if mode == CostMode::DeploySafe {
        c += w.w_unc * jrd;
        if jrd > w.jrd_threshold {
            c += w.penalty_big;
        }
    }
    c
}

/// `−Σ jrd + w_ctrl Σ ‖Δu‖²` plus the speed-band penalty.
///
/// `states[t]` is the predicted state after `actions[t]`.
pub fn exploration_cost(
    states: &[StateTriple],
    jrd: &[f64],
    actions: &[Action],
    prev_action: Action,
    w: &CostWeights,
) -> Result<f64> {
    crate::error::shape("exploration jrd", states.len(), jrd.len())?;
    crate::error::shape("exploration actions", states.len(), actions.len())?;
    let mut prev = prev_action;
    let mut c = 0.0;
    for ((s, j), a) in states.iter().zip(jrd).zip(actions) {
        c += explore_stage(w, s, *j, *a, prev);
        prev = *a;
    }
    Ok(c)
}

/// Tracking cost of a predicted trajectory; `e_lat[t] == None` marks a failed
/// projection and makes the cost `+∞`. `jrd` is ignored outside `DeploySafe`.
pub fn deployment_cost(
    states: &[StateTriple],
    jrd: &[f64],
    e_lat: &[Option<f64>],
    actions: &[Action],
    prev_action: Action,
    spec: &CostSpec,
) -> Result<f64> {
    let n = states.len();
    crate::error::shape("deployment lateral errors", n, e_lat.len())?;
    crate::error::shape("deployment actions", n, actions.len())?;
    if spec.mode == CostMode::DeploySafe {
        crate::error::shape("deployment jrd", n, jrd.len())?;
    }
    let r = spec
        .reference
        .as_ref()
        .ok_or_else(|| Error::Config("deployment cost needs a reference".into()))?;
    let mut prev = prev_action;
    let mut c = 0.0;
    for t in 0..n {
        let j = jrd.get(t).copied().unwrap_or(0.0);
        c += deploy_stage(
            spec.mode,
            &spec.weights,
            r.track.half_width,
            r.v_target,
            &states[t],
            e_lat[t],
            j,
            actions[t],
            prev,
        );
        prev = actions[t];
    }
    Ok(c)
}

/// Predicted pose and projection hint of one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTracker {
    pub pose: Pose,
    pub hint: Option<usize>,
}

/// Midpoint integration of body-frame velocities over one step.
pub fn integrate_pose(pose: Pose, s: &StateTriple, next: &StateTriple, dt: f64) -> Pose {
    let vx = 0.5 * (s.vx + next.vx);
    let vy = 0.5 * (s.vy + next.vy);
    let r = 0.5 * (s.r + next.r);
    let mid = pose.yaw + 0.5 * r * dt;
    let (sin, cos) = (libm::sin(mid), libm::cos(mid));
    Pose {
        x: pose.x + (vx * cos - vy * sin) * dt,
        y: pose.y + (vx * sin + vy * cos) * dt,
        yaw: pose.yaw + r * dt,
    }
}

const PROJECTION_RADIUS: usize = 20;

impl Objective for CostSpec {
    type Tracker = PoseTracker;

    fn uses_jrd(&self) -> bool {
        matches!(self.mode, CostMode::Explore | CostMode::DeploySafe)
    }

    fn start(&self, ctx: &RolloutContext) -> PoseTracker {
        let hint = self
            .reference
            .as_ref()
            .and_then(|r| r.track.track_frame(&ctx.pose).ok())
            .map(|f| f.index);
        PoseTracker { pose: ctx.pose, hint }
    }

    fn stage_cost(&self, tracker: &mut PoseTracker, st: &Stage) -> f64 {
        let jrd = st.jrd.unwrap_or(0.0);
        match (&self.reference, self.mode) {
            (_, CostMode::Explore) => explore_stage(&self.weights, &st.next, jrd, st.action, st.prev_action),
            (None, _) => f64::INFINITY,
            (Some(r), mode) => {
                tracker.pose = integrate_pose(tracker.pose, &st.state, &st.next, st.dt);
                let frame = match tracker.hint {
                    Some(h) => r.track.track_frame_near(&tracker.pose, h, PROJECTION_RADIUS),
                    None => r.track.track_frame(&tracker.pose),
                };
                let e_lat = frame.ok().map(|f| {
                    tracker.hint = Some(f.index);
                    f.e_lat
                });
                deploy_stage(
                    mode,
                    &self.weights,
                    r.track.half_width,
                    r.v_target,
                    &st.next,
                    e_lat,
                    jrd,
                    st.action,
                    st.prev_action,
                )
            }
        }
    }
}

/// `w_k ∝ exp(−(S_k − min S)/λ)`; non-finite costs get weight 0.
pub fn mppi_weights(costs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {lambda}")));
    }
    let min = costs
        .iter()
        .copied()
        .filter(|c| c.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Control(format!("all {} rollouts are invalid", costs.len())));
    }
    let mut w: Vec<f64> = costs
        .iter()
        .map(|&c| if c.is_finite() { libm::exp(-(c - min) / lambda) } else { 0.0 })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    Ok(w)
}

/// `clamp(U + Σ w_k ε_k)` followed by optional smoothing.
///
/// `perturbations` is `K x T x 2`, sample-major; the sum runs in sample order.
pub fn mppi_update(
    nominal: &ControlSequence,
    perturbations: &[f64],
    weights: &[f64],
    smoothing: Smoothing,
) -> Result<ControlSequence> {
    let t = nominal.horizon();
    let per = t * ACTION_DIM;
    crate::error::shape("perturbations", weights.len() * per, perturbations.len())?;
    let mut acc = vec![0.0; per];
    for (w, eps) in weights.iter().zip(perturbations.chunks_exact(per)) {
        if *w == 0.0 {
            continue;
        }
        for (a, e) in acc.iter_mut().zip(eps) {
            *a += w * e;
        }
    }
    let mut out: Vec<[f64; ACTION_DIM]> = nominal
        .actions
        .iter()
        .zip(acc.chunks_exact(ACTION_DIM))
        .map(|(u, d)| [clamp_unit(u.steer + d[0]), clamp_unit(u.throttle + d[1])])
        .collect();
    if let Smoothing::MovingAverage(w) = smoothing {
        if w == 0 {
            return Err(Error::Config("moving average window must be at least 1".into()));
        }
        let before = w / 2;
        let after = w - 1 - before;
        let src = out.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(t - 1);
            let n = (hi - lo + 1) as f64;
            for c in 0..ACTION_DIM {
                o[c] = src[lo..=hi].iter().map(|v| v[c]).sum::<f64>() / n;
            }
        }
    }
    Ok(ControlSequence {
        actions: out.into_iter().map(|[s, th]| Action { steer: s, throttle: th }).collect(),
    })
}

/// How rollout particles pick ensemble members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    /// Sample `k` follows member `k mod B`.
    TrajectorySampling,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub best_cost: f64,
    /// Mean and max of per-step JRD over all valid rollouts.
    pub mean_jrd: Option<f64>,
    pub max_jrd: Option<f64>,
    pub n_invalid: usize,
    /// Every rollout was invalid and a zero action was emitted.
    pub all_invalid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub action: Action,
    pub diagnostics: StepDiagnostics,
}

/// Receding-horizon MPPI loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller<O> {
    pub cfg: MppiConfig,
    pub nominal: ControlSequence,
    pub objective: O,
    pub propagation: Propagation,
    steps: u64,
}

/// Evaluated samples of one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Clamped effective perturbations `clamp(U + ε) − U`, `K x T x 2`.
    pub perturbations: Vec<f64>,
    pub rollouts: Vec<RolloutResult>,
}

impl SampleSet {
    pub fn costs(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.cost).collect()
    }
}

impl<O: Objective> Controller<O> {
    pub fn new(cfg: MppiConfig, objective: O, propagation: Propagation) -> Result<Self> {
        cfg.validate()?;
        Ok(Controller {
            nominal: ControlSequence::zeros(cfg.horizon),
            cfg,
            objective,
            propagation,
            steps: 0,
        })
    }

    /// Number of completed control steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Seed of the perturbations drawn by the next call to [`Controller::step`].
    pub fn step_seed(&self) -> u64 {
        rng::derive(self.cfg.seed, TAG_STEP, self.steps)
    }

    /// Samples and rolls out `K` perturbed copies of the nominal sequence.
    pub fn evaluate<M: EnsembleDynamics>(&self, model: &M, ctx: &RolloutContext) -> Result<SampleSet> {
        let cfg = &self.cfg;
        let per = cfg.horizon * ACTION_DIM;
        let mut eps = sample_perturbations(cfg, self.step_seed())?;
        let mut seqs = Vec::with_capacity(cfg.samples);
        for chunk in eps.chunks_exact_mut(per) {
            let actions = self
                .nominal
                .actions
                .iter()
                .zip(chunk.chunks_exact_mut(ACTION_DIM))
                .map(|(u, e)| {
                    let a = Action::new(u.steer + e[0], u.throttle + e[1]);
                    e[0] = a.steer - u.steer;
                    e[1] = a.throttle - u.throttle;
                    a
                })
                .collect();
            seqs.push(ControlSequence { actions });
        }
        let b = model.ensemble_size().max(1);
        let assignments: Vec<MemberAssignment> = (0..cfg.samples)
            .map(|k| match self.propagation {
                Propagation::TrajectorySampling => MemberAssignment::Member(k % b),
                Propagation::Mean => MemberAssignment::Mean,
            })
            .collect();
        let chunk = if cfg.batch == 0 { cfg.samples } else { cfg.batch };
        let mut rollouts = Vec::with_capacity(cfg.samples);
        for (s, a) in seqs.chunks(chunk).zip(assignments.chunks(chunk)) {
            rollouts.extend(rollout_batch(model, ctx, s, a, &self.objective)?);
        }
        Ok(SampleSet {
            perturbations: eps,
            rollouts,
        })
    }

    /// One receding-horizon step: plan, emit the first action, shift.
    pub fn step<M: EnsembleDynamics>(&mut self, model: &M, ctx: &RolloutContext) -> Result<StepOutput> {
        let set = self.evaluate(model, ctx)?;
        let costs = set.costs();
        let n_invalid = set.rollouts.iter().filter(|r| !r.valid).count();
        let (mut sum, mut count, mut max) = (0.0, 0usize, f64::NEG_INFINITY);
        for j in set.rollouts.iter().filter(|r| r.valid).filter_map(|r| r.jrd.as_ref()) {
            for &v in j {
                sum += v;
                count += 1;
                max = max.max(v);
            }
        }
        let jrd_stats = (count > 0).then(|| (sum / count as f64, max));
        let best_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
        self.steps += 1;

        let (action, all_invalid) = match mppi_weights(&costs, self.cfg.lambda) {
            Ok(w) => {
                let updated = mppi_update(&self.nominal, &set.perturbations, &w, self.cfg.smoothing)?;
                let a = updated.actions[0];
                self.nominal = updated.shifted();
                (a, false)
            }
            Err(Error::Control(msg)) => {
                log::warn!("mppi step {}: {msg}; emitting zero action", self.steps - 1);
                self.nominal = self.nominal.shifted();
                (Action::default(), true)
            }
            Err(e) => return Err(e),
        };
        Ok(StepOutput {
            action,
            diagnostics: StepDiagnostics {
                best_cost,
                mean_jrd: jrd_stats.map(|s| s.0),
                max_jrd: jrd_stats.map(|s| s.1),
                n_invalid,
                all_invalid,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every member predicts the same fixed Gaussian Δ per row.
    struct Stub {
        h: usize,
        members: Vec<([f64; 3], [f64; 3])>,
    }

    impl EnsembleDynamics for Stub {
        fn history(&self) -> usize {
            self.h
        }
        fn ensemble_size(&self) -> usize {
            self.members.len()
        }
        fn has_variance(&self) -> bool {
            true
        }
        fn predict_rows(&self, m: usize, _raw: &[f64], n: usize, means: &mut [f64], vars: &mut [f64]) -> Result<()> {
            for i in 0..n {
                means[i * 3..i * 3 + 3].copy_from_slice(&self.members[m].0);
                vars[i * 3..i * 3 + 3].copy_from_slice(&self.members[m].1);
            }
            Ok(())
        }
    }

    fn zero_stub(b: usize) -> Stub {
        Stub {
            h: 2,
            members: vec![([0.0; 3], [1.0; 3]); b],
        }
    }

    fn ctx(h: usize) -> RolloutContext {
        RolloutContext::at_rest(StateTriple::new(3.0, 0.0, 0.0), Pose::default(), h, 0.1).unwrap()
    }

    fn circle_reference() -> Reference {
        use crate::sim::track::{build_track, TrackSpec};
        Reference {
            track: build_track(&TrackSpec::circle(15.0, 2.0)).unwrap(),
            v_target: 3.0,
        }
    }

    #[test]
    fn equal_costs_give_uniform_weights() {
        let w = mppi_weights(&[2.0; 4], 0.7).unwrap();
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_cost_weights() {
        let lambda = 0.5;
        let w = mppi_weights(&[0.0, lambda], lambda).unwrap();
        let e = libm::exp(-1.0);
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((w[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((w[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn invalid_costs_get_zero_weight() {
        let w = mppi_weights(&[1.0, f64::INFINITY, f64::NAN, 1.0], 1.0).unwrap();
        assert_eq!(w, vec![0.5, 0.0, 0.0, 0.5]);
        assert!(matches!(mppi_weights(&[f64::INFINITY; 3], 1.0), Err(Error::Control(_))));
    }

    #[test]
    fn zero_sigma_gives_zero_noise() {
        let cfg = MppiConfig {
            sigma: [0.0, 0.0],
            samples: 4,
            horizon: 3,
            ..Default::default()
        };
        assert!(sample_perturbations(&cfg, 1).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noise_has_requested_std() {
        let cfg = MppiConfig {
            samples: 10_000,
            horizon: 1,
            sigma: [0.3, 0.1],
            ..Default::default()
        };
        let eps = sample_perturbations(&cfg, 5).unwrap();
        for c in 0..2 {
            let v: Vec<f64> = eps.iter().skip(c).step_by(2).copied().collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = libm::sqrt(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64);
            assert!((sd / cfg.sigma[c] - 1.0).abs() < 0.03, "{sd}");
        }
    }

    #[test]
    fn single_sample_reproduces_its_slice() {
        let cfg = MppiConfig {
            samples: 8,
            horizon: 5,
            ..Default::default()
        };
        let all = sample_perturbations(&cfg, 77).unwrap();
        let mut one = vec![0.0; 10];
        sample_perturbation(&cfg, 77, 6, &mut one);
        assert_eq!(&all[60..70], &one[..]);
    }

    #[test]
    fn zero_delta_stub_keeps_state() {
        let spec = CostSpec::explore(CostWeights::default()).unwrap();
        let seq = ControlSequence::zeros(6);
        let r = rollout(&zero_stub(3), &ctx(2), &seq, &spec, MemberAssignment::Member(1)).unwrap();
        assert!(r.valid);
        assert_eq!(r.states.len(), 7);
        assert!(r.states.iter().all(|s| *s == StateTriple::new(3.0, 0.0, 0.0)));
        assert!(r.jrd.unwrap().iter().all(|j| *j == 0.0));
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn exploration_cost_values() {
        let w = CostWeights {
            w_ctrl: 0.0,
            ..Default::default()
        };
        let s = [StateTriple::new(3.0, 0.0, 0.0); 2];
        let a = [Action::default(); 2];
        assert_eq!(exploration_cost(&s, &[0.0, 0.0], &a, Action::default(), &w).unwrap(), 0.0);
        let c = exploration_cost(&s, &[0.38, 0.38], &a, Action::default(), &w).unwrap();
        assert!((c + 0.76).abs() < 1e-15);
        let c2 = exploration_cost(&s, &[0.76, 0.76], &a, Action::default(), &w).unwrap();
        assert!((c2 - 2.0 * c).abs() < 1e-15);
    }

    #[test]
    fn deployment_cost_values() {
        let zero = CostWeights {
            w_track: 2.0,
            w_speed: 0.0,
            w_ctrl: 0.0,
            ..Default::default()
        };
        let spec = CostSpec::deploy(CostMode::DeployDirect, zero, circle_reference()).unwrap();
        let s = [StateTriple::new(3.0, 0.0, 0.0); 5];
        let a = [Action::default(); 5];
        let c = deployment_cost(&s, &[], &[Some(1.0); 5], &a, Action::default(), &spec).unwrap();
        assert!((c - 10.0).abs() < 1e-12);

        let spec = CostSpec::deploy(CostMode::DeployDirect, CostWeights::default(), circle_reference()).unwrap();
        let on = deployment_cost(&s, &[0.0; 5], &[Some(0.0); 5], &a, Action::default(), &spec).unwrap();
        assert_eq!(on, 0.0);
        let noisy = deployment_cost(&s, &[10.0; 5], &[Some(0.0); 5], &a, Action::default(), &spec).unwrap();
        assert_eq!(noisy, 0.0);
        let off = deployment_cost(&s, &[0.0; 5], &[Some(0.0), None, Some(0.0), Some(0.0), Some(0.0)], &a, Action::default(), &spec).unwrap();
        assert_eq!(off, f64::INFINITY);
    }

    #[test]
    fn safe_mode_penalizes_each_violating_step_once() {
        let w = CostWeights {
            w_track: 0.0,
            w_speed: 0.0,
            w_ctrl: 0.0,
            w_unc: 1e-9,
            jrd_threshold: 0.1,
            penalty_big: 1000.0,
            ..Default::default()
        };
        let spec = CostSpec::deploy(CostMode::DeploySafe, w, circle_reference()).unwrap();
        // members N(0, 1) and N(2, 1) on vx only; the other dimensions agree
        let stub = Stub {
            h: 1,
            members: vec![([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]), ([2.0, 0.0, 0.0], [1.0, 1.0, 1.0])],
        };
        let mut c = ctx(1);
        c.window = HistoryWindow::filled(StateTriple::new(0.0, 0.0, 0.0), Action::default(), 1, 0.1).unwrap();
        let r = rollout(&stub, &c, &ControlSequence::zeros(3), &spec, MemberAssignment::Member(0)).unwrap();
        let jrd = r.jrd.unwrap();
        assert!(jrd.iter().all(|j| (j - 0.3798855).abs() < 1e-6));
        let expected = 3.0 * 1000.0 + 1e-9 * jrd.iter().sum::<f64>();
        assert!((r.cost - expected).abs() < 1e-9, "{}", r.cost);
    }

    #[test]
    fn update_examples() {
        let nominal = ControlSequence::new(vec![Action::new(0.5, -0.5), Action::new(0.9, 0.0)]).unwrap();
        let zero = vec![0.0; 3 * 4];
        let w = vec![1.0 / 3.0; 3];
        assert_eq!(mppi_update(&nominal, &zero, &w, Smoothing::None).unwrap(), nominal);

        let mut eps = zero.clone();
        eps[4..8].copy_from_slice(&[0.1, 0.2, 0.3, -0.4]);
        let u = mppi_update(&nominal, &eps, &[0.0, 1.0, 0.0], Smoothing::None).unwrap();
        assert!((u.actions[0].steer - 0.6).abs() < 1e-15);
        assert!((u.actions[0].throttle + 0.3).abs() < 1e-15);
        assert_eq!(u.actions[1].steer, 1.0);
        assert!((u.actions[1].throttle + 0.4).abs() < 1e-15);
    }

    #[test]
    fn moving_average_smooths_interior() {
        let nominal = ControlSequence::new(vec![
            Action::new(0.0, 0.0),
            Action::new(0.9, 0.0),
            Action::new(0.0, 0.0),
        ])
        .unwrap();
        let u = mppi_update(&nominal, &[0.0; 6], &[1.0], Smoothing::MovingAverage(3)).unwrap();
        assert!((u.actions[0].steer - 0.45).abs() < 1e-15);
        assert!((u.actions[1].steer - 0.3).abs() < 1e-15);
        assert!((u.actions[2].steer - 0.45).abs() < 1e-15);
    }

    #[test]
    fn controller_is_deterministic() {
        let cfg = MppiConfig {
            samples: 32,
            horizon: 5,
            ..Default::default()
        };
        let spec = CostSpec::deploy(CostMode::DeployDirect, CostWeights::default(), circle_reference()).unwrap();
        let stub = zero_stub(2);
        let run = || {
            let mut c = Controller::new(cfg.clone(), spec.clone(), Propagation::TrajectorySampling).unwrap();
            (0..4).map(|_| c.step(&stub, &ctx(2)).unwrap().action).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shift_repeats_last() {
        let s = ControlSequence::new(vec![Action::new(0.1, 0.0), Action::new(0.2, 0.0)]).unwrap();
        assert_eq!(s.shifted().actions, vec![Action::new(0.2, 0.0); 2]);
    }
}
