//! Probabilistic ensemble dynamics model.
//!
//! Each member is an [`Mlp`] mapping a z-scored history window to a
//! normalized Δ-state head. In probabilistic mode the head carries 3 means
//! followed by 3 raw variance logits, bounded through a sigmoid into
//! `[var_min, var_max]`; in deterministic mode it carries only the 3 means.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::dataset::{compute_norm_stats, Sample};
use crate::error::{shape, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, Mlp};
use crate::rng;
use crate::state::{HistoryWindow, StateTriple, PAIR_DIM, STATE_DIM};

const MEMBER_TAG: u64 = 0x6d65_6d62;
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelMode {
    Probabilistic,
    Deterministic,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Probabilistic => "probabilistic",
            ModelMode::Deterministic => "deterministic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "probabilistic" => Some(ModelMode::Probabilistic),
            "deterministic" => Some(ModelMode::Deterministic),
            _ => None,
        }
    }

    pub fn head_dim(self) -> usize {
        match self {
            ModelMode::Probabilistic => 2 * STATE_DIM,
            ModelMode::Deterministic => STATE_DIM,
        }
    }
}

/// Per-coordinate z-score statistics, raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: [f64; STATE_DIM],
    pub target_std: [f64; STATE_DIM],
}

impl NormStats {
    pub fn identity(history: usize) -> Self {
        NormStats {
            input_mean: vec![0.0; history * PAIR_DIM],
            input_std: vec![1.0; history * PAIR_DIM],
            target_mean: [0.0; STATE_DIM],
            target_std: [1.0; STATE_DIM],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    fn validate(&self) -> Result<()> {
        shape("input std", self.input_mean.len(), self.input_std.len())?;
        let ok = |m: &f64| m.is_finite();
        let pos = |s: &f64| *s > 0.0 && s.is_finite();
        if !(self.input_mean.iter().all(ok)
            && self.target_mean.iter().all(ok)
            && self.input_std.iter().all(pos)
            && self.target_std.iter().all(pos))
        {
            return Err(Error::Model("normalization statistics must be finite with positive std".into()));
        }
        Ok(())
    }

    /// In-place z-scoring of a batch of raw feature rows.
    pub fn normalize_inputs(&self, rows: &mut [f64]) {
        let d = self.input_dim();
        for row in rows.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.input_mean).zip(&self.input_std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Sigmoid-bounded variance range in normalized target space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for VarianceBounds {
    fn default() -> Self {
        VarianceBounds { min: 1e-6, max: 10.0 }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl VarianceBounds {
    /// `var_min` at `raw = -∞`, `var_max` at `raw = +∞`.
    #[inline]
    pub fn bound(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        (self.min * (1.0 - s) + self.max * s).clamp(self.min, self.max)
    }

    /// d(bound)/d(raw).
    #[inline]
    fn slope(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        (self.max - self.min) * s * (1.0 - s)
    }
}

/// Diagonal Gaussian over a 3-vector, raw units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrediction {
    pub mean: [f64; STATE_DIM],
    pub var: [f64; STATE_DIM],
}

/// Next-state Gaussians, one per member, in member-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub members: Vec<GaussianPrediction>,
}

impl EnsemblePrediction {
    /// Flattened `(means, vars)` for [`crate::jrd::jrd_flat`].
    pub fn flatten(&self) -> (Vec<f64>, Vec<f64>) {
        let means = self.members.iter().flat_map(|g| g.mean).collect();
        let vars = self.members.iter().flat_map(|g| g.var).collect();
        (means, vars)
    }

    pub fn jrd(&self) -> Result<f64> {
        let (m, v) = self.flatten();
        crate::jrd::jrd_flat(&m, &v, STATE_DIM)
    }

    /// Equal-weight average of member means.
    pub fn mean(&self) -> [f64; STATE_DIM] {
        let mut acc = [0.0; STATE_DIM];
        for g in &self.members {
            for (a, m) in acc.iter_mut().zip(g.mean) {
                *a += m;
            }
        }
        acc.map(|a| a / self.members.len() as f64)
    }
}

/// Architecture and output convention of a [`PennModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct PennConfig {
    pub history: usize,
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mode: ModelMode,
    pub var_bounds: VarianceBounds,
    pub dt: f64,
}

impl Default for PennConfig {
    fn default() -> Self {
        PennConfig {
            history: 4,
            ensemble_size: 5,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            mode: ModelMode::Probabilistic,
            var_bounds: VarianceBounds::default(),
            dt: 0.1,
        }
    }
}

impl PennConfig {
    pub fn input_dim(&self) -> usize {
        self.history * PAIR_DIM
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.mode.head_dim());
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::Config("history length must be at least 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        let vb = self.var_bounds;
        if !(vb.min > 0.0 && vb.max > vb.min && vb.max.is_finite()) {
            return Err(Error::Config(format!(
                "variance bounds must satisfy 0 < min < max, got [{}, {}]",
                vb.min, vb.max
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(())
    }
}

/// Ensemble of Gaussian-output networks plus the normalization they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct PennModel {
    config: PennConfig,
    members: Vec<Mlp>,
    norm: NormStats,
}

impl PennModel {
    /// Freshly initialized members; member `i` uses a seed derived from `(seed, i)`.
    pub fn new(config: PennConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let members = (0..config.ensemble_size)
            .map(|i| {
                Mlp::new(
                    &config.layer_sizes(),
                    config.activation,
                    rng::derive(seed, MEMBER_TAG, i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        PennModel::from_parts(config, members, norm)
    }

    /// Assemble from trained members, checking every shape against `config`.
    pub fn from_parts(config: PennConfig, members: Vec<Mlp>, norm: NormStats) -> Result<Self> {
        config.validate()?;
        shape("ensemble size", config.ensemble_size, members.len())?;
        shape("normalization width", config.input_dim(), norm.input_dim())?;
        norm.validate()?;
        let sizes = config.layer_sizes();
        for m in &members {
            if m.layer_sizes() != sizes {
                return Err(Error::Model(format!(
                    "member layer sizes {:?} differ from {:?}",
                    m.layer_sizes(),
                    sizes
                )));
            }
            if m.activation() != config.activation {
                return Err(Error::Model("member activation differs from config".into()));
            }
        }
        Ok(PennModel {
            config,
            members,
            norm,
        })
    }

    pub fn config(&self) -> &PennConfig {
        &self.config
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn history(&self) -> usize {
        self.config.history
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    /// Flattened, z-scored features for one window (oldest pair first).
    pub fn build_input(&self, window: &HistoryWindow) -> Result<Vec<f64>> {
        build_input(window, &self.norm)
    }

    /// Converts one normalized head row to a raw-unit Δ-state Gaussian.
    pub fn head_to_prediction(&self, head: &[f64]) -> Result<GaussianPrediction> {
        shape("model head", self.config.mode.head_dim(), head.len())?;
        if head.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("network produced a non-finite output".into()));
        }
        let mut mean = [0.0; STATE_DIM];
        let mut var = [0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            let std = self.norm.target_std[d];
            mean[d] = head[d] * std + self.norm.target_mean[d];
            let v = match self.config.mode {
                ModelMode::Probabilistic => self.config.var_bounds.bound(head[STATE_DIM + d]),
                ModelMode::Deterministic => self.config.var_bounds.min,
            };
            var[d] = v * std * std;
        }
        Ok(GaussianPrediction { mean, var })
    }

    /// Δ-state Gaussian of one member from already normalized features.
    pub fn predict_member(&self, member: usize, features: &[f64]) -> Result<GaussianPrediction> {
        let net = self.member(member)?;
        shape("features", self.config.input_dim(), features.len())?;
        let head = net.predict(features, 1)?;
        self.head_to_prediction(&head)
    }

    fn member(&self, member: usize) -> Result<&Mlp> {
        self.members.get(member).ok_or(Error::Shape {
            what: "member index",
            expected: self.members.len(),
            actual: member,
        })
    }

    fn require_probabilistic(&self) -> Result<()> {
        match self.config.mode {
            ModelMode::Probabilistic => Ok(()),
            ModelMode::Deterministic => Err(Error::Model(
                "deterministic model carries no predictive variance; uncertainty queries need a probabilistic ensemble".into(),
            )),
        }
    }

    /// Next-state Gaussians `N(state + Δμ, Δσ²)` for every member.
    pub fn predict_ensemble(&self, window: &HistoryWindow) -> Result<EnsemblePrediction> {
        self.require_probabilistic()?;
        let features = self.build_input(window)?;
        let current = window.last_state().to_array();
        let members = (0..self.members.len())
            .map(|m| {
                let mut g = self.predict_member(m, &features)?;
                for (mu, c) in g.mean.iter_mut().zip(current) {
                    *mu += c;
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsemblePrediction { members })
    }

    /// Ensemble-mean next state (works in both modes).
    pub fn predict_mean_next(&self, window: &HistoryWindow) -> Result<StateTriple> {
        let features = self.build_input(window)?;
        let mut acc = [0.0; STATE_DIM];
        for m in 0..self.members.len() {
            let g = self.predict_member(m, &features)?;
            for (a, v) in acc.iter_mut().zip(g.mean) {
                *a += v;
            }
        }
        let b = self.members.len() as f64;
        Ok(window.last_state().add(acc.map(|a| a / b)))
    }

    /// Raw-unit Δ-state means and variances for `n` raw feature rows.
    ///
    /// A row whose network output is not finite is filled with NaN instead of
    /// failing the whole batch.
    pub fn predict_deltas(
        &self,
        member: usize,
        raw_features: &[f64],
        n: usize,
        means: &mut [f64],
        vars: &mut [f64],
    ) -> Result<()> {
        let net = self.member(member)?;
        shape("raw features", n * self.config.input_dim(), raw_features.len())?;
        shape("mean buffer", n * STATE_DIM, means.len())?;
        shape("variance buffer", n * STATE_DIM, vars.len())?;
        let mut x = raw_features.to_vec();
        self.norm.normalize_inputs(&mut x);
        let head = net.predict(&x, n)?;
        let hd = self.config.mode.head_dim();
        for i in 0..n {
            let (m, v) = (&mut means[i * STATE_DIM..(i + 1) * STATE_DIM], &mut vars[i * STATE_DIM..(i + 1) * STATE_DIM]);
            match self.head_to_prediction(&head[i * hd..(i + 1) * hd]) {
                Ok(g) => {
                    m.copy_from_slice(&g.mean);
                    v.copy_from_slice(&g.var);
                }
                Err(_) => {
                    m.fill(f64::NAN);
                    v.fill(f64::NAN);
                }
            }
        }
        Ok(())
    }

    /// Returns the same model with members reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let members = order
            .iter()
            .map(|&i| self.member(i).cloned())
            .collect::<Result<Vec<_>>>()?;
        PennModel::from_parts(self.config.clone(), members, self.norm.clone())
    }
}

/// Flattened (oldest first) z-scored features of a window.
pub fn build_input(window: &HistoryWindow, stats: &NormStats) -> Result<Vec<f64>> {
    shape("history length", stats.input_dim() / PAIR_DIM, window.len())?;
    let mut v = window.raw_features();
    stats.normalize_inputs(&mut v);
    Ok(v)
}

/// Gaussian negative log-likelihood `½ Σ [(δ−μ)²/σ² + ln σ² + ln 2π]`.
pub fn gaussian_nll(mean: &[f64], var: &[f64], target: &[f64]) -> Result<f64> {
    shape("nll variance", mean.len(), var.len())?;
    shape("nll target", mean.len(), target.len())?;
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Numeric(format!("variance {v} is not positive")));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(var)
            .zip(target)
            .map(|((m, v), t)| (t - m) * (t - m) / v + libm::log(*v) + libm::log(2.0 * PI))
            .sum::<f64>())
}

/// NLL of one probabilistic head row against a normalized target, with the
/// gradient with respect to all six head outputs.
pub fn nll_loss(head: &[f64], target: &[f64], bounds: VarianceBounds) -> Result<(f64, [f64; 2 * STATE_DIM])> {
    shape("nll head", 2 * STATE_DIM, head.len())?;
    shape("nll target", STATE_DIM, target.len())?;
    let mut grad = [0.0; 2 * STATE_DIM];
    let mut loss = 0.0;
    for d in 0..STATE_DIM {
        let mu = head[d];
        let raw = head[STATE_DIM + d];
        let var = bounds.bound(raw);
        if !(var > 0.0) {
            return Err(Error::Numeric(format!("bounded variance {var} is not positive")));
        }
        let err = target[d] - mu;
        loss += 0.5 * (err * err / var + libm::log(var) + libm::log(2.0 * PI));
        grad[d] = -err / var;
        let dvar = 0.5 * (1.0 / var - err * err / (var * var));
        grad[STATE_DIM + d] = dvar * bounds.slope(raw);
    }
    Ok((loss, grad))
}

/// Mean squared error over the three targets, with gradient.
pub fn l2_loss(pred: &[f64], target: &[f64]) -> Result<(f64, [f64; STATE_DIM])> {
    shape("l2 prediction", STATE_DIM, pred.len())?;
    shape("l2 target", STATE_DIM, target.len())?;
    let mut grad = [0.0; STATE_DIM];
    let mut loss = 0.0;
    for d in 0..STATE_DIM {
        let e = pred[d] - target[d];
        loss += e * e / STATE_DIM as f64;
        grad[d] = 2.0 * e / STATE_DIM as f64;
    }
    Ok((loss, grad))
}

/// Per-dimension and pooled RMSE of one-step predictions, raw units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub rmse_vx: f64,
    pub rmse_vy: f64,
    pub rmse_r: f64,
    pub rmse_total: f64,
    pub n_samples: usize,
}

impl EvalReport {
    /// Pooled total from per-dimension RMSEs: `sqrt(mean of squares)`.
    pub fn pooled(rmse_vx: f64, rmse_vy: f64, rmse_r: f64, n_samples: usize) -> Self {
        let total = libm::sqrt((rmse_vx * rmse_vx + rmse_vy * rmse_vy + rmse_r * rmse_r) / 3.0);
        EvalReport {
            rmse_vx,
            rmse_vy,
            rmse_r,
            rmse_total: total,
            n_samples,
        }
    }

    fn from_sums(sq: [f64; STATE_DIM], n: usize) -> Self {
        let nf = n as f64;
        let mut r = EvalReport::pooled(
            libm::sqrt(sq[0] / nf),
            libm::sqrt(sq[1] / nf),
            libm::sqrt(sq[2] / nf),
            n,
        );
        r.rmse_total = libm::sqrt((sq[0] + sq[1] + sq[2]) / (3.0 * nf));
        r
    }
}

/// RMSE of the ensemble-mean next state against ground truth.
pub fn evaluate_rmse(model: &PennModel, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let d = model.config.input_dim();
    let b = model.members.len() as f64;
    let mut sq = [0.0; STATE_DIM];
    for chunk in samples.chunks(EVAL_CHUNK) {
        let n = chunk.len();
        let mut raw = vec![0.0; n * d];
        for (row, s) in raw.chunks_exact_mut(d).zip(chunk) {
            shape("sample history", model.config.history, s.window.len())?;
            s.window.write_raw(row)?;
        }
        let mut mean_acc = vec![0.0; n * STATE_DIM];
        let mut means = vec![0.0; n * STATE_DIM];
        let mut vars = vec![0.0; n * STATE_DIM];
        for m in 0..model.members.len() {
            model.predict_deltas(m, &raw, n, &mut means, &mut vars)?;
            for (a, v) in mean_acc.iter_mut().zip(&means) {
                *a += v;
            }
        }
        for (pred, s) in mean_acc.chunks_exact(STATE_DIM).zip(chunk) {
            for k in 0..STATE_DIM {
                let e = pred[k] / b - s.target[k];
                sq[k] += e * e;
            }
        }
    }
    Ok(EvalReport::from_sums(sq, samples.len()))
}

/// RMSE of the "next state equals current state" predictor.
pub fn zero_delta_report(samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut sq = [0.0; STATE_DIM];
    for s in samples {
        for k in 0..STATE_DIM {
            sq[k] += s.target[k] * s.target[k];
        }
    }
    Ok(EvalReport::from_sums(sq, samples.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss across members (NLL or L2 depending on mode).
    pub train_loss: f64,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Snapshot with the lowest pooled test RMSE.
    pub best: PennModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_report(&self) -> EvalReport {
        self.history[self.best_epoch].test
    }
}

struct MemberTrainer {
    net: Mlp,
    adam: Adam,
    indices: Vec<usize>,
    rng: rng::Rng,
}

/// Trains an ensemble from scratch.
///
/// Normalization statistics come from `train` only. Each member draws its own
/// initialization and, when the model is probabilistic with more than one
/// member, its own bootstrap resample of the training set.
pub fn train(config: &PennConfig, train: &[Sample], test: &[Sample], tc: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset(format!(
            "training needs non-empty train and test sets (got {} / {})",
            train.len(),
            test.len()
        )));
    }
    if tc.epochs == 0 || tc.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let norm = compute_norm_stats(train)?;
    let d = config.input_dim();
    let n = train.len();
    let mut x = vec![0.0; n * d];
    let mut y = vec![0.0; n * STATE_DIM];
    for (i, s) in train.iter().enumerate() {
        shape("sample history", config.history, s.window.len())?;
        s.window.write_raw(&mut x[i * d..(i + 1) * d])?;
        for k in 0..STATE_DIM {
            y[i * STATE_DIM + k] = (s.target[k] - norm.target_mean[k]) / norm.target_std[k];
        }
    }
    norm.normalize_inputs(&mut x);

    let mut model = PennModel::new(config.clone(), norm, tc.seed)?;
    let bootstrap = config.mode == ModelMode::Probabilistic && config.ensemble_size > 1;
    let mut trainers: Vec<MemberTrainer> = model
        .members
        .iter()
        .enumerate()
        .map(|(i, net)| {
            let mut rng = rng::rng(rng::derive(tc.seed, MEMBER_TAG ^ 0xb007, i as u64));
            let indices = if bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            MemberTrainer {
                net: net.clone(),
                adam: Adam::new(net, tc.adam),
                indices,
                rng,
            }
        })
        .collect();

    let hd = config.mode.head_dim();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, PennModel)> = None;
    let mut xb = Vec::with_capacity(tc.batch_size * d);
    let mut yb = Vec::with_capacity(tc.batch_size * STATE_DIM);
    let mut head_grad = Vec::with_capacity(tc.batch_size * hd);

    for epoch in 0..tc.epochs {
        let mut loss_sum = 0.0;
        for (mi, t) in trainers.iter_mut().enumerate() {
            t.indices.shuffle(&mut t.rng);
            let mut member_loss = 0.0;
            let mut batches = 0usize;
            for idx in t.indices.chunks(tc.batch_size) {
                let bs = idx.len();
                xb.clear();
                yb.clear();
                for &i in idx {
                    xb.extend_from_slice(&x[i * d..(i + 1) * d]);
                    yb.extend_from_slice(&y[i * STATE_DIM..(i + 1) * STATE_DIM]);
                }
                let cache = t.net.forward(&xb, bs)?;
                let out = cache.output();
                head_grad.clear();
                let mut batch_loss = 0.0;
                let scale = 1.0 / bs as f64;
                for (row, target) in out.chunks_exact(hd).zip(yb.chunks_exact(STATE_DIM)) {
                    match config.mode {
                        ModelMode::Probabilistic => {
                            let (l, g) = nll_loss(row, target, config.var_bounds)?;
                            batch_loss += l;
                            head_grad.extend(g.iter().map(|v| v * scale));
                        }
                        ModelMode::Deterministic => {
                            let (l, g) = l2_loss(row, target)?;
                            batch_loss += l;
                            head_grad.extend(g.iter().map(|v| v * scale));
                        }
                    }
                }
                batch_loss *= scale;
                if !batch_loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, member {mi}"
                    )));
                }
                let (grads, _) = t.net.backward(&cache, &head_grad)?;
                t.adam.step(&mut t.net, &grads).map_err(|e| match e {
                    Error::Training(msg) => Error::Training(format!("{msg} at epoch {epoch}, member {mi}")),
                    other => other,
                })?;
                member_loss += batch_loss;
                batches += 1;
            }
            loss_sum += member_loss / batches as f64;
        }
        for (slot, t) in model.members.iter_mut().zip(&trainers) {
            slot.clone_from(&t.net);
        }
        let report = evaluate_rmse(&model, test)?;
        let improved = best
            .as_ref()
            .map_or(true, |(e, _)| report.rmse_total < history_total(&history, *e));
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / trainers.len() as f64,
            test: report,
        });
        if improved {
            best = Some((epoch, model.clone()));
        }
    }
    let (best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

fn history_total(history: &[EpochRecord], epoch: usize) -> f64 {
    history[epoch].test.rmse_total
}

/// Mean per-sample training loss of every member on `samples`, under the
/// model's own normalization.
pub fn mean_loss(model: &PennModel, samples: &[Sample]) -> Result<f64> {
    let d = model.config.input_dim();
    let hd = model.config.mode.head_dim();
    let n = samples.len();
    let mut x = vec![0.0; n * d];
    for (row, s) in x.chunks_exact_mut(d).zip(samples) {
        s.window.write_raw(row)?;
    }
    model.norm.normalize_inputs(&mut x);
    let mut total = 0.0;
    for net in &model.members {
        let out = net.predict(&x, n)?;
        for (row, s) in out.chunks_exact(hd).zip(samples) {
            let mut t = [0.0; STATE_DIM];
            for k in 0..STATE_DIM {
                t[k] = (s.target[k] - model.norm.target_mean[k]) / model.norm.target_std[k];
            }
            total += match model.config.mode {
                ModelMode::Probabilistic => nll_loss(row, &t, model.config.var_bounds)?.0,
                ModelMode::Deterministic => l2_loss(row, &t)?.0,
            };
        }
    }
    Ok(total / (n * model.members.len()) as f64)
}

/// Summed NLL and its full-network gradient for one member on a normalized batch.
pub fn member_nll_gradients(
    net: &Mlp,
    features: &[f64],
    targets: &[f64],
    batch: usize,
    bounds: VarianceBounds,
) -> Result<(f64, Gradients)> {
    let cache = net.forward(features, batch)?;
    let mut head_grad = Vec::with_capacity(batch * 2 * STATE_DIM);
    let mut loss = 0.0;
    for (row, t) in cache.output().chunks_exact(2 * STATE_DIM).zip(targets.chunks_exact(STATE_DIM)) {
        let (l, g) = nll_loss(row, t, bounds)?;
        loss += l;
        head_grad.extend_from_slice(&g);
    }
    let (grads, _) = net.backward(&cache, &head_grad)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Action;

    fn window(h: usize) -> HistoryWindow {
        let pairs = (0..h)
            .map(|i| {
                let f = i as f64;
                (StateTriple::new(3.0 + f, 0.1 * f, -0.05 * f), Action::new(0.1 * f, 0.5))
            })
            .collect();
        HistoryWindow::new(pairs, 0.1).unwrap()
    }

    fn small_config(mode: ModelMode) -> PennConfig {
        PennConfig {
            history: 2,
            ensemble_size: 3,
            hidden: vec![8],
            mode,
            ..PennConfig::default()
        }
    }

    #[test]
    fn identity_normalization_is_raw_flatten() {
        let w = window(4);
        let f = build_input(&w, &NormStats::identity(4)).unwrap();
        assert_eq!(f, w.raw_features());
        assert_eq!(f.len(), 20);
    }

    #[test]
    fn floored_constant_feature_maps_to_zero() {
        let mut stats = NormStats::identity(1);
        stats.input_mean[0] = 3.0;
        stats.input_std[0] = 1e-6;
        let w = window(1);
        assert_eq!(build_input(&w, &stats).unwrap()[0], 0.0);
    }

    #[test]
    fn build_input_rejects_wrong_history() {
        assert!(matches!(
            build_input(&window(3), &NormStats::identity(4)),
            Err(Error::Shape { .. })
        ));
    }

    fn model_with_head(bias: [f64; 6], target_std: f64) -> PennModel {
        let config = PennConfig {
            history: 1,
            ensemble_size: 1,
            hidden: vec![2],
            ..PennConfig::default()
        };
        let mut norm = NormStats::identity(1);
        norm.target_std = [target_std; 3];
        let mut m = PennModel::new(config, norm, 0).unwrap();
        let last = m.members[0].layers_mut().last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.biases = bias.to_vec();
        m
    }

    #[test]
    fn variance_clamps_at_bounds() {
        let vb = VarianceBounds::default();
        let m = model_with_head([0.0, 0.0, 0.0, f64::MIN, -1e308, -800.0], 1.0);
        let g = m.predict_member(0, &[0.0; 5]).unwrap();
        assert_eq!(g.var, [vb.min; 3]);
        let m = model_with_head([0.0, 0.0, 0.0, f64::MAX, 1e308, 800.0], 1.0);
        let g = m.predict_member(0, &[0.0; 5]).unwrap();
        assert_eq!(g.var, [vb.max; 3]);
    }

    #[test]
    fn mean_is_denormalized() {
        let m = model_with_head([1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 2.0);
        let g = m.predict_member(0, &[0.0; 5]).unwrap();
        assert_eq!(g.mean, [2.0; 3]);
    }

    #[test]
    fn non_finite_head_is_a_model_error() {
        let m = model_with_head([0.0; 6], 1.0);
        assert!(matches!(m.head_to_prediction(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]), Err(Error::Model(_))));
    }

    #[test]
    fn ensemble_adds_increment_to_current_state() {
        let m = model_with_head([0.25, 0.0, 0.0, 0.0, 0.0, 0.0], 2.0);
        let w = HistoryWindow::new(vec![(StateTriple::new(1.0, 0.0, 0.0), Action::default())], 0.1).unwrap();
        let p = m.predict_ensemble(&w).unwrap();
        assert_eq!(p.members[0].mean, [1.5, 0.0, 0.0]);
    }

    #[test]
    fn identical_members_identical_predictions() {
        let base = PennModel::new(small_config(ModelMode::Probabilistic), NormStats::identity(2), 4).unwrap();
        let one = base.members[0].clone();
        let m = PennModel::from_parts(base.config.clone(), vec![one.clone(), one.clone(), one], base.norm.clone()).unwrap();
        let p = m.predict_ensemble(&window(2)).unwrap();
        assert!(p.members.windows(2).all(|w| w[0] == w[1]));
        assert!(p.jrd().unwrap().abs() < 1e-12);
    }

    #[test]
    fn deterministic_refuses_uncertainty() {
        let m = PennModel::new(small_config(ModelMode::Deterministic), NormStats::identity(2), 4).unwrap();
        assert!(matches!(m.predict_ensemble(&window(2)), Err(Error::Model(_))));
        assert!(m.predict_mean_next(&window(2)).is_ok());
        let g = m.predict_member(0, &[0.0; 10]).unwrap();
        assert_eq!(g.var, [m.config.var_bounds.min; 3]);
    }

    #[test]
    fn nll_closed_forms() {
        let v = gaussian_nll(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((v - 0.918939).abs() < 1e-6);
        let v = gaussian_nll(&[0.0], &[1.0], &[1.0]).unwrap();
        assert!((v - 1.418939).abs() < 1e-6);
        assert!(matches!(gaussian_nll(&[0.0], &[0.0], &[1.0]), Err(Error::Numeric(_))));
        let (_, g) = nll_loss(&[0.3, -0.2, 0.1, 0.0, 0.0, 0.0], &[0.3, -0.2, 0.1], VarianceBounds::default()).unwrap();
        assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn nll_loss_matches_gaussian_nll() {
        let vb = VarianceBounds::default();
        let head = [0.1, 0.2, -0.3, 0.5, -1.0, 2.0];
        let target = [0.0, 0.5, 0.1];
        let (l, _) = nll_loss(&head, &target, vb).unwrap();
        let var: Vec<f64> = head[3..].iter().map(|&r| vb.bound(r)).collect();
        let expected = gaussian_nll(&head[..3], &var, &target).unwrap();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn l2_values() {
        assert_eq!(l2_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().0, 0.0);
        let (l, g) = l2_loss(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g, [2.0 / 3.0, 0.0, 0.0]);
    }

    #[test]
    fn pooled_total_examples() {
        let r = EvalReport::pooled(0.0990, 0.0651, 0.0707, 1);
        assert!((r.rmse_total - 0.0797).abs() < 1e-4);
        let r = EvalReport::pooled(0.0548, 0.0373, 0.0319, 1);
        assert!((r.rmse_total - 0.0425).abs() < 1e-4);
    }
}
