use penn_mpc_core::error::Result;
use penn_mpc_core::mppi::{
    mppi_update, mppi_weights, ControlSequence, Controller, CostSpec, CostWeights, EnsembleDynamics, MppiConfig, Objective,
    Propagation, RolloutContext, Smoothing, Stage,
};
use penn_mpc_core::nn::Activation;
use penn_mpc_core::penn::{NormStats, PennConfig, PennModel};
use penn_mpc_core::sim::Pose;
use penn_mpc_core::{Action, StateTriple};
use proptest::prelude::*;

/// Every member predicts a zero Δ with unit variance.
struct Still {
    members: usize,
}

impl EnsembleDynamics for Still {
    fn history(&self) -> usize {
        1
    }
    fn ensemble_size(&self) -> usize {
        self.members
    }
    fn has_variance(&self) -> bool {
        true
    }
    fn predict_rows(&self, _m: usize, _raw: &[f64], _n: usize, means: &mut [f64], vars: &mut [f64]) -> Result<()> {
        means.fill(0.0);
        vars.fill(1.0);
        Ok(())
    }
}

/// Stage cost `‖u − u*‖²`.
#[derive(Clone, Copy)]
struct Quadratic {
    target: [f64; 2],
}

impl Objective for Quadratic {
    type Tracker = ();

    fn uses_jrd(&self) -> bool {
        false
    }
    fn start(&self, _ctx: &RolloutContext) {}
    fn stage_cost(&self, _tracker: &mut (), st: &Stage) -> f64 {
        (st.action.steer - self.target[0]).powi(2) + (st.action.throttle - self.target[1]).powi(2)
    }
}

fn ctx() -> RolloutContext {
    RolloutContext::at_rest(StateTriple::new(2.0, 0.0, 0.0), Pose::default(), 1, 0.1).unwrap()
}

fn distinct_costs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(0u32..5000, 2..40).prop_map(|s| s.into_iter().map(|v| v as f64 * 0.01).collect())
}

proptest! {
    #[test]
    fn weights_are_a_distribution(costs in distinct_costs(), lambda in 0.5..10.0f64) {
        let w = mppi_weights(&costs, lambda).unwrap();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weights_ignore_cost_offsets(costs in distinct_costs(), lambda in 0.5..10.0f64, c in -100.0..100.0f64) {
        let w = mppi_weights(&costs, lambda).unwrap();
        let shifted: Vec<f64> = costs.iter().map(|v| v + c).collect();
        let v = mppi_weights(&shifted, lambda).unwrap();
        for (a, b) in w.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn lower_cost_means_higher_weight(costs in distinct_costs(), lambda in 0.5..10.0f64) {
        let w = mppi_weights(&costs, lambda).unwrap();
        for i in 0..costs.len() {
            for j in 0..costs.len() {
                if costs[i] < costs[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn update_stays_in_the_unit_box(
        nominal in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..8),
        scale in 0.0..5.0f64,
        seed in any::<u64>(),
    ) {
        let t = nominal.len();
        let seq = ControlSequence::new(nominal.iter().map(|&(s, th)| Action::new(s, th)).collect()).unwrap();
        let cfg = MppiConfig { samples: 6, horizon: t, sigma: [scale, scale], ..MppiConfig::default() };
        let eps = penn_mpc_core::mppi::sample_perturbations(&cfg, seed).unwrap();
        let w = vec![1.0 / 6.0; 6];
        for sm in [Smoothing::None, Smoothing::MovingAverage(3)] {
            let u = mppi_update(&seq, &eps, &w, sm).unwrap();
            prop_assert!(u.actions.iter().all(|a| a.steer.abs() <= 1.0 && a.throttle.abs() <= 1.0));
        }
    }
}

#[test]
fn softmin_approaches_argmin() {
    let costs = [3.2, 1.7, 2.9, 1.75, 8.0, 4.4];
    let best = 1;
    let mut lambda = 10.0;
    let mut prev = 0.0;
    for _ in 0..8 {
        let w = mppi_weights(&costs, lambda).unwrap();
        // once the weight rounds to 1 it can only stay there
        assert!(w[best] > prev || w[best] == 1.0, "lambda {lambda}: {} <= {prev}", w[best]);
        prev = w[best];
        lambda *= 0.1;
    }
    assert!(1.0 - prev < 1e-12);
}

#[test]
fn tiny_temperature_emits_the_best_sample() {
    let target = [0.4, -0.3];
    let cfg = MppiConfig {
        samples: 64,
        horizon: 6,
        lambda: 1e-9,
        smoothing: Smoothing::None,
        seed: 17,
        ..MppiConfig::default()
    };
    let model = Still { members: 2 };
    let mut c = Controller::new(cfg.clone(), Quadratic { target }, Propagation::TrajectorySampling).unwrap();
    for _ in 0..3 {
        let set = c.evaluate(&model, &ctx()).unwrap();
        let costs = set.costs();
        let k = (0..costs.len()).min_by(|&a, &b| costs[a].total_cmp(&costs[b])).unwrap();
        let per = cfg.horizon * 2;
        let u0 = c.nominal.actions[0];
        let expect = [u0.steer + set.perturbations[k * per], u0.throttle + set.perturbations[k * per + 1]];
        let out = c.step(&model, &ctx()).unwrap();
        assert!((out.action.steer - expect[0]).abs() <= cfg.sigma[0] * 1e-3);
        assert!((out.action.throttle - expect[1]).abs() <= cfg.sigma[1] * 1e-3);
    }
}

#[test]
fn quadratic_toy_converges() {
    let target = [0.6, -0.4];
    let cfg = MppiConfig {
        samples: 4096,
        horizon: 5,
        lambda: 0.5,
        sigma: [0.15, 0.15],
        seed: 3,
        ..MppiConfig::default()
    };
    let model = Still { members: 1 };
    let mut c = Controller::new(cfg.clone(), Quadratic { target }, Propagation::TrajectorySampling).unwrap();
    let gap = |a: Action| ((a.steer - target[0]).powi(2) + (a.throttle - target[1]).powi(2)).sqrt();
    let initial = gap(Action::default());
    let mut gaps = Vec::new();
    for _ in 0..50 {
        gaps.push(gap(c.step(&model, &ctx()).unwrap().action));
    }
    for w in gaps[..20].windows(2) {
        assert!(w[1] < w[0], "gaps {:?}", &gaps[..20]);
    }
    assert!(gaps[0] < initial);
    let last = *gaps.last().unwrap();
    assert!(last < 0.05 * initial, "final gap {last}, initial {initial}");
}

fn random_model() -> PennModel {
    let cfg = PennConfig {
        history: 3,
        ensemble_size: 3,
        hidden: vec![8],
        activation: Activation::Tanh,
        ..PennConfig::default()
    };
    PennModel::new(cfg, NormStats::identity(3), 5).unwrap()
}

#[test]
fn chunked_rollouts_match_single_batch() {
    let model = random_model();
    let ctx = RolloutContext::at_rest(StateTriple::new(3.0, 0.1, -0.2), Pose::default(), 3, 0.1).unwrap();
    let base = MppiConfig {
        samples: 40,
        horizon: 4,
        seed: 8,
        ..MppiConfig::default()
    };
    let run = |batch| {
        let cfg = MppiConfig { batch, ..base };
        let mut c = Controller::new(cfg, CostSpec::explore(CostWeights::default()).unwrap(), Propagation::TrajectorySampling).unwrap();
        let set = c.evaluate(&model, &ctx).unwrap();
        let outs: Vec<_> = (0..3).map(|_| c.step(&model, &ctx).unwrap()).collect();
        (set, outs)
    };
    let whole = run(0);
    for batch in [1, 7, 40] {
        assert_eq!(whole, run(batch));
    }
    assert!(whole.0.rollouts.iter().all(|r| r.jrd.is_some()));
}
