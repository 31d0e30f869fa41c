use penn_mpc::commands::run_deploy;
use penn_mpc::config::{DeployMode, ExperimentConfig};
use penn_mpc_core::error::Result;
use penn_mpc_core::mppi::EnsembleDynamics;
use penn_mpc_core::sim::{plant_step, PlantParams, PlantState, Pose};
use penn_mpc_core::Action;

/// Exact one-step Δ of a plant without actuator delay or lag.
struct Perfect {
    plant: PlantParams,
}

impl EnsembleDynamics for Perfect {
    fn history(&self) -> usize {
        1
    }
    fn ensemble_size(&self) -> usize {
        1
    }
    fn has_variance(&self) -> bool {
        false
    }
    fn predict_rows(&self, _m: usize, raw: &[f64], n: usize, means: &mut [f64], vars: &mut [f64]) -> Result<()> {
        for i in 0..n {
            let r = &raw[i * 5..i * 5 + 5];
            let s = PlantState::new(r[0], r[1], r[2], Pose::default());
            let next = plant_step(&s, Action::new(r[3], r[4]), &self.plant);
            means[i * 3..i * 3 + 3].copy_from_slice(&s.triple().delta_to(next.triple()));
            vars[i * 3..i * 3 + 3].fill(1e-6);
        }
        Ok(())
    }
}

fn direct_plant() -> PlantParams {
    PlantParams {
        steer_delay: 0,
        throttle_delay: 0,
        steer_tau: 0.0,
        accel_tau: 0.0,
        substeps: 10,
        ..PlantParams::default()
    }
}

#[test]
fn perfect_model_completes_every_lap() {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "mppi.K=128".into(),
        "mppi.T=15".into(),
        "costs.v_target=5".into(),
        "deploy.laps=2".into(),
        "deploy.max_seconds=150".into(),
    ])
    .unwrap();
    let plant = direct_plant();
    cfg.plant = plant;
    let track = cfg.build_track().unwrap();
    let (s, logs) = run_deploy(&cfg, &plant, &Perfect { plant }, &track, DeployMode::Direct, f64::INFINITY).unwrap();
    assert!(s.completed && !s.off_track, "{}", s.text());
    assert!(s.laps >= 2.0);
    assert!(s.max_abs_e_lat < track.half_width);
    let lap = s.lap_time.unwrap();
    assert!(lap > track.total_length / 12.0 && lap < 100.0, "lap time {lap}");
    assert_eq!(logs.diagnostics.len(), s.steps);
    assert_eq!(logs.trajectory.len(), s.steps);
    assert_eq!(s.mean_jrd, None);
}

#[test]
fn leaving_the_track_ends_the_run_with_a_flag() {
    let mut cfg = ExperimentConfig::default();
    // pure speed objective: nothing keeps the car on the centerline
    cfg.apply_overrides(&[
        "mppi.K=64".into(),
        "mppi.T=10".into(),
        "costs.w_track=0".into(),
        "costs.penalty_big=0".into(),
        "costs.v_target=12".into(),
        "deploy.max_seconds=60".into(),
    ])
    .unwrap();
    let plant = direct_plant();
    cfg.plant = plant;
    let track = cfg.build_track().unwrap();
    let (s, logs) = run_deploy(&cfg, &plant, &Perfect { plant }, &track, DeployMode::Direct, f64::INFINITY).unwrap();
    assert!(s.off_track && !s.completed, "{}", s.text());
    assert!(s.max_abs_e_lat > track.half_width);
    assert_eq!(logs.diagnostics.len(), s.steps);
    assert!(s.completion < 1.0);
}
