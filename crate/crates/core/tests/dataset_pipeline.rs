use std::collections::BTreeSet;

use penn_mpc_core::dataset::{compute_norm_stats, split, window_episodes, Sample};
use penn_mpc_core::rng;
use penn_mpc_core::sim::{build_track, scripted_maneuver, Direction, EpisodeLog, ManeuverKind, PlantParams, Pose, TrackSpec, DESK_HALF_WIDTH};
use penn_mpc_core::{Action, StateTriple};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

fn episodes() -> Vec<EpisodeLog> {
    let track = build_track(&TrackSpec::desk(DESK_HALF_WIDTH)).unwrap();
    let p = PlantParams::default();
    ManeuverKind::ALL
        .iter()
        .zip([Direction::Ccw, Direction::Cw, Direction::Ccw])
        .enumerate()
        .map(|(i, (&k, d))| scripted_maneuver(k, 20.0, d, i as u64, &track, &p).unwrap().log)
        .collect()
}

fn key(s: &Sample) -> (usize, usize) {
    (s.episode_id, s.t_index)
}

#[test]
fn window_and_target_reconstruct_the_episode() {
    let eps = episodes();
    let h = 4;
    let samples = window_episodes(&eps, h).unwrap();
    assert_eq!(samples.len(), eps.iter().map(|e| e.len() - h).sum::<usize>());
    for s in &samples {
        let rows = &eps[s.episode_id].rows;
        for (j, (state, action)) in s.window.pairs.iter().enumerate() {
            let row = &rows[s.t_index + 1 - h + j];
            assert_eq!((*state, *action), (row.state, row.action));
        }
        let rebuilt = s.window.last_state().add(s.target).to_array();
        let truth = rows[s.t_index + 1].state.to_array();
        for (a, b) in rebuilt.iter().zip(truth) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn split_is_a_seeded_partition() {
    let samples = window_episodes(&episodes(), 3).unwrap();
    let d = split(&samples, 0.7, 11).unwrap();
    let n = samples.len();
    assert!((d.train.len() as f64 - 0.7 * n as f64).abs() <= 1.0);
    assert_eq!(d.train.len() + d.test.len(), n);

    let train: BTreeSet<_> = d.train.iter().map(key).collect();
    let test: BTreeSet<_> = d.test.iter().map(key).collect();
    assert!(train.is_disjoint(&test));
    let all: BTreeSet<_> = samples.iter().map(key).collect();
    assert_eq!(train.union(&test).copied().collect::<BTreeSet<_>>(), all);

    assert_eq!(d, split(&samples, 0.7, 11).unwrap());
    assert_ne!(d.train, split(&samples, 0.7, 12).unwrap().train);
}

#[test]
fn statistics_come_from_train_only() {
    let samples = window_episodes(&episodes(), 4).unwrap();
    let d = split(&samples, 0.7, 5).unwrap();
    let from_train = compute_norm_stats(&d.train).unwrap();

    // recompute from scratch over train and compare
    let dim = from_train.input_dim();
    let n = d.train.len() as f64;
    for i in 0..dim {
        let col: Vec<f64> = d.train.iter().map(|s| s.window.raw_features()[i]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
        assert!((from_train.input_mean[i] - mean).abs() < 1e-12 * mean.abs().max(1.0));
        assert!((from_train.input_std[i] - std).abs() < 1e-9 * std);
    }
    for k in 0..3 {
        let col: Vec<f64> = d.train.iter().map(|s| s.target[k]).collect();
        let mean = col.iter().sum::<f64>() / n;
        assert!((from_train.target_mean[k] - mean).abs() < 1e-12);
    }

    let from_all = compute_norm_stats(&samples).unwrap();
    assert_ne!(from_train, from_all);
    let from_test = compute_norm_stats(&d.test).unwrap();
    assert_ne!(from_train, from_test);
}

#[test]
fn statistics_ignore_sample_order() {
    let mut samples = window_episodes(&episodes(), 2).unwrap();
    let a = compute_norm_stats(&samples).unwrap();
    samples.shuffle(&mut rng::rng(3));
    let b = compute_norm_stats(&samples).unwrap();
    for (x, y) in a.input_mean.iter().zip(&b.input_mean).chain(a.input_std.iter().zip(&b.input_std)) {
        assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn standard_normal_coordinates_have_unit_statistics() {
    let mut r = rng::rng(99);
    let mut ep = EpisodeLog::new(0.1, "noise");
    for _ in 0..100_001 {
        let mut z = || -> f64 { StandardNormal.sample(&mut r) };
        ep.push(StateTriple::new(z(), z(), z()), Action::default(), Pose::default());
    }
    let samples = window_episodes(&[ep], 1).unwrap();
    assert_eq!(samples.len(), 100_000);
    let st = compute_norm_stats(&samples).unwrap();
    for i in 0..3 {
        assert!(st.input_mean[i].abs() < 0.02, "mean {i}: {}", st.input_mean[i]);
        assert!((st.input_std[i] - 1.0).abs() < 0.02, "std {i}: {}", st.input_std[i]);
    }
}
