//! History windowing, shuffled splitting and normalization statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::penn::NormStats;
use crate::rng;
use crate::sim::EpisodeLog;
use crate::state::{HistoryWindow, PAIR_DIM, STATE_DIM};

/// Floor applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// One training example: a history window and the following one-step Δ-state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: HistoryWindow,
    pub target: [f64; STATE_DIM],
    pub episode_id: usize,
    /// Row index of the newest window entry within its episode.
    pub t_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub ratio: f64,
    pub seed: u64,
}

/// Slides a length-`history` window over every episode.
///
/// An episode of `L` rows yields `L - history` samples; episodes with no more
/// than `history` rows are skipped.
pub fn window_episodes(episodes: &[EpisodeLog], history: usize) -> Result<Vec<Sample>> {
    if history == 0 {
        return Err(Error::Config("history length must be at least 1".into()));
    }
    let mut samples = Vec::new();
    for (episode_id, ep) in episodes.iter().enumerate() {
        if ep.rows.len() <= history {
            log::warn!(
                "episode {episode_id} has {} rows, need more than {history}; skipped",
                ep.rows.len()
            );
            continue;
        }
        for last in history - 1..ep.rows.len() - 1 {
            let pairs = ep.rows[last + 1 - history..=last]
                .iter()
                .map(|r| (r.state, r.action))
                .collect();
            let current = ep.rows[last].state;
            let next = ep.rows[last + 1].state;
            samples.push(Sample {
                window: HistoryWindow::new(pairs, ep.dt)?,
                target: current.delta_to(next),
                episode_id,
                t_index: last,
            });
        }
    }
    Ok(samples)
}

/// Seeded uniform shuffle followed by a prefix split.
pub fn split(samples: &[Sample], ratio: f64, seed: u64) -> Result<SplitDataset> {
    if samples.len() < 10 {
        return Err(Error::Dataset(format!(
            "need at least 10 samples to split, got {}",
            samples.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::rng(seed));
    let n_train = libm::round(ratio * samples.len() as f64) as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok(SplitDataset {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
        ratio,
        seed,
    })
}

/// Population mean/std of every input and target coordinate over `train`.
pub fn compute_norm_stats(train: &[Sample]) -> Result<NormStats> {
    let first = train
        .first()
        .ok_or_else(|| Error::Dataset("cannot compute statistics of an empty set".into()))?;
    let d = first.window.len() * PAIR_DIM;
    let n = train.len() as f64;
    let mut in_sum = vec![0.0; d];
    let mut t_sum = [0.0; STATE_DIM];
    let mut row = vec![0.0; d];
    for s in train {
        s.window.write_raw(&mut row)?;
        for (a, v) in in_sum.iter_mut().zip(&row) {
            *a += v;
        }
        for (a, v) in t_sum.iter_mut().zip(s.target) {
            *a += v;
        }
    }
    let in_mean: Vec<f64> = in_sum.iter().map(|v| v / n).collect();
    let t_mean = t_sum.map(|v| v / n);
    let mut in_sq = vec![0.0; d];
    let mut t_sq = [0.0; STATE_DIM];
    for s in train {
        s.window.write_raw(&mut row)?;
        for ((a, v), m) in in_sq.iter_mut().zip(&row).zip(&in_mean) {
            *a += (v - m) * (v - m);
        }
        for ((a, v), m) in t_sq.iter_mut().zip(s.target).zip(t_mean) {
            *a += (v - m) * (v - m);
        }
    }
    let floor = |sq: f64| libm::sqrt(sq / n).max(STD_FLOOR);
    Ok(NormStats {
        input_mean: in_mean,
        input_std: in_sq.into_iter().map(floor).collect(),
        target_mean: t_mean,
        target_std: t_sq.map(floor),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Pose;
    use crate::state::{Action, StateTriple};

    fn ramp(len: usize, tag: &str) -> EpisodeLog {
        let mut ep = EpisodeLog::new(0.1, tag);
        for i in 0..len {
            let f = i as f64;
            ep.push(StateTriple::new(f, 0.5 * f, -f), Action::new(0.01 * f, 0.2), Pose::default());
        }
        ep
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_episodes(&[ramp(100, "a")], 4).unwrap().len(), 96);
        let two = window_episodes(&[ramp(30, "a"), ramp(50, "b")], 4).unwrap();
        assert_eq!(two.len(), 26 + 46);
        assert!(two.iter().all(|s| s.window.len() == 4));
    }

    #[test]
    fn short_episodes_skipped() {
        let s = window_episodes(&[ramp(4, "a"), ramp(6, "b")], 4).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|x| x.episode_id == 1));
    }

    #[test]
    fn constant_episode_has_zero_targets() {
        let mut ep = EpisodeLog::new(0.1, "c");
        for _ in 0..20 {
            ep.push(StateTriple::new(2.0, 0.1, 0.3), Action::default(), Pose::default());
        }
        assert!(window_episodes(&[ep], 3).unwrap().iter().all(|s| s.target == [0.0; 3]));
    }

    #[test]
    fn windows_do_not_cross_episodes() {
        let s = window_episodes(&[ramp(10, "a"), ramp(10, "b")], 3).unwrap();
        for x in &s {
            // ramp states equal their row index, so a window is contiguous iff vx increments by 1
            let vx: Vec<f64> = x.window.pairs.iter().map(|p| p.0.vx).collect();
            assert!(vx.windows(2).all(|w| w[1] - w[0] == 1.0));
            assert_eq!(vx[2], x.t_index as f64);
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let s = window_episodes(&[ramp(104, "a")], 4).unwrap();
        assert_eq!(s.len(), 100);
        let a = split(&s, 0.7, 3).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (70, 30));
        assert_eq!(a, split(&s, 0.7, 3).unwrap());
        assert!(split(&s[..9], 0.7, 3).is_err());
    }

    #[test]
    fn single_sample_stats_hit_floor() {
        let s = window_episodes(&[ramp(3, "a")], 2).unwrap();
        let st = compute_norm_stats(&s).unwrap();
        assert!(st.input_std.iter().all(|&v| v == STD_FLOOR));
        assert!(st.target_std.iter().all(|&v| v == STD_FLOOR));
    }
}
