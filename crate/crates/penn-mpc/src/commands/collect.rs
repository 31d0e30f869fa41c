use std::path::Path;

use penn_mpc_core::sim::{scripted_maneuver, Direction, Track};

use crate::config::{tags, ExperimentConfig};
use crate::error::Result;
use crate::logs::write_track;
use crate::report::{write_text, RunDir};
use crate::store::{save_dataset, Dataset, DatasetMeta};

#[derive(Debug, Clone, PartialEq)]
pub struct CollectSummary {
    pub episodes: usize,
    pub rows: usize,
    /// Rows the schedule asks for; differs from `rows` only through truncation.
    pub expected_rows: usize,
    pub truncated: usize,
}

impl CollectSummary {
    pub fn text(&self) -> String {
        format!(
            "episodes={}\nrows={}\nexpected_rows={}\ntruncated_episodes={}\n",
            self.episodes, self.rows, self.expected_rows, self.truncated
        )
    }
}

/// Runs the scripted maneuver schedule: each kind of the mix in both
/// directions, cycling until the time budget is spent.
pub fn collect_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Track, CollectSummary)> {
    let track = cfg.build_track()?;
    let dt = cfg.plant.dt;
    let mut ds = Dataset::new(DatasetMeta {
        history: cfg.model.history,
        dt,
    });
    let mut remaining = cfg.collect.minutes * 60.0;
    let mut summary = CollectSummary {
        episodes: 0,
        rows: 0,
        expected_rows: 0,
        truncated: 0,
    };
    let mut i = 0usize;
    while remaining > 0.5 * dt {
        let kind = cfg.collect.mix[(i / 2) % cfg.collect.mix.len()];
        let direction = if i % 2 == 0 { Direction::Ccw } else { Direction::Cw };
        let duration = cfg.collect.episode_seconds.min(remaining);
        let seed = cfg.derive_seed(tags::COLLECT, i as u64);
        let out = scripted_maneuver(kind, duration, direction, seed, &track, &cfg.plant)?;
        if out.truncated {
            log::warn!(
                "episode {i} ({} {}) left the track after {} of {} rows",
                kind.name(),
                direction.name(),
                out.log.len(),
                (duration / dt).round()
            );
            summary.truncated += 1;
        }
        summary.expected_rows += (duration / dt).round() as usize;
        ds.push(&out.log, direction.name(), seed, out.truncated);
        remaining -= duration;
        i += 1;
    }
    summary.episodes = ds.entries.len();
    summary.rows = ds.total_rows();
    Ok((ds, track, summary))
}

/// `collect`: writes the dataset, the track and a summary under `out`.
pub fn collect(cfg: &ExperimentConfig, out: &Path) -> Result<CollectSummary> {
    let run = RunDir::create(out, "collect", cfg)?;
    let (ds, track, summary) = collect_dataset(cfg)?;
    save_dataset(out, &ds)?;
    write_track(&run.file("track.csv"), &track)?;
    write_text(&run.file("collect_summary.txt"), &summary.text())?;
    log::info!(
        "collected {} episodes, {} rows ({} truncated)",
        summary.episodes,
        summary.rows,
        summary.truncated
    );
    Ok(summary)
}
