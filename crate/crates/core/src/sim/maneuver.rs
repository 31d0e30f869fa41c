//! Scripted data-collection drivers and the episode log they produce.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;

use crate::error::Result;
use crate::rng;
use crate::sim::plant::{plant_step, PlantParams, PlantState, Pose, GRAVITY};
use crate::sim::track::Track;
use crate::state::{Action, StateTriple};

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: StateTriple,
    /// Action applied from `t` to `t + dt`.
    pub action: Action,
    pub pose: Pose,
}

/// Fixed-rate record of one driving episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub rows: Vec<LogRow>,
    pub dt: f64,
    pub tag: String,
}

impl EpisodeLog {
    pub fn new(dt: f64, tag: impl Into<String>) -> Self {
        EpisodeLog {
            rows: Vec::new(),
            dt,
            tag: tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row stamped at `len * dt`.
    pub fn push(&mut self, state: StateTriple, action: Action, pose: Pose) {
        let t = self.rows.len() as f64 * self.dt;
        self.rows.push(LogRow { t, state, action, pose });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ManeuverKind {
    ZigzagLowSpeed,
    HighSpeedLaps,
    Slide,
}

impl ManeuverKind {
    pub const ALL: [ManeuverKind; 3] = [
        ManeuverKind::ZigzagLowSpeed,
        ManeuverKind::HighSpeedLaps,
        ManeuverKind::Slide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManeuverKind::ZigzagLowSpeed => "zigzag",
            ManeuverKind::HighSpeedLaps => "high_speed",
            ManeuverKind::Slide => "slide",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ManeuverKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Ccw,
    Cw,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Ccw => "ccw",
            Direction::Cw => "cw",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "ccw" => Some(Direction::Ccw),
            "cw" => Some(Direction::Cw),
            _ => None,
        }
    }
}

/// Lookahead steering plus proportional speed control along a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurePursuit {
    pub min_lookahead: f64,
    pub lookahead_time: f64,
    pub speed_gain: f64,
    /// Lateral acceleration budget used to slow down ahead of curves [m/s²].
    pub lateral_accel: f64,
}

impl Default for PurePursuit {
    fn default() -> Self {
        PurePursuit {
            min_lookahead: 3.0,
            lookahead_time: 0.6,
            speed_gain: 0.6,
            lateral_accel: 0.75 * GRAVITY,
        }
    }
}

impl PurePursuit {
    /// Normalized steering toward the lookahead point.
    pub fn steer(&self, state: &PlantState, s: f64, track: &Track, p: &PlantParams) -> f64 {
        let lookahead = (self.lookahead_time * state.vx).max(self.min_lookahead);
        let target = track.pose_at(s + lookahead);
        let (dx, dy) = (target.x - state.x, target.y - state.y);
        let (sin_y, cos_y) = (libm::sin(state.yaw), libm::cos(state.yaw));
        let local_x = cos_y * dx + sin_y * dy;
        let local_y = -sin_y * dx + cos_y * dy;
        let dist2 = (local_x * local_x + local_y * local_y).max(1e-6);
        let curvature = 2.0 * local_y / dist2;
        libm::atan(p.wheelbase() * curvature) / p.max_steer
    }

    /// Speed target capped by the sharpest curvature within the next few metres.
    pub fn speed_limit(&self, vx: f64, s: f64, track: &Track, v_target: f64) -> f64 {
        let horizon = 5.0 + 2.0 * vx.max(0.0);
        let mut k_max: f64 = 0.0;
        let mut d = 0.0;
        while d <= horizon {
            k_max = k_max.max(track.curvature_at(s + d).abs());
            d += 1.0;
        }
        if k_max > 0.0 {
            v_target.min(libm::sqrt(self.lateral_accel / k_max))
        } else {
            v_target
        }
    }

    pub fn throttle(&self, vx: f64, v_ref: f64) -> f64 {
        self.speed_gain * (v_ref - vx)
    }
}

/// Result of one scripted run.
#[derive(Debug, Clone, PartialEq)]
pub struct ManeuverOutcome {
    pub log: EpisodeLog,
    /// The vehicle left the track envelope and the episode stopped early.
    pub truncated: bool,
    /// Zigzag steering period [s], when applicable.
    pub period: Option<f64>,
}

/// Allowed lateral excursion as a multiple of the track half width.
pub const ENVELOPE_FACTOR: f64 = 3.0;

/// Drives one scripted maneuver on `track` for `duration` seconds.
///
/// `Cw` runs the loop in reverse. Speeds, amplitudes, periods and the
/// starting point are drawn from `seed`, so the log is a pure function of
/// the inputs.
pub fn scripted_maneuver(
    kind: ManeuverKind,
    duration: f64,
    direction: Direction,
    seed: u64,
    track: &Track,
    p: &PlantParams,
) -> Result<ManeuverOutcome> {
    scripted_maneuver_with(kind, duration, direction, seed, track, p, &PurePursuit::default())
}

/// [`scripted_maneuver`] with an explicit path-following driver.
pub fn scripted_maneuver_with(
    kind: ManeuverKind,
    duration: f64,
    direction: Direction,
    seed: u64,
    track: &Track,
    p: &PlantParams,
    pp: &PurePursuit,
) -> Result<ManeuverOutcome> {
    p.validate()?;
    let track = match direction {
        Direction::Ccw => track.clone(),
        Direction::Cw => track.reversed(),
    };
    let mut rng = rng::rng(seed);
    let start_s = rng.random_range(0.0..track.total_length);
    let (v_target, amplitude, period): (f64, f64, f64) = match kind {
        ManeuverKind::ZigzagLowSpeed => (
            rng.random_range(2.5..4.5),
            rng.random_range(0.4..0.7),
            rng.random_range(1.5..3.0),
        ),
        ManeuverKind::HighSpeedLaps => (rng.random_range(9.0..13.0), 0.0, 0.0),
        ManeuverKind::Slide => (
            rng.random_range(4.0..6.0),
            rng.random_range(0.8..1.0),
            rng.random_range(3.0..5.0),
        ),
    };
    let start = track.pose_at(start_s);
    let mut state = PlantState::new(v_target.min(3.0), 0.0, 0.0, start);
    let steps = libm::round(duration / p.dt) as usize;
    let mut log = EpisodeLog::new(p.dt, kind.name());
    let mut hint = track.index_at(start_s);
    let envelope = ENVELOPE_FACTOR * track.half_width;
    let burst_len = 1.0;
    let power_len = 0.5;
    let mut truncated = false;

    for i in 0..steps {
        let t = i as f64 * p.dt;
        let frame = match track.track_frame_near(&state.pose(), hint, 40) {
            Ok(f) if f.e_lat.abs() <= envelope => f,
            _ => {
                truncated = true;
                break;
            }
        };
        hint = frame.index;
        let base_steer = pp.steer(&state, frame.s, &track, p);
        let v_ref = pp.speed_limit(state.vx, frame.s, &track, v_target);
        let action = match kind {
            ManeuverKind::ZigzagLowSpeed => Action::new(
                base_steer + amplitude * libm::sin(2.0 * PI * t / period),
                pp.throttle(state.vx, v_ref),
            ),
            ManeuverKind::HighSpeedLaps => Action::new(base_steer, pp.throttle(state.vx, v_ref)),
            ManeuverKind::Slide => {
                let phase = libm::fmod(t, period);
                let cycle = libm::floor(t / period) as i64;
                if t < period || phase >= burst_len + power_len {
                    Action::new(base_steer, pp.throttle(state.vx, v_ref))
                } else if phase < burst_len {
                    let sign = if cycle % 2 == 0 { 1.0 } else { -1.0 };
                    Action::new(base_steer + sign * amplitude, -0.5)
                } else {
                    Action::new(base_steer, 1.0)
                }
            }
        };
        log.push(state.triple(), action, state.pose());
        state = plant_step(&state, action, p);
    }
    Ok(ManeuverOutcome {
        log,
        truncated,
        period: (kind == ManeuverKind::ZigzagLowSpeed).then_some(period),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::track::{build_track, TrackSpec, DESK_HALF_WIDTH};

    fn desk() -> Track {
        build_track(&TrackSpec::desk(DESK_HALF_WIDTH)).unwrap()
    }

    #[test]
    fn maneuvers_are_deterministic() {
        let t = desk();
        let p = PlantParams::default();
        for kind in ManeuverKind::ALL {
            let a = scripted_maneuver(kind, 20.0, Direction::Ccw, 9, &t, &p).unwrap();
            let b = scripted_maneuver(kind, 20.0, Direction::Ccw, 9, &t, &p).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn log_has_uniform_time() {
        let out = scripted_maneuver(ManeuverKind::HighSpeedLaps, 30.0, Direction::Ccw, 1, &desk(), &PlantParams::default()).unwrap();
        assert!(!out.truncated);
        assert_eq!(out.log.len(), 300);
        for (i, row) in out.log.rows.iter().enumerate() {
            assert_eq!(row.t, i as f64 * 0.1);
        }
    }

    #[test]
    fn names_round_trip() {
        for k in ManeuverKind::ALL {
            assert_eq!(ManeuverKind::from_name(k.name()), Some(k));
        }
        assert_eq!(Direction::from_name("cw"), Some(Direction::Cw));
        assert_eq!(ManeuverKind::from_name("drift"), None);
    }
}
