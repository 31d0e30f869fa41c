//! Vehicle state, action and history types shared by every module.

use alloc::vec::Vec;

use crate::error::{shape, Error, Result};

/// Number of state coordinates `(vx, vy, r)`.
pub const STATE_DIM: usize = 3;
/// Number of action coordinates `(steer, throttle)`.
pub const ACTION_DIM: usize = 2;
/// Width of one `(state, action)` history entry.
pub const PAIR_DIM: usize = STATE_DIM + ACTION_DIM;

/// Body-frame velocities: longitudinal `vx` [m/s], lateral `vy` [m/s], yaw rate `r` [rad/s].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateTriple {
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
}

impl StateTriple {
    pub const fn new(vx: f64, vy: f64, r: f64) -> Self {
        StateTriple { vx, vy, r }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.vx, self.vy, self.r]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        StateTriple::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.r.is_finite()
    }

    pub fn add(self, delta: [f64; STATE_DIM]) -> Self {
        StateTriple::new(self.vx + delta[0], self.vy + delta[1], self.r + delta[2])
    }

    pub fn delta_to(self, next: StateTriple) -> [f64; STATE_DIM] {
        [next.vx - self.vx, next.vy - self.vy, next.r - self.r]
    }
}

/// Sanity envelope for [`StateTriple`] magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBounds {
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
}

impl Default for StateBounds {
    fn default() -> Self {
        StateBounds {
            vx: 100.0,
            vy: 50.0,
            r: 20.0,
        }
    }
}

impl StateBounds {
    pub fn contains(&self, s: &StateTriple) -> bool {
        s.is_finite() && s.vx.abs() <= self.vx && s.vy.abs() <= self.vy && s.r.abs() <= self.r
    }

    pub fn clamp(&self, s: StateTriple) -> StateTriple {
        StateTriple::new(
            s.vx.clamp(-self.vx, self.vx),
            s.vy.clamp(-self.vy, self.vy),
            s.r.clamp(-self.r, self.r),
        )
    }
}

/// Normalized command: `steer` maps to road-wheel angle, negative `throttle` brakes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    pub steer: f64,
    pub throttle: f64,
}

impl Action {
    /// Builds an action with both channels clamped to `[-1, 1]`.
    pub fn new(steer: f64, throttle: f64) -> Self {
        Action {
            steer: clamp_unit(steer),
            throttle: clamp_unit(throttle),
        }
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.steer, self.throttle]
    }
}

/// Clamp to `[-1, 1]`, mapping NaN to 0.
pub fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// The last `H` `(state, action)` pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub pairs: Vec<(StateTriple, Action)>,
    pub dt: f64,
}

impl HistoryWindow {
    pub fn new(pairs: Vec<(StateTriple, Action)>, dt: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("history window must hold at least one pair".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(alloc::format!("history dt must be positive, got {dt}")));
        }
        Ok(HistoryWindow { pairs, dt })
    }

    /// `len` copies of `(state, action)`; used to prime a controller at rest.
    pub fn filled(state: StateTriple, action: Action, len: usize, dt: f64) -> Result<Self> {
        HistoryWindow::new(alloc::vec![(state, action); len], dt)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// State of the newest entry.
    pub fn last_state(&self) -> StateTriple {
        self.pairs[self.pairs.len() - 1].0
    }

    /// Drops the oldest pair and appends `(state, action)`.
    pub fn push(&mut self, state: StateTriple, action: Action) {
        self.pairs.remove(0);
        self.pairs.push((state, action));
    }

    /// Writes the raw flattened features `[vx, vy, r, steer, throttle] x H`.
    pub fn write_raw(&self, out: &mut [f64]) -> Result<()> {
        shape("history features", self.pairs.len() * PAIR_DIM, out.len())?;
        for (chunk, (s, a)) in out.chunks_exact_mut(PAIR_DIM).zip(&self.pairs) {
            chunk.copy_from_slice(&[s.vx, s.vy, s.r, a.steer, a.throttle]);
        }
        Ok(())
    }

    pub fn raw_features(&self) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.pairs.len() * PAIR_DIM];
        self.write_raw(&mut v).expect("sized buffer");
        v
    }
}

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use core::f64::consts::PI;
    let mut w = libm::fmod(a + PI, 2.0 * PI);
    if w < 0.0 {
        w += 2.0 * PI;
    }
    let w = w - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn action_clamps() {
        assert_eq!(Action::new(2.0, -3.0), Action { steer: 1.0, throttle: -1.0 });
        assert_eq!(Action::new(f64::NAN, 0.5).steer, 0.0);
    }

    #[test]
    fn wrap_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn window_push_and_flatten() {
        let s = |v| StateTriple::new(v, 0.0, 0.0);
        let mut w = HistoryWindow::filled(s(1.0), Action::default(), 2, 0.1).unwrap();
        w.push(s(2.0), Action::new(0.5, 0.25));
        assert_eq!(w.raw_features(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.5, 0.25]);
        assert_eq!(w.last_state(), s(2.0));
    }
}
