//! Dynamic single-track vehicle with nonlinear lateral tire forces and
//! delayed, lagged actuators.
//!
//! The actuator chain (transport delay followed by a first-order lag) is part
//! of the plant but is not observable through [`StateTriple`]; a learned model
//! only recovers it from the action history.

use crate::state::{wrap_angle, Action, StateBounds, StateTriple};

pub const GRAVITY: f64 = 9.81;
/// Longest supported actuator transport delay, in control steps.
pub const MAX_DELAY: usize = 4;

/// Simplified magic-formula coefficients of one axle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireParams {
    pub b_stiff: f64,
    pub c_shape: f64,
    pub mu: f64,
}

impl Default for TireParams {
    fn default() -> Self {
        TireParams {
            b_stiff: 10.0,
            c_shape: 1.9,
            mu: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub front: TireParams,
    pub rear: TireParams,
    /// Linear longitudinal drag [N·s/m].
    pub drag: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub dt: f64,
    /// RK4 sub-steps per `dt`.
    pub substeps: usize,
    /// Transport delay of the steering command [steps].
    pub steer_delay: usize,
    /// Transport delay of the throttle command [steps].
    pub throttle_delay: usize,
    /// Steering actuator time constant [s]; 0 means instantaneous.
    pub steer_tau: f64,
    /// Drive/brake actuator time constant [s]; 0 means instantaneous.
    pub accel_tau: f64,
    /// Floor on the speed used in slip-angle denominators [m/s].
    pub min_slip_speed: f64,
    pub bounds: StateBounds,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            mass: 200.0,
            yaw_inertia: 80.0,
            lf: 0.7,
            lr: 0.6,
            front: TireParams::default(),
            rear: TireParams::default(),
            drag: 1.5,
            max_steer: 0.45,
            max_accel: 4.0,
            dt: 0.1,
            substeps: 50,
            steer_delay: 2,
            throttle_delay: 1,
            steer_tau: 0.1,
            accel_tau: 0.1,
            min_slip_speed: 1.0,
            bounds: StateBounds::default(),
        }
    }
}

impl PlantParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("drag", self.drag),
            ("max_steer", self.max_steer),
            ("max_accel", self.max_accel),
            ("dt", self.dt),
            ("min_slip_speed", self.min_slip_speed),
            ("front.b_stiff", self.front.b_stiff),
            ("front.c_shape", self.front.c_shape),
            ("front.mu", self.front.mu),
            ("rear.b_stiff", self.rear.b_stiff),
            ("rear.c_shape", self.rear.c_shape),
            ("rear.mu", self.rear.mu),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(crate::Error::Config(alloc::format!("plant.{name} must be positive, got {v}")));
            }
        }
        if self.substeps == 0 {
            return Err(crate::Error::Config("plant.substeps must be at least 1".into()));
        }
        if self.steer_delay > MAX_DELAY || self.throttle_delay > MAX_DELAY {
            return Err(crate::Error::Config(alloc::format!(
                "actuator delays are limited to {MAX_DELAY} steps"
            )));
        }
        if !(self.steer_tau >= 0.0 && self.accel_tau >= 0.0) {
            return Err(crate::Error::Config("actuator time constants must be non-negative".into()));
        }
        Ok(())
    }
}

/// Hidden actuator memory: queued commands plus the lagged outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Actuators {
    /// `queue[0]` is the newest command.
    pub queue: [Action; MAX_DELAY + 1],
    /// Road-wheel angle [rad].
    pub steer: f64,
    /// Drive (positive) or brake (negative) command after the lag [m/s²].
    pub accel: f64,
}

/// Full plant state: body velocities, global pose and actuator memory.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub actuators: Actuators,
}

/// Global pose `(x, y, yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlantState {
    /// Plant at the given velocities and pose with actuators at rest.
    pub fn new(vx: f64, vy: f64, r: f64, pose: Pose) -> Self {
        PlantState {
            vx,
            vy,
            r,
            x: pose.x,
            y: pose.y,
            yaw: wrap_angle(pose.yaw),
            actuators: Actuators::default(),
        }
    }

    pub fn triple(&self) -> StateTriple {
        StateTriple::new(self.vx, self.vy, self.r)
    }

    pub fn pose(&self) -> Pose {
        Pose {
            x: self.x,
            y: self.y,
            yaw: self.yaw,
        }
    }

    /// Left-right mirror image (negates lateral quantities).
    pub fn mirrored(&self) -> Self {
        let mut m = *self;
        m.vy = -m.vy;
        m.r = -m.r;
        m.y = -m.y;
        m.yaw = wrap_angle(-m.yaw);
        m.actuators.steer = -m.actuators.steer;
        for a in m.actuators.queue.iter_mut() {
            a.steer = -a.steer;
        }
        m
    }
}

/// `F = μ Fz sin(C atan(B α))`.
pub fn tire_lateral_force(slip: f64, tire: &TireParams, normal_load: f64) -> f64 {
    tire.mu * normal_load * libm::sin(tire.c_shape * libm::atan(tire.b_stiff * slip))
}

/// Continuous-time integration state.
#[derive(Clone, Copy)]
struct Ode([f64; 8]);

impl Ode {
    fn axpy(&self, h: f64, k: &Ode) -> Ode {
        let mut o = self.0;
        for (v, d) in o.iter_mut().zip(k.0) {
            *v += h * d;
        }
        Ode(o)
    }
}

fn derivatives(p: &PlantParams, y: &Ode, steer_cmd: f64, accel_cmd: f64) -> Ode {
    let [vx, vy, r, _x, _y, yaw, steer, accel] = y.0;
    let l = p.wheelbase();
    let fz_front = p.mass * GRAVITY * p.lr / l;
    let fz_rear = p.mass * GRAVITY * p.lf / l;
    let v_slip = if vx > p.min_slip_speed { vx } else { p.min_slip_speed };
    let alpha_f = steer - libm::atan((vy + p.lf * r) / v_slip);
    let alpha_r = -libm::atan((vy - p.lr * r) / v_slip);
    let fyf = tire_lateral_force(alpha_f, &p.front, fz_front);
    let fyr = tire_lateral_force(alpha_r, &p.rear, fz_rear);
    let (sin_d, cos_d) = (libm::sin(steer), libm::cos(steer));
    // braking fades out near standstill so it never drives the kart backwards
    let drive = if accel >= 0.0 {
        accel
    } else {
        accel * libm::tanh(vx / 0.5)
    };
    let dvx = drive - p.drag * vx / p.mass - fyf * sin_d / p.mass + vy * r;
    let dvy = (fyf * cos_d + fyr) / p.mass - vx * r;
    let dr = (p.lf * fyf * cos_d - p.lr * fyr) / p.yaw_inertia;
    let (sin_y, cos_y) = (libm::sin(yaw), libm::cos(yaw));
    let dx = vx * cos_y - vy * sin_y;
    let dy = vx * sin_y + vy * cos_y;
    let dsteer = if p.steer_tau > 0.0 {
        (steer_cmd - steer) / p.steer_tau
    } else {
        0.0
    };
    let daccel = if p.accel_tau > 0.0 {
        (accel_cmd - accel) / p.accel_tau
    } else {
        0.0
    };
    Ode([dvx, dvy, dr, dx, dy, r, dsteer, daccel])
}

/// Advances the plant by one control period `p.dt` under `action`.
///
/// The command enters the actuator queue; the delayed command is held over
/// the period and integrated with fixed-step RK4 at `dt / substeps`.
pub fn plant_step(s: &PlantState, action: Action, p: &PlantParams) -> PlantState {
    let action = Action::new(action.steer, action.throttle);
    let mut act = s.actuators;
    act.queue.copy_within(0..MAX_DELAY, 1);
    act.queue[0] = action;
    let steer_cmd = act.queue[p.steer_delay].steer * p.max_steer;
    let accel_cmd = act.queue[p.throttle_delay].throttle * p.max_accel;
    if p.steer_tau == 0.0 {
        act.steer = steer_cmd;
    }
    if p.accel_tau == 0.0 {
        act.accel = accel_cmd;
    }

    let mut y = Ode([s.vx, s.vy, s.r, s.x, s.y, s.yaw, act.steer, act.accel]);
    let h = p.dt / p.substeps as f64;
    for _ in 0..p.substeps {
        let k1 = derivatives(p, &y, steer_cmd, accel_cmd);
        let k2 = derivatives(p, &y.axpy(0.5 * h, &k1), steer_cmd, accel_cmd);
        let k3 = derivatives(p, &y.axpy(0.5 * h, &k2), steer_cmd, accel_cmd);
        let k4 = derivatives(p, &y.axpy(h, &k3), steer_cmd, accel_cmd);
        for i in 0..8 {
            y.0[i] += h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
        }
    }
    let [vx, vy, r, x, yy, yaw, steer, accel] = y.0;
    act.steer = steer;
    act.accel = accel;
    let mut triple = StateTriple::new(vx, vy, r);
    if !p.bounds.contains(&triple) {
        log::warn!("plant state {triple:?} left the sanity bounds; clamping");
        triple = p.bounds.clamp(if triple.is_finite() {
            triple
        } else {
            StateTriple::default()
        });
    }
    PlantState {
        vx: triple.vx,
        vy: triple.vy,
        r: triple.r,
        x,
        y: yy,
        yaw: wrap_angle(yaw),
        actuators: act,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tire_force_shape() {
        let t = TireParams::default();
        assert_eq!(tire_lateral_force(0.0, &t, 1000.0), 0.0);
        for s in [0.01, 0.1, 0.3, 1.0] {
            assert_eq!(tire_lateral_force(-s, &t, 1000.0), -tire_lateral_force(s, &t, 1000.0));
        }
        let s = 1e-4;
        let linear = t.mu * 1000.0 * t.c_shape * t.b_stiff * s;
        let f = tire_lateral_force(s, &t, 1000.0);
        assert!(((f - linear) / linear).abs() < 1e-3);
    }

    #[test]
    fn straight_line_stays_straight() {
        let p = PlantParams::default();
        let mut s = PlantState::new(5.0, 0.0, 0.0, Pose::default());
        for i in 0..200 {
            s = plant_step(&s, Action::new(0.0, if i % 7 < 3 { 0.8 } else { -0.4 }), &p);
            assert_eq!((s.vy, s.r), (0.0, 0.0));
        }
    }

    #[test]
    fn coasting_decelerates() {
        let p = PlantParams::default();
        let mut s = PlantState::new(8.0, 0.0, 0.0, Pose::default());
        for _ in 0..100 {
            let next = plant_step(&s, Action::default(), &p);
            assert!(next.vx < s.vx);
            s = next;
        }
    }

    #[test]
    fn validate_rejects_bad_params() {
        let p = PlantParams {
            mass: -1.0,
            ..PlantParams::default()
        };
        assert!(p.validate().is_err());
        let p = PlantParams {
            steer_delay: MAX_DELAY + 1,
            ..PlantParams::default()
        };
        assert!(p.validate().is_err());
        assert!(PlantParams::default().validate().is_ok());
    }
}
