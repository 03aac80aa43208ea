//! Ground-truth UAV kinematics under constant-velocity and
//! constant-acceleration motion, sampled once per CPI.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scenario::{
    ConfigError, MotionModel, RcsFluctuation, SimRng, UavConfig, Vec3, DEFAULT_RCS,
};

/// Axis-aligned rectangle on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GroundBox {
    pub fn centered(cx: f64, cy: f64, width: f64, depth: f64) -> Self {
        Self {
            x_min: cx - 0.5 * width,
            x_max: cx + 0.5 * width,
            y_min: cy - 0.5 * depth,
            y_max: cy + 0.5 * depth,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn validate(&self, field: &str) -> Result<(), ConfigError> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max;
        if ok {
            Ok(())
        } else {
            Err(ConfigError::invalid(field, "need finite x_min < x_max and y_min < y_max"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetBounds {
    pub altitude_min: f64,
    pub altitude_max: f64,
    pub speed_max: f64,
    pub accel_max: f64,
    pub region: GroundBox,
}

impl FleetBounds {
    /// Default aerial-UE ranges on a 2 km x 2 km square centered at `(cx, cy)`.
    pub fn around(cx: f64, cy: f64) -> Self {
        Self {
            altitude_min: 50.0,
            altitude_max: 300.0,
            speed_max: 160.0 / 3.6,
            accel_max: 3.0,
            region: GroundBox::centered(cx, cy, 2000.0, 2000.0),
        }
    }

    pub fn validate(&self, field: &str) -> Result<(), ConfigError> {
        if !(self.altitude_min >= 0.0 && self.altitude_min < self.altitude_max) {
            return Err(ConfigError::invalid(
                format!("{field}.altitude_min"),
                "need 0 <= altitude_min < altitude_max",
            ));
        }
        if !(self.speed_max.is_finite() && self.speed_max > 0.0) {
            return Err(ConfigError::invalid(format!("{field}.speed_max"), "must be > 0"));
        }
        if !(self.accel_max.is_finite() && self.accel_max >= 0.0) {
            return Err(ConfigError::invalid(format!("{field}.accel_max"), "must be >= 0"));
        }
        self.region.validate(&format!("{field}.region"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub time: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

impl TrajectoryState {
    pub fn initial(u: &UavConfig, t0: f64) -> Self {
        let acceleration = match u.motion_model {
            MotionModel::Cv => Vec3::zeros(),
            MotionModel::Ca => u.acceleration,
        };
        Self {
            time: t0,
            position: u.initial_position,
            velocity: u.initial_velocity,
            acceleration,
        }
    }
}

/// Exact kinematic step. CV ignores (and clears) the acceleration.
pub fn propagate(s: &TrajectoryState, dt: f64, model: MotionModel) -> TrajectoryState {
    match model {
        MotionModel::Cv => TrajectoryState {
            time: s.time + dt,
            position: s.position + s.velocity * dt,
            velocity: s.velocity,
            acceleration: Vec3::zeros(),
        },
        MotionModel::Ca => TrajectoryState {
            time: s.time + dt,
            position: s.position + s.velocity * dt + s.acceleration * (0.5 * dt * dt),
            velocity: s.velocity + s.acceleration * dt,
            acceleration: s.acceleration,
        },
    }
}

/// `n` states at `t0, t0 + dt, ...`, each evaluated in closed form from the
/// initial condition so no step error accumulates.
pub fn sample_trajectory(u: &UavConfig, t0: f64, dt: f64, n: usize) -> Vec<TrajectoryState> {
    let start = TrajectoryState::initial(u, t0);
    (0..n)
        .map(|k| {
            if k == 0 {
                start
            } else {
                let mut s = propagate(&start, k as f64 * dt, u.motion_model);
                s.time = t0 + k as f64 * dt;
                s
            }
        })
        .collect()
}

/// Uniform random fleet: positions in the region and altitude band, horizontal
/// headings, speeds in `(0, speed_max]`, CV or CA with equal probability.
pub fn random_fleet(rng: &mut SimRng, bounds: &FleetBounds, n: usize) -> Vec<UavConfig> {
    let r = &bounds.region;
    (0..n)
        .map(|k| {
            let x = rng.gen_range(r.x_min..=r.x_max);
            let y = rng.gen_range(r.y_min..=r.y_max);
            let z = rng.gen_range(bounds.altitude_min..=bounds.altitude_max);
            let speed = bounds.speed_max * (1.0 - rng.gen::<f64>());
            let heading = rng.gen_range(0.0..TAU);
            let model = if rng.gen_bool(0.5) {
                MotionModel::Cv
            } else {
                MotionModel::Ca
            };
            let acceleration = match model {
                MotionModel::Cv => Vec3::zeros(),
                MotionModel::Ca => {
                    let mag = rng.gen_range(0.0..=bounds.accel_max);
                    let dir = rng.gen_range(0.0..TAU);
                    Vec3::new(mag * dir.cos(), mag * dir.sin(), 0.0)
                }
            };
            UavConfig {
                id: k as u32,
                initial_position: Vec3::new(x, y, z),
                initial_velocity: Vec3::new(speed * heading.cos(), speed * heading.sin(), 0.0),
                acceleration,
                rcs_mean: DEFAULT_RCS,
                motion_model: model,
                rcs_fluctuation: RcsFluctuation::None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::spawn_rng;
    use proptest::prelude::*;

    fn state(p: [f64; 3], v: [f64; 3], a: [f64; 3]) -> TrajectoryState {
        TrajectoryState {
            time: 0.0,
            position: Vec3::from(p),
            velocity: Vec3::from(v),
            acceleration: Vec3::from(a),
        }
    }

    fn uav(model: MotionModel, v: [f64; 3], a: [f64; 3]) -> UavConfig {
        UavConfig {
            id: 0,
            initial_position: Vec3::new(0.0, 0.0, 100.0),
            initial_velocity: Vec3::from(v),
            acceleration: Vec3::from(a),
            rcs_mean: 0.01,
            motion_model: model,
            rcs_fluctuation: RcsFluctuation::None,
        }
    }

    #[test]
    fn cv_step() {
        let s = propagate(&state([0., 0., 100.], [10., 0., 0.], [0.; 3]), 1.0, MotionModel::Cv);
        assert_eq!(s.position, Vec3::new(10.0, 0.0, 100.0));
        assert_eq!(s.time, 1.0);
    }

    #[test]
    fn ca_step() {
        let s = propagate(&state([0., 0., 100.], [0.; 3], [2., 0., 0.]), 1.0, MotionModel::Ca);
        assert_eq!(s.position, Vec3::new(1.0, 0.0, 100.0));
        assert_eq!(s.velocity, Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn cv_flow_composes() {
        let s0 = state([3., -4., 120.], [10., 5., 0.], [0.; 3]);
        let half = propagate(&propagate(&s0, 0.5, MotionModel::Cv), 0.5, MotionModel::Cv);
        let full = propagate(&s0, 1.0, MotionModel::Cv);
        assert!((half.position - full.position).norm() < 1e-12);
        assert_eq!(half.velocity, full.velocity);
    }

    #[test]
    fn sampling() {
        let u = uav(MotionModel::Cv, [10., 0., 0.], [0.; 3]);
        let one = sample_trajectory(&u, 0.0, 1.0, 1);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].position, u.initial_position);
        let xs: Vec<f64> = sample_trajectory(&u, 0.0, 1.0, 3)
            .iter()
            .map(|s| s.position.x)
            .collect();
        assert_eq!(xs, vec![0.0, 10.0, 20.0]);
    }

    #[test]
    fn ca_samples_match_closed_form() {
        let u = uav(MotionModel::Ca, [3., -1., 0.], [0.5, 2.0, 0.]);
        for s in sample_trajectory(&u, 2.0, 0.25, 40) {
            let t = s.time - 2.0;
            let p = u.initial_position + u.initial_velocity * t + u.acceleration * (0.5 * t * t);
            assert!((s.position - p).norm() < 1e-9);
        }
    }

    #[test]
    fn fleet_of_ten() {
        let b = FleetBounds::around(250.0, 0.0);
        let a = random_fleet(&mut spawn_rng(7, "fleet"), &b, 10);
        let c = random_fleet(&mut spawn_rng(7, "fleet"), &b, 10);
        assert_eq!(a.len(), 10);
        assert_eq!(a, c);
    }

    proptest! {
        #[test]
        fn propagate_is_exact(
            p in prop::array::uniform3(-1e3f64..1e3),
            v in prop::array::uniform3(-50f64..50.0),
            a in prop::array::uniform3(-3f64..3.0),
            dt in 1e-3f64..10.0,
        ) {
            let s = propagate(&state(p, v, a), dt, MotionModel::Ca);
            let p0 = Vec3::from(p);
            let v0 = Vec3::from(v);
            let a0 = Vec3::from(a);
            let want = p0 + v0 * dt + a0 * (0.5 * dt * dt);
            prop_assert!((s.position - want).norm() <= 1e-9 * (1.0 + want.norm()));
            prop_assert!((s.velocity - (v0 + a0 * dt)).norm() <= 1e-12 * (1.0 + v0.norm() + a0.norm() * dt));
        }

        #[test]
        fn cv_speed_is_constant(v in prop::array::uniform3(-40f64..40.0), n in 1usize..30) {
            let u = uav(MotionModel::Cv, v, [0.; 3]);
            let s0 = u.initial_velocity.norm();
            for s in sample_trajectory(&u, 0.0, 0.3, n) {
                prop_assert_eq!(s.velocity.norm(), s0);
            }
        }

        #[test]
        fn random_fleet_respects_bounds(seed in any::<u64>()) {
            let b = FleetBounds::around(250.0, 0.0);
            for u in random_fleet(&mut spawn_rng(seed, "fleet"), &b, 25) {
                let p = u.initial_position;
                prop_assert!(b.region.contains(p.x, p.y));
                prop_assert!(p.z >= b.altitude_min && p.z <= b.altitude_max);
                let s = u.initial_velocity.norm();
                prop_assert!(s > 0.0 && s <= b.speed_max * (1.0 + 1e-12));
                prop_assert!(u.acceleration.norm() <= b.accel_max * (1.0 + 1e-12));
            }
        }
    }
}
