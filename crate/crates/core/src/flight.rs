//! Kinematic fixed-wing flight model.
//!
//! The aircraft is a constant-airspeed point mass flying coordinated turns:
//! `χ̇ = −g·tan(φ)/V` (positive bank turns right). Each interior waypoint is
//! rounded by a turn that rolls in at the maximum roll rate, holds the
//! maximum bank and rolls out, so the exit lies exactly on the next leg.
//! Leg 0 is flown straight and level for the mission's initialization length;
//! altitude changes are flown on the straight part of each leg.

use std::f64::consts::PI;

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlightError {
    #[error("mission infeasible at waypoint {index}: {reason}")]
    MissionInfeasible { index: usize, reason: String },
    #[error("invalid flight parameters: {0}")]
    InvalidParams(String),
    #[error("invalid mission: {0}")]
    InvalidMission(String),
}

/// Ordered `(east, north, altitude)` waypoints plus the straight-and-level
/// initialization length flown along the first leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mission {
    pub waypoints: Vec<[f64; 3]>,
    pub init_leg_length: f64,
}

impl Mission {
    pub fn validate(&self) -> Result<(), FlightError> {
        if self.waypoints.len() < 2 {
            return Err(FlightError::InvalidMission(
                "a mission needs at least two waypoints".into(),
            ));
        }
        if !(self.init_leg_length >= 0.0 && self.init_leg_length.is_finite()) {
            return Err(FlightError::InvalidMission(
                "init_leg_length must be non-negative".into(),
            ));
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(FlightError::InvalidMission(format!(
                    "waypoint {i} has non-finite coordinates"
                )));
            }
        }
        for (i, pair) in self.waypoints.windows(2).enumerate() {
            let d = Vector2::new(pair[1][0] - pair[0][0], pair[1][1] - pair[0][1]).norm();
            if d < 1e-6 {
                return Err(FlightError::MissionInfeasible {
                    index: i + 1,
                    reason: "coincides horizontally with the previous waypoint".into(),
                });
            }
        }
        Ok(())
    }

    /// Same horizontal track with every waypoint at `alt`.
    pub fn with_altitude(mut self, alt: f64) -> Self {
        for w in &mut self.waypoints {
            w[2] = alt;
        }
        self
    }

    /// Horizontal length of the waypoint polyline.
    pub fn polyline_length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|p| Vector2::new(p[1][0] - p[0][0], p[1][1] - p[0][1]).norm())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlightParams {
    /// m/s; equal to ground speed since no wind is modeled.
    pub airspeed: f64,
    /// deg/s
    pub max_roll_rate: f64,
    /// deg
    #[serde(default = "default_max_bank")]
    pub max_bank: f64,
    /// Hz
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
}

fn default_max_bank() -> f64 {
    35.0
}

fn default_sample_rate() -> f64 {
    31.0
}

impl Default for FlightParams {
    fn default() -> Self {
        Self {
            airspeed: 10.0,
            max_roll_rate: 25.0,
            max_bank: default_max_bank(),
            sample_rate: default_sample_rate(),
        }
    }
}

impl FlightParams {
    pub fn validate(&self) -> Result<(), FlightError> {
        if !(self.airspeed > 0.0 && self.airspeed.is_finite()) {
            return Err(FlightError::InvalidParams("airspeed must be positive".into()));
        }
        if !(self.max_bank > 0.0 && self.max_bank < 90.0) {
            return Err(FlightError::InvalidParams(
                "max_bank must lie in (0, 90) degrees".into(),
            ));
        }
        if !(self.max_roll_rate > 0.0 && self.max_roll_rate.is_finite()) {
            return Err(FlightError::InvalidParams("max_roll_rate must be positive".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0e6) {
            return Err(FlightError::InvalidParams(
                "sample_rate must lie in (0, 1e6] Hz".into(),
            ));
        }
        Ok(())
    }

    /// Radius of a steady turn at `max_bank`.
    pub fn min_turn_radius(&self) -> f64 {
        turn_radius(self.airspeed, self.max_bank)
    }
}

/// `V² / (g · tan φ)` in meters.
pub fn turn_radius(airspeed: f64, bank_deg: f64) -> f64 {
    airspeed * airspeed / (GRAVITY * bank_deg.to_radians().tan())
}

/// `g · tan φ / V` in deg/s.
pub fn turn_rate_deg(airspeed: f64, bank_deg: f64) -> f64 {
    (GRAVITY * bank_deg.to_radians().tan() / airspeed).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSample {
    pub t_us: i64,
    /// Body frame: x forward, y right, z down.
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    /// deg, positive right wing down
    pub bank: f64,
}

/// Body attitude from course `chi` (rad, counter-clockwise from east),
/// flight-path angle `gamma` and bank `phi`.
pub fn body_attitude(chi: f64, gamma: f64, phi: f64) -> UnitQuaternion<f64> {
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), chi);
    let flip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI);
    let pitch = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), gamma);
    let roll = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), phi);
    yaw * flip * pitch * roll
}

/// Camera axes in the body frame: image x along the right wing, image y
/// toward the tail, optical axis along body z (down).
pub fn nadir_mount() -> UnitQuaternion<f64> {
    let m = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
        0.0, -1.0, 0.0, //
        1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0,
    ));
    UnitQuaternion::from_rotation_matrix(&m)
}

/// World <- camera pose for a camera rigidly mounted with rotation `mount`
/// (body <- camera) at the body origin.
pub fn camera_pose_at(sample: &StateSample, mount: &UnitQuaternion<f64>) -> Pose {
    let p = sample.pose;
    Pose::new(p.t_us, p.rotation * mount, p.translation)
}

/// One piece of the bank schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    /// Wings level at flight-path angle `gamma`.
    Straight { duration: f64, gamma: f64 },
    /// Bank changes linearly from `phi0` at `rate` rad/s.
    Ramp { duration: f64, phi0: f64, rate: f64 },
    /// Constant bank.
    Hold { duration: f64, phi: f64 },
}

impl Phase {
    fn duration(&self) -> f64 {
        match *self {
            Phase::Straight { duration, .. }
            | Phase::Ramp { duration, .. }
            | Phase::Hold { duration, .. } => duration,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Kinematic {
    pos: Vector3<f64>,
    chi: f64,
    phi: f64,
    gamma: f64,
}

const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// Advances `state` by `dt` seconds inside `phase`, starting `tau` seconds
/// after the phase began.
fn advance(state: &mut Kinematic, phase: &Phase, tau: f64, dt: f64, v: f64) {
    if dt <= 0.0 {
        return;
    }
    match *phase {
        Phase::Straight { gamma, .. } => {
            let vh = v * gamma.cos();
            state.pos += Vector3::new(
                vh * dt * state.chi.cos(),
                vh * dt * state.chi.sin(),
                v * gamma.sin() * dt,
            );
            state.phi = 0.0;
            state.gamma = gamma;
        }
        Phase::Hold { phi, .. } => {
            let omega = -GRAVITY * phi.tan() / v;
            let chi0 = state.chi;
            let chi1 = chi0 + omega * dt;
            if omega.abs() < 1e-12 {
                state.pos += Vector3::new(v * dt * chi0.cos(), v * dt * chi0.sin(), 0.0);
            } else {
                state.pos += Vector3::new(
                    v / omega * (chi1.sin() - chi0.sin()),
                    -v / omega * (chi1.cos() - chi0.cos()),
                    0.0,
                );
            }
            state.chi = chi1;
            state.phi = phi;
            state.gamma = 0.0;
        }
        Phase::Ramp { phi0, rate, .. } => {
            // Heading has a closed form; position is integrated by quadrature.
            let a = phi0 + rate * tau;
            let chi0 = state.chi;
            let heading = |s: f64| chi0 + GRAVITY / (v * rate) * ((a + rate * s).cos() / a.cos()).ln();
            let pieces = (dt / 0.005).ceil().max(1.0) as usize;
            let h = dt / pieces as f64;
            let mut dp = Vector2::zeros();
            for k in 0..pieces {
                let mid = (k as f64 + 0.5) * h;
                for (x, w) in GAUSS4 {
                    let c = heading(mid + 0.5 * h * x);
                    dp += Vector2::new(c.cos(), c.sin()) * (0.5 * h * w * v);
                }
            }
            state.pos += Vector3::new(dp.x, dp.y, 0.0);
            state.chi = heading(dt);
            state.phi = a + rate * dt;
            state.gamma = 0.0;
        }
    }
}

/// Bank schedule for a level turn by `theta` rad (positive is
/// counter-clockwise): roll in at the maximum rate, hold, roll out.
fn turn_phases(theta: f64, v: f64, max_bank: f64, roll_rate: f64) -> Vec<Phase> {
    let mag = theta.abs();
    // Heading change accumulated by a full roll-in.
    let ramp_turn = GRAVITY / (v * roll_rate) * -max_bank.cos().ln();
    let (peak, hold) = if mag >= 2.0 * ramp_turn {
        (max_bank, (mag - 2.0 * ramp_turn) * v / (GRAVITY * max_bank.tan()))
    } else {
        ((-mag * v * roll_rate / (2.0 * GRAVITY)).exp().acos(), 0.0)
    };
    // Left turns bank left (negative).
    let sign = -theta.signum();
    let t_ramp = peak / roll_rate;
    let mut phases = vec![Phase::Ramp {
        duration: t_ramp,
        phi0: 0.0,
        rate: sign * roll_rate,
    }];
    if hold > 0.0 {
        phases.push(Phase::Hold {
            duration: hold,
            phi: sign * peak,
        });
    }
    phases.push(Phase::Ramp {
        duration: t_ramp,
        phi0: sign * peak,
        rate: -sign * roll_rate,
    });
    phases
}

/// Distance from turn entry to the intersection of the entry and exit
/// tracks. Symmetric schedules give the same distance on the exit side.
fn tangent_distance(phases: &[Phase], theta: f64, v: f64) -> f64 {
    let mut s = Kinematic {
        pos: Vector3::zeros(),
        chi: 0.0,
        phi: 0.0,
        gamma: 0.0,
    };
    for p in phases {
        advance(&mut s, p, 0.0, p.duration(), v);
    }
    s.pos.x - s.pos.y * theta.cos() / theta.sin()
}

const MAX_TURN_DEG: f64 = 179.0;
const MAX_CLIMB_DEG: f64 = 20.0;

fn plan(mission: &Mission, params: &FlightParams) -> Result<Vec<Phase>, FlightError> {
    let v = params.airspeed;
    let max_bank = params.max_bank.to_radians();
    let roll_rate = params.max_roll_rate.to_radians();
    let wps = &mission.waypoints;
    let n = wps.len();
    let horiz = |i: usize| Vector2::new(wps[i][0], wps[i][1]);
    let dirs: Vec<Vector2<f64>> = (0..n - 1).map(|i| (horiz(i + 1) - horiz(i)).normalize()).collect();
    let lens: Vec<f64> = (0..n - 1).map(|i| (horiz(i + 1) - horiz(i)).norm()).collect();

    let mut turns: Vec<Vec<Phase>> = vec![Vec::new(); n];
    let mut tangent = vec![0.0; n];
    for i in 1..n - 1 {
        let (a, b) = (dirs[i - 1], dirs[i]);
        let theta = (a.x * b.y - a.y * b.x).atan2(a.dot(&b));
        if theta.abs() > MAX_TURN_DEG.to_radians() {
            return Err(FlightError::MissionInfeasible {
                index: i,
                reason: format!("turn of {:.1} degrees reverses the track", theta.abs().to_degrees()),
            });
        }
        if theta.abs() < 1e-9 {
            continue;
        }
        turns[i] = turn_phases(theta, v, max_bank, roll_rate);
        tangent[i] = tangent_distance(&turns[i], theta, v);
    }

    let mut phases = Vec::new();
    for i in 0..n - 1 {
        let init = if i == 0 { mission.init_leg_length } else { 0.0 };
        let straight = lens[i] - tangent[i] - tangent[i + 1];
        if straight + 1e-9 < init {
            let index = if tangent[i] > tangent[i + 1] && i > 0 { i } else { i + 1 };
            return Err(FlightError::MissionInfeasible {
                index,
                reason: format!(
                    "leg {i} is {:.1} m long but the turns need {:.1} m at {} m/s \
                     (steady turn radius {:.1} m)",
                    lens[i],
                    tangent[i] + tangent[i + 1] + init,
                    v,
                    params.min_turn_radius()
                ),
            });
        }
        if init > 0.0 {
            phases.push(Phase::Straight {
                duration: init / v,
                gamma: 0.0,
            });
        }
        let free = (straight - init).max(0.0);
        let climb = wps[i + 1][2] - wps[i][2];
        let gamma = if climb == 0.0 {
            0.0
        } else if free <= 1e-9 {
            f64::INFINITY
        } else {
            climb.atan2(free)
        };
        if gamma.abs() > MAX_CLIMB_DEG.to_radians() {
            return Err(FlightError::MissionInfeasible {
                index: i + 1,
                reason: format!("altitude change of {climb:.1} m does not fit leg {i}"),
            });
        }
        if free > 0.0 {
            phases.push(Phase::Straight {
                duration: free / (v * gamma.cos()),
                gamma,
            });
        }
        phases.extend(turns[i + 1].iter().copied());
    }
    Ok(phases)
}

/// Timestamp of sample `k` at `rate` Hz, rounded to the nearest microsecond
/// without accumulating drift.
pub fn sample_time_us(k: u64, rate: f64) -> i64 {
    if rate.fract() == 0.0 {
        let r = rate as u128;
        ((k as u128 * 2_000_000 + r) / (2 * r)) as i64
    } else {
        (k as f64 * 1.0e6 / rate).round() as i64
    }
}

/// Flies `mission` with `params` and returns samples at `params.sample_rate`.
pub fn generate_trajectory(
    mission: &Mission,
    params: &FlightParams,
) -> Result<Vec<StateSample>, FlightError> {
    mission.validate()?;
    params.validate()?;
    let v = params.airspeed;
    let phases = plan(mission, params)?;
    let total: f64 = phases.iter().map(Phase::duration).sum();

    let first = &mission.waypoints;
    let d0 = Vector2::new(first[1][0] - first[0][0], first[1][1] - first[0][1]);
    let mut state = Kinematic {
        pos: Vector3::new(first[0][0], first[0][1], first[0][2]),
        chi: d0.y.atan2(d0.x),
        phi: 0.0,
        gamma: 0.0,
    };
    let mut out = Vec::new();
    let (mut idx, mut phase_start, mut now) = (0usize, 0.0f64, 0.0f64);
    for k in 0u64.. {
        let t_us = sample_time_us(k, params.sample_rate);
        let t = t_us as f64 * 1e-6;
        if t > total + 1e-9 {
            break;
        }
        while now < t && idx < phases.len() {
            let end = phase_start + phases[idx].duration();
            let step_to = t.min(end);
            advance(&mut state, &phases[idx], now - phase_start, step_to - now, v);
            now = step_to;
            if now >= end {
                phase_start = end;
                idx += 1;
            }
        }
        let gamma = state.gamma;
        let velocity = Vector3::new(
            v * gamma.cos() * state.chi.cos(),
            v * gamma.cos() * state.chi.sin(),
            v * gamma.sin(),
        );
        out.push(StateSample {
            t_us,
            pose: Pose::new(t_us, body_attitude(state.chi, gamma, state.phi), state.pos),
            velocity,
            bank: state.phi.to_degrees(),
        });
    }
    Ok(out)
}

/// Total 3D distance between consecutive samples.
pub fn path_length(samples: &[StateSample]) -> f64 {
    samples
        .windows(2)
        .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
        .sum()
}

pub const DEFAULT_ALTITUDE: f64 = 300.0;

/// Starts at the north end, flies south past the initialization leg, turns
/// east and returns north in a zig-zag. About 3.3 km at scale 1.
pub fn preset_oscillating(scale: f64) -> Mission {
    assert!(scale > 0.0, "scale must be positive");
    let south = 900.0;
    let mut pts = vec![[0.0, 0.0], [0.0, -south], [240.0, -south]];
    for k in 1..=11 {
        let x = if k % 2 == 1 { 360.0 } else { 240.0 };
        pts.push([x, -south + 160.0 * k as f64]);
    }
    Mission {
        waypoints: pts
            .iter()
            .map(|p| [p[0] * scale, p[1] * scale, DEFAULT_ALTITUDE])
            .collect(),
        init_leg_length: 500.0 * scale,
    }
}

/// Three counter-clockwise loops drifting east after an eastbound
/// initialization leg. About 9.6 km at scale 1.
pub fn preset_three_loops(scale: f64) -> Mission {
    assert!(scale > 0.0, "scale must be positive");
    let radius = 430.0;
    let drift = 160.0;
    let init = 700.0;
    let mut waypoints = vec![[-init, 0.0]];
    let steps = 36;
    for i in 0..=steps {
        let theta = i as f64 / steps as f64 * 6.0 * PI;
        waypoints.push([drift * theta + radius * theta.sin(), radius * (1.0 - theta.cos())]);
    }
    waypoints.push([drift * 6.0 * PI + 500.0, 0.0]);
    Mission {
        waypoints: waypoints
            .iter()
            .map(|p| [p[0] * scale, p[1] * scale, 250.0])
            .collect(),
        init_leg_length: 500.0 * scale,
    }
}
