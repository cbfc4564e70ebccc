//! Ground-truth trajectories and synthetic sensor streams.
//!
//! Ground truth is itself a pair of splines (orientation + body velocity) on
//! the estimator's knot cadence, so a perfectly consistent estimator state
//! exists for every scenario: at zero noise every measurement residual
//! vanishes along the truth. Scenario attitudes are yaw-only (a level body,
//! the usual posture of a walking quadruped), which keeps the body-frame
//! gravity constant and therefore exactly representable by the gravity
//! spline.
//!
//! The world frame has z along gravity (`g = (0, 0, 9.81)`), so a level
//! stationary accelerometer reads `(0, 0, -9.81)` and climbing means
//! decreasing z.
//!
//! Sensor models:
//! - IMU: exact gyro/specific-force inversion of the residual models plus
//!   white noise, an accelerometer-bias random walk, and additive spikes at
//!   footfall events; the AHRS orientation is truth perturbed by white noise.
//! - Radar: static landmarks inside range/FoV, Doppler from the lever-arm
//!   velocity model, white noise, and a configurable fraction of dynamic
//!   outliers with offset Doppler.
//! - Legs: a trot gait; stance feet integrate the leg-velocity measurement
//!   model exactly midpoint-for-midpoint (ground-fixed feet up to the
//!   model's omitted lever-arm term, which is microscopic on straight
//!   segments), slip events drift the feet at the configured offset, and
//!   joint angles come from closed-form inverse kinematics.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BiasSample, Dataset, GravitySample, GtPose, Meta, Rates};
use crate::factors::{EstimatorState, Extrinsics, ImuSample, GRAVITY};
use crate::leg::{inverse_kinematics, LegModel, LegSample, LEG_COUNT};
use crate::radar::{RadarPoint, RadarScan};
use crate::so3;
use crate::spline::{KnotGrid, SplineR3, SplineSo3};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario '{name}'; available: {available}")]
    UnknownScenario { name: String, available: String },
    #[error("leg {leg} cannot reach its foot target at t = {t:.3} s")]
    IkUnreachable { leg: usize, t: f64 },
    #[error("invalid noise config: {0}")]
    InvalidNoise(String),
}

/// A foot-slip event: the stance feet drift so that the measured leg
/// velocity is biased by `-offset` (m/s, base-frame horizontal).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlipEvent {
    pub start: f64,
    pub duration: f64,
    pub offset: [f64; 2],
}

/// All synthesis noise magnitudes. Zero everything for exact model closure.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NoiseConfig {
    pub seed: u64,
    /// Gyro white noise per sample (rad/s).
    pub gyro_sigma: f64,
    /// Accelerometer white noise per sample (m/s^2).
    pub accel_sigma: f64,
    /// Footfall spike magnitude (m/s^2) and per-step probability.
    pub impact_magnitude: f64,
    pub impact_prob: f64,
    /// Doppler white noise per point (m/s).
    pub doppler_sigma: f64,
    /// Fraction of radar points turned into dynamic outliers, and the
    /// minimum Doppler offset applied to them (m/s).
    pub outlier_fraction: f64,
    pub outlier_offset: f64,
    /// Orientation-measurement noise (rad).
    pub orient_sigma: f64,
    /// Accelerometer-bias random walk density (m/s^2 per sqrt(s)).
    pub accel_bias_rw: f64,
    /// Gyro-bias random walk density (rad/s per sqrt(s)). The estimator
    /// deliberately does not model a gyro bias, so this drives the attitude
    /// drift that the gravity factors are there to contain.
    pub gyro_bias_rw: f64,
    pub slip_events: Vec<SlipEvent>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gyro_sigma: 0.005,
            accel_sigma: 0.05,
            impact_magnitude: 5.0,
            impact_prob: 0.3,
            doppler_sigma: 0.05,
            outlier_fraction: 0.05,
            outlier_offset: 1.5,
            orient_sigma: 0.005,
            accel_bias_rw: 0.001,
            gyro_bias_rw: 2e-4,
            slip_events: Vec::new(),
        }
    }
}

impl NoiseConfig {
    /// All magnitudes zero; measurements invert the models exactly.
    pub fn zero() -> Self {
        Self {
            seed: 0,
            gyro_sigma: 0.0,
            accel_sigma: 0.0,
            impact_magnitude: 0.0,
            impact_prob: 0.0,
            doppler_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_offset: 0.0,
            orient_sigma: 0.0,
            accel_bias_rw: 0.0,
            gyro_bias_rw: 0.0,
            slip_events: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sig = [
            self.gyro_sigma,
            self.accel_sigma,
            self.impact_magnitude,
            self.doppler_sigma,
            self.outlier_offset,
            self.orient_sigma,
            self.accel_bias_rw,
            self.gyro_bias_rw,
        ];
        if sig.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(SimError::InvalidNoise("sigmas must be nonnegative".into()));
        }
        for f in [self.impact_prob, self.outlier_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(SimError::InvalidNoise("fractions must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn slip_at(&self, t: f64) -> Vector3<f64> {
        let mut s = Vector3::zeros();
        for e in &self.slip_events {
            if t >= e.start && t < e.start + e.duration {
                s += Vector3::new(e.offset[0], e.offset[1], 0.0);
            }
        }
        s
    }
}

/// Analytic ground truth: orientation and body-velocity splines plus a dense
/// position table integrated from them.
#[derive(Debug, Clone)]
pub struct GtTrajectory {
    pub so3: SplineSo3,
    pub vel: SplineR3,
    pub duration: f64,
    table_dt: f64,
    pos: Vec<Vector3<f64>>,
    vel_world: Vec<Vector3<f64>>,
}

impl GtTrajectory {
    /// Integrates the world position from the splines on a 1 ms table.
    pub fn new(so3: SplineSo3, vel: SplineR3, duration: f64) -> Self {
        assert!(so3.grid.support_end() > duration && vel.grid.support_end() > duration);
        let table_dt = 1e-3;
        let n = (duration / table_dt).ceil() as usize + 1;
        let mut pos = Vec::with_capacity(n);
        let mut vel_world = Vec::with_capacity(n);
        let mut p = Vector3::zeros();
        let world_v = |t: f64| -> Vector3<f64> {
            so3.eval(t).unwrap() * vel.eval(t).unwrap()
        };
        let mut prev = world_v(0.0);
        pos.push(p);
        vel_world.push(prev);
        for k in 1..n {
            let t = k as f64 * table_dt;
            let cur = world_v(t.min(duration));
            p += (prev + cur) * (0.5 * table_dt);
            pos.push(p);
            vel_world.push(cur);
            prev = cur;
        }
        Self { so3, vel, duration, table_dt, pos, vel_world }
    }

    pub fn rotation(&self, t: f64) -> UnitQuaternion<f64> {
        self.so3.eval(t).unwrap()
    }

    pub fn omega(&self, t: f64) -> Vector3<f64> {
        self.so3.body_angular_velocity(t).unwrap()
    }

    pub fn body_velocity(&self, t: f64) -> Vector3<f64> {
        self.vel.eval(t).unwrap()
    }

    /// World position by cubic Hermite interpolation of the table.
    pub fn position(&self, t: f64) -> Vector3<f64> {
        let t = t.clamp(0.0, self.duration);
        let k = ((t / self.table_dt).floor() as usize).min(self.pos.len() - 2);
        let s = (t - k as f64 * self.table_dt) / self.table_dt;
        let (p0, p1) = (self.pos[k], self.pos[k + 1]);
        let (m0, m1) = (
            self.vel_world[k] * self.table_dt,
            self.vel_world[k + 1] * self.table_dt,
        );
        let s2 = s * s;
        let s3 = s2 * s;
        p0 * (2.0 * s3 - 3.0 * s2 + 1.0)
            + m0 * (s3 - 2.0 * s2 + s)
            + p1 * (-2.0 * s3 + 3.0 * s2)
            + m1 * (s3 - s2)
    }

    /// Exact specific-force value of the accelerometer model (without bias
    /// or noise): `omega x v + dv/dt - R^T g_world`.
    pub fn specific_force(&self, t: f64) -> Vector3<f64> {
        let omega = self.omega(t);
        let v = self.body_velocity(t);
        let v_dot = self.vel.deriv(t).unwrap();
        omega.cross(&v) + v_dot - self.rotation(t).inverse() * gravity_world()
    }

    /// Body-frame gravity `R^T (0, 0, 9.81)`; norm exactly 9.81.
    pub fn local_gravity(&self, t: f64) -> Vector3<f64> {
        self.rotation(t).inverse() * gravity_world()
    }

    /// Arc length of the world path.
    pub fn path_length(&self) -> f64 {
        self.pos.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// The exactly consistent estimator state for this ground truth (zero
    /// biases, identity alignment).
    pub fn truth_state(&self) -> EstimatorState {
        let grav = SplineR3::constant(self.vel.grid, Vector3::new(0.0, 0.0, GRAVITY)).unwrap();
        EstimatorState {
            so3: self.so3.clone(),
            vel: self.vel.clone(),
            grav,
            b_v: nalgebra::Vector2::zeros(),
            b_a: Vector3::zeros(),
            g_global: gravity_world(),
            r_align: UnitQuaternion::identity(),
        }
    }
}

pub fn gravity_world() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, GRAVITY)
}

/// Trot gait timing: diagonal pairs, `duty` fraction in stance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gait {
    pub frequency: f64,
    pub duty: f64,
    pub step_height: f64,
    /// Cycle phase offset per leg (FL, FR, RL, RR).
    pub phase: [f64; 4],
}

impl Default for Gait {
    fn default() -> Self {
        Self { frequency: 2.0, duty: 0.6, step_height: 0.05, phase: [0.0, 0.5, 0.5, 0.0] }
    }
}

/// Everything a scenario fixes besides the noise configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub duration: f64,
    pub walk_start: f64,
    pub walk_end: f64,
    pub gait: Gait,
    /// Base-origin height above ground (m).
    pub body_height: f64,
    pub landmark_density: f64,
    pub description: String,
}

pub fn scenario_names() -> &'static [&'static str] {
    &["flat_loop", "stair_loop", "slip_zone"]
}

/// Knot cadence shared with the estimator defaults.
const GT_KNOT_DT: f64 = 0.05;

fn smoothstep(t: f64, a: f64, b: f64) -> f64 {
    let x = ((t - a) / (b - a)).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

struct Profile {
    duration: f64,
    walk_start: f64,
    walk_end: f64,
    /// Body-frame velocity at time t.
    velocity: Box<dyn Fn(f64) -> Vector3<f64>>,
    /// Yaw rate at time t.
    yaw_rate: Box<dyn Fn(f64) -> f64>,
    landmark_density: f64,
    description: String,
}

fn profile_for(name: &str) -> Result<Profile, SimError> {
    match name {
        "flat_loop" => Ok(Profile {
            duration: 60.0,
            walk_start: 3.0,
            walk_end: 60.0,
            velocity: Box::new(|t| Vector3::new(0.75 * smoothstep(t, 3.0, 5.5), 0.0, 0.0)),
            yaw_rate: Box::new(|t| 0.1257 * smoothstep(t, 6.0, 9.0)),
            landmark_density: 0.25,
            description: "flat indoor loop, one full circle, no elevation change".into(),
        }),
        "stair_loop" => Ok(Profile {
            duration: 120.0,
            walk_start: 3.0,
            walk_end: 120.0,
            velocity: Box::new(|t| {
                let fwd = 0.55 * smoothstep(t, 3.0, 5.5);
                // Climb 3 m (z decreases) then descend back.
                let climb = 0.115 * (smoothstep(t, 20.0, 24.0) - smoothstep(t, 46.0, 50.0));
                let descend = 0.115 * (smoothstep(t, 70.0, 74.0) - smoothstep(t, 96.0, 100.0));
                Vector3::new(fwd, 0.0, -climb + descend)
            }),
            yaw_rate: Box::new(|t| (2.0 * std::f64::consts::PI / 108.0) * smoothstep(t, 6.0, 9.0)),
            landmark_density: 0.3,
            description: "loop with a 3 m climb and descent (ramped stair analogue)".into(),
        }),
        "slip_zone" => Ok(Profile {
            duration: 60.0,
            walk_start: 3.0,
            walk_end: 60.0,
            velocity: Box::new(|t| Vector3::new(0.5 * smoothstep(t, 3.0, 5.5), 0.0, 0.0)),
            yaw_rate: Box::new(|_| 0.0),
            landmark_density: 0.3,
            description: "straight corridor walk with a timed foot-slip event".into(),
        }),
        other => Err(SimError::UnknownScenario {
            name: other.into(),
            available: scenario_names().join(", "),
        }),
    }
}

/// Builds the ground-truth splines for a profile: yaw-only orientation knots
/// plus body-velocity knots on the shared cadence.
fn build_gt(p: &Profile) -> GtTrajectory {
    let n = ((p.duration / GT_KNOT_DT).ceil() as usize) + 4;
    let grid = KnotGrid::new(0.0, GT_KNOT_DT, n).unwrap();
    // Cumulative yaw on a fine grid, then sampled at the knots.
    let fine = 1e-3;
    let steps = (grid.knot_time(n - 1) / fine).ceil() as usize;
    let mut yaw = vec![0.0f64; steps + 1];
    for k in 0..steps {
        let t0 = k as f64 * fine;
        let t1 = t0 + fine;
        yaw[k + 1] = yaw[k] + 0.5 * ((p.yaw_rate)(t0) + (p.yaw_rate)(t1)) * fine;
    }
    let yaw_at = |t: f64| -> f64 {
        let x = (t / fine).min((steps - 1) as f64).max(0.0);
        let k = x.floor() as usize;
        yaw[k] + (yaw[k + 1] - yaw[k]) * (x - k as f64)
    };
    let so3_ctrl: Vec<UnitQuaternion<f64>> =
        (0..n).map(|k| so3::rot_z(yaw_at(grid.knot_time(k)))).collect();
    let vel_ctrl: Vec<Vector3<f64>> = (0..n).map(|k| (p.velocity)(grid.knot_time(k))).collect();
    let so3 = SplineSo3::new(grid, so3_ctrl).unwrap();
    let vel = SplineR3::new(grid, vel_ctrl).unwrap();
    GtTrajectory::new(so3, vel, p.duration)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

/// Synthesizes the IMU stream and the true accelerometer-bias log.
pub fn synth_imu(
    gt: &GtTrajectory,
    noise: &NoiseConfig,
    rate: f64,
    footfalls: &[f64],
) -> (Vec<ImuSample>, Vec<BiasSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x494d55);
    let mut rng_spike = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x53504b);
    let dt = 1.0 / rate;
    let n = (gt.duration * rate).floor() as usize + 1;

    // Spike schedule: each footfall may hit the next IMU sample.
    let mut spikes = vec![Vector3::zeros(); n];
    for &tf in footfalls {
        let hit: f64 = rng_spike.random_range(0.0..1.0);
        let dir = {
            let mut d = normal3(&mut rng_spike);
            d.x *= 0.3;
            d.y *= 0.3;
            if d.norm() < 1e-9 {
                d = Vector3::z();
            }
            d.normalize()
        };
        let idx = (tf * rate).ceil() as usize;
        if hit < noise.impact_prob && idx < n {
            spikes[idx] += dir * noise.impact_magnitude;
        }
    }

    let mut b_a = Vector3::zeros();
    let mut b_g = Vector3::zeros();
    let mut imu = Vec::with_capacity(n);
    let mut bias_log = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let gyro = gt.omega(t) + b_g + normal3(&mut rng) * noise.gyro_sigma;
        let accel =
            gt.specific_force(t) + b_a + normal3(&mut rng) * noise.accel_sigma + spikes[k];
        let orient = gt.rotation(t) * so3::exp(&(normal3(&mut rng) * noise.orient_sigma));
        let q = orient.quaternion();
        imu.push(ImuSample {
            stamp: t,
            gyro: [gyro.x, gyro.y, gyro.z],
            accel: [accel.x, accel.y, accel.z],
            orient: [q.w, q.i, q.j, q.k],
        });
        bias_log.push(BiasSample { stamp: t, b_a: [b_a.x, b_a.y, b_a.z] });
        b_a += normal3(&mut rng) * (noise.accel_bias_rw * dt.sqrt());
        b_g += normal3(&mut rng) * (noise.gyro_bias_rw * dt.sqrt());
    }
    (imu, bias_log)
}

/// Static landmark field: uniformly sampled points in a box around the path.
pub fn landmark_field(gt: &GtTrajectory, density: f64, seed: u64) -> Vec<Vector3<f64>> {
    let mut lo = Vector3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Vector3::new(f64::MIN, f64::MIN, f64::MIN);
    let mut t = 0.0;
    while t <= gt.duration {
        let p = gt.position(t);
        lo = lo.inf(&p);
        hi = hi.sup(&p);
        t += 0.5;
    }
    // Inflate: corridor walls around the path, floor-to-overhead in z
    // (z points down, so "overhead" is negative).
    lo += Vector3::new(-8.0, -8.0, -2.0);
    hi += Vector3::new(8.0, 8.0, 0.8);
    let vol = (hi - lo).iter().product::<f64>().abs();
    let count = ((density * vol) as usize).clamp(50, 6000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c414e44);
    (0..count)
        .map(|_| {
            Vector3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            )
        })
        .collect()
}

/// Radar field-of-view and range limits (radar frame, x forward).
const RADAR_RANGE: (f64, f64) = (0.4, 11.0);
const RADAR_AZ_LIMIT: f64 = 60.0 * std::f64::consts::PI / 180.0;
const RADAR_EL_LIMIT: f64 = 20.0 * std::f64::consts::PI / 180.0;
const RADAR_MAX_POINTS: usize = 64;

/// Synthesizes Doppler scans from static landmarks.
pub fn synth_radar(
    gt: &GtTrajectory,
    landmarks: &[Vector3<f64>],
    ext: &Extrinsics,
    noise: &NoiseConfig,
    rate: f64,
) -> Vec<RadarScan> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x524144);
    let r_ir = ext.r_imu_radar();
    let t_ir = ext.t_imu_radar_vec();
    let n = (gt.duration * rate).floor() as usize + 1;
    let mut scans = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / rate;
        let r_wi = gt.rotation(t);
        let p_w = gt.position(t);
        let r_wr = r_wi * r_ir;
        let p_radar = p_w + r_wi * t_ir;
        let v_radar = r_ir.inverse() * (gt.body_velocity(t) + gt.omega(t).cross(&t_ir));

        let mut visible: Vec<(f64, Vector3<f64>)> = landmarks
            .iter()
            .filter_map(|lm| {
                let local = r_wr.inverse() * (lm - p_radar);
                let range = local.norm();
                if range < RADAR_RANGE.0 || range > RADAR_RANGE.1 {
                    return None;
                }
                if f64::atan2(local.y, local.x).abs() > RADAR_AZ_LIMIT {
                    return None;
                }
                if (local.z / range).asin().abs() > RADAR_EL_LIMIT {
                    return None;
                }
                Some((range, local))
            })
            .collect();
        visible.sort_by(|a, b| a.0.total_cmp(&b.0));
        visible.truncate(RADAR_MAX_POINTS);

        let points = visible
            .into_iter()
            .map(|(range, local)| {
                let mut doppler = -(local / range).dot(&v_radar);
                let g: f64 = StandardNormal.sample(&mut rng);
                doppler += noise.doppler_sigma * g;
                let u: f64 = rng.random_range(0.0..1.0);
                if u < noise.outlier_fraction {
                    let scale: f64 = rng.random_range(1.0..1.5);
                    let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                    doppler += sign * noise.outlier_offset * scale;
                }
                RadarPoint {
                    p: [local.x, local.y, local.z],
                    doppler,
                    intensity: Some(20.0 / (range * range)),
                }
            })
            .collect();
        scans.push(RadarScan { stamp: t, points });
    }
    scans
}

/// Leg synthesis output: encoder samples plus footfall (touchdown) times.
pub struct LegSynthesis {
    pub samples: Vec<LegSample>,
    pub footfalls: Vec<f64>,
}

/// Synthesizes joint-encoder samples for a trot on the ground truth.
///
/// Stance feet integrate the base-velocity measurement model at interval
/// midpoints, so consecutive-pair differencing reproduces the model value at
/// the pair midpoint exactly; slip events add the configured drift.
pub fn synth_leg(
    gt: &GtTrajectory,
    model: &LegModel,
    ext: &Extrinsics,
    gait: &Gait,
    noise: &NoiseConfig,
    rate: f64,
    walk_start: f64,
    walk_end: f64,
    body_height: f64,
) -> Result<LegSynthesis, SimError> {
    let dt = 1.0 / rate;
    let n = (gt.duration * rate).floor() as usize + 1;
    let r_ib = ext.r_imu_base();
    let t_ib = ext.t_imu_base_vec();
    let base_vel = |t: f64| -> Vector3<f64> {
        let t = t.min(gt.duration);
        r_ib.inverse() * (gt.body_velocity(t) + gt.omega(t).cross(&t_ib))
    };
    let nominal = |leg: usize| -> Vector3<f64> {
        model.hip(leg) + Vector3::new(0.0, model.side_sign[leg] * model.l1, -body_height)
    };
    let cycle = 1.0 / gait.frequency;
    let stance_dur = gait.duty * cycle;
    // Gait phase in [0, 1): stance while phase < duty.
    let phase_of = |t: f64, leg: usize| -> f64 {
        (((t - walk_start) / cycle - gait.phase[leg]).rem_euclid(1.0) + 1.0).rem_euclid(1.0)
    };
    let walking = |t: f64| t >= walk_start && t < walk_end;
    let in_stance = |t: f64, leg: usize| -> bool { !walking(t) || phase_of(t, leg) < gait.duty };

    let mut foot = [Vector3::zeros(); LEG_COUNT];
    let mut stance_prev = [true; LEG_COUNT];
    let mut swing_from = [Vector3::zeros(); LEG_COUNT];
    for leg in 0..LEG_COUNT {
        foot[leg] = nominal(leg);
        swing_from[leg] = foot[leg];
    }
    let mut samples = Vec::with_capacity(n);
    let mut footfalls = Vec::new();

    for k in 0..n {
        let t = k as f64 * dt;
        let mut joints = [[0.0; 3]; LEG_COUNT];
        let mut contact = [false; LEG_COUNT];
        for leg in 0..LEG_COUNT {
            let stance = in_stance(t, leg);
            if stance {
                if !stance_prev[leg] {
                    // Touchdown: place the foot half a stance ahead of
                    // nominal so the sweep stays centered under the hip.
                    let lead = base_vel(t + 0.5 * stance_dur) * (0.5 * stance_dur);
                    foot[leg] = nominal(leg) + Vector3::new(lead.x, lead.y, 0.0);
                    if walking(t) {
                        footfalls.push(t);
                    }
                } else if k > 0 {
                    // Exact midpoint integration of the measurement model.
                    let t_mid = t - 0.5 * dt;
                    foot[leg] -= (base_vel(t_mid) - noise.slip_at(t_mid)) * dt;
                }
                contact[leg] = true;
            } else {
                if stance_prev[leg] {
                    swing_from[leg] = foot[leg];
                }
                // Swing: smooth reach toward the predicted touchdown target.
                let phase = phase_of(t, leg);
                let s = ((phase - gait.duty) / (1.0 - gait.duty)).clamp(0.0, 1.0);
                let t_td = t + (1.0 - s) * (1.0 - gait.duty) * cycle;
                let lead = base_vel(t_td + 0.5 * stance_dur) * (0.5 * stance_dur);
                let target = nominal(leg) + Vector3::new(lead.x, lead.y, 0.0);
                let blend = s * s * (3.0 - 2.0 * s);
                foot[leg] = swing_from[leg] + (target - swing_from[leg]) * blend
                    + Vector3::new(0.0, 0.0, gait.step_height * (std::f64::consts::PI * s).sin());
            }
            stance_prev[leg] = stance;
            let alpha = inverse_kinematics(model, leg, &foot[leg])
                .map_err(|_| SimError::IkUnreachable { leg, t })?;
            joints[leg] = [alpha.x, alpha.y, alpha.z];
        }
        samples.push(LegSample { stamp: t, joints, contact });
    }
    Ok(LegSynthesis { samples, footfalls })
}

/// Default sensor mounting used by all scenarios: the IMU is z-down while
/// the leg base frame is z-up, and both radar and base carry lever arms.
pub fn default_extrinsics() -> Extrinsics {
    Extrinsics {
        q_imu_radar: [1.0, 0.0, 0.0, 0.0],
        t_imu_radar: [0.15, 0.0, 0.08],
        // Base-to-IMU: a half-turn about x (z-up base vs z-down IMU).
        q_imu_base: [0.0, 1.0, 0.0, 0.0],
        t_imu_base: [-0.05, 0.0, 0.12],
    }
}

/// A generated dataset plus its ground truth.
pub struct SimOutput {
    pub dataset: Dataset,
    pub gt: GtTrajectory,
    pub info: ScenarioInfo,
}

/// Generates a complete synthetic dataset for a named scenario.
///
/// `slip_zone` injects a default 5 s, 0.05 m/s slip event when the noise
/// config does not already carry one.
pub fn make_scenario(name: &str, noise: &NoiseConfig) -> Result<SimOutput, SimError> {
    noise.validate()?;
    let profile = profile_for(name)?;
    let mut noise = noise.clone();
    if name == "slip_zone" && noise.slip_events.is_empty() {
        noise.slip_events.push(SlipEvent { start: 25.0, duration: 5.0, offset: [0.05, 0.0] });
    }
    let gt = build_gt(&profile);
    let rates = Rates::default();
    let ext = default_extrinsics();
    let leg_model = LegModel::default();
    let gait = Gait::default();
    let body_height = 0.48;

    let legs = synth_leg(
        &gt,
        &leg_model,
        &ext,
        &gait,
        &noise,
        rates.leg,
        profile.walk_start,
        profile.walk_end,
        body_height,
    )?;
    let (imu, bias_log) = synth_imu(&gt, &noise, rates.imu, &legs.footfalls);
    let landmarks = landmark_field(&gt, profile.landmark_density, noise.seed);
    let radar = synth_radar(&gt, &landmarks, &ext, &noise, rates.radar);

    // Ground-truth exports at the IMU rate.
    let n = (gt.duration * rates.imu).floor() as usize + 1;
    let mut gt_poses = Vec::with_capacity(n);
    let mut gt_gravity = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / rates.imu;
        let p = gt.position(t);
        let q = gt.rotation(t).quaternion().clone();
        gt_poses.push(GtPose { stamp: t, p: [p.x, p.y, p.z], q: [q.w, q.i, q.j, q.k] });
        let g = gt.local_gravity(t);
        gt_gravity.push(GravitySample { stamp: t, g: [g.x, g.y, g.z] });
    }

    let info = ScenarioInfo {
        name: name.to_string(),
        duration: profile.duration,
        walk_start: profile.walk_start,
        walk_end: profile.walk_end,
        gait,
        body_height,
        landmark_density: profile.landmark_density,
        description: profile.description.clone(),
    };
    let dataset = Dataset {
        meta: Meta {
            scenario: name.to_string(),
            seed: noise.seed,
            rates,
            extrinsics: ext,
            leg_model,
            noise,
            description: profile.description,
        },
        imu,
        radar,
        leg: legs.samples,
        gt: Some(gt_poses),
        gt_gravity: Some(gt_gravity),
        gt_bias: Some(bias_log),
    };
    Ok(SimOutput { dataset, gt, info })
}
