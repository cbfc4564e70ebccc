//! Residual functions of the factor graph.
//!
//! Every residual maps the current [`EstimatorState`] plus one measurement to
//! a vector that vanishes on a consistent state. The sliding-window solver
//! wraps these kernels; the free functions here are the reference definitions
//! and are pure, so they may be evaluated in parallel across measurements.
//!
//! Conventions: the global frame has its z axis along gravity, so
//! `g_global = (0, 0, 9.81)` and a level stationary accelerometer reads
//! `(0, 0, -9.81)`. Velocity and gravity splines live in the (aligned) IMU
//! body frame; `r_align` is the z-axis alignment rotation estimated once at
//! initialization and held constant afterwards.

use nalgebra::{SVector, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::leg::LegVelocityMeasurement;
use crate::radar::RadarScan;
use crate::so3;
use crate::spline::{SplineError, SplineR3, SplineSo3};

/// Standard gravity magnitude used throughout.
pub const GRAVITY: f64 = 9.81;

/// One IMU reading: rate gyro, accelerometer, and the AHRS orientation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImuSample {
    pub stamp: f64,
    pub gyro: [f64; 3],
    pub accel: [f64; 3],
    /// Orientation measurement as unit quaternion `[w, x, y, z]`.
    pub orient: [f64; 4],
}

impl ImuSample {
    pub fn gyro_vec(&self) -> Vector3<f64> {
        Vector3::from(self.gyro)
    }
    pub fn accel_vec(&self) -> Vector3<f64> {
        Vector3::from(self.accel)
    }
    pub fn orient_quat(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            self.orient[0],
            self.orient[1],
            self.orient[2],
            self.orient[3],
        ))
    }
}

/// Sensor-to-IMU rigid transforms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Radar-in-IMU rotation, unit quaternion `[w, x, y, z]`.
    pub q_imu_radar: [f64; 4],
    /// Radar-in-IMU translation (m).
    pub t_imu_radar: [f64; 3],
    /// Base-in-IMU rotation, unit quaternion `[w, x, y, z]`.
    pub q_imu_base: [f64; 4],
    /// Base-in-IMU translation (m).
    pub t_imu_base: [f64; 3],
}

fn quat_from(q: &[f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            q_imu_radar: [1.0, 0.0, 0.0, 0.0],
            t_imu_radar: [0.0; 3],
            q_imu_base: [1.0, 0.0, 0.0, 0.0],
            t_imu_base: [0.0; 3],
        }
    }

    pub fn r_imu_radar(&self) -> UnitQuaternion<f64> {
        quat_from(&self.q_imu_radar)
    }
    pub fn t_imu_radar_vec(&self) -> Vector3<f64> {
        Vector3::from(self.t_imu_radar)
    }
    pub fn r_imu_base(&self) -> UnitQuaternion<f64> {
        quat_from(&self.q_imu_base)
    }
    pub fn t_imu_base_vec(&self) -> Vector3<f64> {
        Vector3::from(self.t_imu_base)
    }

    pub fn validate(&self) -> Result<(), String> {
        for q in [&self.q_imu_radar, &self.q_imu_base] {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(format!("extrinsic quaternion norm {n} is not 1"));
            }
        }
        Ok(())
    }
}

/// Scalar weights of the window objective plus the Cauchy scale applied to
/// per-point radar residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorWeights {
    pub gyro: f64,
    pub accel: f64,
    pub leg: f64,
    pub radar: f64,
    pub gravity: f64,
    pub s2: f64,
    pub bias: f64,
    pub prior: f64,
    pub end_tail: f64,
    /// Cauchy loss scale for radar residuals, m/s.
    pub cauchy_scale: f64,
}

impl Default for FactorWeights {
    fn default() -> Self {
        Self {
            gyro: 4.0e3,
            accel: 4.0e2,
            leg: 2.5e3,
            radar: 4.0e2,
            gravity: 4.0e2,
            s2: 4.0e2,
            bias: 1.0,
            prior: 1.0,
            end_tail: 1.0e2,
            cauchy_scale: 0.3,
        }
    }
}

impl FactorWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.gyro, self.accel, self.leg, self.radar, self.gravity, self.s2, self.bias,
            self.prior, self.end_tail, self.cauchy_scale,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("factor weights must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// Full optimizable state: three spline control-point sets, the horizontal
/// leg-velocity bias, the accelerometer bias, the global gravity vector, and
/// the constant alignment rotation.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub so3: SplineSo3,
    pub vel: SplineR3,
    pub grav: SplineR3,
    /// Horizontal leg-velocity bias (m/s).
    pub b_v: Vector2<f64>,
    /// Accelerometer bias (m/s^2).
    pub b_a: Vector3<f64>,
    /// Global gravity; exactly `(0, 0, 9.81)` after alignment.
    pub g_global: Vector3<f64>,
    /// Z-axis alignment rotation, estimated once and then held constant.
    pub r_align: UnitQuaternion<f64>,
}

impl EstimatorState {
    /// Body-frame angular velocity of the orientation spline at `t`.
    pub fn omega(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        self.so3.body_angular_velocity(t)
    }
}

/// Gyroscope residual `vee(R^T dR/dt) - gyro`.
pub fn gyro_residual(state: &EstimatorState, s: &ImuSample) -> Result<Vector3<f64>, SplineError> {
    Ok(state.omega(s.stamp)? - s.gyro_vec())
}

/// Accelerometer residual
/// `(omega x v + dv/dt - R^T g_global) + b_a - accel`.
pub fn accel_residual(state: &EstimatorState, s: &ImuSample) -> Result<Vector3<f64>, SplineError> {
    let t = s.stamp;
    let omega = state.omega(t)?;
    let v = state.vel.eval(t)?;
    let v_dot = state.vel.deriv(t)?;
    let r = state.so3.eval(t)?;
    let specific_force = omega.cross(&v) + v_dot - r.inverse() * state.g_global;
    Ok(specific_force + state.b_a - s.accel_vec())
}

/// Leg kinematics residual
/// `(R_IB)^T (R_align v(t) + omega x t_IB) - v_meas - (b_vx, b_vy, 0)`.
pub fn leg_residual(
    state: &EstimatorState,
    m: &LegVelocityMeasurement,
    ext: &Extrinsics,
) -> Result<Vector3<f64>, SplineError> {
    let t = m.stamp;
    let omega = state.omega(t)?;
    let v = state.vel.eval(t)?;
    let predicted = ext.r_imu_base().inverse()
        * (state.r_align * v + omega.cross(&ext.t_imu_base_vec()));
    Ok(predicted - m.velocity() - Vector3::new(state.b_v.x, state.b_v.y, 0.0))
}

/// Per-point radar Doppler residuals
/// `-(p_hat)^T (R_Ir)^T R_align (v(t) + omega x t_Ir) - doppler`.
///
/// Returned per point so the solver can apply its robust loss individually;
/// an empty scan yields an empty vector.
pub fn radar_residuals(
    state: &EstimatorState,
    scan: &RadarScan,
    ext: &Extrinsics,
) -> Result<Vec<f64>, SplineError> {
    if scan.points.is_empty() {
        return Ok(Vec::new());
    }
    let t = scan.stamp;
    let omega = state.omega(t)?;
    let v = state.vel.eval(t)?;
    // Radar-frame velocity under the alignment convention of the state.
    let v_radar =
        ext.r_imu_radar().inverse() * (state.r_align * (v + omega.cross(&ext.t_imu_radar_vec())));
    Ok(scan
        .points
        .iter()
        .map(|p| {
            let dir = p.position();
            -dir.normalize().dot(&v_radar) - p.doppler
        })
        .collect())
}

/// Velocity-aware gravity residual for one IMU sample pair `(i, j)`:
/// `g(t_i) - (R_i^T R_j v(t_j) - v(t_i) - beta) / (t_j - t_i)` with
/// `beta = integral of R_i^T R_m(t) (accel - b_a) dt` over `[t_i, t_j]`,
/// evaluated by trapezoidal quadrature on the samples between `i` and `j`.
pub fn gravity_pair_residual(
    state: &EstimatorState,
    imu: &[ImuSample],
    i: usize,
    j: usize,
) -> Result<Vector3<f64>, SplineError> {
    assert!(j > i && j < imu.len(), "pair indices must be ordered and in range");
    let (t_i, t_j) = (imu[i].stamp, imu[j].stamp);
    let r_i = imu[i].orient_quat();
    let mut beta = Vector3::zeros();
    for k in i..j {
        let h = imu[k + 1].stamp - imu[k].stamp;
        let f_k = r_i.inverse() * imu[k].orient_quat() * (imu[k].accel_vec() - state.b_a);
        let f_k1 = r_i.inverse() * imu[k + 1].orient_quat() * (imu[k + 1].accel_vec() - state.b_a);
        beta += (f_k + f_k1) * (0.5 * h);
    }
    let v_i = state.vel.eval(t_i)?;
    let v_j = state.vel.eval(t_j)?;
    let rotated = r_i.inverse() * imu[j].orient_quat() * v_j;
    let g_obs = (rotated - v_i - beta) / (t_j - t_i);
    Ok(state.grav.eval(t_i)? - g_obs)
}

/// Soft sphere-constraint residual `dg/dt + omega x g`, the transport
/// equation a body-frame gravity vector of constant norm must satisfy.
pub fn gravity_transport_residual(
    state: &EstimatorState,
    t: f64,
) -> Result<Vector3<f64>, SplineError> {
    let g = state.grav.eval(t)?;
    let g_dot = state.grav.deriv(t)?;
    Ok(g_dot + state.omega(t)?.cross(&g))
}

/// Random-walk residual stacking `b_a - b_a_prev` over `b_v - b_v_prev`.
pub fn bias_walk_residual(
    b_a: &Vector3<f64>,
    b_v: &Vector2<f64>,
    b_a_prev: &Vector3<f64>,
    b_v_prev: &Vector2<f64>,
) -> SVector<f64, 5> {
    let mut r = SVector::<f64, 5>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(b_a - b_a_prev));
    r.fixed_rows_mut::<2>(3).copy_from(&(b_v - b_v_prev));
    r
}

/// End-tail residual: second difference of the last three velocity control
/// points stacked over `Log(R_{l-2}^T R_{l-3} R_{l-2}^T R_{l-1})`; both parts
/// vanish on constant-increment tails.
pub fn end_tail_residual(state: &EstimatorState) -> SVector<f64, 6> {
    let vc = &state.vel.ctrl;
    let rc = &state.so3.ctrl;
    let m = vc.len();
    let l = rc.len();
    assert!(m >= 3 && l >= 3, "end tail needs at least three control points");
    let dv = vc[m - 1] - 2.0 * vc[m - 2] + vc[m - 3];
    let q = rc[l - 2].inverse() * rc[l - 3] * rc[l - 2].inverse() * rc[l - 1];
    let dr = so3::log(&q);
    let mut r = SVector::<f64, 6>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&dv);
    r.fixed_rows_mut::<3>(3).copy_from(&dr);
    r
}

/// Post-optimization residual `R g_local - g_global` used to refine
/// marginalized rotations; invariant to rotations about the gravity axis.
pub fn gravity_alignment_residual(
    r: &UnitQuaternion<f64>,
    g_local: &Vector3<f64>,
    g_global: &Vector3<f64>,
) -> Vector3<f64> {
    r * g_local - g_global
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leg::LegVelocityMeasurement;
    use crate::radar::{doppler_predict, RadarPoint};
    use crate::spline::KnotGrid;
    use approx::assert_relative_eq;

    fn grid() -> KnotGrid {
        KnotGrid::new(0.0, 0.1, 8).unwrap()
    }

    /// Stationary level state: identity rotations, zero velocity, gravity
    /// spline at (0, 0, 9.81).
    fn stationary_state() -> EstimatorState {
        EstimatorState {
            so3: SplineSo3::constant(grid(), UnitQuaternion::identity()).unwrap(),
            vel: SplineR3::constant(grid(), Vector3::zeros()).unwrap(),
            grav: SplineR3::constant(grid(), Vector3::new(0.0, 0.0, GRAVITY)).unwrap(),
            b_v: Vector2::zeros(),
            b_a: Vector3::zeros(),
            g_global: Vector3::new(0.0, 0.0, GRAVITY),
            r_align: UnitQuaternion::identity(),
        }
    }

    fn z_ramp_state(theta_per_knot: f64) -> EstimatorState {
        let ctrl: Vec<_> = (0..8).map(|i| so3::rot_z(theta_per_knot * i as f64)).collect();
        EstimatorState {
            so3: SplineSo3::new(grid(), ctrl).unwrap(),
            ..stationary_state()
        }
    }

    fn imu(stamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> ImuSample {
        ImuSample {
            stamp,
            gyro: [gyro.x, gyro.y, gyro.z],
            accel: [accel.x, accel.y, accel.z],
            orient: [1.0, 0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn gyro_residual_examples() {
        let state = stationary_state();
        let r = gyro_residual(&state, &imu(0.2, Vector3::zeros(), Vector3::zeros())).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-15);

        // theta = 0.1 per 0.1 s knot: omega = (0, 0, 1).
        let state = z_ramp_state(0.1);
        let r = gyro_residual(&state, &imu(0.25, Vector3::new(0.0, 0.0, 1.0), Vector3::zeros()))
            .unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-12);
        let r = gyro_residual(&state, &imu(0.25, Vector3::new(0.0, 0.0, 0.9), Vector3::zeros()))
            .unwrap();
        assert_relative_eq!(r, Vector3::new(0.0, 0.0, 0.1), epsilon = 1e-12);
    }

    #[test]
    fn accel_residual_stationary_sign_convention() {
        let state = stationary_state();
        let s = imu(0.3, Vector3::zeros(), Vector3::new(0.0, 0.0, -GRAVITY));
        let r = accel_residual(&state, &s).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn accel_residual_coriolis_term() {
        // v = (1,0,0), omega = (0,0,1), level R: zero iff accel = (0,1,-9.81).
        let mut state = z_ramp_state(0.1);
        state.vel = SplineR3::constant(grid(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        // Use t where the z-ramp attitude is level enough in roll/pitch: the
        // ramp is yaw-only, so R^T g_global is exactly (0,0,9.81) everywhere.
        let s = imu(0.25, Vector3::zeros(), Vector3::new(0.0, 1.0, -GRAVITY));
        let r = accel_residual(&state, &s).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn leg_residual_bias_and_lever_arm() {
        let mut state = stationary_state();
        state.vel = SplineR3::constant(grid(), Vector3::new(0.4, 0.0, 0.0)).unwrap();
        let ext = Extrinsics::identity();
        let m = LegVelocityMeasurement {
            stamp: 0.3,
            v: [0.4, 0.0, 0.0],
            n_contact: 2,
            valid: true,
        };
        let r = leg_residual(&state, &m, &ext).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-12);

        // A constant slip absorbed by the bias.
        state.b_v = Vector2::new(0.05, 0.0);
        let m_slipped = LegVelocityMeasurement { v: [0.35, 0.0, 0.0], ..m.clone() };
        let r = leg_residual(&state, &m_slipped, &ext).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-12);

        // Lever arm: omega = (0, 1, 0), t_IB = (0, 0, -0.1) adds
        // omega x t_IB = (-0.1, 0, 0), verified against the cross product.
        let mut state = z_ramp_state(0.0);
        let rot_y_ramp: Vec<_> = (0..8).map(|i| so3::rot_y(0.1 * i as f64)).collect();
        state.so3 = SplineSo3::new(grid(), rot_y_ramp).unwrap();
        state.vel = SplineR3::constant(grid(), Vector3::new(0.4, 0.0, 0.0)).unwrap();
        state.b_v = Vector2::zeros();
        let ext = Extrinsics {
            t_imu_base: [0.0, 0.0, -0.1],
            ..Extrinsics::identity()
        };
        let omega = state.omega(0.3).unwrap();
        let expected = omega.cross(&Vector3::new(0.0, 0.0, -0.1));
        let m = LegVelocityMeasurement { stamp: 0.3, v: [0.4, 0.0, 0.0], n_contact: 1, valid: true };
        let r = leg_residual(&state, &m, &ext).unwrap();
        assert_relative_eq!(r, expected, epsilon = 1e-12);
        assert_relative_eq!(expected, Vector3::new(-0.1, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn leg_residual_bias_shift_identity() {
        // Adding c to b_v.x and subtracting c from the measurement x leaves
        // the residual unchanged, exactly.
        let mut state = stationary_state();
        state.vel = SplineR3::constant(grid(), Vector3::new(0.3, -0.1, 0.05)).unwrap();
        let ext = Extrinsics::identity();
        let m = LegVelocityMeasurement { stamp: 0.22, v: [0.31, -0.12, 0.04], n_contact: 2, valid: true };
        let r0 = leg_residual(&state, &m, &ext).unwrap();
        let c = 0.17;
        state.b_v.x += c;
        let m_shift = LegVelocityMeasurement { v: [0.31 - c, -0.12, 0.04], ..m };
        let r1 = leg_residual(&state, &m_shift, &ext).unwrap();
        assert_relative_eq!(r0, r1, epsilon = 1e-15);
    }

    #[test]
    fn radar_residuals_zero_velocity_and_consistency() {
        let state = stationary_state();
        let ext = Extrinsics::identity();
        let scan = RadarScan {
            stamp: 0.3,
            points: vec![
                RadarPoint { p: [5.0, 0.0, 0.0], doppler: -0.7, intensity: None },
                RadarPoint { p: [0.0, 4.0, 1.0], doppler: 0.2, intensity: None },
            ],
        };
        // v = 0, omega = 0: residual is -doppler.
        let r = radar_residuals(&state, &scan, &ext).unwrap();
        assert_relative_eq!(r[0], 0.7, epsilon = 1e-15);
        assert_relative_eq!(r[1], -0.2, epsilon = 1e-15);

        // Consistent Doppler from the same model gives zero residuals.
        let mut state = state;
        state.vel = SplineR3::constant(grid(), Vector3::new(1.0, -0.5, 0.2)).unwrap();
        let v = state.vel.eval(0.3).unwrap();
        let points: Vec<RadarPoint> = [[6.0, 1.0, 0.5], [1.0, -4.0, 0.2], [2.0, 2.0, 3.0]]
            .iter()
            .map(|p| {
                let pos = Vector3::from(*p);
                RadarPoint {
                    p: *p,
                    doppler: doppler_predict(&pos, &v).unwrap(),
                    intensity: None,
                }
            })
            .collect();
        let scan = RadarScan { stamp: 0.3, points };
        for e in radar_residuals(&state, &scan, &ext).unwrap() {
            assert!(e.abs() <= 1e-12);
        }
        // Empty scan is skipped.
        let empty = RadarScan { stamp: 0.3, points: vec![] };
        assert!(radar_residuals(&state, &empty, &ext).unwrap().is_empty());
    }

    #[test]
    fn gravity_pair_residual_stationary() {
        // Exact stationary measurements: residual = g(t_i) - (0, 0, 9.81).
        let state = stationary_state();
        let imu: Vec<ImuSample> = (0..15)
            .map(|k| imu(0.01 * k as f64, Vector3::zeros(), Vector3::new(0.0, 0.0, -GRAVITY)))
            .collect();
        let r = gravity_pair_residual(&state, &imu, 2, 12).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-12);

        // Offsetting b_a and the measurements together changes nothing.
        let mut state2 = stationary_state();
        let delta = Vector3::new(0.03, -0.02, 0.05);
        state2.b_a += delta;
        let imu2: Vec<ImuSample> = imu
            .iter()
            .map(|s| ImuSample {
                accel: [s.accel[0] + delta.x, s.accel[1] + delta.y, s.accel[2] + delta.z],
                ..s.clone()
            })
            .collect();
        let r2 = gravity_pair_residual(&state2, &imu2, 2, 12).unwrap();
        assert_relative_eq!(r2, r, epsilon = 1e-12);
    }

    #[test]
    fn gravity_transport_residual_cases() {
        // Constant g, omega = 0.
        let state = stationary_state();
        let r = gravity_transport_residual(&state, 0.25).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-15);

        // Yaw ramp with g along z: transport-consistent, still zero.
        let state = z_ramp_state(0.05);
        let r = gravity_transport_residual(&state, 0.31).unwrap();
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-12);

        // Norm drift at (0, 0, 0.1) per second with omega = 0.
        let mut state = stationary_state();
        let ctrl: Vec<_> = (0..8)
            .map(|i| Vector3::new(0.0, 0.0, GRAVITY + 0.1 * 0.1 * i as f64))
            .collect();
        state.grav = SplineR3::new(grid(), ctrl).unwrap();
        let r = gravity_transport_residual(&state, 0.3).unwrap();
        assert_relative_eq!(r, Vector3::new(0.0, 0.0, 0.1), epsilon = 1e-12);
    }

    #[test]
    fn bias_walk_and_end_tail() {
        let r = bias_walk_residual(
            &Vector3::new(0.01, 0.0, 0.0),
            &Vector2::new(0.0, 0.02),
            &Vector3::zeros(),
            &Vector2::zeros(),
        );
        assert_relative_eq!(r[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(r[4], 0.02, epsilon = 1e-15);

        // Linear velocity ramp + constant angular increment: both parts vanish.
        let mut state = z_ramp_state(0.07);
        let ctrl: Vec<_> = (0..8).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect();
        state.vel = SplineR3::new(grid(), ctrl).unwrap();
        let r = end_tail_residual(&state);
        assert!(r.norm() <= 1e-12);

        // Perturbing the last velocity control point by delta shows up as delta.
        let delta = Vector3::new(0.0, 0.03, 0.0);
        let n = state.vel.ctrl.len();
        state.vel.ctrl[n - 1] += delta;
        let r = end_tail_residual(&state);
        assert_relative_eq!(Vector3::new(r[0], r[1], r[2]), delta, epsilon = 1e-14);
    }

    #[test]
    fn gravity_alignment_residual_cases() {
        let g = Vector3::new(0.0, 0.0, GRAVITY);
        let r = gravity_alignment_residual(&UnitQuaternion::identity(), &g, &g);
        assert_relative_eq!(r, Vector3::zeros(), epsilon = 1e-15);

        // g_local = R^T g_global for any R.
        let q = so3::exp(&Vector3::new(0.2, -0.4, 0.9));
        let r = gravity_alignment_residual(&q, &(q.inverse() * g), &g);
        assert!(r.norm() <= 1e-12);

        // 1 degree of roll error: |residual| ~ 9.81 sin(1 deg).
        let q = so3::rot_x(1.0_f64.to_radians());
        let r = gravity_alignment_residual(&q, &g, &g);
        assert_relative_eq!(r.norm(), GRAVITY * 1.0_f64.to_radians().sin(), epsilon = 1e-4);

        // Yaw nullspace: rotating about g_global leaves the residual alone.
        let g_local = Vector3::new(1.0, 0.5, 9.7);
        let base = gravity_alignment_residual(&q, &g_local, &g);
        let yawed = so3::rot_z(0.8) * q;
        let r = gravity_alignment_residual(&yawed, &g_local, &g);
        assert_relative_eq!(r.norm(), base.norm(), epsilon = 1e-12);
    }
}
