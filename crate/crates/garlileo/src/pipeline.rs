//! End-to-end estimator: initialization, per-radar-frame sliding-window
//! optimization with Schur-complement marginalization, gravity-based
//! rotation refinement of frozen knots, and dead-reckoned positions.
//!
//! The estimator is a single sequential state machine: [`run`] consumes a
//! time-sorted dataset and is deterministic given the dataset and config.
//! Each incoming radar frame extends the three splines (orientation,
//! ego-velocity, local gravity) to cover its stamp, marginalizes the control
//! points and superseded bias blocks that slid out of the window, solves the
//! window objective, and finally integrates position through the rotated
//! velocity spline.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DVector, Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::factors::{EstimatorState, Extrinsics, FactorWeights, ImuSample, GRAVITY};
use crate::leg::{leg_velocity, LegError, LegVelocityMeasurement};
use crate::radar::{estimate_ego_velocity, EgoVelocityEstimate, RadarScan, RansacConfig};
use crate::so3;
use crate::solver::{
    marginalize, solve, Factor, Loss, ParamBlock, PriorBlock, PriorFactor, Problem, SolveOptions,
    SolverError,
};
use crate::spline::{
    r3_segment_deriv, r3_segment_value, so3_segment_omega, so3_segment_value,
    KnotGrid, SplineError, SplineR3, SplineSo3,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("initialization failed at stage '{stage}': {reason}")]
    InitFailed { stage: &'static str, reason: String },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Leg(#[from] LegError),
    #[error("trajectory integration gap at t = {t}")]
    CoverageGap { t: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// One pose of an estimated or ground-truth trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub stamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

/// Timestamped poses with strictly increasing stamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Levenberg-Marquardt tuning for the per-frame window solves.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverTuning {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub tol_dx: f64,
    pub tol_cost: f64,
}

impl Default for SolverTuning {
    fn default() -> Self {
        Self { max_iters: 8, lambda_init: 1e-4, tol_dx: 1e-10, tol_cost: 1e-8 }
    }
}

/// Diagonal standard deviations of the gauge-anchoring prior placed on the
/// blocks of the first optimization window.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InitPriorSigma {
    pub rot: f64,
    pub vel: f64,
    pub grav: f64,
}

impl Default for InitPriorSigma {
    fn default() -> Self {
        Self { rot: 0.05, vel: 0.1, grav: 0.5 }
    }
}

/// Full estimator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Knot spacing shared by the three splines (s).
    pub knot_dt: f64,
    /// Sliding-window length (s).
    pub window: f64,
    /// Initialization window length (s).
    pub init_window: f64,
    pub weights: FactorWeights,
    /// Stationary test: |mean v| below this (m/s) ...
    pub stationary_tau1: f64,
    /// ... and trace of the velocity variance below this ((m/s)^2).
    pub stationary_tau2: f64,
    /// Stationary gravity-initialization weights (accelerometer mean prior
    /// and dynamic term).
    pub init_gravity_w1: f64,
    pub init_gravity_w2: f64,
    /// Time gap between the samples of one gravity pair (s).
    pub gravity_pair_gap: f64,
    /// Evaluate the gravity transport residual at every n-th IMU sample.
    pub s2_stride: usize,
    pub ransac: RansacConfig,
    /// Leg sample pairs further apart than this are dropped (s).
    pub leg_max_gap: f64,
    /// Per-window random-walk standard deviations of the accelerometer bias
    /// (m/s^2) and the leg-velocity bias (m/s).
    pub bias_walk_accel: f64,
    pub bias_walk_vel: f64,
    /// Standard deviation anchoring the first bias block at its
    /// initialization estimate.
    pub bias_anchor_sigma: f64,
    pub solver: SolverTuning,
    /// Iteration cap for the initialization solves.
    pub init_solver_iters: usize,
    /// Dead-reckoning quadrature step (s).
    pub integrate_dt: f64,
    pub init_prior_sigma: InitPriorSigma,
    /// Drop gravity pairs when they leave the window instead of folding
    /// them into the marginalization prior.
    pub drop_gravity_pairs_on_exit: bool,
    /// Disables the gravity-pair and transport factors plus the rotation
    /// post-optimization.
    pub ablate_gravity: bool,
    /// Disables only the soft sphere-constraint (transport) factor.
    pub ablate_s2: bool,
    /// Zeroes and freezes the leg-velocity bias.
    pub ablate_bias: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            knot_dt: 0.05,
            window: 0.5,
            init_window: 2.0,
            weights: FactorWeights::default(),
            stationary_tau1: 0.05,
            stationary_tau2: 0.01,
            init_gravity_w1: 1.0,
            init_gravity_w2: 0.5,
            gravity_pair_gap: 0.1,
            s2_stride: 2,
            ransac: RansacConfig::default(),
            leg_max_gap: 0.05,
            bias_walk_accel: 1e-4,
            bias_walk_vel: 0.01,
            bias_anchor_sigma: 0.03,
            solver: SolverTuning::default(),
            init_solver_iters: 40,
            integrate_dt: 0.005,
            init_prior_sigma: InitPriorSigma::default(),
            drop_gravity_pairs_on_exit: false,
            ablate_gravity: false,
            ablate_s2: false,
            ablate_bias: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.knot_dt > 0.0) {
            return Err(PipelineError::InvalidConfig("knot_dt must be positive".into()));
        }
        if self.window < 3.0 * self.knot_dt {
            return Err(PipelineError::InvalidConfig(
                "window must cover at least three knots".into(),
            ));
        }
        if !(self.stationary_tau1 > 0.0 && self.stationary_tau2 > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "stationary thresholds must be positive".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(PipelineError::InvalidConfig)?;
        Ok(())
    }
}

/// Per-frame solver diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDiag {
    pub stamp: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub rejected_steps: usize,
    pub factors: usize,
    pub rolled_back: bool,
}

/// Run-level diagnostics: per-frame costs plus the frozen gravity and bias
/// histories.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub frames: Vec<FrameDiag>,
    /// Estimated body-frame gravity at each frozen knot time.
    pub gravity_log: Vec<(f64, Vector3<f64>)>,
    /// Bias estimates after each frame.
    pub bias_log: Vec<(f64, Vector3<f64>, Vector2<f64>)>,
    pub measurements_out_of_support: usize,
    pub rolled_back_frames: usize,
    /// True when gravity initialization fell back to the accelerometer mean.
    pub gravity_init_fallback: bool,
    pub stationary_init: bool,
}

/// Output of [`run`]: the dead-reckoned trajectory, diagnostics, and the
/// final estimator state.
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub diagnostics: Diagnostics,
    pub state: EstimatorState,
}

// ---------------------------------------------------------------------------
// Window factors.

struct GyroFactor {
    ids: Vec<usize>,
    u: f64,
    dt: f64,
    meas: Vector3<f64>,
    w: f64,
}

impl Factor for GyroFactor {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let q = [&v[0].as_rot(), &v[1].as_rot(), &v[2].as_rot()];
        let omega = so3_segment_omega(q, self.u, self.dt);
        DVector::from_column_slice((omega - self.meas).as_slice())
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "gyro".into()
    }
}

struct AccelFactor {
    /// Rotation triple then velocity triple then accel bias.
    ids: Vec<usize>,
    u: f64,
    dt: f64,
    meas: Vector3<f64>,
    g_global: Vector3<f64>,
    w: f64,
}

impl Factor for AccelFactor {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let q = [&v[0].as_rot(), &v[1].as_rot(), &v[2].as_rot()];
        let c = [&v[3].as_vec3(), &v[4].as_vec3(), &v[5].as_vec3()];
        let b_a = v[6].as_vec3();
        let omega = so3_segment_omega(q, self.u, self.dt);
        let vel = r3_segment_value(c, self.u);
        let vel_dot = r3_segment_deriv(c, self.u, self.dt);
        let r = so3_segment_value(q, self.u);
        let f = omega.cross(&vel) + vel_dot - r.inverse() * self.g_global;
        DVector::from_column_slice((f + b_a - self.meas).as_slice())
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "accel".into()
    }
}

struct LegFactor {
    /// Rotation triple, velocity triple, leg-velocity bias.
    ids: Vec<usize>,
    u: f64,
    dt: f64,
    meas: Vector3<f64>,
    r_align: UnitQuaternion<f64>,
    r_ib: UnitQuaternion<f64>,
    t_ib: Vector3<f64>,
    bias_fixed_zero: bool,
    w: f64,
}

impl Factor for LegFactor {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let q = [&v[0].as_rot(), &v[1].as_rot(), &v[2].as_rot()];
        let c = [&v[3].as_vec3(), &v[4].as_vec3(), &v[5].as_vec3()];
        let b_v = if self.bias_fixed_zero { Vector2::zeros() } else { v[6].as_vec2() };
        let omega = so3_segment_omega(q, self.u, self.dt);
        let vel = r3_segment_value(c, self.u);
        let predicted =
            self.r_ib.inverse() * (self.r_align * vel + omega.cross(&self.t_ib));
        let r = predicted - self.meas - Vector3::new(b_v.x, b_v.y, 0.0);
        DVector::from_column_slice(r.as_slice())
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "leg velocity".into()
    }
}

struct RadarFactor {
    /// Rotation triple then velocity triple.
    ids: Vec<usize>,
    u: f64,
    dt: f64,
    /// Unit directions and measured Dopplers.
    dirs: Vec<(Vector3<f64>, f64)>,
    r_align: UnitQuaternion<f64>,
    r_ir: UnitQuaternion<f64>,
    t_ir: Vector3<f64>,
    w: f64,
    cauchy: f64,
}

impl Factor for RadarFactor {
    fn dim(&self) -> usize {
        self.dirs.len()
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let q = [&v[0].as_rot(), &v[1].as_rot(), &v[2].as_rot()];
        let c = [&v[3].as_vec3(), &v[4].as_vec3(), &v[5].as_vec3()];
        let omega = so3_segment_omega(q, self.u, self.dt);
        let vel = r3_segment_value(c, self.u);
        let v_radar =
            self.r_ir.inverse() * (self.r_align * (vel + omega.cross(&self.t_ir)));
        DVector::from_fn(self.dirs.len(), |i, _| {
            let (dir, doppler) = self.dirs[i];
            -dir.dot(&v_radar) - doppler
        })
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn loss(&self) -> Loss {
        Loss::Cauchy(self.cauchy)
    }
    fn label(&self) -> String {
        "radar doppler".into()
    }
}

struct GravityPairFactor {
    /// Contiguous velocity control points spanning both sample times, then
    /// the gravity triple of the first sample's segment, then the accel bias.
    ids: Vec<usize>,
    vel_span: usize,
    seg_i_off: usize,
    u_i: f64,
    seg_j_off: usize,
    u_j: f64,
    u_grav: f64,
    dt_pair: f64,
    /// Relative orientation measurement `R_i^T R_j`.
    rot_ij: Matrix3<f64>,
    /// Trapezoidal quadrature of `R_i^T R_m(t) a(t)` over the pair.
    beta_accel: Vector3<f64>,
    /// Trapezoidal quadrature of `R_i^T R_m(t)`, applied to the bias.
    beta_rot: Matrix3<f64>,
    w: f64,
}

impl Factor for GravityPairFactor {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let vel = |off: usize, u: f64| -> Vector3<f64> {
            r3_segment_value(
                [&v[off].as_vec3(), &v[off + 1].as_vec3(), &v[off + 2].as_vec3()],
                u,
            )
        };
        let v_i = vel(self.seg_i_off, self.u_i);
        let v_j = vel(self.seg_j_off, self.u_j);
        let g = r3_segment_value(
            [
                &v[self.vel_span].as_vec3(),
                &v[self.vel_span + 1].as_vec3(),
                &v[self.vel_span + 2].as_vec3(),
            ],
            self.u_grav,
        );
        let b_a = v[self.vel_span + 3].as_vec3();
        let beta = self.beta_accel - self.beta_rot * b_a;
        let g_obs = (self.rot_ij * v_j - v_i - beta) / self.dt_pair;
        DVector::from_column_slice((g - g_obs).as_slice())
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "gravity pair".into()
    }
}

struct TransportFactor {
    /// Gravity triple then rotation triple.
    ids: Vec<usize>,
    u: f64,
    dt: f64,
    w: f64,
}

impl Factor for TransportFactor {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let c = [&v[0].as_vec3(), &v[1].as_vec3(), &v[2].as_vec3()];
        let q = [&v[3].as_rot(), &v[4].as_rot(), &v[5].as_rot()];
        let g = r3_segment_value(c, self.u);
        let g_dot = r3_segment_deriv(c, self.u, self.dt);
        let omega = so3_segment_omega(q, self.u, self.dt);
        DVector::from_column_slice((g_dot + omega.cross(&g)).as_slice())
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "gravity transport".into()
    }
}

struct BiasWalkFactor {
    /// Current accel bias and velocity bias, then previous blocks when they
    /// are still part of the window.
    ids: Vec<usize>,
    prev_const: Option<(Vector3<f64>, Vector2<f64>)>,
    /// Inverse standard deviations of one step for the accelerometer-bias
    /// rows and the velocity-bias rows. The biases evolve on very different
    /// timescales, and the accelerometer bias is separable from local
    /// gravity only through this prior on low-excitation trajectories.
    inv_sigma_a: f64,
    inv_sigma_v: f64,
    w: f64,
}

impl Factor for BiasWalkFactor {
    fn dim(&self) -> usize {
        5
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let (pa, pv) = match self.prev_const {
            Some(c) => c,
            None => (v[2].as_vec3(), v[3].as_vec2()),
        };
        let da = (v[0].as_vec3() - pa) * self.inv_sigma_a;
        let dv = (v[1].as_vec2() - pv) * self.inv_sigma_v;
        DVector::from_column_slice(&[da.x, da.y, da.z, dv.x, dv.y])
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "bias walk".into()
    }
}

struct BiasAnchorFactor {
    ids: Vec<usize>,
    anchor: Vector3<f64>,
    inv_sigma: f64,
    w: f64,
}

impl Factor for BiasAnchorFactor {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let d = (v[0].as_vec3() - self.anchor) * self.inv_sigma;
        DVector::from_column_slice(d.as_slice())
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "bias anchor".into()
    }
}

struct EndTailFactor {
    /// Last three velocity control points, then last three rotations.
    ids: Vec<usize>,
    w: f64,
}

impl Factor for EndTailFactor {
    fn dim(&self) -> usize {
        6
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, v: &[ParamBlock]) -> DVector<f64> {
        let dv = v[2].as_vec3() - 2.0 * v[1].as_vec3() + v[0].as_vec3();
        let (r0, r1, r2) = (v[3].as_rot(), v[4].as_rot(), v[5].as_rot());
        let dr = so3::log(&(r1.inverse() * r0 * r1.inverse() * r2));
        DVector::from_column_slice(&[dv.x, dv.y, dv.z, dr.x, dr.y, dr.z])
    }
    fn weight(&self) -> f64 {
        self.w
    }
    fn label(&self) -> String {
        "end tail".into()
    }
}

// ---------------------------------------------------------------------------
// Block keys: stable identity of estimator variables across windows.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum BlockKey {
    Rot(usize),
    Vel(usize),
    Grav(usize),
    BiasA(u64),
    BiasV(u64),
}

// ---------------------------------------------------------------------------
// Initialization stages.

/// Fits the orientation spline to gyro measurements with the first control
/// point fixed at identity.
pub fn init_so3(
    imu: &[ImuSample],
    grid: KnotGrid,
    weights: &FactorWeights,
    max_iters: usize,
) -> Result<SplineSo3, PipelineError> {
    if imu.len() < 3 || imu.last().unwrap().stamp < grid.support_end() - grid.dt {
        return Err(PipelineError::InitFailed {
            stage: "orientation spline",
            reason: format!("need gyro data covering {:.2} s", grid.support_end() - grid.t0),
        });
    }
    // Seed control points by integrating the gyro stream.
    let mut ctrl = Vec::with_capacity(grid.n);
    let mut q = UnitQuaternion::identity();
    let mut idx = 0usize;
    let mut t_cur = imu[0].stamp;
    for k in 0..grid.n {
        let t_knot = grid.knot_time(k);
        while idx + 1 < imu.len() && imu[idx + 1].stamp <= t_knot {
            let dt = imu[idx + 1].stamp - t_cur;
            q *= so3::exp(&(imu[idx].gyro_vec() * dt));
            t_cur = imu[idx + 1].stamp;
            idx += 1;
        }
        let dt = (t_knot - t_cur).max(0.0);
        ctrl.push(q * so3::exp(&(imu[idx].gyro_vec() * dt)));
        if dt > 0.0 {
            q *= so3::exp(&(imu[idx].gyro_vec() * dt));
            t_cur = t_knot;
        }
    }

    let mut problem = Problem::new();
    let ids: Vec<usize> =
        ctrl.iter().map(|q| problem.add_block(ParamBlock::Rot(*q))).collect();
    problem.set_fixed(ids[0]);
    for s in imu {
        let Ok((seg, u)) = grid.locate(s.stamp) else { continue };
        problem.add_factor(Box::new(GyroFactor {
            ids: vec![ids[seg], ids[seg + 1], ids[seg + 2]],
            u,
            dt: grid.dt,
            meas: s.gyro_vec(),
            w: weights.gyro,
        }));
    }
    solve(&mut problem, &SolveOptions { max_iters, ..Default::default() })?;
    let ctrl = ids.iter().map(|&i| problem.blocks[i].as_rot()).collect();
    Ok(SplineSo3::new(grid, ctrl)?)
}

/// Stationary test on radar ego-velocity estimates: true iff the mean speed
/// and the trace of the velocity variance both fall below their thresholds.
pub fn is_stationary(estimates: &[EgoVelocityEstimate], tau1: f64, tau2: f64) -> bool {
    let valid: Vec<Vector3<f64>> =
        estimates.iter().filter(|e| e.valid).map(|e| e.velocity()).collect();
    if valid.is_empty() {
        return false;
    }
    let n = valid.len() as f64;
    let mean = valid.iter().sum::<Vector3<f64>>() / n;
    let var = valid.iter().map(|v| (v - mean).norm_squared()).sum::<f64>() / n;
    mean.norm() < tau1 && var < tau2
}

/// IMU-frame ego velocity from a radar-frame estimate using the gyro sample
/// nearest the scan.
fn ego_velocity_imu_frame(
    est: &EgoVelocityEstimate,
    imu: &[ImuSample],
    ext: &Extrinsics,
) -> Vector3<f64> {
    let idx = imu.partition_point(|s| s.stamp < est.stamp).min(imu.len() - 1);
    let omega = imu[idx].gyro_vec();
    ext.r_imu_radar() * est.velocity() - omega.cross(&ext.t_imu_radar_vec())
}

/// Dynamic-term observations of the initial-frame gravity: one per
/// consecutive pair of valid ego-velocity estimates.
fn gravity_observations(
    estimates: &[EgoVelocityEstimate],
    so3_spline: &SplineSo3,
    imu: &[ImuSample],
    ext: &Extrinsics,
) -> Vec<Vector3<f64>> {
    let valid: Vec<&EgoVelocityEstimate> = estimates.iter().filter(|e| e.valid).collect();
    let mut out = Vec::new();
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let dt = b.stamp - a.stamp;
        if dt <= 1e-6 {
            continue;
        }
        let (Ok(r_a), Ok(r_b)) = (so3_spline.eval(a.stamp), so3_spline.eval(b.stamp)) else {
            continue;
        };
        // alpha = integral of R(t) a(t) dt over the pair, trapezoidal.
        let lo = imu.partition_point(|s| s.stamp < a.stamp);
        let hi = imu.partition_point(|s| s.stamp < b.stamp);
        if hi <= lo || hi >= imu.len() {
            continue;
        }
        let mut alpha = Vector3::zeros();
        let mut ok = true;
        for k in lo..hi {
            let h = imu[k + 1].stamp - imu[k].stamp;
            let (Ok(r0), Ok(r1)) =
                (so3_spline.eval(imu[k].stamp), so3_spline.eval(imu[k + 1].stamp))
            else {
                ok = false;
                break;
            };
            alpha += (r0 * imu[k].accel_vec() + r1 * imu[k + 1].accel_vec()) * (0.5 * h);
        }
        if !ok {
            continue;
        }
        let v_a = ego_velocity_imu_frame(a, imu, ext);
        let v_b = ego_velocity_imu_frame(b, imu, ext);
        // World velocity difference minus the integrated specific force
        // leaves the gravity contribution; signs pinned by the stationary
        // identity (level rest must yield +9.81 along z).
        out.push((r_b * v_b - r_a * v_a - alpha) / dt);
    }
    out
}

/// Gravity magnitude is pinned, only the direction is estimated.
fn renormalize_gravity(g: Vector3<f64>) -> Option<Vector3<f64>> {
    let n = g.norm();
    if n < 1e-6 {
        return None;
    }
    Some(g * (GRAVITY / n))
}

/// Stationary gravity initialization: combines the accelerometer-mean prior
/// with the dynamic observations, then renormalizes to 9.81.
pub fn init_gravity_static(
    imu: &[ImuSample],
    estimates: &[EgoVelocityEstimate],
    so3_spline: &SplineSo3,
    ext: &Extrinsics,
    w1: f64,
    w2: f64,
) -> Result<Vector3<f64>, PipelineError> {
    let n = imu.len() as f64;
    let a_mean = imu.iter().map(|s| s.accel_vec()).sum::<Vector3<f64>>() / n;
    // Under the stationary identity the accelerometer mean reads -g.
    let g_prior = -a_mean;
    let obs = gravity_observations(estimates, so3_spline, imu, ext);
    let g = if obs.is_empty() {
        g_prior
    } else {
        let combined: Vector3<f64> = obs
            .iter()
            .map(|c| (g_prior * w1 + c * w2) / (w1 + w2))
            .sum::<Vector3<f64>>()
            / obs.len() as f64;
        combined
    };
    renormalize_gravity(g).ok_or(PipelineError::InitFailed {
        stage: "stationary gravity",
        reason: "degenerate accelerometer mean".into(),
    })
}

/// Dynamic gravity initialization from ego-velocity differences; returns the
/// estimate and whether it fell back to the accelerometer mean.
pub fn init_gravity_dynamic(
    estimates: &[EgoVelocityEstimate],
    so3_spline: &SplineSo3,
    imu: &[ImuSample],
    ext: &Extrinsics,
) -> Result<(Vector3<f64>, bool), PipelineError> {
    let obs = gravity_observations(estimates, so3_spline, imu, ext);
    if obs.len() >= 2 {
        let mean = obs.iter().sum::<Vector3<f64>>() / obs.len() as f64;
        if let Some(g) = renormalize_gravity(mean) {
            return Ok((g, false));
        }
    }
    // No excitation: fall back to the accelerometer mean.
    let n = imu.len() as f64;
    let a_mean = imu.iter().map(|s| s.accel_vec()).sum::<Vector3<f64>>() / n;
    let g = renormalize_gravity(-a_mean).ok_or(PipelineError::InitFailed {
        stage: "dynamic gravity",
        reason: "degenerate accelerometer mean".into(),
    })?;
    Ok((g, true))
}

/// Alignment rotation and state transform taking the estimated gravity onto
/// the global `(0, 0, 9.81)` axis.
pub fn align_to_gravity(state: &mut EstimatorState, g_i0: Vector3<f64>) {
    let z = Vector3::new(0.0, 0.0, GRAVITY);
    let r_align = so3::rotation_between(&z, &g_i0);
    for q in &mut state.so3.ctrl {
        *q = r_align.inverse() * *q * r_align;
    }
    for c in &mut state.vel.ctrl {
        *c = r_align.inverse() * *c;
    }
    state.r_align = r_align;
    state.g_global = z;
}

/// Seeds the gravity spline: control point `k` is `R_k^T g_global`.
pub fn init_gravity_spline(state: &mut EstimatorState) {
    let ctrl: Vec<Vector3<f64>> = state
        .so3
        .ctrl
        .iter()
        .map(|r| r.inverse() * state.g_global)
        .collect();
    state.grav = SplineR3::new(state.so3.grid, ctrl).expect("shared grid");
}

/// Refines frozen rotation knots by the minimal correction aligning
/// `R_k g_k` with the global gravity vector; the correction axis is
/// orthogonal to gravity, so yaw never changes. Returns the largest applied
/// correction angle.
pub fn post_optimize_knots(
    so3_spline: &mut SplineSo3,
    grav: &SplineR3,
    range: Range<usize>,
    g_global: &Vector3<f64>,
) -> f64 {
    let mut max_angle: f64 = 0.0;
    for k in range {
        let g_k = grav.ctrl[k];
        if g_k.norm() < 1e-6 {
            continue;
        }
        let current = so3_spline.ctrl[k] * g_k;
        let correction = so3::rotation_between(&current, g_global);
        max_angle = max_angle.max(so3::angle(&correction));
        so3_spline.ctrl[k] = correction * so3_spline.ctrl[k];
    }
    max_angle
}

/// Dead reckoning: integrates `R(t) v(t)` with trapezoidal quadrature at
/// step `dt_int`, pinning the first stamp at the origin.
pub fn integrate_position(
    so3_spline: &SplineSo3,
    vel: &SplineR3,
    stamps: &[f64],
    dt_int: f64,
) -> Result<Trajectory, PipelineError> {
    let mut points = Vec::with_capacity(stamps.len());
    if stamps.is_empty() {
        return Ok(Trajectory { points });
    }
    let world_v = |t: f64| -> Result<Vector3<f64>, PipelineError> {
        let r = so3_spline.eval(t).map_err(|_| PipelineError::CoverageGap { t })?;
        let v = vel.eval(t).map_err(|_| PipelineError::CoverageGap { t })?;
        Ok(r * v)
    };
    let mut p = Vector3::zeros();
    points.push(TrajectoryPoint {
        stamp: stamps[0],
        position: p,
        orientation: so3_spline
            .eval(stamps[0])
            .map_err(|_| PipelineError::CoverageGap { t: stamps[0] })?,
    });
    for w in stamps.windows(2) {
        let (a, b) = (w[0], w[1]);
        let steps = (((b - a) / dt_int).ceil() as usize).max(1);
        let h = (b - a) / steps as f64;
        let mut prev = world_v(a)?;
        for s in 1..=steps {
            let t = a + s as f64 * h;
            let cur = world_v(t.min(b))?;
            p += (prev + cur) * (0.5 * h);
            prev = cur;
        }
        points.push(TrajectoryPoint {
            stamp: b,
            position: p,
            orientation: so3_spline.eval(b).map_err(|_| PipelineError::CoverageGap { t: b })?,
        });
    }
    Ok(Trajectory { points })
}

// ---------------------------------------------------------------------------
// The estimator.

struct Estimator<'a> {
    cfg: &'a PipelineConfig,
    ext: Extrinsics,
    state: EstimatorState,
    imu: &'a [ImuSample],
    leg_meas: Vec<LegVelocityMeasurement>,
    scans: Vec<Arc<RadarScan>>,
    /// First non-frozen control index (same for all three splines).
    frozen: usize,
    /// Measurements older than this are already folded into the prior.
    consumed_until: f64,
    prior: Option<(Arc<PriorFactor>, Vec<BlockKey>)>,
    bias_prev: Option<(u64, Vector3<f64>, Vector2<f64>)>,
    /// Anchors every accelerometer-bias block at its initialization
    /// estimate.
    bias_anchor: Option<(Vector3<f64>, Vector2<f64>)>,
    window_idx: u64,
    last_frame: f64,
    frame_stamps: Vec<f64>,
    diag: Diagnostics,
}

/// Assignment of block keys to problem ids for one window.
struct KeyMap {
    keys: Vec<BlockKey>,
}

impl KeyMap {
    fn new() -> Self {
        Self { keys: Vec::new() }
    }
    fn push(&mut self, key: BlockKey) -> usize {
        self.keys.push(key);
        self.keys.len() - 1
    }
}

impl<'a> Estimator<'a> {
    fn grid(&self) -> KnotGrid {
        self.state.so3.grid
    }

    /// Builds all window factors over `[w_start, w_end]` into `problem`,
    /// assuming blocks for every active control point and the bias blocks
    /// already exist in `keymap`.
    #[allow(clippy::too_many_arguments)]
    fn add_window_factors(
        &self,
        problem: &mut Problem,
        keymap: &mut KeyMap,
        w_start: f64,
        w_end: f64,
        out_of_support: &mut usize,
    ) {
        let grid = self.grid();
        let w = &self.cfg.weights;
        let id = |km: &mut KeyMap, key: BlockKey| -> usize {
            km.keys.iter().position(|k| *k == key).expect("block registered")
        };
        let rot_ids = |km: &mut KeyMap, seg: usize| -> [usize; 3] {
            [
                id(km, BlockKey::Rot(seg)),
                id(km, BlockKey::Rot(seg + 1)),
                id(km, BlockKey::Rot(seg + 2)),
            ]
        };
        let vel_ids = |km: &mut KeyMap, seg: usize| -> [usize; 3] {
            [
                id(km, BlockKey::Vel(seg)),
                id(km, BlockKey::Vel(seg + 1)),
                id(km, BlockKey::Vel(seg + 2)),
            ]
        };
        let ba_id = id(keymap, BlockKey::BiasA(self.window_idx));
        let bv_id = id(keymap, BlockKey::BiasV(self.window_idx));

        let imu_lo = self.imu.partition_point(|s| s.stamp < w_start);
        let imu_hi = self.imu.partition_point(|s| s.stamp <= w_end);

        // Gyro factors.
        for s in &self.imu[imu_lo..imu_hi] {
            let Ok((seg, u)) = grid.locate(s.stamp) else {
                *out_of_support += 1;
                continue;
            };
            if seg < self.frozen {
                continue;
            }
            let r = rot_ids(keymap, seg);
            problem.add_factor(Box::new(GyroFactor {
                ids: r.to_vec(),
                u,
                dt: grid.dt,
                meas: s.gyro_vec(),
                w: w.gyro,
            }));
        }

        // Leg velocity factors.
        let leg_lo = self.leg_meas.partition_point(|m| m.stamp < w_start);
        let leg_hi = self.leg_meas.partition_point(|m| m.stamp <= w_end);
        for m in &self.leg_meas[leg_lo..leg_hi] {
            let Ok((seg, u)) = grid.locate(m.stamp) else {
                *out_of_support += 1;
                continue;
            };
            if seg < self.frozen {
                continue;
            }
            let r = rot_ids(keymap, seg);
            let v = vel_ids(keymap, seg);
            problem.add_factor(Box::new(LegFactor {
                ids: vec![r[0], r[1], r[2], v[0], v[1], v[2], bv_id],
                u,
                dt: grid.dt,
                meas: m.velocity(),
                r_align: self.state.r_align,
                r_ib: self.ext.r_imu_base(),
                t_ib: self.ext.t_imu_base_vec(),
                bias_fixed_zero: self.cfg.ablate_bias,
                w: w.leg,
            }));
        }

        // Radar factors, one per scan.
        let scan_lo = self.scans.partition_point(|s| s.stamp < w_start);
        let scan_hi = self.scans.partition_point(|s| s.stamp <= w_end);
        for scan in &self.scans[scan_lo..scan_hi] {
            if scan.points.is_empty() {
                continue;
            }
            let Ok((seg, u)) = grid.locate(scan.stamp) else {
                *out_of_support += 1;
                continue;
            };
            if seg < self.frozen {
                continue;
            }
            let r = rot_ids(keymap, seg);
            let v = vel_ids(keymap, seg);
            let dirs = scan
                .points
                .iter()
                .filter_map(|p| {
                    let pos = p.position();
                    let n = pos.norm();
                    (n > 0.0).then(|| (pos / n, p.doppler))
                })
                .collect();
            problem.add_factor(Box::new(RadarFactor {
                ids: vec![r[0], r[1], r[2], v[0], v[1], v[2]],
                u,
                dt: grid.dt,
                dirs,
                r_align: self.state.r_align,
                r_ir: self.ext.r_imu_radar(),
                t_ir: self.ext.t_imu_radar_vec(),
                w: w.radar,
                cauchy: w.cauchy_scale,
            }));
        }

        // Gravity pair factors and transport factors.
        if !self.cfg.ablate_gravity {
            for i in imu_lo..imu_hi {
                let t_i = self.imu[i].stamp;
                let t_target = t_i + self.cfg.gravity_pair_gap;
                if t_target > w_end {
                    break;
                }
                let j = self.imu.partition_point(|s| s.stamp < t_target);
                if j >= imu_hi || j <= i {
                    continue;
                }
                let t_j = self.imu[j].stamp;
                let (Ok((seg_i, u_i)), Ok((seg_j, u_j))) =
                    (grid.locate(t_i), grid.locate(t_j))
                else {
                    *out_of_support += 1;
                    continue;
                };
                if seg_i < self.frozen {
                    continue;
                }
                // Precompute the measurement-only quadratures.
                let r_i = self.imu[i].orient_quat();
                let mut beta_accel = Vector3::zeros();
                let mut beta_rot = Matrix3::zeros();
                for k in i..j {
                    let h = self.imu[k + 1].stamp - self.imu[k].stamp;
                    let q0 = (r_i.inverse() * self.imu[k].orient_quat())
                        .to_rotation_matrix()
                        .into_inner();
                    let q1 = (r_i.inverse() * self.imu[k + 1].orient_quat())
                        .to_rotation_matrix()
                        .into_inner();
                    beta_accel +=
                        (q0 * self.imu[k].accel_vec() + q1 * self.imu[k + 1].accel_vec())
                            * (0.5 * h);
                    beta_rot += (q0 + q1) * (0.5 * h);
                }
                let rot_ij = (r_i.inverse() * self.imu[j].orient_quat())
                    .to_rotation_matrix()
                    .into_inner();
                // Contiguous velocity span covering both segments.
                let span = seg_j + 3 - seg_i;
                let mut ids: Vec<usize> =
                    (seg_i..seg_i + span).map(|s| id(keymap, BlockKey::Vel(s))).collect();
                for s in seg_i..seg_i + 3 {
                    ids.push(id(keymap, BlockKey::Grav(s)));
                }
                ids.push(ba_id);
                problem.add_factor(Box::new(GravityPairFactor {
                    ids,
                    vel_span: span,
                    seg_i_off: 0,
                    u_i,
                    seg_j_off: seg_j - seg_i,
                    u_j,
                    u_grav: u_i,
                    dt_pair: t_j - t_i,
                    rot_ij,
                    beta_accel,
                    beta_rot,
                    w: w.gravity,
                }));
            }

            if !self.cfg.ablate_s2 {
                let stride = self.cfg.s2_stride.max(1);
                for k in imu_lo..imu_hi {
                    // Stride on the absolute sample index so window and
                    // marginalization passes pick the same instants.
                    if k % stride != 0 {
                        continue;
                    }
                    let s = &self.imu[k];
                    let Ok((seg, u)) = grid.locate(s.stamp) else { continue };
                    if seg < self.frozen {
                        continue;
                    }
                    let g_ids = [
                        id(keymap, BlockKey::Grav(seg)),
                        id(keymap, BlockKey::Grav(seg + 1)),
                        id(keymap, BlockKey::Grav(seg + 2)),
                    ];
                    let r = rot_ids(keymap, seg);
                    problem.add_factor(Box::new(TransportFactor {
                        ids: vec![g_ids[0], g_ids[1], g_ids[2], r[0], r[1], r[2]],
                        u,
                        dt: grid.dt,
                        w: w.s2,
                    }));
                }
            }
        }

        // Bias random walk.
        let (prev_ids, prev_const) = match &self.bias_prev {
            Some((idx, pa, pv)) => {
                let a = keymap.keys.iter().position(|k| *k == BlockKey::BiasA(*idx));
                let v = keymap.keys.iter().position(|k| *k == BlockKey::BiasV(*idx));
                match (a, v) {
                    (Some(a), Some(v)) => (Some((a, v)), None),
                    _ => (None, Some((*pa, *pv))),
                }
            }
            None => (None, Some((self.state.b_a, self.state.b_v))),
        };
        let mut ids = vec![ba_id, bv_id];
        if let Some((a, v)) = prev_ids {
            ids.push(a);
            ids.push(v);
        }
        problem.add_factor(Box::new(BiasWalkFactor {
            ids,
            prev_const,
            inv_sigma_a: 1.0 / self.cfg.bias_walk_accel,
            inv_sigma_v: 1.0 / self.cfg.bias_walk_vel,
            w: w.bias,
        }));
        // Absolute anchor tying this window's accelerometer bias to the
        // initialization estimate. On low-excitation trajectories the
        // accelerometer bias and the local gravity are separable only
        // through priors, and correlated orientation noise would otherwise
        // random-walk the pair away together.
        if let Some((pa, _)) = &self.bias_anchor {
            problem.add_factor(Box::new(BiasAnchorFactor {
                ids: vec![ba_id],
                anchor: *pa,
                inv_sigma: 1.0 / self.cfg.bias_anchor_sigma,
                w: w.bias,
            }));
        }

        // End-tail regularizer on the newest control points.
        let n = grid.n;
        if n >= 3 && n - 3 >= self.frozen {
            let ids = vec![
                id(keymap, BlockKey::Vel(n - 3)),
                id(keymap, BlockKey::Vel(n - 2)),
                id(keymap, BlockKey::Vel(n - 1)),
                id(keymap, BlockKey::Rot(n - 3)),
                id(keymap, BlockKey::Rot(n - 2)),
                id(keymap, BlockKey::Rot(n - 1)),
            ];
            problem.add_factor(Box::new(EndTailFactor { ids, w: w.end_tail }));
        }
    }

    /// Current value of a keyed block.
    fn block_value(&self, key: BlockKey) -> ParamBlock {
        match key {
            BlockKey::Rot(i) => ParamBlock::Rot(self.state.so3.ctrl[i]),
            BlockKey::Vel(i) => ParamBlock::Vec3(self.state.vel.ctrl[i]),
            BlockKey::Grav(i) => ParamBlock::Vec3(self.state.grav.ctrl[i]),
            BlockKey::BiasA(idx) => match self.bias_prev {
                Some((p, pa, _)) if p == idx => ParamBlock::Vec3(pa),
                _ => ParamBlock::Vec3(self.state.b_a),
            },
            BlockKey::BiasV(idx) => match self.bias_prev {
                Some((p, _, pv)) if p == idx => ParamBlock::Vec2(pv),
                _ => ParamBlock::Vec2(self.state.b_v),
            },
        }
    }

    /// Marginalizes everything behind `w_start`: measurement factors with
    /// older stamps, spline control points no segment at or after `w_start`
    /// touches, and the superseded bias blocks.
    fn marginalize_behind(&mut self, w_start: f64) -> Result<(), PipelineError> {
        let grid = self.grid();
        let new_frozen =
            (((w_start - grid.t0) / grid.dt).floor() as isize).max(0) as usize;
        let new_frozen = new_frozen.min(grid.n.saturating_sub(3));
        if new_frozen <= self.frozen && self.bias_prev.is_none() {
            self.consumed_until = self.consumed_until.max(w_start);
            return Ok(());
        }

        // Build the local system: consumed measurement factors + old prior.
        let mut keymap = KeyMap::new();
        let mut blocks: Vec<ParamBlock> = Vec::new();
        let register = |km: &mut KeyMap, blocks: &mut Vec<ParamBlock>, key: BlockKey, me: &Estimator| {
            if !km.keys.contains(&key) {
                km.push(key);
                blocks.push(me.block_value(key));
            }
        };
        // Dropped spline knots and their factor blanket; the consumed
        // factors live on segments [frozen, new_frozen).
        for i in self.frozen..(new_frozen + 2).min(grid.n) {
            register(&mut keymap, &mut blocks, BlockKey::Rot(i), self);
            register(&mut keymap, &mut blocks, BlockKey::Vel(i), self);
            register(&mut keymap, &mut blocks, BlockKey::Grav(i), self);
        }
        // Gravity pairs starting before w_start may reach further.
        let extra_span =
            (self.cfg.gravity_pair_gap / grid.dt).ceil() as usize + 3;
        for i in (new_frozen + 2).min(grid.n)..(new_frozen + extra_span).min(grid.n) {
            register(&mut keymap, &mut blocks, BlockKey::Rot(i), self);
            register(&mut keymap, &mut blocks, BlockKey::Vel(i), self);
            register(&mut keymap, &mut blocks, BlockKey::Grav(i), self);
        }
        register(&mut keymap, &mut blocks, BlockKey::BiasA(self.window_idx), self);
        register(&mut keymap, &mut blocks, BlockKey::BiasV(self.window_idx), self);
        if let Some((idx, pa, pv)) = self.bias_prev {
            if !keymap.keys.contains(&BlockKey::BiasA(idx)) {
                keymap.push(BlockKey::BiasA(idx));
                blocks.push(ParamBlock::Vec3(pa));
                keymap.push(BlockKey::BiasV(idx));
                blocks.push(ParamBlock::Vec2(pv));
            }
        }
        // Old prior blocks must be present too.
        if let Some((_, keys)) = &self.prior {
            for key in keys.clone() {
                register(&mut keymap, &mut blocks, key, self);
            }
        }

        let mut problem = Problem::new();
        for b in &blocks {
            problem.add_block(*b);
        }
        debug_assert_eq!(problem.blocks.len(), keymap.keys.len());
        let mut skipped = 0usize;
        self.add_consumed_factors(&mut problem, &mut keymap, w_start, &mut skipped);
        self.diag.measurements_out_of_support += skipped;
        if let Some((prior, keys)) = &self.prior {
            let ids: Vec<usize> = keys
                .iter()
                .map(|k| keymap.keys.iter().position(|x| x == k).expect("registered"))
                .collect();
            problem.add_factor(Box::new(PriorBlock {
                prior: prior.clone(),
                ids,
                weight: self.cfg.weights.prior,
            }));
        }

        // Partition into dropped and kept keys.
        let mut drop_ids = Vec::new();
        let mut keep_ids = Vec::new();
        for (i, key) in keymap.keys.iter().enumerate() {
            let dropped = match key {
                BlockKey::Rot(k) | BlockKey::Vel(k) | BlockKey::Grav(k) => *k < new_frozen,
                BlockKey::BiasA(idx) | BlockKey::BiasV(idx) => {
                    self.bias_prev.map_or(false, |(p, _, _)| *idx == p)
                }
            };
            if dropped {
                drop_ids.push(i);
            } else {
                keep_ids.push(i);
            }
        }

        if drop_ids.is_empty() {
            self.consumed_until = self.consumed_until.max(w_start);
            return Ok(());
        }
        let factor_refs: Vec<&dyn Factor> =
            problem.factors.iter().map(|f| f.as_ref()).collect();
        let marg = marginalize(&problem.blocks, &factor_refs, &drop_ids, &keep_ids)?;
        let kept_keys: Vec<BlockKey> = keep_ids.iter().map(|&i| keymap.keys[i]).collect();
        self.prior = Some((Arc::new(marg.prior), kept_keys));

        // Post-optimize the rotation knots that just became final, then log
        // their gravity estimates.
        if !self.cfg.ablate_gravity {
            post_optimize_knots(
                &mut self.state.so3,
                &self.state.grav,
                self.frozen..new_frozen,
                &self.state.g_global,
            );
        }
        for k in self.frozen..new_frozen {
            self.diag
                .gravity_log
                .push((grid.knot_time(k), self.state.grav.ctrl[k]));
        }
        self.frozen = new_frozen;
        self.bias_prev = None;
        self.consumed_until = self.consumed_until.max(w_start);
        Ok(())
    }

    /// Adds the measurement factors with stamps in
    /// `[consumed_until, w_start)` (the ones leaving the window) to a
    /// marginalization problem.
    fn add_consumed_factors(
        &self,
        problem: &mut Problem,
        keymap: &mut KeyMap,
        w_start: f64,
        out_of_support: &mut usize,
    ) {
        // Window factors between the watermarks; reuse the builder with a
        // restricted range. The bias/end-tail/pair factors of the live
        // window are not consumed here; gyro/leg/radar/gravity factors are.
        let lo = self.consumed_until;
        let hi = w_start - 1e-12;
        if hi <= lo {
            return;
        }
        let grid = self.grid();
        let w = &self.cfg.weights;
        let id = |km: &mut KeyMap, key: BlockKey| -> Option<usize> {
            km.keys.iter().position(|k| *k == key)
        };
        let rot_ids = |km: &mut KeyMap, seg: usize| -> Option<[usize; 3]> {
            Some([
                id(km, BlockKey::Rot(seg))?,
                id(km, BlockKey::Rot(seg + 1))?,
                id(km, BlockKey::Rot(seg + 2))?,
            ])
        };
        let vel_ids = |km: &mut KeyMap, seg: usize| -> Option<[usize; 3]> {
            Some([
                id(km, BlockKey::Vel(seg))?,
                id(km, BlockKey::Vel(seg + 1))?,
                id(km, BlockKey::Vel(seg + 2))?,
            ])
        };
        let grav_ids = |km: &mut KeyMap, seg: usize| -> Option<[usize; 3]> {
            Some([
                id(km, BlockKey::Grav(seg))?,
                id(km, BlockKey::Grav(seg + 1))?,
                id(km, BlockKey::Grav(seg + 2))?,
            ])
        };
        let ba_id = id(keymap, BlockKey::BiasA(self.window_idx)).expect("bias registered");
        let bv_id = id(keymap, BlockKey::BiasV(self.window_idx)).expect("bias registered");

        let imu_lo = self.imu.partition_point(|s| s.stamp < lo);
        let imu_hi = self.imu.partition_point(|s| s.stamp <= hi);
        for s in &self.imu[imu_lo..imu_hi] {
            let Ok((seg, u)) = grid.locate(s.stamp) else {
                *out_of_support += 1;
                continue;
            };
            if seg < self.frozen {
                continue;
            }
            let Some(r) = rot_ids(keymap, seg) else { continue };
            problem.add_factor(Box::new(GyroFactor {
                ids: r.to_vec(),
                u,
                dt: grid.dt,
                meas: s.gyro_vec(),
                w: w.gyro,
            }));
        }
        let leg_lo = self.leg_meas.partition_point(|m| m.stamp < lo);
        let leg_hi = self.leg_meas.partition_point(|m| m.stamp <= hi);
        for m in &self.leg_meas[leg_lo..leg_hi] {
            let Ok((seg, u)) = grid.locate(m.stamp) else {
                *out_of_support += 1;
                continue;
            };
            if seg < self.frozen {
                continue;
            }
            let (Some(r), Some(v)) = (rot_ids(keymap, seg), vel_ids(keymap, seg)) else {
                continue;
            };
            problem.add_factor(Box::new(LegFactor {
                ids: vec![r[0], r[1], r[2], v[0], v[1], v[2], bv_id],
                u,
                dt: grid.dt,
                meas: m.velocity(),
                r_align: self.state.r_align,
                r_ib: self.ext.r_imu_base(),
                t_ib: self.ext.t_imu_base_vec(),
                bias_fixed_zero: self.cfg.ablate_bias,
                w: w.leg,
            }));
        }
        let scan_lo = self.scans.partition_point(|s| s.stamp < lo);
        let scan_hi = self.scans.partition_point(|s| s.stamp <= hi);
        for scan in &self.scans[scan_lo..scan_hi] {
            if scan.points.is_empty() {
                continue;
            }
            let Ok((seg, u)) = grid.locate(scan.stamp) else {
                *out_of_support += 1;
                continue;
            };
            if seg < self.frozen {
                continue;
            }
            let (Some(r), Some(v)) = (rot_ids(keymap, seg), vel_ids(keymap, seg)) else {
                continue;
            };
            let dirs = scan
                .points
                .iter()
                .filter_map(|p| {
                    let pos = p.position();
                    let n = pos.norm();
                    (n > 0.0).then(|| (pos / n, p.doppler))
                })
                .collect();
            problem.add_factor(Box::new(RadarFactor {
                ids: vec![r[0], r[1], r[2], v[0], v[1], v[2]],
                u,
                dt: grid.dt,
                dirs,
                r_align: self.state.r_align,
                r_ir: self.ext.r_imu_radar(),
                t_ir: self.ext.t_imu_radar_vec(),
                w: w.radar,
                cauchy: w.cauchy_scale,
            }));
        }
        // Gravity pairs whose first sample leaves the window; linearized
        // here once, they never re-enter a later window.
        if !self.cfg.ablate_gravity && !self.cfg.drop_gravity_pairs_on_exit {
            for i in imu_lo..imu_hi {
                let t_i = self.imu[i].stamp;
                let j = self
                    .imu
                    .partition_point(|s| s.stamp < t_i + self.cfg.gravity_pair_gap);
                if j >= self.imu.len() || j <= i {
                    continue;
                }
                let t_j = self.imu[j].stamp;
                let (Ok((seg_i, u_i)), Ok((seg_j, u_j))) =
                    (grid.locate(t_i), grid.locate(t_j))
                else {
                    *out_of_support += 1;
                    continue;
                };
                if seg_i < self.frozen {
                    continue;
                }
                let r_i = self.imu[i].orient_quat();
                let mut beta_accel = Vector3::zeros();
                let mut beta_rot = Matrix3::zeros();
                for k in i..j {
                    let h = self.imu[k + 1].stamp - self.imu[k].stamp;
                    let q0 = (r_i.inverse() * self.imu[k].orient_quat())
                        .to_rotation_matrix()
                        .into_inner();
                    let q1 = (r_i.inverse() * self.imu[k + 1].orient_quat())
                        .to_rotation_matrix()
                        .into_inner();
                    beta_accel +=
                        (q0 * self.imu[k].accel_vec() + q1 * self.imu[k + 1].accel_vec())
                            * (0.5 * h);
                    beta_rot += (q0 + q1) * (0.5 * h);
                }
                let rot_ij = (r_i.inverse() * self.imu[j].orient_quat())
                    .to_rotation_matrix()
                    .into_inner();
                let span = seg_j + 3 - seg_i;
                let mut ok = true;
                let mut ids = Vec::with_capacity(span + 4);
                for s in seg_i..seg_i + span {
                    match id(keymap, BlockKey::Vel(s)) {
                        Some(i) => ids.push(i),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                for s in seg_i..seg_i + 3 {
                    match id(keymap, BlockKey::Grav(s)) {
                        Some(i) => ids.push(i),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                ids.push(ba_id);
                problem.add_factor(Box::new(GravityPairFactor {
                    ids,
                    vel_span: span,
                    seg_i_off: 0,
                    u_i,
                    seg_j_off: seg_j - seg_i,
                    u_j,
                    u_grav: u_i,
                    dt_pair: t_j - t_i,
                    rot_ij,
                    beta_accel,
                    beta_rot,
                    w: w.gravity,
                }));
            }
        }

        // Transport factors in the consumed range keep the gravity knots
        // coupled to the rotations they constrained.
        if !self.cfg.ablate_gravity && !self.cfg.ablate_s2 {
            let stride = self.cfg.s2_stride.max(1);
            for k in imu_lo..imu_hi {
                if k % stride != 0 {
                    continue;
                }
                let s = &self.imu[k];
                let Ok((seg, u)) = grid.locate(s.stamp) else { continue };
                if seg < self.frozen {
                    continue;
                }
                let (Some(g), Some(r)) = (grav_ids(keymap, seg), rot_ids(keymap, seg)) else {
                    continue;
                };
                problem.add_factor(Box::new(TransportFactor {
                    ids: vec![g[0], g[1], g[2], r[0], r[1], r[2]],
                    u,
                    dt: grid.dt,
                    w: w.s2,
                }));
            }
        }

        // The closing window's bias random walk ties the superseded bias to
        // the current one; consume it with the superseded blocks.
        if let Some((prev_idx, _, _)) = self.bias_prev {
            let prev_a = id(keymap, BlockKey::BiasA(prev_idx));
            let prev_v = id(keymap, BlockKey::BiasV(prev_idx));
            if let (Some(pa), Some(pv)) = (prev_a, prev_v) {
                problem.add_factor(Box::new(BiasWalkFactor {
                    ids: vec![ba_id, bv_id, pa, pv],
                    prev_const: None,
                    inv_sigma_a: 1.0 / self.cfg.bias_walk_accel,
                    inv_sigma_v: 1.0 / self.cfg.bias_walk_vel,
                    w: w.bias,
                }));
            }
        }
        // The superseded window's bias anchor leaves with its block.
        if let (Some((prev_idx, _, _)), Some((pa, _))) = (&self.bias_prev, &self.bias_anchor) {
            if let Some(a) = id(keymap, BlockKey::BiasA(*prev_idx)) {
                problem.add_factor(Box::new(BiasAnchorFactor {
                    ids: vec![a],
                    anchor: *pa,
                    inv_sigma: 1.0 / self.cfg.bias_anchor_sigma,
                    w: w.bias,
                }));
            }
        }
    }

    /// Writes solved block values back into the estimator state.
    fn write_back(&mut self, problem: &Problem, keymap: &KeyMap) {
        for (i, key) in keymap.keys.iter().enumerate() {
            match key {
                BlockKey::Rot(k) => self.state.so3.ctrl[*k] = problem.blocks[i].as_rot(),
                BlockKey::Vel(k) => self.state.vel.ctrl[*k] = problem.blocks[i].as_vec3(),
                BlockKey::Grav(k) => self.state.grav.ctrl[*k] = problem.blocks[i].as_vec3(),
                BlockKey::BiasA(idx) if *idx == self.window_idx => {
                    self.state.b_a = problem.blocks[i].as_vec3()
                }
                BlockKey::BiasV(idx) if *idx == self.window_idx => {
                    self.state.b_v = problem.blocks[i].as_vec2()
                }
                _ => {}
            }
        }
    }

    /// Processes one radar frame. Duplicate stamps are a no-op.
    fn process_frame(&mut self, scan: &Arc<RadarScan>) -> Result<(), PipelineError> {
        let t_r = scan.stamp;
        if t_r <= self.last_frame {
            return Ok(());
        }
        let w_start = t_r - self.cfg.window;

        // First frame: anchor the gauge with a diagonal prior over the
        // blocks of this window.
        if self.prior.is_none() {
            self.install_initial_prior(w_start);
            self.consumed_until = w_start;
        } else {
            self.marginalize_behind(w_start)?;
        }

        // Extend the splines to cover the frame; extrapolated gravity knots
        // are renormalized to the gravity magnitude.
        let before = self.state.so3.grid.n;
        self.state.so3.extend_to(t_r);
        self.state.vel.extend_to(t_r);
        self.state.grav.extend_to(t_r);
        for k in before..self.state.grav.grid.n {
            if let Some(g) = renormalize_gravity(self.state.grav.ctrl[k]) {
                self.state.grav.ctrl[k] = g;
            }
        }

        // New bias blocks for this window.
        self.bias_prev = Some((self.window_idx, self.state.b_a, self.state.b_v));
        self.window_idx += 1;

        // Assemble the window problem.
        let grid = self.grid();
        let mut keymap = KeyMap::new();
        let mut problem = Problem::new();
        for k in self.frozen..grid.n {
            keymap.push(BlockKey::Rot(k));
            problem.add_block(ParamBlock::Rot(self.state.so3.ctrl[k]));
            keymap.push(BlockKey::Vel(k));
            problem.add_block(ParamBlock::Vec3(self.state.vel.ctrl[k]));
            keymap.push(BlockKey::Grav(k));
            problem.add_block(ParamBlock::Vec3(self.state.grav.ctrl[k]));
        }
        keymap.push(BlockKey::BiasA(self.window_idx));
        problem.add_block(ParamBlock::Vec3(self.state.b_a));
        keymap.push(BlockKey::BiasV(self.window_idx));
        let bv_block = problem.add_block(ParamBlock::Vec2(if self.cfg.ablate_bias {
            Vector2::zeros()
        } else {
            self.state.b_v
        }));
        if self.cfg.ablate_bias {
            problem.set_fixed(bv_block);
        }
        if let Some((idx, pa, pv)) = self.bias_prev {
            keymap.push(BlockKey::BiasA(idx));
            problem.add_block(ParamBlock::Vec3(pa));
            keymap.push(BlockKey::BiasV(idx));
            problem.add_block(ParamBlock::Vec2(pv));
        }

        let mut skipped = 0usize;
        self.add_window_factors(&mut problem, &mut keymap, w_start, t_r, &mut skipped);
        self.diag.measurements_out_of_support += skipped;
        if let Some((prior, keys)) = &self.prior {
            let ids: Vec<usize> = keys
                .iter()
                .map(|k| {
                    keymap
                        .keys
                        .iter()
                        .position(|x| x == k)
                        .expect("prior block still active")
                })
                .collect();
            problem.add_factor(Box::new(PriorBlock {
                prior: prior.clone(),
                ids,
                weight: self.cfg.weights.prior,
            }));
        }

        let n_factors = problem.factors.len();
        let opts = SolveOptions {
            max_iters: self.cfg.solver.max_iters,
            lambda_init: self.cfg.solver.lambda_init,
            tol_dx: self.cfg.solver.tol_dx,
            tol_cost: self.cfg.solver.tol_cost,
        };
        match solve(&mut problem, &opts) {
            Ok(report) => {
                self.write_back(&problem, &keymap);
                if let Some((idx, _, _)) = self.bias_prev {
                    // Refresh the stored previous-bias values from the solve.
                    let a = keymap.keys.iter().position(|k| *k == BlockKey::BiasA(idx));
                    let v = keymap.keys.iter().position(|k| *k == BlockKey::BiasV(idx));
                    if let (Some(a), Some(v)) = (a, v) {
                        self.bias_prev =
                            Some((idx, problem.blocks[a].as_vec3(), problem.blocks[v].as_vec2()));
                    }
                }
                self.diag.frames.push(FrameDiag {
                    stamp: t_r,
                    initial_cost: report.initial_cost,
                    final_cost: report.final_cost,
                    iterations: report.iterations,
                    rejected_steps: report.rejected_steps,
                    factors: n_factors,
                    rolled_back: false,
                });
            }
            Err(SolverError::NonFiniteResidual(which)) => {
                // Roll back: state was never touched, the frame is flagged.
                self.diag.rolled_back_frames += 1;
                self.diag.frames.push(FrameDiag {
                    stamp: t_r,
                    initial_cost: f64::NAN,
                    final_cost: f64::NAN,
                    iterations: 0,
                    rejected_steps: 0,
                    factors: n_factors,
                    rolled_back: true,
                });
                let _ = which;
            }
            Err(e) => return Err(e.into()),
        }
        self.diag
            .bias_log
            .push((t_r, self.state.b_a, self.state.b_v));
        self.last_frame = t_r;
        self.frame_stamps.push(t_r);
        Ok(())
    }

    fn install_initial_prior(&mut self, w_start: f64) {
        let grid = self.grid();
        let new_frozen = (((w_start - grid.t0) / grid.dt).floor() as isize).max(0) as usize;
        let new_frozen = new_frozen.min(grid.n.saturating_sub(3));
        // Knots before the first window are final as initialized.
        for k in 0..new_frozen {
            self.diag
                .gravity_log
                .push((grid.knot_time(k), self.state.grav.ctrl[k]));
        }
        self.frozen = new_frozen;
        let mut keys = Vec::new();
        let mut lin = Vec::new();
        let mut info = Vec::new();
        let s = &self.cfg.init_prior_sigma;
        for k in self.frozen..grid.n {
            keys.push(BlockKey::Rot(k));
            lin.push(ParamBlock::Rot(self.state.so3.ctrl[k]));
            info.extend_from_slice(&[1.0 / (s.rot * s.rot); 3]);
            keys.push(BlockKey::Vel(k));
            lin.push(ParamBlock::Vec3(self.state.vel.ctrl[k]));
            info.extend_from_slice(&[1.0 / (s.vel * s.vel); 3]);
            keys.push(BlockKey::Grav(k));
            lin.push(ParamBlock::Vec3(self.state.grav.ctrl[k]));
            info.extend_from_slice(&[1.0 / (s.grav * s.grav); 3]);
        }
        let dim = info.len();
        let mut h = nalgebra::DMatrix::zeros(dim, dim);
        for (i, v) in info.iter().enumerate() {
            h[(i, i)] = *v;
        }
        let prior = PriorFactor::new(h, DVector::zeros(dim), lin);
        self.prior = Some((Arc::new(prior), keys));
    }

    /// Freezes the remaining knots (post-optimizing them when gravity is on)
    /// and integrates the final trajectory at the processed frame stamps.
    fn finalize(mut self) -> Result<RunOutput, PipelineError> {
        let grid = self.grid();
        if !self.cfg.ablate_gravity {
            post_optimize_knots(
                &mut self.state.so3,
                &self.state.grav,
                self.frozen..grid.n,
                &self.state.g_global,
            );
        }
        for k in self.frozen..grid.n {
            let t = grid.knot_time(k);
            if t <= self.last_frame {
                self.diag
                    .gravity_log
                    .push((t, self.state.grav.ctrl[k]));
            }
        }
        let trajectory = integrate_position(
            &self.state.so3,
            &self.state.vel,
            &self.frame_stamps,
            self.cfg.integrate_dt,
        )?;
        Ok(RunOutput { trajectory, diagnostics: self.diag, state: self.state })
    }
}

/// Runs the full estimator on a dataset.
///
/// Initialization follows the stage order: orientation spline from gyro,
/// global gravity (stationary test first, dynamic fallback), velocity spline
/// plus biases with the orientation fixed, z-axis alignment, gravity-spline
/// seeding. Afterwards every radar frame beyond the initialization window is
/// processed incrementally. The run is deterministic given dataset + config.
pub fn run(ds: &Dataset, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let ext = ds.meta.extrinsics.clone();
    let imu = &ds.imu;
    if imu.len() < 10 {
        return Err(PipelineError::InitFailed {
            stage: "orientation spline",
            reason: "fewer than 10 IMU samples".into(),
        });
    }
    let t0 = imu[0].stamp;
    let init_end = t0 + cfg.init_window;
    if imu.last().unwrap().stamp < init_end {
        return Err(PipelineError::InitFailed {
            stage: "orientation spline",
            reason: format!("IMU stream shorter than the {:.1} s init window", cfg.init_window),
        });
    }

    let mut diag = Diagnostics::default();

    // Leg measurements from consecutive encoder pairs, stream-wide.
    let mut leg_meas = Vec::new();
    for pair in ds.leg.windows(2) {
        let m = leg_velocity(&ds.meta.leg_model, &pair[0], &pair[1], cfg.leg_max_gap)?;
        if m.valid {
            leg_meas.push(m);
        }
    }

    // Stage: orientation spline over the init window.
    let n_init = ((cfg.init_window / cfg.knot_dt).ceil() as usize) + 3;
    let grid = KnotGrid::new(t0, cfg.knot_dt, n_init)
        .map_err(|e| PipelineError::InitFailed { stage: "orientation spline", reason: e.to_string() })?;
    let init_imu: Vec<ImuSample> =
        imu.iter().take_while(|s| s.stamp < grid.support_end()).cloned().collect();
    let so3_spline = init_so3(&init_imu, grid, &cfg.weights, cfg.init_solver_iters)?;

    // Stage: global gravity from radar ego-velocities.
    let init_scans: Vec<&RadarScan> =
        ds.radar.iter().filter(|s| s.stamp < init_end).collect();
    let ego: Vec<EgoVelocityEstimate> = init_scans
        .iter()
        .map(|s| estimate_ego_velocity(s, &cfg.ransac))
        .collect();
    let stationary = is_stationary(&ego, cfg.stationary_tau1, cfg.stationary_tau2);
    diag.stationary_init = stationary;
    let window_imu: Vec<ImuSample> =
        imu.iter().take_while(|s| s.stamp < init_end).cloned().collect();
    let g_i0 = if stationary {
        init_gravity_static(
            &window_imu,
            &ego,
            &so3_spline,
            &ext,
            cfg.init_gravity_w1,
            cfg.init_gravity_w2,
        )?
    } else {
        let (g, fallback) = init_gravity_dynamic(&ego, &so3_spline, &window_imu, &ext)?;
        diag.gravity_init_fallback = fallback;
        g
    };

    // Stage: velocity spline and biases with the orientation fixed.
    let mut state = EstimatorState {
        so3: so3_spline,
        vel: SplineR3::constant(grid, Vector3::zeros()).expect("grid"),
        grav: SplineR3::constant(grid, g_i0).expect("grid"),
        b_v: Vector2::zeros(),
        b_a: Vector3::zeros(),
        g_global: g_i0,
        r_align: UnitQuaternion::identity(),
    };
    init_velocity_spline(&mut state, &window_imu, &leg_meas, &ds.radar, &ext, cfg)?;

    // Stage: z-axis alignment, then gravity-spline seeding.
    align_to_gravity(&mut state, g_i0);
    init_gravity_spline(&mut state);

    // Incremental processing of every radar frame beyond the init window.
    let (state_bias_a, state_bias_v) = (state.b_a, state.b_v);
    let scans: Vec<Arc<RadarScan>> = ds.radar.iter().cloned().map(Arc::new).collect();
    let mut est = Estimator {
        cfg,
        ext,
        state,
        imu,
        leg_meas,
        scans: scans.clone(),
        frozen: 0,
        consumed_until: t0,
        prior: None,
        bias_prev: None,
        bias_anchor: Some((state_bias_a, state_bias_v)),
        window_idx: 0,
        last_frame: init_end,
        frame_stamps: Vec::new(),
        diag,
    };
    for scan in &scans {
        if scan.stamp <= init_end {
            continue;
        }
        est.process_frame(scan)?;
    }
    est.finalize()
}

/// Solves the velocity-spline initialization with the orientation fixed:
/// accelerometer, leg, and radar factors over the init window, optimizing
/// velocity control points and both biases.
fn init_velocity_spline(
    state: &mut EstimatorState,
    imu: &[ImuSample],
    leg_meas: &[LegVelocityMeasurement],
    scans: &[RadarScan],
    ext: &Extrinsics,
    cfg: &PipelineConfig,
) -> Result<(), PipelineError> {
    let grid = state.so3.grid;
    let w = &cfg.weights;
    let mut problem = Problem::new();
    let rot_ids: Vec<usize> = state
        .so3
        .ctrl
        .iter()
        .map(|q| {
            let id = problem.add_block(ParamBlock::Rot(*q));
            problem.set_fixed(id);
            id
        })
        .collect();
    let vel_ids: Vec<usize> = state
        .vel
        .ctrl
        .iter()
        .map(|c| problem.add_block(ParamBlock::Vec3(*c)))
        .collect();
    let ba_id = problem.add_block(ParamBlock::Vec3(state.b_a));
    let bv_id = problem.add_block(ParamBlock::Vec2(state.b_v));
    if cfg.ablate_bias {
        problem.set_fixed(bv_id);
    }

    for s in imu {
        let Ok((seg, u)) = grid.locate(s.stamp) else { continue };
        problem.add_factor(Box::new(AccelFactor {
            ids: vec![
                rot_ids[seg],
                rot_ids[seg + 1],
                rot_ids[seg + 2],
                vel_ids[seg],
                vel_ids[seg + 1],
                vel_ids[seg + 2],
                ba_id,
            ],
            u,
            dt: grid.dt,
            meas: s.accel_vec(),
            g_global: state.g_global,
            w: w.accel,
        }));
    }
    for m in leg_meas.iter().filter(|m| m.stamp < grid.support_end()) {
        let Ok((seg, u)) = grid.locate(m.stamp) else { continue };
        problem.add_factor(Box::new(LegFactor {
            ids: vec![
                rot_ids[seg],
                rot_ids[seg + 1],
                rot_ids[seg + 2],
                vel_ids[seg],
                vel_ids[seg + 1],
                vel_ids[seg + 2],
                bv_id,
            ],
            u,
            dt: grid.dt,
            meas: m.velocity(),
            r_align: state.r_align,
            r_ib: ext.r_imu_base(),
            t_ib: ext.t_imu_base_vec(),
            bias_fixed_zero: cfg.ablate_bias,
            w: w.leg,
        }));
    }
    for scan in scans.iter().filter(|s| s.stamp < grid.support_end()) {
        if scan.points.is_empty() {
            continue;
        }
        let Ok((seg, u)) = grid.locate(scan.stamp) else { continue };
        let dirs = scan
            .points
            .iter()
            .filter_map(|p| {
                let pos = p.position();
                let n = pos.norm();
                (n > 0.0).then(|| (pos / n, p.doppler))
            })
            .collect();
        problem.add_factor(Box::new(RadarFactor {
            ids: vec![
                rot_ids[seg],
                rot_ids[seg + 1],
                rot_ids[seg + 2],
                vel_ids[seg],
                vel_ids[seg + 1],
                vel_ids[seg + 2],
            ],
            u,
            dt: grid.dt,
            dirs,
            r_align: state.r_align,
            r_ir: ext.r_imu_radar(),
            t_ir: ext.t_imu_radar_vec(),
            w: w.radar,
            cauchy: w.cauchy_scale,
        }));
    }
    let report = solve(
        &mut problem,
        &SolveOptions { max_iters: cfg.init_solver_iters, ..Default::default() },
    )?;
    if !report.final_cost.is_finite() {
        return Err(PipelineError::InitFailed {
            stage: "velocity spline",
            reason: "solver diverged".into(),
        });
    }
    for (k, id) in vel_ids.iter().enumerate() {
        state.vel.ctrl[k] = problem.blocks[*id].as_vec3();
    }
    state.b_a = problem.blocks[ba_id].as_vec3();
    state.b_v = problem.blocks[bv_id].as_vec2();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::FactorWeights;
    use crate::sim::{gravity_world, make_scenario, NoiseConfig};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn imu_stream(
        duration: f64,
        rate: f64,
        mut gyro: impl FnMut(f64) -> Vector3<f64>,
        mut accel: impl FnMut(f64) -> Vector3<f64>,
    ) -> Vec<ImuSample> {
        let n = (duration * rate) as usize + 1;
        (0..n)
            .map(|k| {
                let t = k as f64 / rate;
                let g = gyro(t);
                let a = accel(t);
                ImuSample {
                    stamp: t,
                    gyro: [g.x, g.y, g.z],
                    accel: [a.x, a.y, a.z],
                    orient: [1.0, 0.0, 0.0, 0.0],
                }
            })
            .collect()
    }

    #[test]
    fn init_so3_zero_gyro_is_identity() {
        let imu = imu_stream(2.2, 100.0, |_| Vector3::zeros(), |_| Vector3::zeros());
        let grid = KnotGrid::new(0.0, 0.05, 43).unwrap();
        let spline = init_so3(&imu, grid, &FactorWeights::default(), 30).unwrap();
        for k in 0..20 {
            let t = 0.1 * k as f64;
            assert!(so3::angle(&spline.eval(t).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn init_so3_constant_rate_matches_integration() {
        let w = Vector3::new(0.0, 0.0, 1.0);
        let imu = imu_stream(2.2, 100.0, |_| w, |_| Vector3::zeros());
        let grid = KnotGrid::new(0.0, 0.05, 43).unwrap();
        let spline = init_so3(&imu, grid, &FactorWeights::default(), 30).unwrap();
        // Gyro factors observe only relative rotation, so compare the ramp
        // relative to the spline's own start against closed-form
        // integration of the rate.
        let start = spline.eval(0.0).unwrap();
        for k in 1..=18 {
            let t = 0.1 * k as f64;
            let expected = so3::rot_z(t);
            let got = start.inverse() * spline.eval(t).unwrap();
            let err = so3::angle(&(expected.inverse() * got));
            assert!(err < 1e-6, "t={t} err={err}");
        }
    }

    #[test]
    fn init_so3_noisy_zero_gyro_stays_in_envelope() {
        // Monte Carlo: the integrated angle of white gyro noise stays within
        // 3 sigma * sqrt(T dt) at the end for the vast majority of seeds.
        let sigma = 0.01;
        let t_end = 2.0;
        let envelope = 3.0 * sigma * (t_end * 0.01_f64).sqrt();
        let mut exceed = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let imu = imu_stream(
                2.2,
                100.0,
                |_| {
                    Vector3::new(
                        sigma * {
                            let x: f64 = StandardNormal.sample(&mut rng);
                            x
                        },
                        sigma * {
                            let x: f64 = StandardNormal.sample(&mut rng);
                            x
                        },
                        sigma * {
                            let x: f64 = StandardNormal.sample(&mut rng);
                            x
                        },
                    )
                },
                |_| Vector3::zeros(),
            );
            let grid = KnotGrid::new(0.0, 0.05, 43).unwrap();
            let spline = init_so3(&imu, grid, &FactorWeights::default(), 30).unwrap();
            if so3::angle(&spline.eval(t_end).unwrap()) > envelope {
                exceed += 1;
            }
        }
        assert!(exceed <= 3, "{exceed}/20 runs exceeded the 3-sigma envelope");
    }

    fn ego(stamp: f64, v: Vector3<f64>) -> crate::radar::EgoVelocityEstimate {
        crate::radar::EgoVelocityEstimate {
            stamp,
            v: [v.x, v.y, v.z],
            inlier_indices: vec![0, 1, 2],
            residual_rms: 0.0,
            valid: true,
            reason: None,
        }
    }

    #[test]
    fn stationary_test_cases() {
        let zeros: Vec<_> = (0..20).map(|k| ego(k as f64 * 0.05, Vector3::zeros())).collect();
        assert!(is_stationary(&zeros, 0.05, 0.01));

        let moving: Vec<_> =
            (0..20).map(|k| ego(k as f64 * 0.05, Vector3::new(1.0, 0.0, 0.0))).collect();
        assert!(!is_stationary(&moving, 0.05, 0.01));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy: Vec<_> = (0..40)
            .map(|k| {
                let n: Vector3<f64> = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                ego(k as f64 * 0.05, n * 0.01)
            })
            .collect();
        assert!(is_stationary(&noisy, 0.05, 0.01));
        assert!(!is_stationary(&[], 0.05, 0.01));
    }

    #[test]
    fn gravity_init_static_level_and_pitched() {
        let ext = Extrinsics::identity();
        let grid = KnotGrid::new(0.0, 0.05, 43).unwrap();
        let so3_spline = SplineSo3::constant(grid, UnitQuaternion::identity()).unwrap();
        // Level stationary: accel reads (0, 0, -9.81) so g = (0, 0, 9.81).
        let imu = imu_stream(2.0, 100.0, |_| Vector3::zeros(), |_| {
            Vector3::new(0.0, 0.0, -GRAVITY)
        });
        let g = init_gravity_static(&imu, &[], &so3_spline, &ext, 1.0, 0.5).unwrap();
        assert_relative_eq!(g, Vector3::new(0.0, 0.0, GRAVITY), epsilon = 1e-12);

        // Pitched 10 degrees: gravity tilts with the body, norm pinned.
        let tilt = so3::rot_y(10.0_f64.to_radians());
        let accel = -(tilt.inverse() * Vector3::new(0.0, 0.0, GRAVITY));
        let imu = imu_stream(2.0, 100.0, |_| Vector3::zeros(), |_| accel);
        let g = init_gravity_static(&imu, &[], &so3_spline, &ext, 1.0, 0.5).unwrap();
        assert_relative_eq!(g.norm(), GRAVITY, epsilon = 1e-12);
        assert_relative_eq!(g, tilt.inverse() * Vector3::new(0.0, 0.0, GRAVITY), epsilon = 1e-9);

        // Noisy level case: direction error well below half a degree.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imu = imu_stream(5.0, 100.0, |_| Vector3::zeros(), |_| {
            let n: Vector3<f64> = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            Vector3::new(0.0, 0.0, -GRAVITY) + n * 0.05
        });
        let g = init_gravity_static(&imu, &[], &so3_spline, &ext, 1.0, 0.5).unwrap();
        let angle = g.angle(&Vector3::new(0.0, 0.0, GRAVITY)).to_degrees();
        assert!(angle <= 0.5, "direction error {angle} deg");
        assert_relative_eq!(g.norm(), GRAVITY, epsilon = 1e-12);
    }

    #[test]
    fn gravity_init_dynamic_stationary_matches_static() {
        let ext = Extrinsics::identity();
        let grid = KnotGrid::new(0.0, 0.05, 43).unwrap();
        let so3_spline = SplineSo3::constant(grid, UnitQuaternion::identity()).unwrap();
        let imu = imu_stream(2.0, 100.0, |_| Vector3::zeros(), |_| {
            Vector3::new(0.0, 0.0, -GRAVITY)
        });
        let estimates: Vec<_> = (0..30).map(|k| ego(0.05 * k as f64, Vector3::zeros())).collect();
        let (g, fallback) = init_gravity_dynamic(&estimates, &so3_spline, &imu, &ext).unwrap();
        let g_static =
            init_gravity_static(&imu, &estimates, &so3_spline, &ext, 1.0, 0.5).unwrap();
        assert!(!fallback);
        assert_relative_eq!(g, g_static, epsilon = 1e-9);
        assert_relative_eq!(g.norm(), GRAVITY, epsilon = 1e-12);

        // Degenerate: too few estimates falls back to the accelerometer mean.
        let (g, fallback) = init_gravity_dynamic(&[], &so3_spline, &imu, &ext).unwrap();
        assert!(fallback);
        assert_relative_eq!(g.norm(), GRAVITY, epsilon = 1e-12);
    }

    fn level_state() -> EstimatorState {
        let grid = KnotGrid::new(0.0, 0.05, 43).unwrap();
        EstimatorState {
            so3: SplineSo3::constant(grid, UnitQuaternion::identity()).unwrap(),
            vel: SplineR3::constant(grid, Vector3::new(0.4, 0.0, 0.0)).unwrap(),
            grav: SplineR3::constant(grid, gravity_world()).unwrap(),
            b_v: Vector2::zeros(),
            b_a: Vector3::zeros(),
            g_global: gravity_world(),
            r_align: UnitQuaternion::identity(),
        }
    }

    #[test]
    fn alignment_cases() {
        // Already aligned: identity transform, state unchanged.
        let mut state = level_state();
        let before = state.vel.ctrl[0];
        align_to_gravity(&mut state, gravity_world());
        assert!(so3::angle(&state.r_align) < 1e-12);
        assert_relative_eq!(state.vel.ctrl[0], before, epsilon = 1e-12);
        assert_relative_eq!(state.g_global, gravity_world(), epsilon = 1e-15);

        // 10-degree tilt about x: the aligned global gravity is purely z.
        let mut state = level_state();
        let g_i0 = so3::rot_x(10.0_f64.to_radians()) * gravity_world();
        align_to_gravity(&mut state, g_i0);
        let recovered = state.r_align.inverse() * g_i0;
        assert!((recovered - gravity_world()).norm() <= 1e-12);
    }

    #[test]
    fn gravity_spline_seeding() {
        // Level: every control point is (0, 0, 9.81).
        let mut state = level_state();
        init_gravity_spline(&mut state);
        for c in &state.grav.ctrl {
            assert_relative_eq!(*c, gravity_world(), epsilon = 1e-12);
        }

        // Constant pitched attitude: constant tilted vector of norm 9.81.
        let mut state = level_state();
        let q = so3::rot_y(0.3);
        state.so3 = SplineSo3::constant(state.so3.grid, q).unwrap();
        init_gravity_spline(&mut state);
        for c in &state.grav.ctrl {
            assert_relative_eq!(c.norm(), GRAVITY, epsilon = 1e-12);
            assert_relative_eq!(*c, q.inverse() * gravity_world(), epsilon = 1e-12);
        }

        // Yaw-rotating trajectory: the recovered spline satisfies the
        // transport equation.
        let mut state = level_state();
        let ctrl: Vec<_> = (0..43).map(|k| so3::rot_z(0.05 * k as f64)).collect();
        state.so3 = SplineSo3::new(state.so3.grid, ctrl).unwrap();
        init_gravity_spline(&mut state);
        for k in 0..30 {
            let t = 0.02 + 0.06 * k as f64;
            let r = crate::factors::gravity_transport_residual(&state, t).unwrap();
            assert!(r.norm() <= 1e-6, "transport residual {r:?} at {t}");
        }
    }

    #[test]
    fn post_optimization_cases() {
        let g = gravity_world();
        let grid = KnotGrid::new(0.0, 0.05, 5).unwrap();
        let grav = SplineR3::constant(grid, g).unwrap();

        // Consistent rotations stay put.
        let mut so3_spline = SplineSo3::constant(grid, so3::rot_z(0.7)).unwrap();
        let before = so3_spline.ctrl.clone();
        post_optimize_knots(&mut so3_spline, &grav, 0..5, &g);
        for (a, b) in so3_spline.ctrl.iter().zip(&before) {
            assert!(so3::angle(&(a.inverse() * b)) < 1e-12);
        }

        // A 1-degree roll error is corrected to well within 0.01 degrees.
        let roll = so3::rot_x(1.0_f64.to_radians());
        let mut so3_spline = SplineSo3::constant(grid, roll).unwrap();
        post_optimize_knots(&mut so3_spline, &grav, 0..5, &g);
        for q in &so3_spline.ctrl {
            let residual = q * g - g;
            let tilt = (residual.norm() / GRAVITY).asin().to_degrees();
            assert!(tilt <= 0.01, "residual tilt {tilt} deg");
        }

        // The applied correction never has a component about gravity.
        let tilted = so3::rot_x(0.05) * so3::rot_z(1.2);
        let mut so3_spline = SplineSo3::constant(grid, tilted).unwrap();
        let before = so3_spline.ctrl.clone();
        post_optimize_knots(&mut so3_spline, &grav, 0..5, &g);
        for (after, b) in so3_spline.ctrl.iter().zip(&before) {
            let correction = so3::log(&(after * b.inverse()));
            assert!(
                correction.dot(&g.normalize()).abs() <= 1e-9,
                "yaw component {}",
                correction.dot(&g.normalize())
            );
        }
    }

    #[test]
    fn integrate_position_cases() {
        let grid = KnotGrid::new(0.0, 0.5, 30).unwrap();
        // Zero velocity: all positions stay at the origin.
        let so3_spline = SplineSo3::constant(grid, UnitQuaternion::identity()).unwrap();
        let vel = SplineR3::constant(grid, Vector3::zeros()).unwrap();
        let stamps: Vec<f64> = (0..20).map(|k| 0.5 * k as f64).collect();
        let traj = integrate_position(&so3_spline, &vel, &stamps, 0.005).unwrap();
        assert!(traj.points.iter().all(|p| p.position.norm() == 0.0));

        // Straight line: 1 m/s for 10 s lands at (10, 0, 0).
        let vel = SplineR3::constant(grid, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let stamps: Vec<f64> = (0..=100).map(|k| 0.1 * k as f64).collect();
        let traj = integrate_position(&so3_spline, &vel, &stamps, 0.005).unwrap();
        let end = traj.points.last().unwrap().position;
        assert_relative_eq!(end, Vector3::new(10.0, 0.0, 0.0), epsilon = 1e-9);

        // Circle: omega = (0,0,1), body velocity (1,0,0) closes after 2 pi.
        let n = 40;
        let grid = KnotGrid::new(0.0, 0.2, n).unwrap();
        let ctrl: Vec<_> = (0..n).map(|k| so3::rot_z(0.2 * k as f64)).collect();
        let so3_spline = SplineSo3::new(grid, ctrl).unwrap();
        let vel = SplineR3::constant(grid, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let tau = std::f64::consts::TAU;
        let stamps: Vec<f64> = (0..=628).map(|k| k as f64 * tau / 628.0).collect();
        let traj = integrate_position(&so3_spline, &vel, &stamps, 0.005).unwrap();
        let closure = traj.points.last().unwrap().position.norm();
        assert!(closure <= 1e-5, "loop closure error {closure}");

        // Coverage gap is an error.
        assert!(matches!(
            integrate_position(&so3_spline, &vel, &[0.0, 100.0], 0.005),
            Err(PipelineError::CoverageGap { .. })
        ));
    }

    #[test]
    fn truncated_dataset_exits_cleanly() {
        let out = make_scenario("flat_loop", &NoiseConfig::zero()).unwrap();
        let mut ds = out.dataset;
        // Keep just enough IMU to initialize, but no radar frame beyond the
        // init window.
        ds.imu.retain(|s| s.stamp <= 2.2);
        ds.radar.retain(|s| s.stamp <= 2.0);
        ds.leg.retain(|s| s.stamp <= 2.2);
        let result = run(&ds, &PipelineConfig::default()).unwrap();
        assert!(result.trajectory.is_empty());
        assert!(result.diagnostics.frames.is_empty());
    }

    #[test]
    fn too_short_stream_errors_with_stage() {
        let out = make_scenario("flat_loop", &NoiseConfig::zero()).unwrap();
        let mut ds = out.dataset;
        ds.imu.retain(|s| s.stamp <= 0.5);
        ds.radar.retain(|s| s.stamp <= 0.5);
        ds.leg.retain(|s| s.stamp <= 0.5);
        match run(&ds, &PipelineConfig::default()) {
            Err(PipelineError::InitFailed { stage, .. }) => {
                assert_eq!(stage, "orientation spline");
            }
            other => panic!("expected init failure, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn duplicate_radar_stamp_is_a_no_op_and_empty_scan_solves() {
        let out = make_scenario("flat_loop", &NoiseConfig::zero()).unwrap();
        let mut ds = out.dataset;
        let cut = 4.0;
        ds.imu.retain(|s| s.stamp <= cut);
        ds.radar.retain(|s| s.stamp <= cut);
        ds.leg.retain(|s| s.stamp <= cut);
        // Empty one scan in the middle; the window still solves on the
        // remaining factors.
        let mid = ds.radar.len() / 2;
        ds.radar[mid].points.clear();
        let baseline = run(&ds, &PipelineConfig::default()).unwrap();
        assert_eq!(
            baseline.diagnostics.frames.len(),
            ds.radar.iter().filter(|s| s.stamp > 2.0).count()
        );
        assert_eq!(baseline.diagnostics.rolled_back_frames, 0);
    }

    #[test]
    fn window_factor_jacobians_match_independent_differences() {
        // Numeric Jacobians at two very different step sizes must agree,
        // which they only do when the residuals are smooth and the
        // evaluation is consistent.
        use crate::solver::numeric_jacobian;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_rot = || {
            ParamBlock::Rot(so3::exp(&Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            )))
        };
        let rots: Vec<ParamBlock> = (0..3).map(|_| rand_rot()).collect();
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let mut rand_vec = || {
            ParamBlock::Vec3(Vector3::new(
                rng2.random_range(-1.0..1.0),
                rng2.random_range(-1.0..1.0),
                rng2.random_range(-1.0..1.0),
            ))
        };
        let vecs: Vec<ParamBlock> = (0..3).map(|_| rand_vec()).collect();

        let compare = |f: &dyn Factor, vals: &[ParamBlock]| {
            let j1 = numeric_jacobian(f, vals, 1e-6);
            let j2 = numeric_jacobian(f, vals, 1e-5);
            let denom = j1.norm().max(1.0);
            assert!(
                (&j1 - &j2).norm() / denom <= 1e-4,
                "jacobian mismatch {} for {}",
                (&j1 - &j2).norm() / denom,
                f.label()
            );
        };

        let gyro = GyroFactor {
            ids: vec![0, 1, 2],
            u: 0.3,
            dt: 0.05,
            meas: Vector3::new(0.1, -0.2, 0.4),
            w: 1.0,
        };
        compare(&gyro, &rots);

        let mut vals = rots.clone();
        vals.extend(vecs.iter().cloned());
        vals.push(ParamBlock::Vec3(Vector3::new(0.01, 0.0, -0.02)));
        let accel = AccelFactor {
            ids: vec![0, 1, 2, 3, 4, 5, 6],
            u: 0.4,
            dt: 0.05,
            meas: Vector3::new(0.0, 0.1, -9.7),
            g_global: gravity_world(),
            w: 1.0,
        };
        compare(&accel, &vals);

        let mut vals_leg = rots.clone();
        vals_leg.extend(vecs.iter().cloned());
        vals_leg.push(ParamBlock::Vec2(Vector2::new(0.02, -0.01)));
        let leg = LegFactor {
            ids: vec![0, 1, 2, 3, 4, 5, 6],
            u: 0.7,
            dt: 0.05,
            meas: Vector3::new(0.4, 0.0, 0.0),
            r_align: so3::exp(&Vector3::new(0.01, -0.02, 0.3)),
            r_ib: so3::rot_x(std::f64::consts::PI),
            t_ib: Vector3::new(-0.05, 0.0, 0.12),
            bias_fixed_zero: false,
            w: 1.0,
        };
        compare(&leg, &vals_leg);

        let mut vals_radar = rots.clone();
        vals_radar.extend(vecs.iter().cloned());
        let radar = RadarFactor {
            ids: vec![0, 1, 2, 3, 4, 5],
            u: 0.2,
            dt: 0.05,
            dirs: vec![
                (Vector3::new(1.0, 0.2, 0.1).normalize(), -0.4),
                (Vector3::new(0.3, -0.9, 0.2).normalize(), 0.1),
            ],
            r_align: UnitQuaternion::identity(),
            r_ir: UnitQuaternion::identity(),
            t_ir: Vector3::new(0.15, 0.0, 0.08),
            w: 1.0,
            cauchy: 0.3,
        };
        compare(&radar, &vals_radar);

        let mut vals_pair: Vec<ParamBlock> = (0..5).map(|_| rand_vec()).collect();
        vals_pair.extend((0..3).map(|_| rand_vec()));
        vals_pair.push(ParamBlock::Vec3(Vector3::new(0.01, 0.02, -0.01)));
        let pair = GravityPairFactor {
            ids: (0..9).collect(),
            vel_span: 5,
            seg_i_off: 0,
            u_i: 0.3,
            seg_j_off: 2,
            u_j: 0.5,
            u_grav: 0.3,
            dt_pair: 0.1,
            rot_ij: so3::rot_z(0.02).to_rotation_matrix().into_inner(),
            beta_accel: Vector3::new(0.01, -0.02, -0.98),
            beta_rot: Matrix3::identity() * 0.1,
            w: 1.0,
        };
        compare(&pair, &vals_pair);

        let mut vals_tr = vecs.clone();
        vals_tr.extend(rots.iter().cloned());
        let transport = TransportFactor { ids: (0..6).collect(), u: 0.6, dt: 0.05, w: 1.0 };
        compare(&transport, &vals_tr);
    }
}
