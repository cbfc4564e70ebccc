//! Trajectory and gravity-direction evaluation.
//!
//! Estimate and ground truth are associated by nearest stamp (10 ms window
//! by default), rigidly aligned in SE(3) by the closed-form least-squares
//! fit (rotation from an SVD of the cross-covariance, no scale), and scored
//! with RMSE absolute pose error (translational, rotational, z-only,
//! xy-only) and relative pose error over consecutive path segments of fixed
//! arc length, normalized per meter. Gravity accuracy is the mean angle
//! between the estimated body-frame gravity and the ground-truth direction
//! obtained by rotating the global gravity vector through interpolated
//! aligned ground-truth orientations. All functions are pure.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::GRAVITY;
use crate::pipeline::{Trajectory, TrajectoryPoint};
use crate::so3;
use crate::spline::{KnotGrid, SplineSo3};

/// Default nearest-stamp association window in seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 3 associated pose pairs, found {0}")]
    TooFewPairs(usize),
    #[error("no associated poses between the trajectories")]
    EmptyAssociation,
    #[error("trajectory too short for segments of {0} m")]
    PathTooShort(f64),
    #[error("no gravity samples covered by the ground truth")]
    NoGravityOverlap,
}

/// Aggregate metric report. Errors are RMSE unless stated otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Translational APE (m).
    pub ape_t: f64,
    /// Rotational APE (deg).
    pub ape_r: f64,
    /// Translational RPE (m/m).
    pub rpe_t: f64,
    /// Rotational RPE (deg/m).
    pub rpe_r: f64,
    /// Vertical APE (m).
    pub ape_z: f64,
    /// Horizontal APE (m).
    pub ape_xy: f64,
    /// Mean angular error of the gravity direction (deg), when evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gravity_mean_deg: Option<f64>,
}

/// Rigid SE(3) alignment `x -> r * x + t`.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub r: UnitQuaternion<f64>,
    pub t: Vector3<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Self { r: UnitQuaternion::identity(), t: Vector3::zeros() }
    }

    /// Applies the alignment to every pose of a trajectory.
    pub fn apply(&self, traj: &Trajectory) -> Trajectory {
        Trajectory {
            points: traj
                .points
                .iter()
                .map(|p| TrajectoryPoint {
                    stamp: p.stamp,
                    position: self.r * p.position + self.t,
                    orientation: self.r * p.orientation,
                })
                .collect(),
        }
    }
}

/// Nearest-stamp association within `window` seconds. Both inputs must be
/// stamp-sorted; each estimate pose is matched to at most one ground-truth
/// pose.
pub fn associate(est: &Trajectory, gt: &Trajectory, window: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, e) in est.points.iter().enumerate() {
        while j + 1 < gt.points.len()
            && (gt.points[j + 1].stamp - e.stamp).abs() <= (gt.points[j].stamp - e.stamp).abs()
        {
            j += 1;
        }
        if j < gt.points.len() && (gt.points[j].stamp - e.stamp).abs() <= window {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Closed-form least-squares rigid alignment taking the second trajectory
/// onto the first (no scale): returns the transform to apply to `gt` plus
/// the associated index pairs.
pub fn align_rigid(est: &Trajectory, gt: &Trajectory) -> Result<(Alignment, Vec<(usize, usize)>), EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_WINDOW);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let n = pairs.len() as f64;
    let mut c_est = Vector3::zeros();
    let mut c_gt = Vector3::zeros();
    for &(i, j) in &pairs {
        c_est += est.points[i].position;
        c_gt += gt.points[j].position;
    }
    c_est /= n;
    c_gt /= n;
    let mut cross = Matrix3::zeros();
    for &(i, j) in &pairs {
        let a = gt.points[j].position - c_gt;
        let b = est.points[i].position - c_est;
        cross += a * b.transpose();
    }
    let svd = cross.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = v_t.transpose() * d * u.transpose();
    let r = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot));
    let t = c_est - r * c_gt;
    Ok((Alignment { r, t }, pairs))
}

/// Absolute pose error of `est` against an already-aligned ground truth.
pub fn compute_ape(est: &Trajectory, gt_aligned: &Trajectory) -> Result<MetricReport, EvalError> {
    let pairs = associate(est, gt_aligned, ASSOCIATION_WINDOW);
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    let mut sq_t = 0.0;
    let mut sq_r = 0.0;
    let mut sq_z = 0.0;
    let mut sq_xy = 0.0;
    for &(i, j) in &pairs {
        let dp = est.points[i].position - gt_aligned.points[j].position;
        sq_t += dp.norm_squared();
        sq_z += dp.z * dp.z;
        sq_xy += dp.x * dp.x + dp.y * dp.y;
        let dr = so3::angle(
            &(gt_aligned.points[j].orientation.inverse() * est.points[i].orientation),
        );
        sq_r += dr * dr;
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        ape_t: (sq_t / n).sqrt(),
        ape_r: (sq_r / n).sqrt().to_degrees(),
        rpe_t: 0.0,
        rpe_r: 0.0,
        ape_z: (sq_z / n).sqrt(),
        ape_xy: (sq_xy / n).sqrt(),
        gravity_mean_deg: None,
    })
}

/// Relative pose error over consecutive ground-truth segments of arc length
/// `delta` meters, normalized per meter: `(rpe_t m/m, rpe_r deg/m)`.
pub fn compute_rpe(
    est: &Trajectory,
    gt_aligned: &Trajectory,
    delta: f64,
) -> Result<(f64, f64), EvalError> {
    let pairs = associate(est, gt_aligned, ASSOCIATION_WINDOW);
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    // Cumulative ground-truth arc length at each associated pair.
    let mut arc = Vec::with_capacity(pairs.len());
    let mut total = 0.0;
    for (k, &(_, j)) in pairs.iter().enumerate() {
        if k > 0 {
            let (_, j_prev) = pairs[k - 1];
            total += (gt_aligned.points[j].position - gt_aligned.points[j_prev].position).norm();
        }
        arc.push(total);
    }
    let mut sq_t = 0.0;
    let mut sq_r = 0.0;
    let mut count = 0usize;
    let mut start = 0usize;
    for k in 0..pairs.len() {
        if arc[k] - arc[start] >= delta {
            let (ei, gi) = pairs[start];
            let (ej, gj) = pairs[k];
            let seg = arc[k] - arc[start];
            let (e0, e1) = (&est.points[ei], &est.points[ej]);
            let (g0, g1) = (&gt_aligned.points[gi], &gt_aligned.points[gj]);
            let dp_est = e0.orientation.inverse() * (e1.position - e0.position);
            let dp_gt = g0.orientation.inverse() * (g1.position - g0.position);
            let dr_est = e0.orientation.inverse() * e1.orientation;
            let dr_gt = g0.orientation.inverse() * g1.orientation;
            let et = (dp_est - dp_gt).norm() / seg;
            let er = so3::angle(&(dr_gt.inverse() * dr_est)).to_degrees() / seg;
            sq_t += et * et;
            sq_r += er * er;
            count += 1;
            start = k;
        }
    }
    if count == 0 {
        return Err(EvalError::PathTooShort(delta));
    }
    Ok(((sq_t / count as f64).sqrt(), (sq_r / count as f64).sqrt()))
}

/// Outcome of [`gravity_error`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GravityErrorReport {
    /// Mean angular error in degrees.
    pub mean_deg: f64,
    pub used: usize,
    /// Gravity samples outside the interpolated ground-truth support.
    pub skipped: usize,
}

/// Mean angular error between estimated body-frame gravity samples and the
/// ground-truth direction `R(t)^T g0` with `g0 = (0, 0, 9.81)`.
///
/// Ground-truth orientations (already aligned to the estimate frame) are
/// interpolated with a cumulative orientation spline on their own cadence;
/// samples outside its support are skipped and counted. The measure only
/// uses directions, so it is invariant to any positive scaling of the
/// estimates.
pub fn gravity_error(
    gravity_log: &[(f64, Vector3<f64>)],
    gt_aligned: &Trajectory,
) -> Result<GravityErrorReport, EvalError> {
    if gt_aligned.points.len() < 4 {
        return Err(EvalError::TooFewPairs(gt_aligned.points.len()));
    }
    // Uniform orientation spline through the ground-truth quaternions.
    let n = gt_aligned.points.len();
    let t0 = gt_aligned.points[0].stamp;
    let dt = (gt_aligned.points[n - 1].stamp - t0) / (n - 1) as f64;
    let grid = KnotGrid::new(t0, dt, n).unwrap();
    let ctrl: Vec<UnitQuaternion<f64>> =
        gt_aligned.points.iter().map(|p| p.orientation).collect();
    let spline = SplineSo3::new(grid, ctrl).unwrap();

    let g0 = Vector3::new(0.0, 0.0, GRAVITY);
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut sum = 0.0;
    for (t, g_est) in gravity_log {
        let Ok(r) = spline.eval(*t) else {
            skipped += 1;
            continue;
        };
        let g_ref = r.inverse() * g0;
        let cosine = (g_est.dot(&g_ref) / (g_est.norm() * g_ref.norm())).clamp(-1.0, 1.0);
        sum += cosine.acos().to_degrees();
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::NoGravityOverlap);
    }
    Ok(GravityErrorReport { mean_deg: sum / used as f64, used, skipped })
}
