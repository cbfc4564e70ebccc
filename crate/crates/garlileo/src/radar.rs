//! Instantaneous 3-D ego-velocity from a single radar scan.
//!
//! Each scan point carries a Doppler radial velocity `v_j = -(p_j/|p_j|) . v`
//! for a static target, so three or more non-coplanar directions determine
//! the sensor velocity `v`. Dynamic targets are rejected with RANSAC before a
//! final least-squares refit. The whole estimate is a pure function of
//! `(scan, cfg)` including the RANSAC seed, so scans may be processed in
//! parallel and results are reproducible.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RadarError {
    #[error("radar point has zero norm")]
    ZeroNormPoint,
}

/// One radar return: position in the radar frame plus Doppler speed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RadarPoint {
    pub p: [f64; 3],
    pub doppler: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
}

impl RadarPoint {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.p[0], self.p[1], self.p[2])
    }
}

/// A timestamped Doppler point cloud.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RadarScan {
    pub stamp: f64,
    pub points: Vec<RadarPoint>,
}

/// RANSAC and refit parameters for [`estimate_ego_velocity`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Inlier gate on |predicted - measured| Doppler in m/s.
    pub threshold: f64,
    /// Estimates with fewer inliers are flagged invalid.
    pub min_inliers: usize,
    /// Hard cap on RANSAC hypotheses; the adaptive stop usually ends earlier.
    pub max_iters: usize,
    /// Confidence level of the adaptive iteration bound.
    pub confidence: f64,
    /// Singular-value ratio above which the direction set is degenerate.
    pub max_cond: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            min_inliers: 8,
            max_iters: 200,
            confidence: 0.99,
            max_cond: 1e4,
            seed: 0,
        }
    }
}

/// Ego velocity recovered from one scan, in the radar frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgoVelocityEstimate {
    pub stamp: f64,
    pub v: [f64; 3],
    pub inlier_indices: Vec<usize>,
    pub residual_rms: f64,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl EgoVelocityEstimate {
    fn invalid(stamp: f64, reason: impl Into<String>) -> Self {
        Self {
            stamp,
            v: [0.0; 3],
            inlier_indices: Vec::new(),
            residual_rms: f64::INFINITY,
            valid: false,
            reason: Some(reason.into()),
        }
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.v[0], self.v[1], self.v[2])
    }
}

/// Doppler speed a static target at `p` would report for sensor velocity `v`.
pub fn doppler_predict(p: &Vector3<f64>, v: &Vector3<f64>) -> Result<f64, RadarError> {
    let n = p.norm();
    if n <= 0.0 || !n.is_finite() {
        return Err(RadarError::ZeroNormPoint);
    }
    Ok(-(p / n).dot(v))
}

fn residual(dir: &Vector3<f64>, doppler: f64, v: &Vector3<f64>) -> f64 {
    -dir.dot(v) - doppler
}

fn lsq_refit(
    dirs: &[Vector3<f64>],
    dopplers: &[f64],
    idx: &[usize],
    max_cond: f64,
) -> Option<Vector3<f64>> {
    let m = DMatrix::from_fn(idx.len(), 3, |r, c| -dirs[idx[r]][c]);
    let b = DVector::from_fn(idx.len(), |r, _| dopplers[idx[r]]);
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > max_cond {
        return None;
    }
    let sol = svd.solve(&b, 0.0).ok()?;
    Some(Vector3::new(sol[0], sol[1], sol[2]))
}

/// RANSAC + least-squares ego-velocity estimation for one scan.
pub fn estimate_ego_velocity(scan: &RadarScan, cfg: &RansacConfig) -> EgoVelocityEstimate {
    let n = scan.points.len();
    if n < 3 {
        return EgoVelocityEstimate::invalid(scan.stamp, "fewer than 3 radar points");
    }
    let mut dirs = Vec::with_capacity(n);
    for pt in &scan.points {
        let p = pt.position();
        let norm = p.norm();
        if norm <= 0.0 || !norm.is_finite() {
            return EgoVelocityEstimate::invalid(scan.stamp, "scan contains a zero-norm point");
        }
        dirs.push(p / norm);
    }
    let dopplers: Vec<f64> = scan.points.iter().map(|p| p.doppler).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<usize>, Vector3<f64>)> = None;
    let mut needed = cfg.max_iters;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iters) {
        iter += 1;
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n);
        while j == i {
            j = rng.random_range(0..n);
        }
        let mut k = rng.random_range(0..n);
        while k == i || k == j {
            k = rng.random_range(0..n);
        }
        let m3 = Matrix3::from_rows(&[
            (-dirs[i]).transpose(),
            (-dirs[j]).transpose(),
            (-dirs[k]).transpose(),
        ]);
        // Unit rows, so the determinant directly measures hypothesis geometry.
        if m3.determinant().abs() < 1e-4 {
            continue;
        }
        let Some(inv) = m3.try_inverse() else { continue };
        let v = inv * Vector3::new(dopplers[i], dopplers[j], dopplers[k]);
        let inliers: Vec<usize> = (0..n)
            .filter(|&t| residual(&dirs[t], dopplers[t], &v).abs() <= cfg.threshold)
            .collect();
        if best.as_ref().map_or(true, |(b, _)| inliers.len() > b.len()) {
            let w = inliers.len() as f64 / n as f64;
            best = Some((inliers, v));
            // Adaptive bound with the configured confidence.
            let denom = (1.0 - w.powi(3)).max(1e-12).ln();
            if denom < 0.0 {
                needed = ((1.0 - cfg.confidence).ln() / denom).ceil() as usize;
            }
        }
        if best.as_ref().map_or(false, |(b, _)| b.len() == n) {
            break;
        }
    }

    let Some((mut inliers, mut v)) = best else {
        return EgoVelocityEstimate::invalid(scan.stamp, "no valid RANSAC hypothesis");
    };

    // Refit on the consensus set and re-gate against the refined estimate.
    for _ in 0..2 {
        if inliers.len() < 3 {
            break;
        }
        match lsq_refit(&dirs, &dopplers, &inliers, cfg.max_cond) {
            Some(refined) => v = refined,
            None => {
                return EgoVelocityEstimate::invalid(
                    scan.stamp,
                    "degenerate direction geometry (coplanar or rank-deficient)",
                )
            }
        }
        inliers = (0..n)
            .filter(|&t| residual(&dirs[t], dopplers[t], &v).abs() <= cfg.threshold)
            .collect();
    }

    if inliers.len() < cfg.min_inliers.max(3) {
        return EgoVelocityEstimate::invalid(
            scan.stamp,
            format!("{} inliers below minimum {}", inliers.len(), cfg.min_inliers),
        );
    }
    let rms = (inliers
        .iter()
        .map(|&t| residual(&dirs[t], dopplers[t], &v).powi(2))
        .sum::<f64>()
        / inliers.len() as f64)
        .sqrt();
    EgoVelocityEstimate {
        stamp: scan.stamp,
        v: [v.x, v.y, v.z],
        inlier_indices: inliers,
        residual_rms: rms,
        valid: true,
        reason: None,
    }
}
