//! Forward/inverse kinematics of a parametric 3-DoF quadruped leg and
//! contact-centric ego-velocity from joint encoders plus contact flags.
//!
//! Base frame convention: x forward, y left, z up, origin at the body
//! center. Each leg is hip-roll (about x), hip-pitch, knee-pitch, where
//! positive pitch swings the leg toward +x. With all joints at zero the leg
//! points straight down: `foot = hip + (0, side * l1, -(l2 + l3))`.
//!
//! While a foot is in contact its frame is assumed fixed to the ground, so
//! differencing consecutive foot positions in the base frame yields the base
//! ego-velocity with flipped sign. All functions are pure.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3;

pub const LEG_COUNT: usize = 4;

#[derive(Debug, Error)]
pub enum LegError {
    #[error("leg index {0} out of range")]
    BadLegIndex(usize),
    #[error("sample pair not strictly increasing in time: {prev} -> {next}")]
    NonPositiveDt { prev: f64, next: f64 },
    #[error("foot target at distance {dist:.3} m unreachable for leg {leg}")]
    Unreachable { leg: usize, dist: f64 },
}

/// Geometry of a four-legged platform with identical leg links.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LegModel {
    /// Hip mounting translation of each leg in the base frame (m).
    pub hips: [[f64; 3]; 4],
    /// +1 for left legs, -1 for right legs (direction of the l1 offset).
    pub side_sign: [f64; 4],
    /// Lateral hip offset (m).
    pub l1: f64,
    /// Upper leg length (m).
    pub l2: f64,
    /// Lower leg length (m).
    pub l3: f64,
}

impl Default for LegModel {
    fn default() -> Self {
        Self {
            hips: [
                [0.25, 0.17, 0.0],
                [0.25, -0.17, 0.0],
                [-0.25, 0.17, 0.0],
                [-0.25, -0.17, 0.0],
            ],
            side_sign: [1.0, -1.0, 1.0, -1.0],
            l1: 0.11,
            l2: 0.33,
            l3: 0.33,
        }
    }
}

impl LegModel {
    pub fn hip(&self, leg: usize) -> Vector3<f64> {
        Vector3::from(self.hips[leg])
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.l2 > 0.0 && self.l3 > 0.0) {
            return Err("leg link lengths l2, l3 must be positive".into());
        }
        if self.side_sign.iter().any(|s| s.abs() != 1.0) {
            return Err("side_sign entries must be +1 or -1".into());
        }
        Ok(())
    }
}

/// Joint angles and contact flags for all four legs at one instant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LegSample {
    pub stamp: f64,
    /// Per-leg (hip-roll, hip-pitch, knee-pitch) in radians.
    pub joints: [[f64; 3]; 4],
    pub contact: [bool; 4],
}

/// Base-frame ego-velocity derived from stance feet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LegVelocityMeasurement {
    pub stamp: f64,
    pub v: [f64; 3],
    pub n_contact: usize,
    pub valid: bool,
}

impl LegVelocityMeasurement {
    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::from(self.v)
    }
}

/// Foot position in the base frame for one leg.
pub fn forward_kinematics(
    model: &LegModel,
    leg: usize,
    alpha: &Vector3<f64>,
) -> Result<Vector3<f64>, LegError> {
    if leg >= LEG_COUNT {
        return Err(LegError::BadLegIndex(leg));
    }
    let (roll, pitch_hip, pitch_knee) = (alpha.x, alpha.y, alpha.z);
    // Planar chain in the rolled hip frame; positive pitch swings forward.
    let x = model.l2 * pitch_hip.sin() + model.l3 * (pitch_hip + pitch_knee).sin();
    let z = -(model.l2 * pitch_hip.cos() + model.l3 * (pitch_hip + pitch_knee).cos());
    let local = Vector3::new(x, model.side_sign[leg] * model.l1, z);
    Ok(model.hip(leg) + so3::rot_x(roll) * local)
}

/// Joint angles reaching the base-frame foot target, inverse of
/// [`forward_kinematics`]. Uses the knee-flexed-backward branch.
pub fn inverse_kinematics(
    model: &LegModel,
    leg: usize,
    foot: &Vector3<f64>,
) -> Result<Vector3<f64>, LegError> {
    if leg >= LEG_COUNT {
        return Err(LegError::BadLegIndex(leg));
    }
    let q = foot - model.hip(leg);
    let offset = model.side_sign[leg] * model.l1;
    let rho_sq = q.y * q.y + q.z * q.z;
    if rho_sq <= offset * offset {
        return Err(LegError::Unreachable { leg, dist: q.norm() });
    }
    let rho = rho_sq.sqrt();
    // Pick the roll branch that keeps the planar chain below the hip.
    let roll = f64::atan2(q.z, q.y) + (offset / rho).clamp(-1.0, 1.0).acos();
    // Rotate back by -roll; the remaining chain lies in the local xz plane.
    let local = so3::rot_x(-roll) * q;
    let a = local.x;
    let b = -local.z;
    let r = (a * a + b * b).sqrt();
    let reach = model.l2 + model.l3;
    let min_reach = (model.l2 - model.l3).abs();
    if r >= reach * (1.0 - 1e-9) || r <= min_reach + 1e-9 {
        return Err(LegError::Unreachable { leg, dist: r });
    }
    let r_sq = r * r;
    let cos_knee =
        ((r_sq - model.l2 * model.l2 - model.l3 * model.l3) / (2.0 * model.l2 * model.l3))
            .clamp(-1.0, 1.0);
    let knee = -cos_knee.acos();
    let hip_pitch = f64::atan2(a, b)
        - f64::atan2(model.l3 * knee.sin(), model.l2 + model.l3 * knee.cos());
    Ok(Vector3::new(roll, hip_pitch, knee))
}

/// Base ego-velocity from two consecutive encoder samples.
///
/// Only legs in contact in both samples contribute; each stance foot is
/// treated as ground-fixed, so the base moves opposite the foot sweep. The
/// measurement is the unweighted mean over contributing legs, stamped at the
/// pair midpoint. A pair older than `max_gap` seconds is returned invalid.
pub fn leg_velocity(
    model: &LegModel,
    prev: &LegSample,
    next: &LegSample,
    max_gap: f64,
) -> Result<LegVelocityMeasurement, LegError> {
    let dt = next.stamp - prev.stamp;
    if dt <= 0.0 {
        return Err(LegError::NonPositiveDt { prev: prev.stamp, next: next.stamp });
    }
    let stamp = 0.5 * (prev.stamp + next.stamp);
    if dt > max_gap {
        return Ok(LegVelocityMeasurement { stamp, v: [0.0; 3], n_contact: 0, valid: false });
    }
    let mut sum = Vector3::zeros();
    let mut n = 0;
    for leg in 0..LEG_COUNT {
        if !(prev.contact[leg] && next.contact[leg]) {
            continue;
        }
        let f_prev = forward_kinematics(model, leg, &Vector3::from(prev.joints[leg]))?;
        let f_next = forward_kinematics(model, leg, &Vector3::from(next.joints[leg]))?;
        sum += -(f_next - f_prev) / dt;
        n += 1;
    }
    if n == 0 {
        return Ok(LegVelocityMeasurement { stamp, v: [0.0; 3], n_contact: 0, valid: false });
    }
    let v = sum / n as f64;
    Ok(LegVelocityMeasurement { stamp, v: [v.x, v.y, v.z], n_contact: n, valid: true })
}
