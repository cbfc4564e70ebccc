//! Uniform cumulative B-splines of order 3 on R^3 and SO(3).
//!
//! A spline of order `k = 3` consists of quadratic segments; segment `i`
//! covers `[t_i, t_{i+1})` (half-open: a query at exactly `t_{i+1}` belongs
//! to the next segment) and depends on control points `i, i+1, i+2`. Values
//! and first derivatives are C^1 across knots. Queries outside the supported
//! range are an error, never clamped.
//!
//! Values are immutable once constructed; evaluation is pure and may be
//! called concurrently. Mutation (`extend_to`, control-point updates) needs
//! exclusive access.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::so3;

/// Spline order implemented throughout the crate.
pub const ORDER: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("unsupported spline order {0}, only order 3 is implemented")]
    UnsupportedOrder(usize),
    #[error("time {t} outside supported range [{start}, {end})")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("knot spacing must be positive, got {0}")]
    InvalidSpacing(f64),
    #[error("need at least {min} control points, got {got}")]
    TooFewControlPoints { got: usize, min: usize },
    #[error("{got} control points do not match grid size {expected}")]
    ControlCountMismatch { got: usize, expected: usize },
}

/// Coefficients of the cumulative basis polynomials for order `k`.
///
/// Row `j`, column `p` holds the coefficient of `u^p` in `lambda_j(u)`. Only
/// `k == 3` is supported.
pub fn cumulative_blend_matrix(k: usize) -> Result<Matrix3<f64>, SplineError> {
    if k != ORDER {
        return Err(SplineError::UnsupportedOrder(k));
    }
    Ok(Matrix3::new(
        1.0, 0.0, 0.0, //
        0.5, 1.0, -0.5, //
        0.0, 0.0, 0.5,
    ))
}

/// Cumulative basis `(lambda_0, lambda_1, lambda_2)` at normalized time `u`.
#[inline]
pub fn blend(u: f64) -> [f64; 3] {
    [1.0, 0.5 + u * (1.0 - 0.5 * u), 0.5 * u * u]
}

/// Derivative of [`blend`] with respect to `u`.
#[inline]
pub fn blend_dot(u: f64) -> [f64; 3] {
    [0.0, 1.0 - u, u]
}

/// Segment value from the three supporting control points.
#[inline]
pub fn r3_segment_value(
    c: [&Vector3<f64>; 3],
    u: f64,
) -> Vector3<f64> {
    let l = blend(u);
    c[0] + (c[1] - c[0]) * l[1] + (c[2] - c[1]) * l[2]
}

/// Segment time derivative from the three supporting control points.
#[inline]
pub fn r3_segment_deriv(c: [&Vector3<f64>; 3], u: f64, dt: f64) -> Vector3<f64> {
    let ld = blend_dot(u);
    ((c[1] - c[0]) * ld[1] + (c[2] - c[1]) * ld[2]) / dt
}

/// Segment rotation from the three supporting control points.
#[inline]
pub fn so3_segment_value(
    q: [&UnitQuaternion<f64>; 3],
    u: f64,
) -> UnitQuaternion<f64> {
    let l = blend(u);
    let d1 = so3::log_between(q[0], q[1]);
    let d2 = so3::log_between(q[1], q[2]);
    q[0] * so3::exp(&(d1 * l[1])) * so3::exp(&(d2 * l[2]))
}

/// Segment body-frame angular velocity from the three supporting control
/// points.
#[inline]
pub fn so3_segment_omega(q: [&UnitQuaternion<f64>; 3], u: f64, dt: f64) -> Vector3<f64> {
    let ld = blend_dot(u);
    let d1 = so3::log_between(q[0], q[1]);
    let d2 = so3::log_between(q[1], q[2]);
    let a2 = so3::exp(&(d2 * blend(u)[2]));
    (a2.inverse() * d1 * ld[1] + d2 * ld[2]) / dt
}

/// Uniform knot layout shared by all splines of one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotGrid {
    /// Time of control point 0.
    pub t0: f64,
    /// Knot spacing in seconds.
    pub dt: f64,
    /// Number of control points.
    pub n: usize,
}

impl KnotGrid {
    pub fn new(t0: f64, dt: f64, n: usize) -> Result<Self, SplineError> {
        if !(dt > 0.0) {
            return Err(SplineError::InvalidSpacing(dt));
        }
        if n < ORDER {
            return Err(SplineError::TooFewControlPoints { got: n, min: ORDER });
        }
        Ok(Self { t0, dt, n })
    }

    /// Time of knot/control point `i`.
    #[inline]
    pub fn knot_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// First instant not covered by any fully supported segment.
    #[inline]
    pub fn support_end(&self) -> f64 {
        self.t0 + (self.n - 2) as f64 * self.dt
    }

    /// Segment index and normalized time for a query, or an out-of-range error.
    pub fn locate(&self, t: f64) -> Result<(usize, f64), SplineError> {
        let end = self.support_end();
        if !(t >= self.t0 && t < end) || !t.is_finite() {
            return Err(SplineError::OutOfRange {
                t,
                start: self.t0,
                end,
            });
        }
        let mut seg = ((t - self.t0) / self.dt).floor() as isize;
        let mut u = (t - self.t0) / self.dt - seg as f64;
        // Guard the floor against floating-point edges of the half-open segments.
        if u < 0.0 {
            seg -= 1;
            u += 1.0;
        } else if u >= 1.0 {
            seg += 1;
            u -= 1.0;
        }
        let seg = seg.clamp(0, (self.n - ORDER) as isize) as usize;
        Ok((seg, u))
    }

    /// Number of segments (each spanning `dt`).
    #[inline]
    pub fn segments(&self) -> usize {
        self.n - (ORDER - 1)
    }
}

/// Cumulative B-spline with values in R^3.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineR3 {
    pub grid: KnotGrid,
    pub ctrl: Vec<Vector3<f64>>,
}

impl SplineR3 {
    pub fn new(grid: KnotGrid, ctrl: Vec<Vector3<f64>>) -> Result<Self, SplineError> {
        if ctrl.len() != grid.n {
            return Err(SplineError::ControlCountMismatch {
                got: ctrl.len(),
                expected: grid.n,
            });
        }
        Ok(Self { grid, ctrl })
    }

    /// Spline with every control point equal to `c`.
    pub fn constant(grid: KnotGrid, c: Vector3<f64>) -> Result<Self, SplineError> {
        let n = grid.n;
        Self::new(grid, vec![c; n])
    }

    /// Value on segment `seg` at normalized time `u`.
    #[inline]
    pub fn eval_segment(&self, seg: usize, u: f64) -> Vector3<f64> {
        r3_segment_value([&self.ctrl[seg], &self.ctrl[seg + 1], &self.ctrl[seg + 2]], u)
    }

    /// First time derivative on segment `seg` at normalized time `u`.
    #[inline]
    pub fn deriv_segment(&self, seg: usize, u: f64) -> Vector3<f64> {
        r3_segment_deriv(
            [&self.ctrl[seg], &self.ctrl[seg + 1], &self.ctrl[seg + 2]],
            u,
            self.grid.dt,
        )
    }

    /// Value at time `t`.
    pub fn eval(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        let (seg, u) = self.grid.locate(t)?;
        Ok(self.eval_segment(seg, u))
    }

    /// First time derivative at time `t`.
    pub fn deriv(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        let (seg, u) = self.grid.locate(t)?;
        Ok(self.deriv_segment(seg, u))
    }

    /// Extends support past `t_end` by appending linearly extrapolated
    /// control points (`c_n = 2 c_{n-1} - c_{n-2}`). No-op if already covered.
    pub fn extend_to(&mut self, t_end: f64) -> usize {
        let mut appended = 0;
        while t_end >= self.grid.support_end() {
            let n = self.ctrl.len();
            let next = 2.0 * self.ctrl[n - 1] - self.ctrl[n - 2];
            self.ctrl.push(next);
            self.grid.n += 1;
            appended += 1;
        }
        appended
    }
}

/// Cumulative B-spline with values in SO(3), control points stored as unit
/// quaternions.
#[derive(Debug, Clone)]
pub struct SplineSo3 {
    pub grid: KnotGrid,
    pub ctrl: Vec<UnitQuaternion<f64>>,
}

impl SplineSo3 {
    pub fn new(grid: KnotGrid, ctrl: Vec<UnitQuaternion<f64>>) -> Result<Self, SplineError> {
        if ctrl.len() != grid.n {
            return Err(SplineError::ControlCountMismatch {
                got: ctrl.len(),
                expected: grid.n,
            });
        }
        Ok(Self { grid, ctrl })
    }

    /// Spline with every control point equal to `q`.
    pub fn constant(grid: KnotGrid, q: UnitQuaternion<f64>) -> Result<Self, SplineError> {
        let n = grid.n;
        Self::new(grid, vec![q; n])
    }

    /// Rotation on segment `seg` at normalized time `u`.
    pub fn eval_segment(&self, seg: usize, u: f64) -> UnitQuaternion<f64> {
        so3_segment_value([&self.ctrl[seg], &self.ctrl[seg + 1], &self.ctrl[seg + 2]], u)
    }

    /// Body-frame angular velocity `vee(R^T dR/dt)` on segment `seg`.
    ///
    /// With `A_j = Exp(lambda_j d_j)` this is
    /// `lambda_1' A_2^T d_1 + lambda_2' d_2`, divided by the knot spacing.
    pub fn body_angular_velocity_segment(&self, seg: usize, u: f64) -> Vector3<f64> {
        so3_segment_omega(
            [&self.ctrl[seg], &self.ctrl[seg + 1], &self.ctrl[seg + 2]],
            u,
            self.grid.dt,
        )
    }

    /// Rotation at time `t`.
    pub fn eval(&self, t: f64) -> Result<UnitQuaternion<f64>, SplineError> {
        let (seg, u) = self.grid.locate(t)?;
        Ok(self.eval_segment(seg, u))
    }

    /// Body-frame angular velocity at time `t` in rad/s.
    pub fn body_angular_velocity(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        let (seg, u) = self.grid.locate(t)?;
        Ok(self.body_angular_velocity_segment(seg, u))
    }

    /// Extends support past `t_end` by appending control points with the last
    /// rotation increment (`R_n = R_{n-1} (R_{n-2}^T R_{n-1})`).
    pub fn extend_to(&mut self, t_end: f64) -> usize {
        let mut appended = 0;
        while t_end >= self.grid.support_end() {
            let n = self.ctrl.len();
            let inc = self.ctrl[n - 2].inverse() * self.ctrl[n - 1];
            // Renormalize: the recurrence compounds any unit-norm drift of
            // the tail control points exponentially.
            let next = UnitQuaternion::new_normalize((self.ctrl[n - 1] * inc).into_inner());
            self.ctrl.push(next);
            self.grid.n += 1;
            appended += 1;
        }
        appended
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> KnotGrid {
        KnotGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn blend_matrix_rejects_other_orders() {
        assert!(matches!(
            cumulative_blend_matrix(4),
            Err(SplineError::UnsupportedOrder(4))
        ));
        assert!(cumulative_blend_matrix(3).is_ok());
    }

    #[test]
    fn blend_matrix_matches_cumulative_polynomials() {
        // lambda_0 = 1, lambda_1 = 1/2 + u - u^2/2, lambda_2 = u^2/2,
        // the cumulative row sums of the degree-2 uniform basis.
        let m = cumulative_blend_matrix(3).unwrap();
        for &u in &[0.0, 0.25, 0.5, 0.75, 1.0 - 1e-12] {
            let poly = |row: usize| m[(row, 0)] + m[(row, 1)] * u + m[(row, 2)] * u * u;
            let l = blend(u);
            for j in 0..3 {
                assert_relative_eq!(poly(j), l[j], epsilon = 1e-15);
            }
        }
        assert_eq!(blend(0.0), [1.0, 0.5, 0.0]);
        assert_eq!(blend(1.0), [1.0, 1.0, 0.5]);
    }

    #[test]
    fn constant_spline_is_constant() {
        let c = Vector3::new(1.0, -2.0, 3.0);
        let s = SplineR3::constant(grid(6), c).unwrap();
        for &t in &[0.0, 0.3, 1.7, 3.999] {
            assert_relative_eq!(s.eval(t).unwrap(), c, epsilon = 1e-15);
            assert_relative_eq!(s.deriv(t).unwrap(), Vector3::zeros(), epsilon = 1e-15);
        }
    }

    #[test]
    fn single_segment_midpoint_value() {
        // ctrl (0),(1),(2) at u = 0.5: 0*1 + 1*(7/8) + 1*(1/8) = 1.0
        let s = SplineR3::new(
            grid(3),
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(2.0, 0.0, 0.0),
            ],
        )
        .unwrap();
        assert_relative_eq!(s.eval(0.5).unwrap().x, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn linear_ramp_value_and_slope() {
        let ctrl: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let s = SplineR3::new(grid(4), ctrl).unwrap();
        // On a linear ramp the spline value at segment midpoints advances by
        // exactly one control-point increment per knot.
        assert_relative_eq!(s.eval(0.5).unwrap().x, 1.0, epsilon = 1e-14);
        assert_relative_eq!(s.eval(1.5).unwrap().x, 2.0, epsilon = 1e-14);
        for &t in &[0.0, 0.4, 1.2, 1.99] {
            assert_relative_eq!(s.deriv(t).unwrap().x, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn out_of_range_is_an_error() {
        let s = SplineR3::constant(grid(4), Vector3::zeros()).unwrap();
        // Support is [0, 2): exactly t = 2 already belongs to a segment that
        // has no third control point.
        assert!(s.eval(-0.001).is_err());
        assert!(s.eval(2.0).is_err());
        assert!(s.eval(f64::NAN).is_err());
        assert!(s.eval(1.9999999).is_ok());
    }

    #[test]
    fn knot_boundary_belongs_to_next_segment() {
        let g = grid(5);
        assert_eq!(g.locate(1.0).unwrap().0, 1);
        assert_eq!(g.locate(1.0 - 1e-13).unwrap().0, 0);
        let (_, u) = g.locate(1.0).unwrap();
        assert!(u.abs() < 1e-12);
    }

    #[test]
    fn r3_derivative_matches_finite_difference() {
        let ctrl = vec![
            Vector3::new(0.3, -0.1, 2.0),
            Vector3::new(1.0, 0.4, -0.2),
            Vector3::new(-0.5, 0.9, 0.1),
            Vector3::new(0.2, -1.2, 0.7),
            Vector3::new(1.4, 0.3, -0.6),
        ];
        let s = SplineR3::new(KnotGrid::new(0.0, 0.1, 5).unwrap(), ctrl).unwrap();
        let h = 1e-6;
        for &t in &[0.02, 0.11, 0.15, 0.26] {
            let fd = (s.eval(t + h).unwrap() - s.eval(t - h).unwrap()) / (2.0 * h);
            let d = s.deriv(t).unwrap();
            assert_relative_eq!(d, fd, max_relative = 1e-4, epsilon = 1e-8);
        }
    }

    #[test]
    fn c1_continuity_across_knots() {
        let ctrl = vec![
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(2.0, -1.0, 0.5),
            Vector3::new(1.0, 0.0, -0.5),
            Vector3::new(3.0, 2.0, 1.0),
            Vector3::new(-1.0, 1.0, 0.0),
        ];
        let s = SplineR3::new(grid(5), ctrl).unwrap();
        for seg in 0..s.grid.segments() - 1 {
            let v_left = s.eval_segment(seg, 1.0);
            let v_right = s.eval_segment(seg + 1, 0.0);
            assert_relative_eq!(v_left, v_right, epsilon = 1e-9);
            let d_left = s.deriv_segment(seg, 1.0);
            let d_right = s.deriv_segment(seg + 1, 0.0);
            assert_relative_eq!(d_left, d_right, epsilon = 1e-9);
        }
    }

    #[test]
    fn locality_of_control_points() {
        let base = SplineR3::constant(grid(8), Vector3::zeros()).unwrap();
        let m = 4;
        let mut bumped = base.clone();
        bumped.ctrl[m] += Vector3::new(1.0, 0.0, 0.0);
        for seg in 0..base.grid.segments() {
            let t = seg as f64 + 0.5;
            let changed = (bumped.eval(t).unwrap() - base.eval(t).unwrap()).norm() > 0.0;
            let supported = seg + 2 >= m && seg <= m;
            assert_eq!(changed, supported, "segment {seg}");
        }
    }

    #[test]
    fn so3_identity_and_closure() {
        let s = SplineSo3::constant(grid(5), UnitQuaternion::identity()).unwrap();
        for &t in &[0.0, 0.9, 2.2] {
            let q = s.eval(t).unwrap();
            assert!(so3::angle(&q) < 1e-15);
            assert_relative_eq!(
                s.body_angular_velocity(t).unwrap(),
                Vector3::zeros(),
                epsilon = 1e-15
            );
        }
        // Closure on a generic spline.
        let ctrl = vec![
            so3::exp(&Vector3::new(0.1, 0.2, 0.3)),
            so3::exp(&Vector3::new(-0.4, 0.1, 0.0)),
            so3::exp(&Vector3::new(0.2, -0.3, 0.5)),
            so3::exp(&Vector3::new(0.6, 0.2, -0.1)),
        ];
        let s = SplineSo3::new(grid(4), ctrl).unwrap();
        for i in 0..40 {
            let t = 1.9999 * i as f64 / 39.0;
            let r = s.eval(t).unwrap().to_rotation_matrix().into_inner();
            assert!(so3::orthonormality_defect(&r) <= 1e-9);
        }
    }

    #[test]
    fn so3_z_ramp_angle_matches_scalar_blend() {
        // All increments commute, so the rotation angle is the scalar
        // cumulative blend of the knot angles.
        let theta = 0.1;
        let ctrl: Vec<_> = (0..4).map(|i| so3::rot_z(theta * i as f64)).collect();
        let s = SplineSo3::new(grid(4), ctrl).unwrap();
        for &t in &[0.1, 0.5, 0.9, 1.3, 1.7] {
            let (seg, u) = s.grid.locate(t).unwrap();
            let l = blend(u);
            let expected = theta * (seg as f64 + l[1] + l[2]);
            let got = so3::log(&s.eval(t).unwrap()).z;
            assert_relative_eq!(got, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn so3_z_ramp_angular_velocity() {
        let theta = 0.1;
        let ctrl: Vec<_> = (0..6).map(|i| so3::rot_z(theta * i as f64)).collect();
        let s = SplineSo3::new(KnotGrid::new(0.0, 0.1, 6).unwrap(), ctrl).unwrap();
        for &t in &[0.05, 0.13, 0.21, 0.33] {
            assert_relative_eq!(
                s.body_angular_velocity(t).unwrap(),
                Vector3::new(0.0, 0.0, 1.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn so3_angular_velocity_matches_finite_difference() {
        let ctrl = vec![
            so3::exp(&Vector3::new(0.1, 0.2, 0.3)),
            so3::exp(&Vector3::new(-0.4, 0.1, 0.0)),
            so3::exp(&Vector3::new(0.2, -0.3, 0.5)),
            so3::exp(&Vector3::new(0.6, 0.2, -0.1)),
            so3::exp(&Vector3::new(0.3, 0.5, 0.2)),
        ];
        let s = SplineSo3::new(KnotGrid::new(0.0, 0.2, 5).unwrap(), ctrl).unwrap();
        let h = 1e-5;
        for &t in &[0.05, 0.17, 0.31, 0.44, 0.55] {
            let fd = so3::log_between(&s.eval(t).unwrap(), &s.eval(t + h).unwrap()) / h;
            let w = s.body_angular_velocity(t).unwrap();
            assert!((w - fd).norm() <= 1e-3 * w.norm() + 1e-6, "{w:?} vs {fd:?}");
        }
    }

    #[test]
    fn so3_c1_continuity() {
        let ctrl = vec![
            so3::exp(&Vector3::new(0.1, 0.2, 0.3)),
            so3::exp(&Vector3::new(-0.4, 0.1, 0.0)),
            so3::exp(&Vector3::new(0.2, -0.3, 0.5)),
            so3::exp(&Vector3::new(0.6, 0.2, -0.1)),
            so3::exp(&Vector3::new(0.3, 0.5, 0.2)),
        ];
        let s = SplineSo3::new(grid(5), ctrl).unwrap();
        for seg in 0..s.grid.segments() - 1 {
            let r_left = s.eval_segment(seg, 1.0);
            let r_right = s.eval_segment(seg + 1, 0.0);
            assert!(so3::angle(&(r_left.inverse() * r_right)) <= 1e-9);
            let w_left = s.body_angular_velocity_segment(seg, 1.0);
            let w_right = s.body_angular_velocity_segment(seg + 1, 0.0);
            assert_relative_eq!(w_left, w_right, epsilon = 1e-9);
        }
    }

    #[test]
    fn extend_constant_and_ramp() {
        let mut c = SplineR3::constant(grid(3), Vector3::new(2.0, 0.0, 0.0)).unwrap();
        c.extend_to(4.5);
        assert!(c.grid.support_end() > 4.5);
        assert!(c.ctrl.iter().all(|v| (v - Vector3::new(2.0, 0.0, 0.0)).norm() == 0.0));

        let ctrl: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let mut ramp = SplineR3::new(grid(4), ctrl).unwrap();
        let appended = ramp.extend_to(4.0);
        assert_eq!(appended, 3);
        for (i, v) in ramp.ctrl.iter().enumerate() {
            assert_relative_eq!(v.x, i as f64, epsilon = 1e-12);
        }
        // Ramp continues exactly through the extended region.
        assert_relative_eq!(ramp.deriv(3.9).unwrap().x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn extend_so3_keeps_angular_increment() {
        let theta = 0.07;
        let ctrl: Vec<_> = (0..3).map(|i| so3::rot_z(theta * i as f64)).collect();
        let mut s = SplineSo3::new(grid(3), ctrl).unwrap();
        s.extend_to(3.0);
        for i in 0..s.ctrl.len() - 1 {
            let inc = so3::log_between(&s.ctrl[i], &s.ctrl[i + 1]);
            assert_relative_eq!(inc, Vector3::new(0.0, 0.0, theta), epsilon = 1e-12);
        }
        // No-op when already covered.
        assert_eq!(s.extend_to(0.5), 0);
    }
}
