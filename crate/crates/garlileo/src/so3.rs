//! Exp/Log maps and skew helpers on SO(3).
//!
//! Rotations are stored as unit quaternions and exchanged as matrices at
//! module boundaries. The maps use the closed-form Rodrigues expressions with
//! a second-order Taylor fallback below [`SMALL_ANGLE`] radians.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Angle below which the Taylor expansions of Exp/Log are used.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric (hat) matrix of `w`, so that `hat(w) * v == w.cross(&v)`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] for a skew-symmetric matrix.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map: rotation vector (axis * angle) to unit quaternion.
pub fn exp(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta_sq = w.norm_squared();
    let (re, im) = if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        // cos(t/2) ~ 1 - t^2/8, sin(t/2)/t ~ 1/2 - t^2/48
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        let theta = theta_sq.sqrt();
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    UnitQuaternion::new_unchecked(
        Quaternion::new(re, im * w.x, im * w.y, im * w.z).normalize(),
    )
}

/// Logarithm map: unit quaternion to rotation vector with angle in [-pi, pi].
pub fn log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.scalar();
    let mut v = q.vector().into_owned();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n_sq = v.norm_squared();
    if n_sq < SMALL_ANGLE * SMALL_ANGLE {
        // 2/w * (1 - n^2 / (3 w^2)) ~ atan-based factor near identity
        v * (2.0 / w) * (1.0 - n_sq / (3.0 * w * w))
    } else {
        let n = n_sq.sqrt();
        v * (2.0 * n.atan2(w) / n)
    }
}

/// Relative rotation vector `Log(a^T b)`.
pub fn log_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> Vector3<f64> {
    log(&(a.inverse() * b))
}

/// Geodesic angle of a rotation in radians.
pub fn angle(q: &UnitQuaternion<f64>) -> f64 {
    log(q).norm()
}

/// Rotation about the x axis.
pub fn rot_x(theta: f64) -> UnitQuaternion<f64> {
    exp(&Vector3::new(theta, 0.0, 0.0))
}

/// Rotation about the y axis.
pub fn rot_y(theta: f64) -> UnitQuaternion<f64> {
    exp(&Vector3::new(0.0, theta, 0.0))
}

/// Rotation about the z axis.
pub fn rot_z(theta: f64) -> UnitQuaternion<f64> {
    exp(&Vector3::new(0.0, 0.0, theta))
}

/// Frobenius norm of `R^T R - I`; zero for a perfectly orthonormal matrix.
pub fn orthonormality_defect(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Minimal rotation taking direction `from` onto direction `to`.
///
/// The antiparallel case is resolved by a half-turn about an arbitrary axis
/// orthogonal to `from`.
pub fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> UnitQuaternion<f64> {
    let a = from.normalize();
    let b = to.normalize();
    let c = a.dot(&b).clamp(-1.0, 1.0);
    if c < -1.0 + 1e-12 {
        let ortho = if a.x.abs() < 0.9 {
            Vector3::x_axis().into_inner()
        } else {
            Vector3::y_axis().into_inner()
        };
        let axis = a.cross(&ortho).normalize();
        return exp(&(axis * std::f64::consts::PI));
    }
    let axis = a.cross(&b);
    let s = axis.norm();
    if s < 1e-15 {
        return UnitQuaternion::identity();
    }
    exp(&(axis / s * s.atan2(c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exp_log_roundtrip() {
        let cases = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1e-9, -2e-9, 1e-8),
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(3.0, 0.1, -0.4),
            Vector3::new(0.0, 0.0, std::f64::consts::PI - 1e-7),
        ];
        for w in cases {
            let q = exp(&w);
            assert_relative_eq!(log(&q), w, epsilon = 1e-9);
        }
    }

    #[test]
    fn exp_matches_rodrigues_matrix() {
        let w: Vector3<f64> = Vector3::new(0.4, -1.1, 0.7);
        let theta = w.norm();
        let k = hat(&(w / theta));
        let r_rodrigues: Matrix3<f64> =
            Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos());
        let r = exp(&w).to_rotation_matrix().into_inner();
        assert_relative_eq!(r, r_rodrigues, epsilon = 1e-12);
    }

    #[test]
    fn hat_vee_cross() {
        let w = Vector3::new(0.1, 0.2, -0.3);
        let v = Vector3::new(-1.0, 0.5, 2.0);
        assert_relative_eq!(hat(&w) * v, w.cross(&v), epsilon = 1e-15);
        assert_relative_eq!(vee(&hat(&w)), w, epsilon = 1e-15);
    }

    #[test]
    fn rotation_between_directions() {
        let a = Vector3::new(0.0, 0.0, 9.81);
        let b = Vector3::new(1.0, 0.2, 9.5);
        let q = rotation_between(&a, &b);
        assert_relative_eq!(
            (q * a.normalize()),
            b.normalize(),
            epsilon = 1e-12
        );
        // Antiparallel still lands on target.
        let q = rotation_between(&a, &(-a));
        assert_relative_eq!(q * a.normalize(), -a.normalize(), epsilon = 1e-9);
    }

    #[test]
    fn orthonormality_of_exp() {
        let r = exp(&Vector3::new(0.3, 0.4, 0.5))
            .to_rotation_matrix()
            .into_inner();
        assert!(orthonormality_defect(&r) < 1e-12);
    }
}
