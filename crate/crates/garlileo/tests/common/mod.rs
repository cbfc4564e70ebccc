//! Shared test oracles, independent of the implementations they check.

use nalgebra::Vector3;

/// Cox-de Boor basis recursion on an arbitrary knot vector.
pub fn basis(knots: &[f64], j: usize, degree: usize, t: f64) -> f64 {
    if degree == 0 {
        return if t >= knots[j] && t < knots[j + 1] { 1.0 } else { 0.0 };
    }
    let mut value = 0.0;
    let denom_a = knots[j + degree] - knots[j];
    if denom_a > 0.0 {
        value += (t - knots[j]) / denom_a * basis(knots, j, degree - 1, t);
    }
    let denom_b = knots[j + degree + 1] - knots[j + 1];
    if denom_b > 0.0 {
        value += (knots[j + degree + 1] - t) / denom_b * basis(knots, j + 1, degree - 1, t);
    }
    value
}

/// Brute-force uniform quadratic B-spline evaluation: control point `j`
/// weights segment times through the basis supported on
/// `[t0 + (j-2)dt, t0 + (j+1)dt)`.
pub fn cox_de_boor_eval(ctrl: &[Vector3<f64>], t0: f64, dt: f64, t: f64) -> Vector3<f64> {
    let n = ctrl.len();
    let knots: Vec<f64> = (0..n + 4).map(|m| t0 + (m as f64 - 2.0) * dt).collect();
    let mut out = Vector3::zeros();
    for (j, c) in ctrl.iter().enumerate() {
        out += c * basis(&knots, j, 2, t);
    }
    out
}

/// Cumulative basis by summing the recursion: `lambda_j(u)` is the sum of
/// the plain basis values of control points `>= j` within one segment.
pub fn cumulative_basis(u: f64) -> [f64; 3] {
    // Segment [0, 1) of a grid with t0 = 0, dt = 1 uses ctrl 0, 1, 2.
    let knots: Vec<f64> = (0..7).map(|m| m as f64 - 2.0).collect();
    let b: Vec<f64> = (0..3).map(|j| basis(&knots, j, 2, u)).collect();
    [b[0] + b[1] + b[2], b[1] + b[2], b[2]]
}
