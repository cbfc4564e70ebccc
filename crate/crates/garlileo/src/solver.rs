//! Nonlinear least squares over manifold parameter blocks.
//!
//! A [`Problem`] owns small parameter blocks (R^2, R^3, SO(3)) and residual
//! factors referencing them. [`solve`] runs Levenberg-Marquardt with numeric
//! (central-difference) Jacobians, an optional per-component Cauchy loss, and
//! a fixed-block mask; SO(3) blocks update through right-multiplied
//! exponential increments and stay orthonormal by construction.
//! [`marginalize`] condenses dropped blocks into a Gaussian [`PriorFactor`]
//! via the Schur complement.
//!
//! One problem is single-writer; factor evaluation is pure given the block
//! values, the linear solve is serial.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::so3;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite residual in factor '{0}'")]
    NonFiniteResidual(String),
    #[error("linear solve failed and damping did not recover it")]
    LinearSolveFailed,
    #[error("marginalization system is singular even after damping")]
    SingularMarginalization,
    #[error("malformed problem: {0}")]
    BadProblem(String),
}

/// A small optimization variable living on R^2, R^3, or SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamBlock {
    Vec2(Vector2<f64>),
    Vec3(Vector3<f64>),
    Rot(UnitQuaternion<f64>),
}

impl ParamBlock {
    pub fn local_dim(&self) -> usize {
        match self {
            ParamBlock::Vec2(_) => 2,
            ParamBlock::Vec3(_) | ParamBlock::Rot(_) => 3,
        }
    }

    /// Retraction: Euclidean addition or right-multiplied `Exp`.
    pub fn plus(&self, delta: &[f64]) -> ParamBlock {
        match self {
            ParamBlock::Vec2(v) => ParamBlock::Vec2(v + Vector2::new(delta[0], delta[1])),
            ParamBlock::Vec3(v) => {
                ParamBlock::Vec3(v + Vector3::new(delta[0], delta[1], delta[2]))
            }
            ParamBlock::Rot(q) => ParamBlock::Rot(UnitQuaternion::new_normalize(
                (q * so3::exp(&Vector3::new(delta[0], delta[1], delta[2]))).into_inner(),
            )),
        }
    }

    /// Local coordinates of `self` relative to `lin` (inverse of [`plus`]).
    pub fn minus(&self, lin: &ParamBlock) -> DVector<f64> {
        match (self, lin) {
            (ParamBlock::Vec2(a), ParamBlock::Vec2(b)) => DVector::from_column_slice(&[
                a.x - b.x,
                a.y - b.y,
            ]),
            (ParamBlock::Vec3(a), ParamBlock::Vec3(b)) => {
                DVector::from_column_slice((a - b).as_slice())
            }
            (ParamBlock::Rot(a), ParamBlock::Rot(b)) => {
                DVector::from_column_slice(so3::log_between(b, a).as_slice())
            }
            _ => panic!("parameter block kind mismatch"),
        }
    }

    pub fn as_vec2(&self) -> Vector2<f64> {
        match self {
            ParamBlock::Vec2(v) => *v,
            _ => panic!("expected Vec2 block"),
        }
    }
    pub fn as_vec3(&self) -> Vector3<f64> {
        match self {
            ParamBlock::Vec3(v) => *v,
            _ => panic!("expected Vec3 block"),
        }
    }
    pub fn as_rot(&self) -> UnitQuaternion<f64> {
        match self {
            ParamBlock::Rot(q) => *q,
            _ => panic!("expected Rot block"),
        }
    }
}

/// Robust loss applied per residual component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// Plain squared error.
    Squared,
    /// Cauchy loss `rho(s) = c^2 ln(1 + s/c^2)` on each component.
    Cauchy(f64),
}

/// `rho(e^2)` for the loss.
fn rho(loss: Loss, e: f64) -> f64 {
    match loss {
        Loss::Squared => e * e,
        Loss::Cauchy(c) => c * c * (1.0 + e * e / (c * c)).ln(),
    }
}

/// IRLS row scale `sqrt(rho'(e^2))` for the loss.
fn irls_weight(loss: Loss, e: f64) -> f64 {
    match loss {
        Loss::Squared => 1.0,
        Loss::Cauchy(c) => cauchy_weight(e, c),
    }
}

/// IRLS weight of the Cauchy loss: `1 / sqrt(1 + e^2 / c^2)`, in (0, 1].
pub fn cauchy_weight(e: f64, c: f64) -> f64 {
    1.0 / (1.0 + (e / c) * (e / c)).sqrt()
}

/// One residual block. `eval` must be a pure function of the referenced
/// block values, given in the order of `blocks()`.
pub trait Factor {
    /// Residual dimension.
    fn dim(&self) -> usize;
    /// Indices of the parameter blocks this factor touches.
    fn blocks(&self) -> &[usize];
    /// Raw (unweighted) residual.
    fn eval(&self, vals: &[ParamBlock]) -> DVector<f64>;
    /// Scalar weight multiplying the squared (robustified) residual.
    fn weight(&self) -> f64 {
        1.0
    }
    fn loss(&self) -> Loss {
        Loss::Squared
    }
    /// Diagnostic label used in error messages.
    fn label(&self) -> String {
        "factor".into()
    }
}

/// Parameter blocks, factors, and the fixed-block mask.
#[derive(Default)]
pub struct Problem {
    pub blocks: Vec<ParamBlock>,
    pub fixed: Vec<bool>,
    pub factors: Vec<Box<dyn Factor>>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, b: ParamBlock) -> usize {
        self.blocks.push(b);
        self.fixed.push(false);
        self.blocks.len() - 1
    }

    pub fn set_fixed(&mut self, id: usize) {
        self.fixed[id] = true;
    }

    pub fn add_factor(&mut self, f: Box<dyn Factor>) {
        debug_assert!(f.blocks().iter().all(|&b| b < self.blocks.len()));
        self.factors.push(f);
    }

    fn gather(&self, ids: &[usize], out: &mut Vec<ParamBlock>) {
        out.clear();
        out.extend(ids.iter().map(|&i| self.blocks[i]));
    }

    /// Total robustified cost at the current values.
    pub fn cost(&self) -> Result<f64, SolverError> {
        let mut vals = Vec::new();
        let mut total = 0.0;
        for f in &self.factors {
            self.gather(f.blocks(), &mut vals);
            let r = f.eval(&vals);
            if r.iter().any(|x| !x.is_finite()) {
                return Err(SolverError::NonFiniteResidual(f.label()));
            }
            let w = f.weight();
            total += w * r.iter().map(|&e| rho(f.loss(), e)).sum::<f64>();
        }
        Ok(total)
    }
}

/// Central-difference Jacobian of one factor around the given values, over
/// the local coordinates of every referenced block.
pub fn numeric_jacobian(f: &dyn Factor, vals: &[ParamBlock], h: f64) -> DMatrix<f64> {
    let total: usize = vals.iter().map(|b| b.local_dim()).sum();
    let mut jac = DMatrix::zeros(f.dim(), total);
    let mut work = vals.to_vec();
    let mut col = 0;
    for (bi, base) in vals.iter().enumerate() {
        for d in 0..base.local_dim() {
            let mut delta = [0.0; 3];
            delta[d] = h;
            work[bi] = base.plus(&delta[..base.local_dim()]);
            let r_plus = f.eval(&work);
            delta[d] = -h;
            work[bi] = base.plus(&delta[..base.local_dim()]);
            let r_minus = f.eval(&work);
            work[bi] = *base;
            jac.set_column(col, &((r_plus - r_minus) / (2.0 * h)));
            col += 1;
        }
    }
    jac
}

const JACOBIAN_STEP: f64 = 1e-6;

struct ActiveLayout {
    /// Column offset per block; usize::MAX for fixed blocks.
    offset: Vec<usize>,
    dim: usize,
}

fn layout(problem: &Problem) -> ActiveLayout {
    let mut offset = vec![usize::MAX; problem.blocks.len()];
    let mut dim = 0;
    for (i, b) in problem.blocks.iter().enumerate() {
        if !problem.fixed[i] {
            offset[i] = dim;
            dim += b.local_dim();
        }
    }
    ActiveLayout { offset, dim }
}

/// Assembles the Gauss-Newton normal equations `H dx = -g` at the current
/// values, with IRLS robust weights. Returns `(H, g)`.
fn assemble(
    problem: &Problem,
    lay: &ActiveLayout,
) -> Result<(DMatrix<f64>, DVector<f64>), SolverError> {
    let mut h = DMatrix::zeros(lay.dim, lay.dim);
    let mut g = DVector::zeros(lay.dim);
    let mut vals = Vec::new();
    for f in &problem.factors {
        problem.gather(f.blocks(), &mut vals);
        let r = f.eval(&vals);
        if r.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFiniteResidual(f.label()));
        }
        let jac = numeric_jacobian(f.as_ref(), &vals, JACOBIAN_STEP);
        // Row scales: factor weight times the robust IRLS weight.
        let w = f.weight();
        let mut jw = jac.clone();
        let mut rw = r.clone();
        for i in 0..r.len() {
            let s = irls_weight(f.loss(), r[i]) * w.sqrt();
            rw[i] *= s;
            jw.row_mut(i).scale_mut(s);
        }
        // Scatter into the global system, skipping fixed blocks.
        let ids = f.blocks();
        let mut col_i = 0;
        for (bi, &id_i) in ids.iter().enumerate() {
            let di = vals[bi].local_dim();
            if lay.offset[id_i] != usize::MAX {
                let oi = lay.offset[id_i];
                let ji = jw.columns(col_i, di);
                g.rows_mut(oi, di).gemv_tr(1.0, &ji, &rw, 1.0);
                let mut col_j = 0;
                for (bj, &id_j) in ids.iter().enumerate() {
                    let dj = vals[bj].local_dim();
                    if lay.offset[id_j] != usize::MAX {
                        let oj = lay.offset[id_j];
                        let jj = jw.columns(col_j, dj);
                        let contrib = ji.transpose() * jj;
                        for a in 0..di {
                            for b in 0..dj {
                                h[(oi + a, oj + b)] += contrib[(a, b)];
                            }
                        }
                    }
                    col_j += dj;
                }
            }
            col_i += di;
        }
    }
    Ok((h, g))
}

fn apply_step(problem: &mut Problem, lay: &ActiveLayout, dx: &DVector<f64>) {
    for i in 0..problem.blocks.len() {
        let o = lay.offset[i];
        if o == usize::MAX {
            continue;
        }
        let d = problem.blocks[i].local_dim();
        problem.blocks[i] = problem.blocks[i].plus(dx.as_slice()[o..o + d].as_ref());
    }
}

/// Levenberg-Marquardt options.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub lambda_init: f64,
    /// Stop when the accepted step norm falls below this.
    pub tol_dx: f64,
    /// Stop when the relative cost decrease falls below this.
    pub tol_cost: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iters: 50, lambda_init: 1e-4, tol_dx: 1e-12, tol_cost: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub rejected_steps: usize,
    pub converged: bool,
}

/// Minimizes the problem in place. The accepted cost never increases; on a
/// non-finite residual the error names the offending factor and the blocks
/// keep their last accepted values.
pub fn solve(problem: &mut Problem, opts: &SolveOptions) -> Result<SolveReport, SolverError> {
    let lay = layout(problem);
    let mut cost = problem.cost()?;
    let initial_cost = cost;
    let mut lambda = opts.lambda_init;
    let mut iterations = 0;
    let mut rejected = 0;
    let mut converged = false;
    if lay.dim == 0 {
        return Ok(SolveReport {
            initial_cost,
            final_cost: cost,
            iterations: 0,
            rejected_steps: 0,
            converged: true,
        });
    }
    'outer: while iterations < opts.max_iters {
        iterations += 1;
        let (h, g) = assemble(problem, &lay)?;
        // Absolute damping floor: dimensions with (numerically) no
        // information must not take large cost-neutral steps.
        let max_diag = (0..lay.dim).map(|i| h[(i, i)]).fold(0.0f64, f64::max);
        let floor = (1e-6 * max_diag).max(1e-9);
        let mut accepted = false;
        for _ in 0..12 {
            // Marquardt scaling keeps damping scale-free for the rest.
            let mut hd = h.clone();
            for i in 0..lay.dim {
                hd[(i, i)] += lambda * h[(i, i)].max(floor) + floor;
            }
            let Some(chol) = hd.cholesky() else {
                lambda *= 4.0;
                rejected += 1;
                continue;
            };
            let dx = chol.solve(&(-&g));
            let saved = problem.blocks.clone();
            apply_step(problem, &lay, &dx);
            match problem.cost() {
                Ok(new_cost) if new_cost <= cost => {
                    let decrease = cost - new_cost;
                    cost = new_cost;
                    lambda = (lambda * 0.5).max(1e-12);
                    accepted = true;
                    if dx.norm() < opts.tol_dx
                        || decrease < opts.tol_cost * cost.max(1e-300)
                    {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                Ok(_) => {
                    problem.blocks = saved;
                    lambda *= 4.0;
                    rejected += 1;
                }
                Err(e) => {
                    problem.blocks = saved;
                    return Err(e);
                }
            }
        }
        if !accepted {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        initial_cost,
        final_cost: cost,
        iterations,
        rejected_steps: rejected,
        converged: converged || iterations >= opts.max_iters,
    })
}

/// Condensed Gaussian information produced by marginalization: the retained
/// blocks' information matrix, right-hand side, and linearization values.
///
/// The prior residual is `H (x - x_lin) - b`; internally the factor is
/// applied in square-root form so its squared norm reproduces the quadratic
/// `dx^T H dx - 2 b^T dx` exactly (plus a constant).
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lin: Vec<ParamBlock>,
    /// Square-root rows: `sqrt_l * dx - sqrt_rhs` is the residual.
    sqrt_l: DMatrix<f64>,
    sqrt_rhs: DVector<f64>,
}

impl PriorFactor {
    /// Builds the square-root form from `(H, b, lin)`. `H` is symmetrized
    /// exactly; nonpositive eigenvalue directions are dropped.
    pub fn new(h: DMatrix<f64>, b: DVector<f64>, lin: Vec<ParamBlock>) -> Self {
        let n = h.nrows();
        let mut hs = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                hs[(i, j)] = 0.5 * (h[(i, j)] + h[(j, i)]);
            }
        }
        let eig = hs.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let tol = lmax.max(1e-300) * 1e-12;
        let kept: Vec<usize> =
            (0..n).filter(|&i| eig.eigenvalues[i] > tol).collect();
        let mut sqrt_l = DMatrix::zeros(kept.len(), n);
        let mut sqrt_rhs = DVector::zeros(kept.len());
        for (row, &i) in kept.iter().enumerate() {
            let lam = eig.eigenvalues[i];
            let v = eig.eigenvectors.column(i);
            let s = lam.sqrt();
            for c in 0..n {
                sqrt_l[(row, c)] = s * v[c];
            }
            sqrt_rhs[row] = v.dot(&b) / s;
        }
        Self { h: hs, b, lin, sqrt_l, sqrt_rhs }
    }

    pub fn local_dim(&self) -> usize {
        self.h.nrows()
    }

    fn delta(&self, vals: &[ParamBlock]) -> DVector<f64> {
        let mut dx = DVector::zeros(self.local_dim());
        let mut off = 0;
        for (v, l) in vals.iter().zip(&self.lin) {
            let d = v.minus(l);
            dx.rows_mut(off, d.len()).copy_from(&d);
            off += d.len();
        }
        dx
    }

    /// Square-root residual whose squared norm is the prior's quadratic cost.
    pub fn sqrt_residual(&self, vals: &[ParamBlock]) -> DVector<f64> {
        &self.sqrt_l * self.delta(vals) - &self.sqrt_rhs
    }

    /// The prior residual in its defining form `H (x - x_lin) - b`.
    pub fn residual(&self, vals: &[ParamBlock]) -> DVector<f64> {
        &self.h * self.delta(vals) - &self.b
    }

    /// Residual dimension of the square-root form.
    pub fn sqrt_dim(&self) -> usize {
        self.sqrt_l.nrows()
    }
}

/// Outcome of [`marginalize`], including whether damping was needed.
pub struct Marginalization {
    pub prior: PriorFactor,
    /// True when the dropped-block information was singular and an epsilon
    /// ridge was added before inversion.
    pub damped: bool,
}

/// Schur-complement marginalization of `drop_ids` out of the system defined
/// by `factors` linearized at the current block values.
///
/// Returns a prior over `keep_ids` (in that order): information
/// `H_kk - H_kd H_dd^-1 H_dk`, right-hand side `b_k - H_kd H_dd^-1 b_d`, and
/// the current values as linearization point.
pub fn marginalize(
    blocks: &[ParamBlock],
    factors: &[&dyn Factor],
    drop_ids: &[usize],
    keep_ids: &[usize],
) -> Result<Marginalization, SolverError> {
    // Local layout: dropped blocks first, then retained.
    let mut local = vec![usize::MAX; blocks.len()];
    let mut dim_d = 0;
    for &id in drop_ids {
        local[id] = dim_d;
        dim_d += blocks[id].local_dim();
    }
    let mut dim = dim_d;
    for &id in keep_ids {
        if local[id] != usize::MAX {
            return Err(SolverError::BadProblem("block both dropped and kept".into()));
        }
        local[id] = dim;
        dim += blocks[id].local_dim();
    }

    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    let mut vals = Vec::new();
    for f in factors {
        vals.clear();
        vals.extend(f.blocks().iter().map(|&i| blocks[i]));
        let r = f.eval(&vals);
        if r.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFiniteResidual(f.label()));
        }
        let jac = numeric_jacobian(*f, &vals, JACOBIAN_STEP);
        let w = f.weight();
        let mut jw = jac.clone();
        let mut rw = r.clone();
        for i in 0..r.len() {
            let s = irls_weight(f.loss(), r[i]) * w.sqrt();
            rw[i] *= s;
            jw.row_mut(i).scale_mut(s);
        }
        let ids = f.blocks();
        let mut col_i = 0;
        for (bi, &id_i) in ids.iter().enumerate() {
            let di = vals[bi].local_dim();
            if local[id_i] == usize::MAX {
                // A factor may touch blocks outside the marginalization
                // scope only if the caller forgot them; treat as an error.
                return Err(SolverError::BadProblem(format!(
                    "factor '{}' touches block {} outside the marginalization scope",
                    f.label(),
                    id_i
                )));
            }
            let oi = local[id_i];
            let ji = jw.columns(col_i, di);
            g.rows_mut(oi, di).gemv_tr(1.0, &ji, &rw, 1.0);
            let mut col_j = 0;
            for (bj, &id_j) in ids.iter().enumerate() {
                let dj = vals[bj].local_dim();
                let oj = local[id_j];
                let jj = jw.columns(col_j, dj);
                let contrib = ji.transpose() * jj;
                for a in 0..di {
                    for b in 0..dj {
                        h[(oi + a, oj + b)] += contrib[(a, b)];
                    }
                }
                col_j += dj;
            }
            col_i += di;
        }
    }

    let dim_k = dim - dim_d;
    let h_dd = h.view((0, 0), (dim_d, dim_d)).into_owned();
    let h_dk = h.view((0, dim_d), (dim_d, dim_k)).into_owned();
    let h_kk = h.view((dim_d, dim_d), (dim_k, dim_k)).into_owned();
    let g_d = g.rows(0, dim_d).into_owned();
    let g_k = g.rows(dim_d, dim_k).into_owned();

    let mut damped = false;
    let solve_dd = |m: &DMatrix<f64>| -> Option<(DMatrix<f64>, DVector<f64>)> {
        let chol = m.clone().cholesky()?;
        Some((chol.solve(&h_dk), chol.solve(&g_d)))
    };
    let (hdd_inv_hdk, hdd_inv_gd) = match solve_dd(&h_dd) {
        Some(x) => x,
        None => {
            damped = true;
            let mut hd = h_dd.clone();
            for i in 0..dim_d {
                hd[(i, i)] += 1e-9;
            }
            solve_dd(&hd).ok_or(SolverError::SingularMarginalization)?
        }
    };
    let h_prior = &h_kk - h_dk.transpose() * hdd_inv_hdk;
    // The assembled g is the gradient J^T r; the prior right-hand side keeps
    // the Schur-reduced negative gradient.
    let b_prior = -(g_k - h_dk.transpose() * hdd_inv_gd);
    let lin: Vec<ParamBlock> = keep_ids.iter().map(|&i| blocks[i]).collect();
    Ok(Marginalization { prior: PriorFactor::new(h_prior, b_prior, lin), damped })
}

/// Adapter exposing a [`PriorFactor`] as a [`Factor`] over the given block
/// ids (which must match the prior's linearization order).
pub struct PriorBlock {
    pub prior: std::sync::Arc<PriorFactor>,
    pub ids: Vec<usize>,
    pub weight: f64,
}

impl Factor for PriorBlock {
    fn dim(&self) -> usize {
        self.prior.sqrt_dim()
    }
    fn blocks(&self) -> &[usize] {
        &self.ids
    }
    fn eval(&self, vals: &[ParamBlock]) -> DVector<f64> {
        self.prior.sqrt_residual(vals)
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> String {
        "marginalization prior".into()
    }
}
