//! Conic optimization layer: a small problem-description type, a backend
//! trait with a Clarabel implementation, independent KKT residual checks,
//! and numerical convexity-audit utilities.
//!
//! Problems are stated in the canonical form
//!   maximize  c' x
//!   s.t.      G_ineq x <= h_ineq          (componentwise)
//!             G_eq   x  = h_eq
//!             || M_i x + q_i || <= l_i' x + o_i   (second-order cones)
//! which the backend translates to its native form. Residuals reported in
//! solutions are recomputed here from the canonical data, not taken from the
//! solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One sparse linear row: coefficient list plus right-hand side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinRow {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        LinRow { coeffs, rhs }
    }

    fn dot(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, v)| v * x[j]).sum()
    }
}

/// A second-order cone constraint ||M x + q|| <= l' x + o.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SocConstraint {
    /// Rows of M (coefficient lists) paired with entries of q.
    pub rows: Vec<(Vec<(usize, f64)>, f64)>,
    pub linear: Vec<(usize, f64)>,
    pub offset: f64,
}

/// Conic problem in canonical maximize form.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConicProblem {
    pub num_vars: usize,
    pub objective: Vec<(usize, f64)>,
    pub ineqs: Vec<LinRow>,
    pub eqs: Vec<LinRow>,
    pub socs: Vec<SocConstraint>,
    /// Optional per-variable magnitudes. The backend substitutes
    /// x_j = scale_j * x~_j so its internal variables are O(1); solutions
    /// are reported in original units. Essential when variables span many
    /// orders of magnitude.
    pub col_scale: Option<Vec<f64>>,
}

impl ConicProblem {
    pub fn new(num_vars: usize) -> Self {
        ConicProblem { num_vars, ..Default::default() }
    }

    /// maximize coefficient on variable j.
    pub fn set_objective(&mut self, terms: Vec<(usize, f64)>) {
        self.objective = terms;
    }

    pub fn add_ineq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.ineqs.push(LinRow::new(coeffs, rhs));
    }

    pub fn add_eq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.eqs.push(LinRow::new(coeffs, rhs));
    }

    /// lo <= x_j <= hi as two inequality rows (either bound may be infinite).
    pub fn add_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        if lo.is_finite() {
            self.add_ineq(vec![(j, -1.0)], -lo);
        }
        if hi.is_finite() {
            self.add_ineq(vec![(j, 1.0)], hi);
        }
    }

    pub fn add_soc(&mut self, rows: Vec<(Vec<(usize, f64)>, f64)>, linear: Vec<(usize, f64)>, offset: f64) {
        self.socs.push(SocConstraint { rows, linear, offset });
    }

    /// Declare expected variable magnitudes (must all be positive).
    pub fn set_col_scale(&mut self, scale: Vec<f64>) {
        self.col_scale = Some(scale);
    }

    /// Objective value c'x.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|&(j, v)| v * x[j]).sum()
    }

    /// Human-readable dump of the canonical data, for solver-disagreement
    /// forensics.
    pub fn dump_canonical(&self) -> String {
        let mut s = format!(
            "vars={} ineqs={} eqs={} socs={}\nmaximize {:?}\n",
            self.num_vars,
            self.ineqs.len(),
            self.eqs.len(),
            self.socs.len(),
            self.objective
        );
        for (i, r) in self.ineqs.iter().enumerate() {
            s += &format!("ineq[{i}]: {:?} <= {}\n", r.coeffs, r.rhs);
        }
        for (i, r) in self.eqs.iter().enumerate() {
            s += &format!("eq[{i}]: {:?} = {}\n", r.coeffs, r.rhs);
        }
        for (i, c) in self.socs.iter().enumerate() {
            s += &format!(
                "soc[{i}]: ||{:?}|| <= {:?} + {}\n",
                c.rows, c.linear, c.offset
            );
        }
        s
    }
}

/// Termination status, normalized across backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

/// KKT residuals recomputed from the canonical problem data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Residuals {
    /// max violation of all constraints at x (inf-norm).
    pub primal: f64,
    /// inf-norm of the stationarity residual q + A' z for the backend's
    /// canonical minimize form.
    pub dual: f64,
    /// |primal objective + dual objective| in the backend's form.
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Objective of the canonical maximize form (meaningful when Optimal).
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: u32,
}

pub trait ConicBackend {
    fn solve(&self, problem: &ConicProblem, tol: f64) -> Result<ConicSolution>;
}

/// Clarabel interior-point backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct ClarabelBackend;

/// Default solve tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;

pub fn solve(problem: &ConicProblem) -> Result<ConicSolution> {
    ClarabelBackend.solve(problem, DEFAULT_TOL)
}

impl ConicBackend for ClarabelBackend {
    fn solve(&self, problem: &ConicProblem, tol: f64) -> Result<ConicSolution> {
        let n = problem.num_vars;
        if n == 0 {
            return Err(Error::ConicProblem("problem has no variables".into()));
        }
        for (j, _) in &problem.objective {
            if *j >= n {
                return Err(Error::ConicProblem("objective index out of range".into()));
            }
        }
        let scale: Vec<f64> = match &problem.col_scale {
            Some(s) => {
                if s.len() != n || s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                    return Err(Error::ConicProblem("column scales must be positive".into()));
                }
                s.clone()
            }
            None => vec![1.0; n],
        };
        // Native form: minimize q'x s.t. Ax + s = b, s in K, with cones
        // ordered (zero, nonnegative, soc...). Columns are rescaled so the
        // solver sees O(1) variables.
        let mut q = vec![0.0f64; n];
        for &(j, v) in &problem.objective {
            q[j] -= v * scale[j]; // maximize -> minimize the negation
        }
        let mut ti: Vec<usize> = Vec::new();
        let mut tj: Vec<usize> = Vec::new();
        let mut tv: Vec<f64> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut row = 0usize;
        let push_row = |ti: &mut Vec<usize>,
                            tj: &mut Vec<usize>,
                            tv: &mut Vec<f64>,
                            b: &mut Vec<f64>,
                            row: &mut usize,
                            coeffs: &[(usize, f64)],
                            rhs: f64,
                            sign: f64|
         -> Result<()> {
            for &(j, v) in coeffs {
                if j >= n {
                    return Err(Error::ConicProblem("constraint index out of range".into()));
                }
                ti.push(*row);
                tj.push(j);
                tv.push(sign * v * scale[j]);
            }
            b.push(rhs);
            *row += 1;
            Ok(())
        };

        if !problem.eqs.is_empty() {
            for r in &problem.eqs {
                push_row(&mut ti, &mut tj, &mut tv, &mut b, &mut row, &r.coeffs, r.rhs, 1.0)?;
            }
            cones.push(ZeroConeT(problem.eqs.len()));
        }
        if !problem.ineqs.is_empty() {
            for r in &problem.ineqs {
                push_row(&mut ti, &mut tj, &mut tv, &mut b, &mut row, &r.coeffs, r.rhs, 1.0)?;
            }
            cones.push(NonnegativeConeT(problem.ineqs.len()));
        }
        // SOC ||Mx+q|| <= l'x+o becomes s = (o + l'x has slack...) in native
        // form: A block = [-l'; -M], b block = [o; q_vec], s in SOC(dim).
        for c in &problem.socs {
            push_row(
                &mut ti,
                &mut tj,
                &mut tv,
                &mut b,
                &mut row,
                &c.linear,
                c.offset,
                -1.0,
            )?;
            for (coeffs, qi) in &c.rows {
                push_row(&mut ti, &mut tj, &mut tv, &mut b, &mut row, coeffs, *qi, -1.0)?;
            }
            cones.push(SecondOrderConeT(c.rows.len() + 1));
        }

        let a = CscMatrix::new_from_triplets(row, n, ti, tj, tv);
        let p = CscMatrix::<f64>::zeros((n, n));
        let settings = DefaultSettings {
            verbose: false,
            tol_feas: tol,
            tol_gap_abs: tol,
            tol_gap_rel: tol,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::ConicSolve(format!("solver construction failed: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            _ => SolveStatus::MaxIterations,
        };
        let x: Vec<f64> = sol.x.iter().zip(&scale).map(|(v, s)| v * s).collect();
        let residuals = kkt_residuals(problem, &x, &sol.z);
        Ok(ConicSolution {
            status,
            objective: problem.objective_value(&x),
            x,
            residuals,
            iterations: sol.iterations,
        })
    }
}

/// Recompute KKT residuals from the canonical problem data.
///
/// `z` is the dual vector in the backend's row ordering (equalities, then
/// inequalities, then SOC blocks).
pub fn kkt_residuals(problem: &ConicProblem, x: &[f64], z: &[f64]) -> Residuals {
    let n = problem.num_vars;
    // Primal feasibility.
    let mut primal = 0.0f64;
    for r in &problem.eqs {
        primal = primal.max((r.dot(x) - r.rhs).abs());
    }
    for r in &problem.ineqs {
        primal = primal.max((r.dot(x) - r.rhs).max(0.0));
    }
    for c in &problem.socs {
        let lhs: f64 = c
            .rows
            .iter()
            .map(|(coeffs, qi)| {
                let v: f64 = coeffs.iter().map(|&(j, w)| w * x[j]).sum::<f64>() + qi;
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let rhs: f64 = c.linear.iter().map(|&(j, w)| w * x[j]).sum::<f64>() + c.offset;
        primal = primal.max(lhs - rhs);
    }

    // Stationarity q + A'z = 0 in the native minimize form, rebuilt here.
    let mut grad = vec![0.0f64; n];
    for &(j, v) in &problem.objective {
        grad[j] -= v;
    }
    let mut row = 0usize;
    let add = |grad: &mut Vec<f64>, coeffs: &[(usize, f64)], scale: f64, zi: f64| {
        for &(j, v) in coeffs {
            grad[j] += scale * v * zi;
        }
    };
    let mut btz = 0.0f64;
    let mut b_all: Vec<(f64, f64)> = Vec::new(); // (b_i, z_i)
    for r in &problem.eqs {
        if row < z.len() {
            add(&mut grad, &r.coeffs, 1.0, z[row]);
            b_all.push((r.rhs, z[row]));
        }
        row += 1;
    }
    for r in &problem.ineqs {
        if row < z.len() {
            add(&mut grad, &r.coeffs, 1.0, z[row]);
            b_all.push((r.rhs, z[row]));
        }
        row += 1;
    }
    for c in &problem.socs {
        if row < z.len() {
            add(&mut grad, &c.linear, -1.0, z[row]);
            b_all.push((c.offset, z[row]));
        }
        row += 1;
        for (coeffs, qi) in &c.rows {
            if row < z.len() {
                add(&mut grad, coeffs, -1.0, z[row]);
                b_all.push((*qi, z[row]));
            }
            row += 1;
        }
    }
    let dual = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (bi, zi) in b_all {
        btz += bi * zi;
    }
    let qx: f64 = -problem.objective_value(x);
    let gap = (qx + btz).abs();
    Residuals { primal, dual, gap }
}

// ---------------------------------------------------------------------------
// Convexity-audit utilities.
// ---------------------------------------------------------------------------

/// Central-difference Hessian of a scalar function at `x0`.
pub fn finite_diff_hessian(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let n = x0.len();
    let mut h = DMatrix::zeros(n, n);
    let f0 = f(x0);
    let mut xp = x0.to_vec();
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                xp.copy_from_slice(x0);
                xp[i] += step;
                let fpp = f(&xp);
                xp[i] = x0[i] - step;
                let fmm = f(&xp);
                (fpp - 2.0 * f0 + fmm) / (step * step)
            } else {
                xp.copy_from_slice(x0);
                xp[i] += step;
                xp[j] += step;
                let fpp = f(&xp);
                xp[j] = x0[j] - step;
                let fpm = f(&xp);
                xp[i] = x0[i] - step;
                let fmm = f(&xp);
                xp[j] = x0[j] + step;
                let fmp = f(&xp);
                (fpp - fpm - fmp + fmm) / (4.0 * step * step)
            };
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// Checks a matrix is (numerically) symmetric PSD; returns the smallest
/// eigenvalue.
pub fn psd_check(m: &DMatrix<f64>, tol: f64) -> (bool, f64) {
    let n = m.nrows();
    let mut sym = m.clone();
    for i in 0..n {
        for j in 0..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            if (m[(i, j)] - m[(j, i)]).abs() > tol.max(1e-9) * (1.0 + avg.abs()) {
                return (false, f64::NAN);
            }
            sym[(i, j)] = avg;
        }
    }
    let eig = sym.symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    (min >= -tol, min)
}

/// Leading principal minors of a square matrix.
pub fn leading_principal_minors(m: &DMatrix<f64>) -> Vec<f64> {
    (1..=m.nrows())
        .map(|k| m.view((0, 0), (k, k)).clone_owned().determinant())
        .collect()
}

/// Audit target: log((1/(1+x)) (1/y) + tau) — the log of the rate kernel
/// without the "1 +", jointly convex on the positive orthant.
pub fn log_rate_kernel(x: f64, y: f64, tau: f64, lambda: f64, d: f64) -> f64 {
    ((1.0 / ((1.0 + x) * y) + tau) / d.powf(lambda)).ln()
}

/// Audit target: log(1 + ((1/(1+x)) (1/y) + tau) / d^lambda) — the rate
/// expression whose convexity underwrites the planner's Taylor lower bounds.
pub fn rate_composite(x: f64, y: f64, tau: f64, lambda: f64, d: f64) -> f64 {
    (1.0 + (1.0 / ((1.0 + x) * y) + tau) / d.powf(lambda)).ln()
}

/// Cross-curvature matrix of the rate composite, assembled from analytic
/// partials of f(x) = 1/(1+x), g(y) = 1/y, h(d) = d^(-lambda) and
/// q(x, y) = f g + tau:
///   [[q_xx h, q_xy h, q_x h_d],
///    [q_xy h, q_yy h, q_y h_d],
///    [q_x h_d, q_y h_d, q h_dd]].
/// All its leading principal minors are positive on the positive orthant,
/// which (together with the log-kernel Hessian) makes the composite convex.
pub fn rate_cross_curvature(x: f64, y: f64, d: f64, tau: f64, lambda: f64) -> DMatrix<f64> {
    let f = 1.0 / (1.0 + x);
    let fx = -f * f;
    let fxx = 2.0 * f * f * f;
    let g = 1.0 / y;
    let gy = -g * g;
    let gyy = 2.0 * g * g * g;
    let q = f * g + tau;
    let (qx, qy) = (fx * g, f * gy);
    let qxy = fx * gy;
    let (qxx, qyy) = (fxx * g, gyy * f);
    let h = d.powf(-lambda);
    let hd = -lambda * d.powf(-lambda - 1.0);
    let hdd = lambda * (lambda + 1.0) * d.powf(-lambda - 2.0);
    DMatrix::from_row_slice(
        3,
        3,
        &[
            qxx * h,
            qxy * h,
            qx * hd,
            qxy * h,
            qyy * h,
            qy * hd,
            qx * hd,
            qy * hd,
            q * hdd,
        ],
    )
}

/// Solve an LP/SOCP and insist on optimality.
pub fn solve_expect_optimal(problem: &ConicProblem, tol: f64) -> Result<ConicSolution> {
    let sol = ClarabelBackend.solve(problem, tol)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::ConicSolve(format!(
            "expected optimal, got {:?}\n{}",
            sol.status,
            problem.dump_canonical()
        )));
    }
    Ok(sol)
}
