//! Use the conic layer directly: a small LP, a second-order cone projection,
//! and the numerical convexity-audit helpers.
//!
//! Run with: cargo run --example conic_solve

use nalgebra::DMatrix;
use skyharvest::conic::{
    finite_diff_hessian, psd_check, solve, ConicProblem, SolveStatus,
};

fn main() -> skyharvest::Result<()> {
    // LP: maximize x + 2y subject to x + y = 1, x, y >= 0.
    let mut lp = ConicProblem::new(2);
    lp.set_objective(vec![(0, 1.0), (1, 2.0)]);
    lp.add_eq(vec![(0, 1.0), (1, 1.0)], 1.0);
    lp.add_bounds(0, 0.0, f64::INFINITY);
    lp.add_bounds(1, 0.0, f64::INFINITY);
    let sol = solve(&lp)?;
    println!(
        "LP: status {:?}, x = ({:.4}, {:.4}), objective {:.4}",
        sol.status, sol.x[0], sol.x[1], sol.objective
    );
    println!(
        "  independent residuals: primal {:.2e}, dual {:.2e}, gap {:.2e}",
        sol.residuals.primal, sol.residuals.dual, sol.residuals.gap
    );

    // SOCP: the farthest point in x within a disc of radius 5 around (3, 4).
    let mut socp = ConicProblem::new(2);
    socp.set_objective(vec![(0, 1.0)]);
    socp.add_soc(
        vec![(vec![(0, 1.0)], -3.0), (vec![(1, 1.0)], -4.0)],
        vec![],
        5.0,
    );
    let sol = solve(&socp)?;
    println!(
        "SOCP: x = ({:.4}, {:.4}) (expected (8, 4))",
        sol.x[0], sol.x[1]
    );

    // Infeasibility is certified, not silently mis-solved.
    let mut bad = ConicProblem::new(1);
    bad.set_objective(vec![(0, 1.0)]);
    bad.add_ineq(vec![(0, -1.0)], -2.0); // x >= 2
    bad.add_ineq(vec![(0, 1.0)], 1.0); // x <= 1
    assert_eq!(solve(&bad)?.status, SolveStatus::Infeasible);
    println!("infeasible toy problem correctly certified");

    // Convexity audit: check 1/((1+x) y d^1.5) is jointly convex at sample
    // points via a finite-difference Hessian.
    let f = |v: &[f64]| 1.0 / ((1.0 + v[0]) * v[1] * v[2].powf(1.5));
    for point in [[0.3, 1.0, 2.0], [2.0, 0.5, 10.0]] {
        let h: DMatrix<f64> = finite_diff_hessian(&f, &point, 1e-5)?;
        let (ok, min_eig) = psd_check(&h, 1e-8);
        println!(
            "Hessian at {:?}: PSD = {ok}, smallest eigenvalue {min_eig:.3e}",
            point
        );
    }
    Ok(())
}
