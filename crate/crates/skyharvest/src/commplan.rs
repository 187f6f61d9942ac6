//! Max-min throughput communication planner.
//!
//! Given a compressed map (per-node LoS-probability models plus channel
//! parameters), jointly optimizes a TDMA schedule and a 3D trajectory by
//! block-coordinate descent: an exact scheduling LP, then a
//! successive-convex-programming (SCP) step over the horizontal positions,
//! then one over the altitudes. Each SCP surrogate is tight at the current
//! iterate; a step-acceptance safeguard re-evaluates the true model
//! objective and backtracks, so the per-iteration objective is monotone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{gain_db, Gram, D_MIN};
use crate::citymap::{los_check, CityMap, Segment};
use crate::conic::{solve_expect_optimal, ConicProblem};
use crate::mapcompress::{shadowing_factor, CompressedMap, FitDiagnostics, NodeModel};
use crate::{Error, Result};

/// Planner configuration. Powers are in watts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CommConfig {
    /// Mission duration, seconds.
    pub t_c: f64,
    /// Number of schedule slots (default: one per second).
    pub n_c: usize,
    /// Maximum speed, m/s.
    pub v_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Transmit power, watts.
    pub p_tx: f64,
    /// Noise power, watts.
    pub noise: f64,
    /// Close the trajectory (first position equals last).
    pub looped: bool,
    /// Convergence threshold on the objective improvement.
    pub eps_mu: f64,
    pub max_iter: usize,
    pub solver_tol: f64,
}

impl CommConfig {
    pub fn with_duration(t_c: f64) -> Self {
        CommConfig {
            t_c,
            n_c: t_c.round().max(2.0) as usize,
            v_max: 10.0,
            h_min: 50.0,
            h_max: 100.0,
            p_tx: 1.0,       // 30 dBm
            noise: 1e-11,    // -80 dBm
            looped: true,
            eps_mu: 1e-3,
            max_iter: 50,
            solver_tol: 1e-8,
        }
    }

    /// Distance budget per slot.
    pub fn rho_max(&self) -> f64 {
        self.v_max * self.t_c / self.n_c as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_c <= 0.0 || self.n_c < 2 || self.v_max < 0.0 {
            return Err(Error::Config("t_c, n_c, v_max out of range".into()));
        }
        if !(self.h_min <= self.h_max) || self.h_min <= 0.0 {
            return Err(Error::Config("altitude band out of range".into()));
        }
        if self.p_tx <= 0.0 || self.noise <= 0.0 {
            return Err(Error::Config("powers must be positive".into()));
        }
        Ok(())
    }
}

/// TDMA schedule: q[k][n] is node k's share of slot n.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub q: Vec<Vec<f64>>,
    pub mu: f64,
}

impl SchedulePlan {
    /// Integral TDMA schedule: each slot goes entirely to the node with the
    /// largest fractional share.
    pub fn rounded(&self) -> Vec<Vec<f64>> {
        let k = self.q.len();
        let n = self.q[0].len();
        let mut out = vec![vec![0.0; n]; k];
        for s in 0..n {
            let best = (0..k)
                .max_by(|&a, &b| self.q[a][s].total_cmp(&self.q[b][s]))
                .unwrap();
            if self.q[best][s] > 0.0 {
                out[best][s] = 1.0;
            }
        }
        out
    }
}

/// One BCD iteration trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterTrace {
    pub iter: usize,
    pub mu_after_schedule: f64,
    pub mu_after_horizontal: f64,
    pub mu_after_altitude: f64,
    pub backtracks: usize,
}

/// Planner output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommPlan {
    pub positions: Vec<[f64; 3]>,
    pub schedule: SchedulePlan,
    /// Model-based max-min throughput, bits/s/Hz.
    pub mu_model: f64,
    pub trace: Vec<IterTrace>,
    pub config: CommConfig,
}

// ---------------------------------------------------------------------------
// Rate model and SCP surrogates.
// ---------------------------------------------------------------------------

/// Spectral efficiency of a linear channel gain.
pub fn rate_bps(p_tx: f64, gain: f64, noise: f64) -> f64 {
    (1.0 + p_tx * gain / noise).log2()
}

/// Expected-model rate of node k from position `pos`.
pub fn model_rate(cmap: &CompressedMap, cfg: &CommConfig, k: usize, pos: [f64; 3]) -> f64 {
    rate_bps(cfg.p_tx, cmap.expected_gain(k, pos), cfg.noise)
}

/// Rate parametrization used by both SCP blocks:
///   C(f, w, s) = log2(1 + G (1/((1+f)w) + B) / s^(alpha_N/2)),
/// with s the squared node-to-UAV distance, f = exp(-a theta + b),
/// w = 1 / (s^p - B), p = (A-1) alpha_L / 2, G = P beta_L / noise.
#[derive(Debug, Clone, Copy)]
pub struct RatePoint {
    pub c: f64,
    pub d_f: f64,
    pub d_w: f64,
    pub d_s: f64,
}

pub fn rate_point(g_snr: f64, b_ratio: f64, alpha_n: f64, f: f64, w: f64, s: f64) -> RatePoint {
    let q = alpha_n / 2.0;
    let sq = s.powf(q);
    let inner = 1.0 / ((1.0 + f) * w) + b_ratio;
    let snr = g_snr * inner / sq;
    let c = (1.0 + snr).log2();
    let scale = g_snr / (std::f64::consts::LN_2 * (1.0 + snr));
    RatePoint {
        c,
        d_f: -scale / ((1.0 + f) * (1.0 + f) * w * sq),
        d_w: -scale / ((1.0 + f) * w * w * sq),
        d_s: -scale * q * inner / s.powf(q + 1.0),
    }
}

/// theta(l) = atan(z / sqrt(l)) and its derivative in l (l = squared
/// horizontal distance). Convex and decreasing in l for z > 0.
pub fn theta_of_l(z: f64, l: f64) -> (f64, f64) {
    let r = l.sqrt();
    let theta = z.atan2(r);
    let dtheta = -z / (2.0 * r * (l + z * z));
    (theta, dtheta)
}

/// f(theta) = exp(-a theta + b) and its derivative. Convex in theta.
pub fn f_of_theta(a: f64, b: f64, theta: f64) -> (f64, f64) {
    let f = (-a * theta + b).exp();
    (f, -a * f)
}

/// w(s) = 1 / (s^p - B) and its derivative in s, where s = d^2.
pub fn w_of_s(s: f64, p: f64, b_ratio: f64) -> Result<(f64, f64)> {
    let denom = s.powf(p) - b_ratio;
    if denom <= 0.0 {
        return Err(Error::CommPlan(format!(
            "gain-ratio domain violated: s^p = {} <= B = {b_ratio}",
            s.powf(p)
        )));
    }
    let w = 1.0 / denom;
    let dw = -w * w * p * s.powf(p - 1.0);
    Ok((w, dw))
}

/// m(z) = exp(-a atan(z/r) + b) and its derivative in z, at fixed horizontal
/// distance r.
pub fn m_of_z(a: f64, b: f64, r: f64, z: f64) -> (f64, f64) {
    let m = (-a * z.atan2(r) + b).exp();
    let dm = if r < 1e-12 { 0.0 } else { -a * m * r / (r * r + z * z) };
    (m, dm)
}

/// Minimum squared horizontal distance kept in the SCP to keep the
/// elevation-angle derivative finite.
pub const L_FLOOR: f64 = 1.0;

/// Trust-region radius of one SCP step, as a multiple of the per-slot
/// distance budget. Keeps proposals inside the region where the first-order
/// surrogates are accurate; the acceptance safeguard handles the rest.
pub const TRUST_FACTOR: f64 = 2.0;

// ---------------------------------------------------------------------------
// Scheduling LP.
// ---------------------------------------------------------------------------

/// Exact max-min scheduling LP for fixed positions:
///   maximize mu  s.t.  (1/N) sum_n q[k][n] c[k][n] >= mu for all k,
///                      sum_k q[k][n] <= 1, 0 <= q <= 1.
pub fn schedule_lp(rates: &[Vec<f64>], tol: f64) -> Result<SchedulePlan> {
    let k = rates.len();
    if k == 0 {
        return Err(Error::CommPlan("no nodes to schedule".into()));
    }
    let n = rates[0].len();
    let qidx = |ki: usize, ni: usize| 1 + ki * n + ni;
    let mut p = ConicProblem::new(1 + k * n);
    p.set_objective(vec![(0, 1.0)]);
    for ki in 0..k {
        let mut coeffs = vec![(0usize, 1.0)];
        for ni in 0..n {
            coeffs.push((qidx(ki, ni), -rates[ki][ni] / n as f64));
        }
        p.add_ineq(coeffs, 0.0);
    }
    for ni in 0..n {
        p.add_ineq((0..k).map(|ki| (qidx(ki, ni), 1.0)).collect(), 1.0);
    }
    for ki in 0..k {
        for ni in 0..n {
            p.add_bounds(qidx(ki, ni), 0.0, 1.0);
        }
    }
    let sol = solve_expect_optimal(&p, tol)?;
    let q = (0..k)
        .map(|ki| (0..n).map(|ni| sol.x[qidx(ki, ni)].clamp(0.0, 1.0)).collect())
        .collect();
    Ok(SchedulePlan { q, mu: sol.x[0] })
}

/// Simple scheduling upper bound: the K throughputs sum to at most the mean
/// over slots of the best per-slot rate, so the minimum is at most 1/K of it.
pub fn throughput_upper_slot(rates: &[Vec<f64>]) -> f64 {
    let k = rates.len();
    let n = rates[0].len();
    let total: f64 = (0..n)
        .map(|ni| (0..k).map(|ki| rates[ki][ni]).fold(0.0f64, f64::max))
        .sum();
    total / (n as f64 * k as f64)
}

/// Model rates for every (node, slot) pair.
pub fn model_rates(cmap: &CompressedMap, cfg: &CommConfig, positions: &[[f64; 3]]) -> Vec<Vec<f64>> {
    (0..cmap.nodes.len())
        .map(|k| positions.iter().map(|&p| model_rate(cmap, cfg, k, p)).collect())
        .collect()
}

/// Model-based max-min throughput of a (schedule, trajectory) pair.
pub fn true_mu(cmap: &CompressedMap, cfg: &CommConfig, q: &[Vec<f64>], positions: &[[f64; 3]]) -> f64 {
    let n = positions.len() as f64;
    (0..cmap.nodes.len())
        .map(|k| {
            positions
                .iter()
                .enumerate()
                .map(|(ni, &p)| q[k][ni] * model_rate(cmap, cfg, k, p))
                .sum::<f64>()
                / n
        })
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// SCP blocks.
// ---------------------------------------------------------------------------

fn horizontal_budgets(cfg: &CommConfig, positions: &[[f64; 3]]) -> Vec<f64> {
    let rho = cfg.rho_max();
    positions
        .windows(2)
        .map(|w| {
            let dz = w[1][2] - w[0][2];
            (rho * rho - dz * dz).max(0.0).sqrt()
        })
        .collect()
}

fn vertical_budgets(cfg: &CommConfig, positions: &[[f64; 3]]) -> Vec<f64> {
    let rho = cfg.rho_max();
    positions
        .windows(2)
        .map(|w| {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            (rho * rho - dx * dx - dy * dy).max(0.0).sqrt()
        })
        .collect()
}

/// One convex step over the horizontal coordinates at fixed altitudes and
/// schedule. Returns the proposed positions.
pub fn horizontal_scp_step(
    cmap: &CompressedMap,
    cfg: &CommConfig,
    q: &[Vec<f64>],
    positions: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    let k = cmap.nodes.len();
    let n = positions.len();
    let b_ratio = cmap.b_ratio();
    let p_exp = (cmap.a_ratio() - 1.0) * cmap.alpha_los / 2.0;
    let g_snr = cfg.p_tx * cmap.beta_los_eff / cfg.noise;
    let xi = |ni: usize| 1 + ni;
    let yi = |ni: usize| 1 + n + ni;
    let base = 1 + 2 * n;
    let fi = |ki: usize, ni: usize| base + ki * n + ni;
    let wi = |ki: usize, ni: usize| base + k * n + ki * n + ni;
    let li = |ki: usize, ni: usize| base + 2 * k * n + ki * n + ni;
    let ti = |ki: usize, ni: usize| base + 3 * k * n + ki * n + ni;
    let num_vars = 1 + 2 * n + 4 * k * n;
    let mut p = ConicProblem::new(num_vars);
    p.set_objective(vec![(0, 1.0)]);
    let mut scales = vec![1.0f64; num_vars];
    for ni in 0..n {
        scales[xi(ni)] = 100.0;
        scales[yi(ni)] = 100.0;
    }

    for ki in 0..k {
        let node = cmap.nodes[ki].position;
        let model = *cmap.model(cmap.nodes[ki].id);
        let mut mu_row = vec![(0usize, 1.0)];
        let mut rhs = 0.0;
        for ni in 0..n {
            let pos = positions[ni];
            let z = pos[2] - node[2];
            let l0 = ((pos[0] - node[0]).powi(2) + (pos[1] - node[1]).powi(2)).max(L_FLOOR);
            let s0 = (z * z + l0).max(D_MIN * D_MIN);
            let (theta0, dtheta) = theta_of_l(z, l0);
            let (f0, df) = f_of_theta(model.a, model.b, theta0);
            let (w0, dw) = w_of_s(s0, p_exp, b_ratio)?;
            scales[fi(ki, ni)] = f0.max(1e-6);
            scales[wi(ki, ni)] = w0;
            scales[li(ki, ni)] = l0;
            let rp = rate_point(g_snr, b_ratio, cmap.alpha_nlos, f0, w0, s0);
            // theta <= theta0 + dtheta (l - l0)
            p.add_ineq(
                vec![(ti(ki, ni), 1.0), (li(ki, ni), -dtheta)],
                theta0 - dtheta * l0,
            );
            // f >= f0 + df (theta - theta0)
            p.add_ineq(vec![(fi(ki, ni), -1.0), (ti(ki, ni), df)], df * theta0 - f0);
            // w >= w0 + dw (l - l0)   (s = z^2 + l, ds = dl)
            p.add_ineq(vec![(wi(ki, ni), -1.0), (li(ki, ni), dw)], dw * l0 - w0);
            // l >= ||v - u||^2 via SOC ||(x-ux, y-uy, (l-1)/2)|| <= (l+1)/2
            p.add_soc(
                vec![
                    (vec![(xi(ni), 1.0)], -node[0]),
                    (vec![(yi(ni), 1.0)], -node[1]),
                    (vec![(li(ki, ni), 0.5)], -0.5),
                ],
                vec![(li(ki, ni), 0.5)],
                0.5,
            );
            p.add_ineq(vec![(li(ki, ni), -1.0)], -L_FLOOR);
            // Physical domains keep the linearized constraints from running
            // away where the surrogate is meaningless.
            p.add_bounds(fi(ki, ni), 0.0, f64::INFINITY);
            p.add_bounds(wi(ki, ni), 0.0, f64::INFINITY);
            p.add_bounds(ti(ki, ni), 0.0, std::f64::consts::FRAC_PI_2);
            // Rate lower bound contribution; s varies only through l here.
            let qv = q[ki][ni] / n as f64;
            mu_row.push((fi(ki, ni), -qv * rp.d_f));
            mu_row.push((wi(ki, ni), -qv * rp.d_w));
            mu_row.push((li(ki, ni), -qv * rp.d_s));
            rhs += qv * (rp.c - rp.d_f * f0 - rp.d_w * w0 - rp.d_s * l0);
        }
        p.add_ineq(mu_row, rhs);
    }

    // Motion.
    let budgets = horizontal_budgets(cfg, positions);
    for ni in 1..n {
        p.add_soc(
            vec![
                (vec![(xi(ni), 1.0), (xi(ni - 1), -1.0)], 0.0),
                (vec![(yi(ni), 1.0), (yi(ni - 1), -1.0)], 0.0),
            ],
            vec![],
            budgets[ni - 1],
        );
    }
    // Trust region around the current iterate.
    let trust = TRUST_FACTOR * cfg.rho_max();
    for ni in 0..n {
        p.add_soc(
            vec![
                (vec![(xi(ni), 1.0)], -positions[ni][0]),
                (vec![(yi(ni), 1.0)], -positions[ni][1]),
            ],
            vec![],
            trust,
        );
    }
    if cfg.looped {
        p.add_eq(vec![(xi(n - 1), 1.0), (xi(0), -1.0)], 0.0);
        p.add_eq(vec![(yi(n - 1), 1.0), (yi(0), -1.0)], 0.0);
    }

    p.set_col_scale(scales);
    let sol = solve_expect_optimal(&p, cfg.solver_tol)?;
    Ok((0..n)
        .map(|ni| [sol.x[xi(ni)], sol.x[yi(ni)], positions[ni][2]])
        .collect())
}

/// One convex step over the altitudes at fixed horizontal positions and
/// schedule.
pub fn altitude_scp_step(
    cmap: &CompressedMap,
    cfg: &CommConfig,
    q: &[Vec<f64>],
    positions: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    let k = cmap.nodes.len();
    let n = positions.len();
    let b_ratio = cmap.b_ratio();
    let p_exp = (cmap.a_ratio() - 1.0) * cmap.alpha_los / 2.0;
    let g_snr = cfg.p_tx * cmap.beta_los_eff / cfg.noise;
    let zi = |ni: usize| 1 + ni;
    let hi = |ni: usize| 1 + n + ni;
    let base = 1 + 2 * n;
    let mi = |ki: usize, ni: usize| base + ki * n + ni;
    let oi = |ki: usize, ni: usize| base + k * n + ki * n + ni;
    let num_vars = 1 + 2 * n + 2 * k * n;
    let mut p = ConicProblem::new(num_vars);
    p.set_objective(vec![(0, 1.0)]);
    let mut scales = vec![1.0f64; num_vars];

    for ni in 0..n {
        let z0 = positions[ni][2];
        scales[zi(ni)] = 100.0;
        scales[hi(ni)] = (z0 * z0).max(1.0);
        // h >= z0^2 + 2 z0 (z - z0), the supporting line of z^2 at z0.
        p.add_ineq(vec![(hi(ni), -1.0), (zi(ni), 2.0 * z0)], z0 * z0);
        p.add_bounds(hi(ni), 0.0, cfg.h_max * cfg.h_max);
        let trust = TRUST_FACTOR * cfg.rho_max();
        p.add_bounds(
            zi(ni),
            cfg.h_min.max(z0 - trust),
            cfg.h_max.min(z0 + trust).max(cfg.h_min),
        );
    }
    for ki in 0..k {
        let node = cmap.nodes[ki].position;
        let model = *cmap.model(cmap.nodes[ki].id);
        let mut mu_row = vec![(0usize, 1.0)];
        let mut rhs = 0.0;
        for ni in 0..n {
            let pos = positions[ni];
            let r2 = ((pos[0] - node[0]).powi(2) + (pos[1] - node[1]).powi(2)).max(L_FLOOR);
            let r = r2.sqrt();
            let z0 = pos[2] - node[2];
            let h0 = z0 * z0;
            let s0 = (h0 + r2).max(D_MIN * D_MIN);
            let (m0, dm) = m_of_z(model.a, model.b, r, z0);
            let (w0, dw) = w_of_s(s0, p_exp, b_ratio)?;
            scales[mi(ki, ni)] = m0.max(1e-6);
            scales[oi(ki, ni)] = w0;
            let rp = rate_point(g_snr, b_ratio, cmap.alpha_nlos, m0, w0, s0);
            // m >= m0 + dm (z - z0)
            p.add_ineq(vec![(mi(ki, ni), -1.0), (zi(ni), dm)], dm * z0 - m0);
            // o >= w0 + dw (h - h0)   (s = h + r^2, ds = dh)
            p.add_ineq(vec![(oi(ki, ni), -1.0), (hi(ni), dw)], dw * h0 - w0);
            p.add_bounds(mi(ki, ni), 0.0, f64::INFINITY);
            p.add_bounds(oi(ki, ni), 0.0, f64::INFINITY);
            let qv = q[ki][ni] / n as f64;
            mu_row.push((mi(ki, ni), -qv * rp.d_f));
            mu_row.push((oi(ki, ni), -qv * rp.d_w));
            mu_row.push((hi(ni), -qv * rp.d_s));
            rhs += qv * (rp.c - rp.d_f * m0 - rp.d_w * w0 - rp.d_s * h0);
        }
        p.add_ineq(mu_row, rhs);
    }

    // Vertical motion budgets.
    let budgets = vertical_budgets(cfg, positions);
    for ni in 1..n {
        p.add_ineq(vec![(zi(ni), 1.0), (zi(ni - 1), -1.0)], budgets[ni - 1]);
        p.add_ineq(vec![(zi(ni), -1.0), (zi(ni - 1), 1.0)], budgets[ni - 1]);
    }
    if cfg.looped {
        p.add_eq(vec![(zi(n - 1), 1.0), (zi(0), -1.0)], 0.0);
    }

    p.set_col_scale(scales);
    let sol = solve_expect_optimal(&p, cfg.solver_tol)?;
    Ok((0..n)
        .map(|ni| {
            [
                positions[ni][0],
                positions[ni][1],
                sol.x[zi(ni)].clamp(cfg.h_min, cfg.h_max),
            ]
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Initialization, safeguard, BCD loop.
// ---------------------------------------------------------------------------

/// Circular initial trajectory at h_max around `center`, radius
/// L_max / (2 pi) clamped so consecutive waypoints respect the per-slot
/// distance budget.
pub fn init_circle(cfg: &CommConfig, center: [f64; 2]) -> Vec<[f64; 3]> {
    let n = cfg.n_c;
    let rho = cfg.rho_max();
    let segments = if cfg.looped { n - 1 } else { n };
    let mut r = cfg.v_max * cfg.t_c / (2.0 * std::f64::consts::PI);
    let half = std::f64::consts::PI / segments as f64;
    if 2.0 * r * half.sin() > rho {
        r = rho / (2.0 * half.sin());
    }
    (0..n)
        .map(|i| {
            let idx = if cfg.looped { i % (n - 1) } else { i };
            let ang = 2.0 * std::f64::consts::PI * idx as f64 / segments as f64;
            [
                center[0] + r * ang.cos(),
                center[1] + r * ang.sin(),
                cfg.h_max,
            ]
        })
        .collect()
}

/// Centroid of the ground nodes (map-independent fallback: origin).
pub fn nodes_centroid(cmap: &CompressedMap) -> [f64; 2] {
    if cmap.nodes.is_empty() {
        return [0.0, 0.0];
    }
    let kx: f64 = cmap.nodes.iter().map(|v| v.position[0]).sum();
    let ky: f64 = cmap.nodes.iter().map(|v| v.position[1]).sum();
    [kx / cmap.nodes.len() as f64, ky / cmap.nodes.len() as f64]
}

fn blend(a: &[[f64; 3]], b: &[[f64; 3]], t: f64) -> Vec<[f64; 3]> {
    a.iter()
        .zip(b)
        .map(|(p, q)| [
            p[0] + t * (q[0] - p[0]),
            p[1] + t * (q[1] - p[1]),
            p[2] + t * (q[2] - p[2]),
        ])
        .collect()
}

/// Step-acceptance safeguard: accept `proposed` only if the true model
/// objective does not decrease; otherwise backtrack halfway toward the
/// previous iterate up to 10 times, then keep the previous iterate.
fn safeguard(
    cmap: &CompressedMap,
    cfg: &CommConfig,
    q: &[Vec<f64>],
    prev: &[[f64; 3]],
    proposed: Vec<[f64; 3]>,
    mu_prev: f64,
    backtracks: &mut usize,
) -> (Vec<[f64; 3]>, f64) {
    let mut t = 1.0;
    for _ in 0..=10 {
        let cand = if t == 1.0 { proposed.clone() } else { blend(prev, &proposed, t) };
        let mu = true_mu(cmap, cfg, q, &cand);
        if mu >= mu_prev - 1e-9 {
            return (cand, mu);
        }
        *backtracks += 1;
        t *= 0.5;
    }
    (prev.to_vec(), mu_prev)
}

/// Full block-coordinate descent.
pub fn bcd_optimize(cmap: &CompressedMap, cfg: &CommConfig) -> Result<CommPlan> {
    cfg.validate()?;
    if cmap.nodes.is_empty() {
        return Err(Error::CommPlan("compressed map has no nodes".into()));
    }
    let mut positions = init_circle(cfg, nodes_centroid(cmap));
    let mut schedule = schedule_lp(&model_rates(cmap, cfg, &positions), cfg.solver_tol)?;
    let mut mu = true_mu(cmap, cfg, &schedule.q, &positions);
    let mut trace = Vec::new();
    for iter in 0..cfg.max_iter {
        let mu_start = mu;
        let mut backtracks = 0usize;
        let mu_after_schedule = mu;

        let proposed = horizontal_scp_step(cmap, cfg, &schedule.q, &positions)?;
        let (pos2, mu2) = safeguard(cmap, cfg, &schedule.q, &positions, proposed, mu, &mut backtracks);
        positions = pos2;
        mu = mu2;
        let mu_after_horizontal = mu;

        let proposed = altitude_scp_step(cmap, cfg, &schedule.q, &positions)?;
        let (pos3, mu3) = safeguard(cmap, cfg, &schedule.q, &positions, proposed, mu, &mut backtracks);
        positions = pos3;
        mu = mu3;
        let mu_after_altitude = mu;

        schedule = schedule_lp(&model_rates(cmap, cfg, &positions), cfg.solver_tol)?;
        mu = schedule.mu.max(mu); // LP is exact for fixed positions
        trace.push(IterTrace {
            iter,
            mu_after_schedule,
            mu_after_horizontal,
            mu_after_altitude,
            backtracks,
        });
        if mu - mu_start < cfg.eps_mu && iter > 0 {
            break;
        }
    }
    let mu_model = true_mu(cmap, cfg, &schedule.q, &positions);
    Ok(CommPlan { positions, schedule, mu_model, trace, config: *cfg })
}

// ---------------------------------------------------------------------------
// Ground-truth evaluation and baselines.
// ---------------------------------------------------------------------------

/// Monte-Carlo evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over trials of the minimum per-node throughput, bits/s/Hz.
    pub mean_min_throughput: f64,
    pub std_min_throughput: f64,
    pub trials: usize,
    /// Deterministic min-throughput using the capacity of the mean gain with
    /// the ray-cast LoS state (no shadowing randomness).
    pub model_mean_min_throughput: f64,
}

/// Evaluate a plan against the ray-cast ground truth with random shadowing.
///
/// LoS states are geometric and computed once per (node, slot); only the
/// shadowing is redrawn across trials.
pub fn evaluate_plan<R: Rng>(
    map: &CityMap,
    params: &crate::channel::ChannelParams,
    cmap: &CompressedMap,
    cfg: &CommConfig,
    plan_q: &[Vec<f64>],
    positions: &[[f64; 3]],
    trials: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    let k = cmap.nodes.len();
    let n = positions.len();
    let mut segs = vec![vec![Segment::Los; n]; k];
    let mut dists = vec![vec![0.0f64; n]; k];
    for ki in 0..k {
        let node = cmap.nodes[ki].position;
        for ni in 0..n {
            let pos = positions[ni];
            segs[ki][ni] = los_check(map, pos, node);
            let d: f64 = (0..3).map(|i| (pos[i] - node[i]).powi(2)).sum::<f64>().sqrt();
            dists[ki][ni] = d.max(D_MIN);
        }
    }
    // Deterministic mean-gain throughput.
    let mut model_min = f64::INFINITY;
    for ki in 0..k {
        let mut tp = 0.0;
        for ni in 0..n {
            let seg = params.seg(segs[ki][ni]);
            let gain = 10f64.powf(seg.beta_db / 10.0) * shadowing_factor(seg.sigma2)
                / dists[ki][ni].powf(seg.alpha);
            tp += plan_q[ki][ni] * rate_bps(cfg.p_tx, gain, cfg.noise);
        }
        model_min = model_min.min(tp / n as f64);
    }
    // Monte Carlo over shadowing.
    let mut vals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut min_tp = f64::INFINITY;
        for ki in 0..k {
            let mut tp = 0.0;
            for ni in 0..n {
                if plan_q[ki][ni] == 0.0 {
                    continue;
                }
                let sigma = params.seg(segs[ki][ni]).sigma2.sqrt();
                let eta: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma;
                let g_db = gain_db(params, dists[ki][ni], segs[ki][ni], eta)?;
                tp += plan_q[ki][ni] * rate_bps(cfg.p_tx, 10f64.powf(g_db / 10.0), cfg.noise);
            }
            min_tp = min_tp.min(tp / n as f64);
        }
        vals.push(min_tp);
    }
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / trials.max(2) as f64;
    Ok(EvalResult {
        mean_min_throughput: mean,
        std_min_throughput: var.sqrt(),
        trials,
        model_mean_min_throughput: model_min,
    })
}

fn flat_diag() -> FitDiagnostics {
    FitDiagnostics {
        iterations: 0,
        final_grad_norm: 0.0,
        neg_log_likelihood: 0.0,
        converged: true,
    }
}

/// Baseline: every node uses the pooled global logistic model.
pub fn baseline_probabilistic_cmap(cmap: &CompressedMap) -> Result<CompressedMap> {
    let global = cmap
        .global
        .ok_or_else(|| Error::CommPlan("no global logistic model available".into()))?;
    let mut out = cmap.clone();
    for m in &mut out.models {
        m.a = global.a;
        m.b = global.b;
        m.diagnostics = global.diagnostics;
    }
    Ok(out)
}

/// Single unsegmented (alpha, beta) least-squares fit over pooled
/// measurements, plus the pooled residual variance.
pub fn fit_pooled_deterministic(measurements: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let mut gram = Gram::default();
    for &(d, g) in measurements {
        gram.add_row(d, g);
    }
    let inv = gram
        .inverse()
        .ok_or_else(|| Error::CommPlan("pooled fit is rank-deficient".into()))?;
    let omega = inv * gram.atg;
    let (alpha, beta_db) = (omega[0], omega[1]);
    let mut ss = 0.0;
    for &(d, g) in measurements {
        let pred = beta_db - alpha * crate::channel::phi_db(d);
        ss += (g - pred).powi(2);
    }
    Ok((alpha, beta_db, ss / measurements.len() as f64))
}

/// Deterministic-channel baseline map: LoS probability pinned to ~1 and the
/// segment parameters arranged so the expected gain collapses to
/// beta / d^alpha with the pooled parameters.
pub fn deterministic_cmap(
    alpha: f64,
    beta_db: f64,
    sigma2: f64,
    nodes: Vec<crate::citymap::GroundNode>,
) -> CompressedMap {
    let beta_eff = 10f64.powf(beta_db / 10.0) * shadowing_factor(sigma2);
    let models = nodes
        .iter()
        .map(|v| NodeModel { node_id: v.id, a: 0.0, b: -30.0, diagnostics: flat_diag() })
        .collect();
    CompressedMap {
        models,
        global: None,
        alpha_los: alpha,
        alpha_nlos: alpha,
        beta_los_eff: beta_eff,
        beta_nlos_eff: 0.5 * beta_eff,
        nodes,
    }
}

// ---------------------------------------------------------------------------
// Export.
// ---------------------------------------------------------------------------

pub fn save_comm_plan(plan: &CommPlan, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(plan)?)?;
    Ok(())
}

pub fn export_plan_csv<W: std::io::Write>(writer: W, plan: &CommPlan) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let k = plan.schedule.q.len();
    let mut header = vec!["slot".to_string(), "x".into(), "y".into(), "z".into()];
    header.extend((0..k).map(|ki| format!("q{ki}")));
    w.write_record(&header)?;
    for (ni, pos) in plan.positions.iter().enumerate() {
        let mut rec = vec![
            ni.to_string(),
            format!("{}", pos[0]),
            format!("{}", pos[1]),
            format!("{}", pos[2]),
        ];
        rec.extend((0..k).map(|ki| format!("{}", plan.schedule.q[ki][ni])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::citymap::GroundNode;
    use approx::assert_relative_eq;

    fn flat_model(id: usize, a: f64, b: f64) -> NodeModel {
        NodeModel { node_id: id, a, b, diagnostics: flat_diag() }
    }

    fn toy_cmap(nodes: Vec<GroundNode>, a: f64, b: f64) -> CompressedMap {
        let params = ChannelParams::urban_micro();
        let models = nodes.iter().map(|v| flat_model(v.id, a, b)).collect();
        CompressedMap::from_params(models, None, &params, nodes)
    }

    fn small_cfg(n: usize) -> CommConfig {
        CommConfig { n_c: n, ..CommConfig::with_duration(n as f64) }
    }

    #[test]
    fn capacity_at_reference_distance() {
        // P = 1 W, gain = -30 dB -> 1e-3, noise = 1e-11 W: SNR = 1e8.
        assert_relative_eq!(rate_bps(1.0, 1e-3, 1e-11), (1.0f64 + 1e8).log2(), epsilon = 1e-12);
        assert_relative_eq!(rate_bps(1.0, 1e-3, 1e-11), 26.575425, epsilon = 1e-5);
    }

    #[test]
    fn rate_point_matches_direct_rate_and_finite_differences() {
        let (g, b, an) = (1e8, 0.1, 3.64);
        let (f, w, s) = (0.3, 0.9, 6000.0);
        let rp = rate_point(g, b, an, f, w, s);
        let direct = |f: f64, w: f64, s: f64| {
            (1.0 + g * (1.0 / ((1.0 + f) * w) + b) / s.powf(an / 2.0)).log2()
        };
        assert_relative_eq!(rp.c, direct(f, w, s), epsilon = 1e-12);
        let h = 1e-6;
        assert_relative_eq!(rp.d_f, (direct(f + h, w, s) - direct(f - h, w, s)) / (2.0 * h), max_relative = 1e-5);
        assert_relative_eq!(rp.d_w, (direct(f, w + h, s) - direct(f, w - h, s)) / (2.0 * h), max_relative = 1e-5);
        let hs = 1e-3;
        assert_relative_eq!(rp.d_s, (direct(f, w, s + hs) - direct(f, w, s - hs)) / (2.0 * hs), max_relative = 1e-5);
    }

    #[test]
    fn surrogate_derivatives_match_finite_differences() {
        let h = 1e-6;
        let (z, l) = (70.0, 4000.0);
        let (t0, dt) = theta_of_l(z, l);
        let (tp, _) = theta_of_l(z, l + h);
        assert_relative_eq!(dt, (tp - t0) / h, max_relative = 1e-4);
        let (a, b) = (18.0, 7.0);
        let (f0, df) = f_of_theta(a, b, 0.8);
        let (fp, _) = f_of_theta(a, b, 0.8 + h);
        assert_relative_eq!(df, (fp - f0) / h, max_relative = 1e-4);
        let (p_exp, br) = (1.37 * 2.27 / 2.0, 0.1);
        let (w0, dw) = w_of_s(9000.0, p_exp, br).unwrap();
        let (wp, _) = w_of_s(9000.0 + h, p_exp, br).unwrap();
        assert_relative_eq!(dw, (wp - w0) / h, max_relative = 1e-3);
        let (m0, dm) = m_of_z(a, b, 60.0, 75.0);
        let (mp, _) = m_of_z(a, b, 60.0, 75.0 + h);
        assert_relative_eq!(dm, (mp - m0) / h, max_relative = 1e-4);
        assert!(w_of_s(1.0e-9, p_exp, br).is_err());
    }

    #[test]
    fn theta_of_l_is_convex_in_l() {
        for &z in &[20.0, 60.0, 100.0] {
            for &l in &[10.0, 500.0, 5000.0, 50000.0] {
                let h = l * 1e-4;
                let (tm, _) = theta_of_l(z, l - h);
                let (t0, _) = theta_of_l(z, l);
                let (tp, _) = theta_of_l(z, l + h);
                assert!(tp - 2.0 * t0 + tm > 0.0, "theta'' <= 0 at z={z}, l={l}");
            }
        }
    }

    #[test]
    fn schedule_lp_single_user_gets_all_slots() {
        let rates = vec![vec![2.0, 4.0, 6.0]];
        let plan = schedule_lp(&rates, 1e-9).unwrap();
        assert_relative_eq!(plan.mu, 4.0, epsilon = 1e-6);
        for q in &plan.q[0] {
            assert_relative_eq!(*q, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn schedule_lp_two_symmetric_users_split_evenly() {
        let rates = vec![vec![4.0, 4.0], vec![4.0, 4.0]];
        let plan = schedule_lp(&rates, 1e-9).unwrap();
        assert_relative_eq!(plan.mu, 2.0, epsilon = 1e-6);
        let t0: f64 = plan.q[0].iter().sum();
        let t1: f64 = plan.q[1].iter().sum();
        assert_relative_eq!(t0, t1, epsilon = 1e-5);
    }

    #[test]
    fn schedule_lp_respects_upper_bound_and_rounding() {
        let rates = vec![vec![6.0, 1.0, 1.0], vec![1.0, 5.0, 2.0], vec![0.5, 0.5, 8.0]];
        let plan = schedule_lp(&rates, 1e-9).unwrap();
        assert!(plan.mu <= throughput_upper_slot(&rates) + 1e-6);
        for ni in 0..3 {
            let tot: f64 = (0..3).map(|ki| plan.q[ki][ni]).sum();
            assert!(tot <= 1.0 + 1e-6);
        }
        let hard = plan.rounded();
        for ni in 0..3 {
            let tot: f64 = (0..3).map(|ki| hard[ki][ni]).sum();
            assert!(tot <= 1.0);
        }
    }

    #[test]
    fn init_circle_radius_and_chords() {
        // 90 s at 10 m/s, open trajectory: r = 900 / (2 pi).
        let mut cfg = small_cfg(90);
        cfg.looped = false;
        let pos = init_circle(&cfg, [0.0, 0.0]);
        let r = (pos[0][0].powi(2) + pos[0][1].powi(2)).sqrt();
        assert_relative_eq!(r, 143.2394, epsilon = 1e-3);
        let rho = cfg.rho_max();
        for w in pos.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            assert!(d <= rho + 1e-9);
        }
        // Looped version closes exactly and still respects the budget.
        cfg.looped = true;
        let pos = init_circle(&cfg, [10.0, -5.0]);
        assert_eq!(pos[0], pos[cfg.n_c - 1]);
        for w in pos.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            assert!(d <= rho + 1e-9, "chord {d} > rho {rho}");
        }
        assert!(pos.iter().all(|p| p[2] == cfg.h_max));
    }

    #[test]
    fn deterministic_cmap_collapses_to_power_law() {
        let nodes = vec![GroundNode { id: 0, position: [0.0, 0.0, 0.0] }];
        let cmap = deterministic_cmap(3.0, -35.0, 0.0, nodes);
        for &d in &[10.0, 80.0, 400.0] {
            let g = cmap.expected_gain(0, [d, 0.0, 0.0]);
            let direct = 10f64.powf(-3.5) / d.powi(3);
            assert_relative_eq!(g, direct, max_relative = 1e-9);
        }
    }

    #[test]
    fn bcd_is_monotone_and_feasible() {
        let nodes = vec![
            GroundNode { id: 0, position: [0.0, 0.0, 0.0] },
            GroundNode { id: 1, position: [400.0, 0.0, 0.0] },
        ];
        let cmap = toy_cmap(nodes, 18.0, 7.0);
        let mut cfg = small_cfg(20);
        cfg.t_c = 20.0;
        cfg.max_iter = 8;
        let plan = bcd_optimize(&cmap, &cfg).unwrap();
        // Monotone objective across the trace.
        let mut prev = 0.0;
        for t in &plan.trace {
            assert!(t.mu_after_horizontal >= t.mu_after_schedule - 1e-9);
            assert!(t.mu_after_altitude >= t.mu_after_horizontal - 1e-9);
            assert!(t.mu_after_schedule >= prev - 1e-9);
            prev = t.mu_after_altitude;
        }
        assert!(plan.mu_model >= prev - 1e-9);
        // Kinematic feasibility and loop closure.
        let rho = cfg.rho_max();
        for w in plan.positions.windows(2) {
            let d: f64 = (0..3).map(|i| (w[1][i] - w[0][i]).powi(2)).sum::<f64>().sqrt();
            assert!(d <= rho + 1e-5, "step {d} exceeds budget {rho}");
        }
        let (first, last) = (plan.positions[0], plan.positions[cfg.n_c - 1]);
        for i in 0..3 {
            assert!((first[i] - last[i]).abs() < 1e-5);
        }
        for p in &plan.positions {
            assert!(p[2] >= cfg.h_min - 1e-6 && p[2] <= cfg.h_max + 1e-6);
        }
        // Optimization beats the initial circle.
        let init = init_circle(&cfg, nodes_centroid(&cmap));
        let init_mu = schedule_lp(&model_rates(&cmap, &cfg, &init), 1e-8).unwrap().mu;
        assert!(plan.mu_model >= init_mu - 1e-6);
    }

    #[test]
    fn altitude_fixed_band_keeps_z() {
        let nodes = vec![GroundNode { id: 0, position: [100.0, 100.0, 0.0] }];
        let cmap = toy_cmap(nodes, 15.0, 6.0);
        let mut cfg = small_cfg(8);
        cfg.h_min = 60.0;
        cfg.h_max = 60.0;
        let positions = init_circle(&cfg, [100.0, 100.0]);
        let q = vec![vec![1.0; 8]];
        let out = altitude_scp_step(&cmap, &cfg, &q, &positions).unwrap();
        for p in &out {
            assert_relative_eq!(p[2], 60.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn all_los_map_descends_toward_h_min() {
        // Slope 0 with strongly negative b pins p ~ 1 (always LoS): closer is
        // always better, so the altitude block should head to h_min.
        let nodes = vec![GroundNode { id: 0, position: [0.0, 0.0, 0.0] }];
        let cmap = toy_cmap(nodes, 0.0, -30.0);
        let cfg = small_cfg(8);
        let positions: Vec<[f64; 3]> = (0..8).map(|i| [200.0 + i as f64, 0.0, 100.0]).collect();
        let q = vec![vec![1.0; 8]];
        let mut pos = positions;
        for _ in 0..20 {
            pos = altitude_scp_step(&cmap, &cfg, &q, &pos).unwrap();
        }
        for p in &pos {
            assert!(p[2] < 55.0, "altitude stuck at {}", p[2]);
        }
    }

    #[test]
    fn horizontal_step_improves_single_node_objective() {
        let nodes = vec![GroundNode { id: 0, position: [300.0, 300.0, 0.0] }];
        let cmap = toy_cmap(nodes, 18.0, 7.0);
        let mut cfg = small_cfg(8);
        cfg.t_c = 8.0;
        let positions = init_circle(&cfg, [0.0, 0.0]); // far from the node
        let q = vec![vec![1.0; 8]];
        let mu0 = true_mu(&cmap, &cfg, &q, &positions);
        let mut pos = positions;
        let mut mu = mu0;
        for _ in 0..30 {
            let proposed = horizontal_scp_step(&cmap, &cfg, &q, &pos).unwrap();
            let mut bt = 0;
            let (p2, m2) = safeguard(&cmap, &cfg, &q, &pos, proposed, mu, &mut bt);
            pos = p2;
            mu = m2;
        }
        assert!(mu > mu0 + 0.5, "no progress: {mu0} -> {mu}");
    }

    #[test]
    fn pooled_fit_recovers_single_segment_law() {
        let meas: Vec<(f64, f64)> = (1..40)
            .map(|i| {
                let d = 10.0 * i as f64;
                (d, -35.0 - 3.0 * crate::channel::phi_db(d))
            })
            .collect();
        let (alpha, beta, var) = fit_pooled_deterministic(&meas).unwrap();
        assert_relative_eq!(alpha, 3.0, epsilon = 1e-9);
        assert_relative_eq!(beta, -35.0, epsilon = 1e-8);
        assert!(var < 1e-12);
    }

    #[test]
    fn evaluation_matches_hand_noiseless_case() {
        // Empty map (all LoS), sigma^2 = 0: Monte Carlo equals the
        // deterministic mean-gain throughput exactly.
        let map = crate::citymap::generate_city((400.0, 400.0), 100.0, 0.0, (5.0, 40.0), 14.0, 1)
            .unwrap();
        let mut params = ChannelParams::urban_micro();
        params.los.sigma2 = 0.0;
        params.nlos.sigma2 = 0.0;
        let nodes = vec![GroundNode { id: 0, position: [200.0, 200.0, 0.0] }];
        let cmap = CompressedMap::from_params(
            vec![flat_model(0, 0.0, -30.0)],
            None,
            &params,
            nodes,
        );
        let cfg = small_cfg(4);
        let positions: Vec<[f64; 3]> = (0..4).map(|i| [180.0 + 10.0 * i as f64, 200.0, 60.0]).collect();
        let q = vec![vec![1.0; 4]];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::SeedableRng;
        let res = evaluate_plan(&map, &params, &cmap, &cfg, &q, &positions, 10, &mut rng).unwrap();
        assert_relative_eq!(
            res.mean_min_throughput,
            res.model_mean_min_throughput,
            epsilon = 1e-9
        );
        assert!(res.std_min_throughput < 1e-12);
    }
}
