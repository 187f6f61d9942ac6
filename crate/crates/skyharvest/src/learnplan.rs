//! Learning-trajectory planner: forward dynamic programming on the 3D path
//! graph, minimizing the channel-parameter estimation error.
//!
//! The stage cost depends on the full measurement history through the Gram
//! inverse, so (vertex, stage) is not a Markov state. Each state keeps a
//! small beam of measurement histories (cost-to-come plus Gram snapshot);
//! the recursion is a label-setting heuristic, exact when Gram-order effects
//! are negligible. `plan_additive` isolates the Bellman machinery with a
//! position-only cost, where the recursion is exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    accumulate_geometry, improvement_r, slot_geometry, ErrorTrace, GramAccumulator,
};
use crate::citymap::{ActionTuple, CityMap, GroundNode, PathGraph};
use crate::{Error, Result};

/// Regularizer added to the Gram diagonal inside DP bookkeeping only.
pub const DP_GRAM_EPS: f64 = 1e-6;

/// Conservative slot count: N_l = floor(T_l / T_e) with T_e the time of the
/// longest edge at maximum speed.
pub fn select_horizon(t_l: f64, a_h: f64, a_v: f64, v_max: f64) -> Result<usize> {
    if t_l <= 0.0 || a_h <= 0.0 || a_v <= 0.0 || v_max <= 0.0 {
        return Err(Error::InvalidArgument("horizon inputs must be positive".into()));
    }
    let t_e = (2.0 * a_h * a_h + a_v * a_v).sqrt() / v_max;
    let n_l = (t_l / t_e).floor() as usize;
    if n_l < 2 {
        return Err(Error::HorizonTooShort(n_l));
    }
    Ok(n_l)
}

/// DP label: cost-to-come plus the Gram snapshot it was achieved with.
#[derive(Debug, Clone)]
pub struct DpState {
    pub vertex: usize,
    pub stage: usize,
    /// Regularized cost-to-come J (equals the regularized error trace).
    pub cost: f64,
    pub grams: GramAccumulator,
    /// Back-pointer: (predecessor vertex, action index).
    pub parent: Option<(usize, usize)>,
}

/// Planned learning trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningPlan {
    pub waypoints: Vec<[f64; 3]>,
    pub actions: Vec<ActionTuple>,
    /// Unregularized final error e_LoS + kappa e_NLoS (infinite when a
    /// segment stays rank-deficient).
    pub final_error: ErrorTrace,
    pub per_stage_costs: Vec<f64>,
    pub n_l: usize,
}

fn regularized_cost(grams: &GramAccumulator, kappa: f64) -> f64 {
    grams.los.trace_inv_regularized(DP_GRAM_EPS)
        + kappa * grams.nlos.trace_inv_regularized(DP_GRAM_EPS)
}

/// Stage cost L[n] of taking `action` from `state`.
///
/// Uses measurement geometry only. For stages >= 2 this is -(r_LoS + kappa
/// r_NLoS) from the matrix-inversion-lemma recursion; stage 1 charges the
/// regularized initial error.
pub fn stage_cost(
    state: &DpState,
    action: &ActionTuple,
    graph: &PathGraph,
    map: &CityMap,
    nodes: &[GroundNode],
    kappa: f64,
) -> f64 {
    let successor = action.apply(graph.vertices[state.vertex]);
    let batch = slot_geometry(map, nodes, successor);
    if state.stage == 0 {
        // Interpreted as the initial slot: charge the (regularized) error
        // after the first measurement batch.
        let mut grams = state.grams;
        accumulate_geometry(&mut grams, &batch);
        return regularized_cost(&grams, kappa);
    }
    let imp = improvement_r(&state.grams, &batch);
    -(imp.r_los + kappa * imp.r_nlos)
}

/// Labels kept per (vertex, stage). The learning cost is history-dependent,
/// so a single label per state can prune the eventual optimum; a small beam
/// of measurement histories keeps the planner near-exact on small instances
/// at modest cost.
pub const DP_BEAM_WIDTH: usize = 16;

#[derive(Debug, Clone)]
struct Label {
    deficiency: usize,
    cost: f64,
    grams: GramAccumulator,
    /// (previous vertex, label index there, action index).
    parent: Option<(usize, usize, usize)>,
}

fn better(candidate: (usize, f64), incumbent: (usize, f64)) -> bool {
    // Rank-deficient segments compare lexicographically: more rank wins,
    // then the regularized trace.
    candidate.0 < incumbent.0 || (candidate.0 == incumbent.0 && candidate.1 < incumbent.1)
}

/// Insert into a beam sorted by (deficiency, cost), dropping duplicates
/// (identical waypoint multisets reached in different orders produce the
/// same accumulator) and anything past the beam width.
fn beam_insert(beam: &mut Vec<Label>, label: Label) {
    let key = (label.deficiency, label.cost);
    let pos = beam.partition_point(|l| !better(key, (l.deficiency, l.cost)));
    if pos > 0 {
        let prev = &beam[pos - 1];
        if prev.deficiency == label.deficiency
            && (prev.cost - label.cost).abs() <= 1e-12 * (1.0 + label.cost.abs())
        {
            return;
        }
    }
    if pos >= DP_BEAM_WIDTH {
        return;
    }
    beam.insert(pos, label);
    beam.truncate(DP_BEAM_WIDTH);
}

/// Forward DP over the path graph with the history-dependent learning cost.
pub fn plan_learning_trajectory(
    graph: &PathGraph,
    map: &CityMap,
    nodes: &[GroundNode],
    kappa: f64,
    n_l: usize,
) -> Result<LearningPlan> {
    if n_l < 2 {
        return Err(Error::HorizonTooShort(n_l));
    }
    let nv = graph.vertex_count();
    let hops = graph.hops_to(graph.terminal);
    if hops[graph.base] == usize::MAX || hops[graph.base] + 1 > n_l {
        let min_stages = if hops[graph.base] == usize::MAX {
            usize::MAX
        } else {
            hops[graph.base] + 1
        };
        return Err(Error::TerminalUnreachable { horizon: n_l, min_stages });
    }

    // Measurement geometry depends only on the vertex; precompute it once.
    let geometry: Vec<Vec<(f64, crate::citymap::Segment)>> = graph
        .vertices
        .iter()
        .map(|&v| slot_geometry(map, nodes, v))
        .collect();

    // Stage 1: the UAV measures at the base vertex.
    let mut stage_labels: Vec<Vec<Label>> = vec![Vec::new(); nv];
    let mut grams = GramAccumulator::default();
    accumulate_geometry(&mut grams, &geometry[graph.base]);
    stage_labels[graph.base].push(Label {
        deficiency: grams.deficiency(),
        cost: regularized_cost(&grams, kappa),
        grams,
        parent: None,
    });
    let mut history = vec![stage_labels.clone()];

    for stage in 1..n_l {
        let remaining = n_l - 1 - stage;
        let mut next: Vec<Vec<Label>> = vec![Vec::new(); nv];
        for (v, beam) in stage_labels.iter().enumerate() {
            for (li, label) in beam.iter().enumerate() {
                for edge in &graph.edges[v] {
                    // Prune successors that cannot reach the terminal in time.
                    if hops[edge.to] > remaining {
                        continue;
                    }
                    let mut grams = label.grams;
                    accumulate_geometry(&mut grams, &geometry[edge.to]);
                    beam_insert(
                        &mut next[edge.to],
                        Label {
                            deficiency: grams.deficiency(),
                            cost: regularized_cost(&grams, kappa),
                            grams,
                            parent: Some((v, li, edge.action_index)),
                        },
                    );
                }
            }
        }
        history.push(next.clone());
        stage_labels = next;
    }

    let terminal_label = stage_labels[graph.terminal]
        .first()
        .ok_or(Error::TerminalUnreachable { horizon: n_l, min_stages: hops[graph.base] + 1 })?;

    // Trace back through the label history.
    let mut vertices = vec![graph.terminal];
    let mut action_indices = Vec::new();
    let mut parent = terminal_label.parent;
    let mut stage = n_l - 1;
    while let Some((pv, pli, ai)) = parent {
        vertices.push(pv);
        action_indices.push(ai);
        stage -= 1;
        parent = history[stage][pv][pli].parent;
    }
    vertices.reverse();
    action_indices.reverse();
    debug_assert_eq!(vertices.len(), n_l);

    let waypoints: Vec<[f64; 3]> = vertices.iter().map(|&v| graph.vertices[v]).collect();
    let actions: Vec<ActionTuple> = vertices
        .windows(2)
        .zip(&action_indices)
        .map(|(w, &ai)| {
            graph.edges[w[0]]
                .iter()
                .find(|e| e.to == w[1] && e.action_index == ai)
                .expect("recorded edge exists")
                .action
        })
        .collect();

    // Per-stage regularized costs (telescoped) and the honest final error.
    let mut per_stage_costs = Vec::with_capacity(n_l);
    let mut grams = GramAccumulator::default();
    let mut prev_cost = 0.0;
    for (i, wp) in waypoints.iter().enumerate() {
        accumulate_geometry(&mut grams, &slot_geometry(map, nodes, *wp));
        let cost = regularized_cost(&grams, kappa);
        per_stage_costs.push(if i == 0 { cost } else { cost - prev_cost });
        prev_cost = cost;
    }
    let final_error = trajectory_error(map, nodes, &waypoints, kappa);

    Ok(LearningPlan {
        waypoints,
        actions,
        final_error,
        per_stage_costs,
        n_l,
    })
}

/// Fresh unregularized Gram pass over a waypoint sequence.
pub fn trajectory_error(
    map: &CityMap,
    nodes: &[GroundNode],
    waypoints: &[[f64; 3]],
    kappa: f64,
) -> ErrorTrace {
    let mut grams = GramAccumulator::default();
    for wp in waypoints {
        accumulate_geometry(&mut grams, &slot_geometry(map, nodes, *wp));
    }
    match (grams.los.trace_inv(), grams.nlos.trace_inv()) {
        (Some(a), Some(b)) => ErrorTrace::Finite(a + kappa * b),
        _ => ErrorTrace::Infinite,
    }
}

/// Classical forward DP with an additive, position-only stage cost.
///
/// Exact shortest-path over (vertex, stage); used to isolate the Bellman
/// machinery from the history-dependent learning cost.
pub fn plan_additive(
    graph: &PathGraph,
    n_l: usize,
    cost: &dyn Fn(usize, usize) -> f64,
) -> Option<(Vec<usize>, f64)> {
    let nv = graph.vertex_count();
    let mut j = vec![f64::INFINITY; nv];
    let mut parents: Vec<Vec<Option<usize>>> = Vec::with_capacity(n_l);
    j[graph.base] = cost(0, graph.base);
    parents.push(vec![None; nv]);
    for stage in 1..n_l {
        let mut next = vec![f64::INFINITY; nv];
        let mut parent = vec![None; nv];
        for v in 0..nv {
            if j[v].is_infinite() {
                continue;
            }
            for edge in &graph.edges[v] {
                let c = j[v] + cost(stage, edge.to);
                if c < next[edge.to] {
                    next[edge.to] = c;
                    parent[edge.to] = Some(v);
                }
            }
        }
        parents.push(parent);
        j = next;
    }
    if j[graph.terminal].is_infinite() {
        return None;
    }
    let mut path = vec![graph.terminal];
    for stage in (1..n_l).rev() {
        let prev = parents[stage][*path.last().unwrap()]?;
        path.push(prev);
    }
    path.reverse();
    Some((path, j[graph.terminal]))
}

/// One random feasible base-to-terminal vertex trajectory of exactly `n_l`
/// stages, or `None` if the terminal is unreachable.
pub fn random_feasible_trajectory<R: Rng>(
    graph: &PathGraph,
    n_l: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let hops = graph.hops_to(graph.terminal);
    if hops[graph.base] == usize::MAX || hops[graph.base] + 1 > n_l {
        return None;
    }
    let mut path = vec![graph.base];
    let mut v = graph.base;
    for stage in 1..n_l {
        let remaining = n_l - 1 - stage;
        let candidates: Vec<usize> = graph.edges[v]
            .iter()
            .map(|e| e.to)
            .filter(|&w| hops[w] <= remaining)
            .collect();
        v = candidates[rng.gen_range(0..candidates.len())];
        path.push(v);
    }
    Some(path)
}

/// Monte-Carlo parameter MSE of flying `waypoints` and running the MLE.
///
/// The design matrix is fixed by geometry, so rank deficiency is
/// trial-independent; a deficient segment yields an infinite MSE.
pub fn monte_carlo_mse<R: Rng>(
    map: &CityMap,
    params: &crate::channel::ChannelParams,
    nodes: &[GroundNode],
    waypoints: &[[f64; 3]],
    trials: usize,
    rng: &mut R,
) -> f64 {
    use crate::channel::{accumulate, mle_estimate, sample_slot_measurements};
    let mut total = 0.0;
    for _ in 0..trials {
        let mut acc = GramAccumulator::default();
        for wp in waypoints {
            accumulate(&mut acc, &sample_slot_measurements(map, params, nodes, *wp, rng));
        }
        let est = mle_estimate(&acc);
        match (est.los.omega, est.nlos.omega) {
            (Some((al, bl)), Some((an, bn))) => {
                total += (al - params.los.alpha).powi(2)
                    + (bl - params.los.beta_db).powi(2)
                    + (an - params.nlos.alpha).powi(2)
                    + (bn - params.nlos.beta_db).powi(2);
            }
            _ => return f64::INFINITY,
        }
    }
    total / trials as f64
}

/// Plan export helpers (JSON plan, CSV of per-stage costs).
pub fn save_plan(plan: &LearningPlan, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(plan)?)?;
    Ok(())
}

pub fn export_stage_costs_csv<W: std::io::Write>(writer: W, plan: &LearningPlan) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stage", "x", "y", "z", "stage_cost"])?;
    for (i, wp) in plan.waypoints.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            format!("{}", wp[0]),
            format!("{}", wp[1]),
            format!("{}", wp[2]),
            format!("{}", plan.per_stage_costs[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citymap::{build_path_graph, generate_city, place_nodes};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_setup(seed: u64) -> (crate::citymap::CityMap, PathGraph, Vec<GroundNode>) {
        let map = generate_city((600.0, 600.0), 100.0, 1.0, (5.0, 40.0), 14.0, seed).unwrap();
        let graph = build_path_graph(
            &map,
            100.0,
            20.0,
            50.0,
            100.0,
            [0.0, 0.0, 50.0],
            [300.0, 300.0, 50.0],
        )
        .unwrap();
        let nodes = place_nodes(&map, 3, seed + 1).unwrap();
        (map, graph, nodes)
    }

    #[test]
    fn horizon_hand_evaluation() {
        assert_eq!(select_horizon(100.0, 100.0, 20.0, 10.0).unwrap(), 7);
        // Degenerate: exactly one edge of time.
        let t_e = (2.0f64 * 100.0 * 100.0 + 400.0).sqrt() / 10.0;
        assert!(select_horizon(t_e, 100.0, 20.0, 10.0).is_err());
        // Doubling v_max doubles the horizon up to flooring.
        let n1 = select_horizon(100.0, 100.0, 20.0, 10.0).unwrap();
        let n2 = select_horizon(100.0, 100.0, 20.0, 20.0).unwrap();
        assert!(n2 == 2 * n1 || n2 == 2 * n1 + 1);
    }

    #[test]
    fn no_nodes_any_feasible_path_is_optimal() {
        let (map, graph, _) = small_setup(4);
        let plan = plan_learning_trajectory(&graph, &map, &[], 2.5, 7).unwrap();
        assert_eq!(plan.waypoints.len(), 7);
        assert_eq!(plan.waypoints[0], [0.0, 0.0, 50.0]);
        assert_eq!(plan.waypoints[6], [300.0, 300.0, 50.0]);
        assert_eq!(plan.final_error, ErrorTrace::Infinite);
    }

    #[test]
    fn waypoints_obey_dynamics_and_bounds() {
        let (map, graph, nodes) = small_setup(6);
        let plan = plan_learning_trajectory(&graph, &map, &nodes, 2.5, 7).unwrap();
        for (w, act) in plan.waypoints.windows(2).zip(&plan.actions) {
            let p = act.apply(w[0]);
            for axis in 0..3 {
                assert!((p[axis] - w[1][axis]).abs() < 1e-9);
            }
            assert!(w[1][2] >= 50.0 - 1e-9 && w[1][2] <= 100.0 + 1e-9);
        }
    }

    #[test]
    fn recomputed_final_error_is_consistent() {
        let (map, graph, nodes) = small_setup(8);
        let plan = plan_learning_trajectory(&graph, &map, &nodes, 2.5, 7).unwrap();
        let recomputed = trajectory_error(&map, &nodes, &plan.waypoints, 2.5);
        match (plan.final_error, recomputed) {
            (ErrorTrace::Finite(a), ErrorTrace::Finite(b)) => assert!((a - b).abs() < 1e-6),
            (a, b) => assert_eq!(a, b),
        }
    }

    #[test]
    fn stage_cost_is_nonpositive_after_stage_one() {
        let (map, graph, nodes) = small_setup(10);
        let mut grams = GramAccumulator::default();
        for wp in [[0.0, 0.0, 50.0], [100.0, 0.0, 50.0], [200.0, 100.0, 70.0]] {
            accumulate_geometry(&mut grams, &slot_geometry(&map, &nodes, wp));
        }
        let state = DpState { vertex: graph.base, stage: 3, cost: 0.0, grams, parent: None };
        for edge in &graph.edges[graph.base] {
            let c = stage_cost(&state, &edge.action, &graph, &map, &nodes, 2.5);
            assert!(c <= 1e-12, "stage cost must be <= 0, got {c}");
        }
    }

    #[test]
    fn stage_cost_zero_with_no_nodes() {
        let (map, graph, _) = small_setup(10);
        let state = DpState {
            vertex: graph.base,
            stage: 2,
            cost: 0.0,
            grams: GramAccumulator::default(),
            parent: None,
        };
        let edge = &graph.edges[graph.base][0];
        assert_eq!(stage_cost(&state, &edge.action, &graph, &map, &[], 2.5), 0.0);
    }

    #[test]
    fn unreachable_terminal_reports_min_stages() {
        let (map, graph, nodes) = small_setup(12);
        // base (0,0) to terminal (300,300) needs >= 3 moves, so 4 stages.
        match plan_learning_trajectory(&graph, &map, &nodes, 2.5, 2) {
            Err(Error::TerminalUnreachable { horizon, min_stages }) => {
                assert_eq!(horizon, 2);
                assert_eq!(min_stages, 4);
            }
            other => panic!("expected TerminalUnreachable, got {other:?}"),
        }
    }

    #[test]
    fn additive_dp_matches_exhaustive_enumeration() {
        let map = generate_city((300.0, 300.0), 100.0, 1.0, (5.0, 40.0), 14.0, 3).unwrap();
        let graph = build_path_graph(
            &map,
            100.0,
            20.0,
            50.0,
            70.0,
            [0.0, 0.0, 50.0],
            [200.0, 200.0, 50.0],
        )
        .unwrap();
        // 4x4x2 grid. Synthetic additive position-only cost.
        let nv = graph.vertex_count();
        let cost = |stage: usize, v: usize| ((v * 31 + stage * 7) % 11) as f64 * 0.25;
        let n_l = 5;
        let (_, dp_cost) = plan_additive(&graph, n_l, &cost).unwrap();

        // Exhaustive enumeration oracle.
        fn enumerate(
            graph: &PathGraph,
            v: usize,
            stage: usize,
            n_l: usize,
            acc: f64,
            cost: &dyn Fn(usize, usize) -> f64,
            best: &mut f64,
        ) {
            if stage == n_l - 1 {
                if v == graph.terminal {
                    *best = best.min(acc);
                }
                return;
            }
            for e in &graph.edges[v] {
                enumerate(graph, e.to, stage + 1, n_l, acc + cost(stage + 1, e.to), cost, best);
            }
        }
        let mut best = f64::INFINITY;
        enumerate(&graph, graph.base, 0, n_l, cost(0, graph.base), &cost, &mut best);
        assert!(nv <= 4 * 4 * 2);
        assert_eq!(dp_cost, best);
    }

    #[test]
    fn random_feasible_trajectories_are_feasible() {
        let (_, graph, _) = small_setup(14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let path = random_feasible_trajectory(&graph, 7, &mut rng).unwrap();
            assert_eq!(path.len(), 7);
            assert_eq!(path[0], graph.base);
            assert_eq!(path[6], graph.terminal);
            for w in path.windows(2) {
                assert!(graph.edges[w[0]].iter().any(|e| e.to == w[1]));
            }
        }
    }

    #[test]
    fn optimized_plan_beats_random_feasible_trajectories() {
        // Statistical claim over seeds: the DP design should rarely lose to a
        // uniformly random feasible trajectory of the same length.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut wins, mut total) = (0usize, 0usize);
        for seed in 0..5 {
            let (map, graph, nodes) = small_setup(100 + seed);
            let plan = plan_learning_trajectory(&graph, &map, &nodes, 2.5, 7).unwrap();
            for _ in 0..20 {
                let path = random_feasible_trajectory(&graph, 7, &mut rng).unwrap();
                let wps: Vec<[f64; 3]> = path.iter().map(|&v| graph.vertices[v]).collect();
                let err = trajectory_error(&map, &nodes, &wps, 2.5);
                total += 1;
                if plan.final_error.as_f64() <= err.as_f64() + 1e-9 {
                    wins += 1;
                }
            }
        }
        assert!(
            wins * 100 >= total * 80,
            "optimized plan beat only {wins}/{total} random trajectories"
        );
    }
}
