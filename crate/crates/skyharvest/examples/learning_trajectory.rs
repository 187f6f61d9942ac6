//! Plan a channel-parameter learning trajectory with dynamic programming,
//! fly it, and compare the optimized design against random feasible paths.
//!
//! Run with: cargo run --release --example learning_trajectory

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skyharvest::channel::ChannelParams;
use skyharvest::citymap::{build_path_graph, generate_city, place_nodes};
use skyharvest::learnplan::{
    monte_carlo_mse, plan_learning_trajectory, random_feasible_trajectory, select_horizon,
    trajectory_error,
};

fn main() -> skyharvest::Result<()> {
    let map = generate_city((600.0, 600.0), 100.0, 1.0, (5.0, 40.0), 14.0, 7)?;
    let nodes = place_nodes(&map, 4, 8)?;
    let graph = build_path_graph(
        &map,
        100.0,
        20.0,
        50.0,
        100.0,
        [0.0, 0.0, 50.0],
        [300.0, 300.0, 50.0],
    )?;
    let params = ChannelParams::urban_micro();
    let kappa = params.kappa();

    let n_l = select_horizon(100.0, 100.0, 20.0, 10.0)?;
    println!("horizon: {n_l} measurement slots");

    let plan = plan_learning_trajectory(&graph, &map, &nodes, kappa, n_l)?;
    println!("optimized error trace: {:.6}", plan.final_error.as_f64());
    for (i, wp) in plan.waypoints.iter().enumerate() {
        println!("  slot {}: ({:>6.1}, {:>6.1}, {:>5.1})", i + 1, wp[0], wp[1], wp[2]);
    }

    // Random baselines: the optimized design should beat most of them.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut beaten = 0;
    let total = 50;
    for _ in 0..total {
        let path = random_feasible_trajectory(&graph, n_l, &mut rng).unwrap();
        let wps: Vec<[f64; 3]> = path.iter().map(|&v| graph.vertices[v]).collect();
        let err = trajectory_error(&map, &nodes, &wps, kappa);
        if plan.final_error.as_f64() <= err.as_f64() {
            beaten += 1;
        }
    }
    println!("optimized plan beats {beaten}/{total} random feasible trajectories");

    // The analytic error trace predicts the Monte-Carlo parameter MSE up to
    // the shadowing variance weighting.
    let mse = monte_carlo_mse(&map, &params, &nodes, &plan.waypoints, 500, &mut rng);
    println!("monte-carlo parameter MSE over 500 flights: {mse:.6}");
    Ok(())
}
