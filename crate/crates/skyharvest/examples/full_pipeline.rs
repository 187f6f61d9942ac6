//! End-to-end scenario: generate a city, fly the learning trajectory,
//! estimate channel parameters, compress the map, plan the communication
//! phase, and evaluate against ground truth — then compare planner variants.
//!
//! Run with: cargo run --release --example full_pipeline

use skyharvest::scenario::{
    run_scenario, ModelKind, ParamSource, ScenarioConfig, VariantSpec,
};

fn main() -> skyharvest::Result<()> {
    let cfg = ScenarioConfig {
        seed: 1,
        num_nodes: 3,
        t_c: 60.0,
        trials: 200,
        ..ScenarioConfig::default()
    };

    let variants = [
        VariantSpec { model: ModelKind::PerNode, params: ParamSource::Learned },
        VariantSpec { model: ModelKind::Global, params: ParamSource::Learned },
        VariantSpec { model: ModelKind::Deterministic, params: ParamSource::Learned },
        VariantSpec { model: ModelKind::PerNode, params: ParamSource::True },
    ];

    let mut first = true;
    for v in variants {
        let art = run_scenario(&cfg, v)?;
        if first {
            first = false;
            println!(
                "city: {} buildings; learning flight: {} slots, error trace {:.4}",
                art.map.buildings.len(),
                art.learning_plan.n_l,
                art.learning_plan.final_error.as_f64()
            );
            if let Some(p) = &art.learned_params {
                println!(
                    "learned params: LoS ({:.3}, {:.2} dB), NLoS ({:.3}, {:.2} dB)",
                    p.los.alpha, p.los.beta_db, p.nlos.alpha, p.nlos.beta_db
                );
            }
            println!();
        }
        println!(
            "{:<24} model mu {:.4}, measured {:.4} +/- {:.4} bits/s/Hz ({} BCD iters)",
            v.label(),
            art.comm_plan.mu_model,
            art.eval.mean_min_throughput,
            art.eval.std_min_throughput,
            art.comm_plan.trace.len()
        );
    }
    Ok(())
}
