//! Compress a city map into per-node logistic LoS-probability models and
//! inspect the expected-gain field they induce.
//!
//! Run with: cargo run --release --example map_compression

use skyharvest::channel::ChannelParams;
use skyharvest::citymap::{generate_city, los_check, place_nodes, Segment};
use skyharvest::mapcompress::{compress, CompressConfig};

fn main() -> skyharvest::Result<()> {
    let map = generate_city((600.0, 600.0), 100.0, 1.0, (5.0, 40.0), 14.0, 11)?;
    let nodes = place_nodes(&map, 3, 12)?;
    let params = ChannelParams::urban_micro();

    let cfg = CompressConfig { samples_per_node: 1500, ..CompressConfig::default() };
    let cmap = compress(&map, &nodes, &params, &cfg)?;
    for m in &cmap.models {
        println!(
            "node {}: p(theta) = 1/(1+exp(-{:.2} theta + {:.2})) ({} Newton iters)",
            m.node_id, m.a, m.b, m.diagnostics.iterations
        );
    }
    if let Some(g) = &cmap.global {
        println!("pooled:  a = {:.2}, b = {:.2}", g.a, g.b);
    }

    // Compare the model probability against the ray-cast truth on a fresh
    // grid of UAV positions.
    let node = &nodes[0];
    let (mut hits, mut total) = (0usize, 0usize);
    for ix in 0..20 {
        for iy in 0..20 {
            for z in [55.0, 75.0, 95.0] {
                let uav = [30.0 * ix as f64, 30.0 * iy as f64, z];
                let truth = los_check(&map, uav, node.position) == Segment::Los;
                let predicted = cmap.p_los(node.id, uav) > 0.5;
                total += 1;
                if truth == predicted {
                    hits += 1;
                }
            }
        }
    }
    println!(
        "node {}: {hits}/{total} ({:.1}%) grid positions classified correctly",
        node.id,
        100.0 * hits as f64 / total as f64
    );

    // Expected gain falls off with horizontal distance but recovers with
    // altitude as the LoS probability rises.
    println!("expected gain from node {} (dB):", node.id);
    for z in [55.0, 75.0, 95.0] {
        let row: Vec<String> = (0..6)
            .map(|i| {
                let uav = [node.position[0] + 60.0 * i as f64, node.position[1], z];
                format!("{:>7.1}", 10.0 * cmap.expected_gain(node.id, uav).log10())
            })
            .collect();
        println!("  z={z:>5.1}: {}", row.join(" "));
    }
    Ok(())
}
