//! Generate a synthetic Manhattan-style city, place ground nodes, and probe
//! line-of-sight from a few UAV positions.
//!
//! Run with: cargo run --example generate_city

use skyharvest::citymap::{generate_city, los_check, place_nodes, Segment};

fn main() -> skyharvest::Result<()> {
    let map = generate_city((600.0, 600.0), 100.0, 1.0, (5.0, 40.0), 14.0, 42)?;
    println!(
        "city {}x{} m, {} buildings, tallest {:.1} m",
        map.extent.0,
        map.extent.1,
        map.buildings.len(),
        map.tallest
    );
    for b in map.buildings.iter().take(3) {
        println!(
            "  building [{:.0},{:.0}]x[{:.0},{:.0}] h={:.1}",
            b.x_min, b.x_max, b.y_min, b.y_max, b.height
        );
    }

    let nodes = place_nodes(&map, 4, 43)?;
    for node in &nodes {
        println!(
            "node {} at ({:.1}, {:.1})",
            node.id, node.position[0], node.position[1]
        );
    }

    // LoS improves with altitude: probe the same horizontal point at
    // increasing heights.
    let target = nodes[0].position;
    for z in [45.0, 60.0, 80.0, 100.0] {
        let uav = [300.0, 300.0, z];
        let seg = los_check(&map, uav, target);
        let tag = if seg == Segment::Los { "LoS" } else { "NLoS" };
        println!("uav at z={z:>5.1} -> node {}: {tag}", nodes[0].id);
    }
    Ok(())
}
