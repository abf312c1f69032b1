//! Voxelizes a noisy helix into anchors, links each anchor to its nearest
//! neighbors and prints the neighborhood of the first anchor.
//!
//! ```bash
//! cargo run -p splatinit --example anchor_graph
//! ```

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatinit::graph::{voxelize_positions, AnchorGraph, GraphError, VoxelConfig, DEFAULT_FREQUENCIES, DEFAULT_K};

fn main() -> Result<(), GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Vector3<f64>> = (0..800)
        .map(|n| {
            let t = n as f64 * 0.02;
            Vector3::new(t.cos(), t.sin(), 0.15 * t) + Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03))
        })
        .collect();

    let voxel = VoxelConfig::new(0.1)?;
    let anchors = voxelize_positions(&points, &voxel, 8, 42)?;
    println!("{} points -> {} anchors", points.len(), anchors.len());

    let graph = AnchorGraph::build(anchors, DEFAULT_K)?;
    let first = &graph.anchors[0];
    println!("anchor 0 at {:.3?}", first.position.as_slice());
    for (col, &j) in graph.neighbor_index.row(0).iter().enumerate() {
        let d = (graph.anchors[j].position - first.position).norm();
        println!("  neighbor {j:4}  dist {d:.3}  angle {:.1} deg", graph.angles[(0, col)].to_degrees());
    }

    let agg = graph.aggregated_features()?;
    let enc = graph.encoded_angles(DEFAULT_FREQUENCIES)?;
    println!("aggregated features {:?}, angle encoding {:?}", agg.shape(), enc.shape());
    Ok(())
}
