//! Runs the angle-biased attention refiner on a random anchor cloud, then
//! checks its analytic gradients against finite differences.
//!
//! ```bash
//! cargo run -p splatinit --release --example attention_refine
//! ```

use std::error::Error;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatinit::attention::{attention_weights, gradient_check};
use splatinit::graph::{voxelize_positions, AnchorGraph, VoxelConfig};
use splatinit::{attention_backward, attention_forward, AttentionConfig, AttentionParams};

fn main() -> Result<(), Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<Vector3<f64>> = (0..60).map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..2.0))).collect();
    let anchors = voxelize_positions(&points, &VoxelConfig::new(0.25)?, 4, 42)?;
    let graph = AnchorGraph::build(anchors, 6)?;
    let agg = graph.aggregated_features()?;
    let enc = graph.encoded_angles(2)?;

    let config = AttentionConfig {
        heads: 2,
        model_dim: 8,
        input_dim: agg.shape()[2],
        encoding_dim: enc.shape()[2],
        seed: 42,
    };
    let mut params = AttentionParams::init(&config)?;
    // A trained model would have learned these; random values make the
    // angular bias visible.
    params.w_theta.apply(|v| *v = rng.random_range(-1.0..1.0));

    let refined = attention_forward(&agg, &enc, &params)?;
    println!("refined features: {} x {}", refined.nrows(), refined.ncols());
    println!("anchor 0: {:.4}", refined.row(0));

    for (h, w) in attention_weights(0, &agg, &enc, &params)?.iter().enumerate() {
        println!("head {h}, query 0 attends: {:.3}", w.row(0));
    }

    let upstream = DMatrix::from_fn(refined.nrows(), refined.ncols(), |_, _| rng.random_range(-1.0..1.0));
    let grads = attention_backward(&agg, &enc, &params, &upstream)?;
    println!("|dL/dW_o| = {:.4}", grads.params.w_o.norm());

    let report = gradient_check(&agg, &enc, &params, &upstream, 1e-5)?;
    println!(
        "gradient check over {} entries: max relative error {:.2e} (worst {:?})",
        report.entries, report.max_relative_error, report.worst
    );
    Ok(())
}
