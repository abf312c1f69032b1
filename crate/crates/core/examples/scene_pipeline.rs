//! Runs every stage on the bundled grid scene and writes the artifacts to a
//! directory (default `target/scene_pipeline`).
//!
//! ```bash
//! cargo run -p splatinit --release --example scene_pipeline [OUT_DIR]
//! ```

use std::path::{Path, PathBuf};

use splatinit::cli::{cmd_pipeline, parse_scene, CliError, RunConfig};

fn main() -> Result<(), CliError> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/grid_scene");
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/scene_pipeline"));

    let bundle = parse_scene(&fixture.join("cameras.txt"), &fixture.join("matches.txt"))?;
    let config = RunConfig::load(&fixture.join("config.json"))?;
    println!(
        "{} views, {} matches, seed {}",
        bundle.views.len(),
        bundle.correspondences.len(),
        config.seed
    );

    let summary = cmd_pipeline(&bundle, &config, true, &out)?;
    let t = &summary.triangulate;
    println!("triangulated {} inliers, {} outliers", t.inliers, t.outliers);
    let g = &summary.graph;
    println!(
        "{} anchors at voxel size {}, mean neighbor distance {:.3}",
        g.anchor_count, g.voxel_size, g.mean_neighbor_distance
    );
    let r = &summary.refine;
    println!("refined {} x {} features ({} bytes)", r.anchor_count, r.model_dim, r.dump_bytes);
    if let Some(check) = &r.gradient_check {
        println!("gradient check: max relative error {:.2e}", check.max_relative_error);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
