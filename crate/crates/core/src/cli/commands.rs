use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::output::{encode_feature_dump, ply_ascii, write_atomic, Percentiles};
use super::scene::SceneBundle;
use super::{CliError, RunConfig};
use crate::attention::{attention_forward, gradient_check, AttentionConfig, AttentionParams};
use crate::epipolar::{build_point_cloud, TriangulatedPoint};
use crate::graph::{knn_indices_of, voxel_occupancy, voxelize, AnchorGraph, GraphError, VoxelConfig};
use crate::losses::{total_loss, Image, LossReport};

pub const ANGLE_BINS: usize = 18;
const AUTO_VOXEL_FACTOR: f64 = 4.0;
const GRADIENT_STEP: f64 = 1e-5;

pub const PLY_FILE: &str = "points.ply";
pub const TRIANGULATE_FILE: &str = "triangulate.json";
pub const GRAPH_FILE: &str = "graph_stats.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const REFINE_FILE: &str = "refine_features.json";
pub const LOSS_FILE: &str = "loss.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulateSummary {
    pub correspondences: usize,
    pub inliers: usize,
    pub outliers: usize,
    pub sampson_threshold: f64,
    /// Over inliers.
    pub reprojection_rmse_px: Percentiles,
    /// Over all correspondences with a finite residual.
    pub sampson_residual: Percentiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleHistogram {
    pub bins: usize,
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl AngleHistogram {
    pub fn of(angles: &DMatrix<f64>) -> Self {
        let mut counts = vec![0; ANGLE_BINS];
        for &theta in angles.iter() {
            let bin = ((theta / PI) * ANGLE_BINS as f64).floor() as usize;
            counts[bin.min(ANGLE_BINS - 1)] += 1;
        }
        Self {
            bins: ANGLE_BINS,
            min: 0.0,
            max: PI,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub occupied_voxels: usize,
    pub inlier_points: usize,
    pub min_points_per_voxel: usize,
    pub max_points_per_voxel: usize,
    pub mean_points_per_voxel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub anchor_count: usize,
    pub k: usize,
    pub voxel_size: f64,
    pub mean_neighbor_distance: f64,
    pub max_neighbor_distance: f64,
    pub angle_histogram: AngleHistogram,
    pub voxel_occupancy: Occupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckSummary {
    pub max_relative_error: f64,
    pub entries: usize,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub anchor_count: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub k: usize,
    pub feature_dim: usize,
    pub l_encoding: usize,
    pub seed: u64,
    pub dump_bytes: usize,
    pub mean_abs_feature: f64,
    pub gradient_check: Option<GradientCheckSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub triangulate: TriangulateSummary,
    pub graph: GraphStats,
    pub refine: RefineSummary,
    pub loss: Option<LossReport>,
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("summaries serialize");
    bytes.push(b'\n');
    bytes
}

fn triangulate(bundle: &SceneBundle, config: &RunConfig) -> Result<Vec<TriangulatedPoint>, CliError> {
    if bundle.views.len() < 2 {
        return Err(crate::epipolar::GeometryError::TooFewViews(bundle.views.len()).into());
    }
    Ok(build_point_cloud(&bundle.correspondences, &bundle.views, config.sampson_threshold)?)
}

fn summarize(points: &[TriangulatedPoint], config: &RunConfig) -> TriangulateSummary {
    let inlier_rmse: Vec<f64> = points.iter().filter(|p| p.inlier).map(|p| p.reprojection_rmse).collect();
    let sampson: Vec<f64> = points
        .iter()
        .map(|p| p.sampson_residual)
        .filter(|s| s.is_finite())
        .collect();
    TriangulateSummary {
        correspondences: points.len(),
        inliers: inlier_rmse.len(),
        outliers: points.len() - inlier_rmse.len(),
        sampson_threshold: config.sampson_threshold,
        reprojection_rmse_px: Percentiles::of(&inlier_rmse),
        sampson_residual: Percentiles::of(&sampson),
    }
}

/// Writes `points.ply` (inliers only) and `triangulate.json`.
pub fn cmd_triangulate(bundle: &SceneBundle, config: &RunConfig, out_dir: &Path) -> Result<TriangulateSummary, CliError> {
    let points = triangulate(bundle, config)?;
    let summary = summarize(&points, config);
    write_atomic(&out_dir.join(PLY_FILE), ply_ascii(points.iter().filter(|p| p.inlier)).as_bytes())?;
    write_atomic(&out_dir.join(TRIANGULATE_FILE), &to_json(&summary))?;
    Ok(summary)
}

/// `4 x` the median nearest-neighbor spacing.
fn auto_voxel_size(positions: &[Vector3<f64>]) -> Result<f64, CliError> {
    let index = knn_indices_of(positions, 1).map_err(CliError::from)?;
    let mut spacing: Vec<f64> = index
        .rows()
        .enumerate()
        .map(|(i, row)| (positions[row[0]] - positions[i]).norm())
        .collect();
    spacing.sort_by(f64::total_cmp);
    let n = spacing.len();
    let median = if n % 2 == 1 {
        spacing[n / 2]
    } else {
        0.5 * (spacing[n / 2 - 1] + spacing[n / 2])
    };
    if median.is_nan() || median <= 0.0 {
        return Err(CliError::Semantic("cannot derive a voxel size: inlier points coincide".into()));
    }
    Ok(AUTO_VOXEL_FACTOR * median)
}

struct GraphBuild {
    points: Vec<TriangulatedPoint>,
    voxel: VoxelConfig,
    graph: AnchorGraph,
}

fn build(bundle: &SceneBundle, config: &RunConfig) -> Result<GraphBuild, CliError> {
    let points = triangulate(bundle, config)?;
    let inliers: Vec<Vector3<f64>> = points.iter().filter(|p| p.inlier).map(|p| p.position).collect();
    if inliers.is_empty() {
        return Err(GraphError::EmptyCloud.into());
    }
    let voxel_size = match config.voxel_size {
        Some(v) => v,
        None => auto_voxel_size(&inliers)?,
    };
    let voxel = VoxelConfig::new(voxel_size)?;
    let anchors = voxelize(&points, &voxel, config.feature_dim, config.seed)?;
    let graph = AnchorGraph::build(anchors, config.k)?;
    Ok(GraphBuild { points, voxel, graph })
}

/// Triangulates, voxelizes and builds the anchor graph in memory.
pub fn build_anchor_graph(bundle: &SceneBundle, config: &RunConfig) -> Result<AnchorGraph, CliError> {
    Ok(build(bundle, config)?.graph)
}

fn graph_stats(built: &GraphBuild) -> GraphStats {
    let graph = &built.graph;
    let distances: Vec<f64> = graph
        .neighbor_index
        .rows()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
        .map(|(i, j)| (graph.anchors[j].position - graph.anchors[i].position).norm())
        .collect();
    let inliers: Vec<Vector3<f64>> = built.points.iter().filter(|p| p.inlier).map(|p| p.position).collect();
    let occupancy = voxel_occupancy(&inliers, &built.voxel);
    let counts: Vec<usize> = occupancy.values().copied().collect();
    GraphStats {
        anchor_count: graph.len(),
        k: graph.k(),
        voxel_size: built.voxel.voxel_size,
        mean_neighbor_distance: distances.iter().sum::<f64>() / distances.len() as f64,
        max_neighbor_distance: distances.iter().copied().fold(0.0, f64::max),
        angle_histogram: AngleHistogram::of(&graph.angles),
        voxel_occupancy: Occupancy {
            occupied_voxels: counts.len(),
            inlier_points: inliers.len(),
            min_points_per_voxel: counts.iter().copied().min().unwrap_or(0),
            max_points_per_voxel: counts.iter().copied().max().unwrap_or(0),
            mean_points_per_voxel: inliers.len() as f64 / counts.len() as f64,
        },
    }
}

/// Writes `graph_stats.json`.
pub fn cmd_graph_stats(bundle: &SceneBundle, config: &RunConfig, out_dir: &Path) -> Result<GraphStats, CliError> {
    let stats = graph_stats(&build(bundle, config)?);
    write_atomic(&out_dir.join(GRAPH_FILE), &to_json(&stats))?;
    Ok(stats)
}

fn refine(graph: &AnchorGraph, config: &RunConfig, check_grads: bool) -> Result<(DMatrix<f64>, RefineSummary), CliError> {
    let agg = graph.aggregated_features()?;
    let enc = graph.encoded_angles(config.l_encoding)?;
    let attention = AttentionConfig {
        heads: config.heads,
        model_dim: config.model_dim,
        input_dim: 2 * config.feature_dim,
        encoding_dim: 2 * config.l_encoding,
        seed: config.seed,
    };
    let params = AttentionParams::init(&attention)?;
    let refined = attention_forward(&agg, &enc, &params)?;
    let gradient_check = if check_grads {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let upstream = DMatrix::from_fn(refined.nrows(), refined.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let report = gradient_check(&agg, &enc, &params, &upstream, GRADIENT_STEP)?;
        Some(GradientCheckSummary {
            max_relative_error: report.max_relative_error,
            entries: report.entries,
            step: GRADIENT_STEP,
        })
    } else {
        None
    };
    let summary = RefineSummary {
        anchor_count: refined.nrows(),
        model_dim: refined.ncols(),
        heads: config.heads,
        k: graph.k(),
        feature_dim: config.feature_dim,
        l_encoding: config.l_encoding,
        seed: config.seed,
        dump_bytes: 16 + 8 * refined.len(),
        mean_abs_feature: refined.iter().map(|v| v.abs()).sum::<f64>() / refined.len() as f64,
        gradient_check,
    };
    Ok((refined, summary))
}

/// Writes `features.bin` and `refine_features.json`.
pub fn cmd_refine_features(
    bundle: &SceneBundle,
    config: &RunConfig,
    check_grads: bool,
    out_dir: &Path,
) -> Result<RefineSummary, CliError> {
    let built = build(bundle, config)?;
    let (refined, summary) = refine(&built.graph, config, check_grads)?;
    write_atomic(&out_dir.join(FEATURES_FILE), &encode_feature_dump(&refined))?;
    write_atomic(&out_dir.join(REFINE_FILE), &to_json(&summary))?;
    Ok(summary)
}

/// One `sx sy sz` triple per line; `#` comments and blank lines allowed.
pub fn parse_scales(text: &str, file: &str) -> Result<Vec<Vector3<f64>>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("");
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |column: usize, message: String| CliError::Parse {
            file: file.to_string(),
            line: n + 1,
            column,
            message,
        };
        if fields.len() != 3 {
            return Err(parse_err(1, format!("expected 3 scale components, found {}", fields.len())));
        }
        let mut v = [0.0; 3];
        for (slot, field) in v.iter_mut().zip(&fields) {
            let column = content.find(field).map_or(1, |b| content[..b].chars().count() + 1);
            *slot = field
                .parse::<f64>()
                .map_err(|_| parse_err(column, format!("expected a number, found {field:?}")))?;
        }
        out.push(Vector3::from(v));
    }
    Ok(out)
}

/// Computes the loss report for an image pair and writes `loss.json` when
/// `out_dir` is given.
pub fn cmd_loss(
    image1: &Path,
    image2: &Path,
    config: &RunConfig,
    scales_path: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<LossReport, CliError> {
    let a = Image::load(image1)?;
    let b = Image::load(image2)?;
    let scales = match scales_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_scales(&text, &p.display().to_string())?
        }
        None => Vec::new(),
    };
    let report = total_loss(&a, &b, &scales, &config.loss_weights())?;
    if let Some(dir) = out_dir {
        write_atomic(&dir.join(LOSS_FILE), &to_json(&report))?;
    }
    Ok(report)
}

/// All stages in sequence. The loss stage runs when the first two views
/// both carry images, using anchor scales for the volume term.
pub fn cmd_pipeline(
    bundle: &SceneBundle,
    config: &RunConfig,
    check_grads: bool,
    out_dir: &Path,
) -> Result<PipelineSummary, CliError> {
    let built = build(bundle, config)?;
    let triangulate = summarize(&built.points, config);
    write_atomic(&out_dir.join(PLY_FILE), ply_ascii(built.points.iter().filter(|p| p.inlier)).as_bytes())?;
    write_atomic(&out_dir.join(TRIANGULATE_FILE), &to_json(&triangulate))?;

    let graph = graph_stats(&built);
    write_atomic(&out_dir.join(GRAPH_FILE), &to_json(&graph))?;

    let (refined, refine_summary) = refine(&built.graph, config, check_grads)?;
    write_atomic(&out_dir.join(FEATURES_FILE), &encode_feature_dump(&refined))?;
    write_atomic(&out_dir.join(REFINE_FILE), &to_json(&refine_summary))?;

    let image_pair = bundle
        .views
        .get(..2)
        .and_then(|v| Some((bundle.images.get(&v[0].id)?, bundle.images.get(&v[1].id)?)));
    let loss = match image_pair {
        Some((p1, p2)) => {
            let scales: Vec<Vector3<f64>> = built.graph.anchors.iter().map(|a| a.scale).collect();
            let report = total_loss(&Image::load(p1)?, &Image::load(p2)?, &scales, &config.loss_weights())?;
            write_atomic(&out_dir.join(LOSS_FILE), &to_json(&report))?;
            Some(report)
        }
        None => None,
    };
    Ok(PipelineSummary {
        triangulate,
        graph,
        refine: refine_summary,
        loss,
    })
}
