//! Voxel anchors and their k-nearest-neighbor graph.
//!
//! Anchors sit at the centers of occupied voxels. Each anchor's neighbor
//! row is sorted by distance (ties by index) and the angle of every edge is
//! measured against the edge to the nearest neighbor.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::epipolar::TriangulatedPoint;
use crate::tensor::Tensor3;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_FREQUENCIES: usize = 4;
pub const FEATURE_INIT_BOUND: f64 = 0.1;
/// Initial features are integer multiples of this quantum. Any two values on
/// the grid within the bound differ by an exactly representable amount, so
/// `(f[n] - f[i]) + f[i]` reproduces `f[n]` bit for bit.
pub const FEATURE_QUANTUM: f64 = 1.0 / (1u64 << 55) as f64;

fn draw_feature(rng: &mut ChaCha8Rng) -> f64 {
    let steps = (FEATURE_INIT_BOUND / FEATURE_QUANTUM) as i64;
    rng.random_range(-steps..=steps) as f64 * FEATURE_QUANTUM
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("no inlier points to voxelize")]
    EmptyCloud,
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("feature dimension must be at least 1")]
    InvalidFeatureDim,
    #[error("need more than k={k} anchors, got {anchors}")]
    InsufficientAnchors { anchors: usize, k: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("encoding needs at least one frequency")]
    InvalidFrequencies,
    #[error("neighbor {neighbor} coincides with anchor {anchor}")]
    DegenerateEdge { anchor: usize, neighbor: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelConfig {
    pub voxel_size: f64,
    pub origin: Vector3<f64>,
}

impl VoxelConfig {
    pub fn new(voxel_size: f64) -> Result<Self, GraphError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(GraphError::InvalidVoxelSize(voxel_size));
        }
        Ok(Self {
            voxel_size,
            origin: Vector3::zeros(),
        })
    }

    pub fn with_origin(mut self, origin: Vector3<f64>) -> Self {
        self.origin = origin;
        self
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        let q = (p - self.origin) / self.voxel_size;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    pub fn center_of(&self, key: [i64; 3]) -> Vector3<f64> {
        let half = |k: i64| (k as f64 + 0.5) * self.voxel_size;
        self.origin + Vector3::new(half(key[0]), half(key[1]), half(key[2]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub position: Vector3<f64>,
    pub feature: Vec<f64>,
    pub scale: Vector3<f64>,
}

/// Number of points falling in each occupied voxel, keyed and ordered by
/// integer voxel coordinates.
pub fn voxel_occupancy(points: &[Vector3<f64>], config: &VoxelConfig) -> BTreeMap<[i64; 3], usize> {
    let mut counts = BTreeMap::new();
    for p in points {
        *counts.entry(config.voxel_of(p)).or_insert(0) += 1;
    }
    counts
}

/// One anchor per occupied voxel, built from the inlier points only.
pub fn voxelize(
    points: &[TriangulatedPoint],
    config: &VoxelConfig,
    feature_dim: usize,
    seed: u64,
) -> Result<Vec<Anchor>, GraphError> {
    let positions: Vec<Vector3<f64>> = points.iter().filter(|p| p.inlier).map(|p| p.position).collect();
    voxelize_positions(&positions, config, feature_dim, seed)
}

pub fn voxelize_positions(
    positions: &[Vector3<f64>],
    config: &VoxelConfig,
    feature_dim: usize,
    seed: u64,
) -> Result<Vec<Anchor>, GraphError> {
    if !(config.voxel_size > 0.0 && config.voxel_size.is_finite()) {
        return Err(GraphError::InvalidVoxelSize(config.voxel_size));
    }
    if feature_dim == 0 {
        return Err(GraphError::InvalidFeatureDim);
    }
    if positions.is_empty() {
        return Err(GraphError::EmptyCloud);
    }
    let occupied = voxel_occupancy(positions, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = config.voxel_size / 2.0;
    Ok(occupied
        .keys()
        .map(|&key| Anchor {
            position: config.center_of(key),
            feature: (0..feature_dim).map(|_| draw_feature(&mut rng)).collect(),
            scale: Vector3::repeat(half),
        })
        .collect())
}

/// Anchor features stacked into an `M x F` matrix.
pub fn feature_matrix(anchors: &[Anchor]) -> Result<DMatrix<f64>, GraphError> {
    let dim = anchors.first().map_or(0, |a| a.feature.len());
    if anchors.iter().any(|a| a.feature.len() != dim) {
        return Err(GraphError::ShapeMismatch("anchors carry features of differing length".into()));
    }
    Ok(DMatrix::from_fn(anchors.len(), dim, |i, c| anchors[i].feature[c]))
}

/// `M x k` table of neighbor indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self, GraphError> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(GraphError::InvalidK);
        }
        if rows.iter().any(|r| r.len() != k) {
            return Err(GraphError::ShapeMismatch("ragged neighbor rows".into()));
        }
        Ok(Self {
            k,
            indices: rows.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(self.k)
    }

    fn validate_for(&self, m: usize) -> Result<(), GraphError> {
        if self.len() != m {
            return Err(GraphError::ShapeMismatch(format!("index has {} rows for {m} anchors", self.len())));
        }
        if let Some(bad) = self.indices.iter().find(|&&j| j >= m) {
            return Err(GraphError::ShapeMismatch(format!("neighbor index {bad} out of range for {m} anchors")));
        }
        Ok(())
    }
}

/// Exact k-nearest neighbors by brute force, self excluded.
pub fn knn_indices(anchors: &[Anchor], k: usize) -> Result<NeighborIndex, GraphError> {
    let positions: Vec<Vector3<f64>> = anchors.iter().map(|a| a.position).collect();
    knn_indices_of(&positions, k)
}

pub fn knn_indices_of(positions: &[Vector3<f64>], k: usize) -> Result<NeighborIndex, GraphError> {
    if k == 0 {
        return Err(GraphError::InvalidK);
    }
    let m = positions.len();
    if m <= k {
        return Err(GraphError::InsufficientAnchors { anchors: m, k });
    }
    let mut indices = Vec::with_capacity(m * k);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(m - 1);
    for (i, center) in positions.iter().enumerate() {
        candidates.clear();
        candidates.extend(
            positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, p)| ((p - center).norm_squared(), j)),
        );
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, by_distance);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(by_distance);
        indices.extend(candidates.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { k, indices })
}

/// Angle of each edge `i -> I[i][j]` against the reference edge
/// `i -> I[i][0]`, in `[0, π]`. Returns an `M x k` matrix.
pub fn neighbor_angles(anchors: &[Anchor], index: &NeighborIndex) -> Result<DMatrix<f64>, GraphError> {
    index.validate_for(anchors.len())?;
    let mut angles = DMatrix::zeros(anchors.len(), index.k());
    for (i, row) in index.rows().enumerate() {
        let center = anchors[i].position;
        let edge = |j: usize| -> Result<Vector3<f64>, GraphError> {
            let e = anchors[j].position - center;
            if e.norm_squared() == 0.0 {
                return Err(GraphError::DegenerateEdge { anchor: i, neighbor: j });
            }
            Ok(e)
        };
        let reference = edge(row[0])?;
        let ref_norm = reference.norm();
        for (col, &j) in row.iter().enumerate().skip(1) {
            let e = edge(j)?;
            let cos = (e.dot(&reference) / (e.norm() * ref_norm)).clamp(-1.0, 1.0);
            angles[(i, col)] = cos.acos();
        }
    }
    Ok(angles)
}

/// `f_agg[i][j] = concat(f[i], f[I[i][j]] - f[i])`, shape `M x k x 2F`.
pub fn aggregate_features(features: &DMatrix<f64>, index: &NeighborIndex) -> Result<Tensor3, GraphError> {
    let (m, f) = features.shape();
    index.validate_for(m)?;
    let k = index.k();
    let mut out = Tensor3::zeros([m, k, 2 * f]);
    for (i, row) in index.rows().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            let lane = out.lane_mut(i, j);
            for c in 0..f {
                let own = features[(i, c)];
                lane[c] = own;
                lane[f + c] = features[(n, c)] - own;
            }
        }
    }
    Ok(out)
}

/// Sinusoidal encoding `[sin(2ˡπθ), cos(2ˡπθ)]` for `l = 0..frequencies`,
/// shape `M x k x 2L`.
pub fn encode_angles(angles: &DMatrix<f64>, frequencies: usize) -> Result<Tensor3, GraphError> {
    if frequencies == 0 {
        return Err(GraphError::InvalidFrequencies);
    }
    let (m, k) = angles.shape();
    let mut out = Tensor3::zeros([m, k, 2 * frequencies]);
    for i in 0..m {
        for j in 0..k {
            let theta = angles[(i, j)];
            let lane = out.lane_mut(i, j);
            for l in 0..frequencies {
                let arg = f64::from(1u32 << l) * PI * theta;
                lane[2 * l] = arg.sin();
                lane[2 * l + 1] = arg.cos();
            }
        }
    }
    Ok(out)
}

/// Anchors together with their neighbor structure.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGraph {
    pub anchors: Vec<Anchor>,
    pub neighbor_index: NeighborIndex,
    pub angles: DMatrix<f64>,
}

impl AnchorGraph {
    pub fn build(anchors: Vec<Anchor>, k: usize) -> Result<Self, GraphError> {
        let neighbor_index = knn_indices(&anchors, k)?;
        let angles = neighbor_angles(&anchors, &neighbor_index)?;
        Ok(Self {
            anchors,
            neighbor_index,
            angles,
        })
    }

    pub fn k(&self) -> usize {
        self.neighbor_index.k()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn aggregated_features(&self) -> Result<Tensor3, GraphError> {
        aggregate_features(&feature_matrix(&self.anchors)?, &self.neighbor_index)
    }

    pub fn encoded_angles(&self, frequencies: usize) -> Result<Tensor3, GraphError> {
        encode_angles(&self.angles, frequencies)
    }
}
