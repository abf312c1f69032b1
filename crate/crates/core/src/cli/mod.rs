//! File formats, run configuration and the command implementations behind
//! the `splatinit` binary.

mod commands;
mod output;
mod scene;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionError;
use crate::epipolar::GeometryError;
use crate::graph::GraphError;
use crate::losses::{LossError, LossWeights};

pub use commands::{
    build_anchor_graph, cmd_graph_stats, cmd_loss, cmd_pipeline, cmd_refine_features, cmd_triangulate, parse_scales,
    AngleHistogram, GradientCheckSummary, GraphStats, Occupancy, PipelineSummary, RefineSummary, TriangulateSummary,
    ANGLE_BINS, FEATURES_FILE, GRAPH_FILE, LOSS_FILE, PLY_FILE, REFINE_FILE, TRIANGULATE_FILE,
};
pub use output::{decode_feature_dump, encode_feature_dump, percentile, ply_ascii, write_atomic, Percentiles};
pub use scene::{parse_cameras, parse_matches, parse_scene, write_cameras, write_matches, SceneBundle};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Semantic(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Stable machine-readable category for the error line on stderr.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::Semantic(_) => "semantic",
            CliError::Geometry(_) => "geometry",
            CliError::Graph(_) => "graph",
            CliError::Attention(_) => "attention",
            CliError::Loss(LossError::Io(_)) => "io",
            CliError::Loss(_) => "contract",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Tunables shared by every command. Loaded from JSON with exactly these
/// keys; absent keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sampson_threshold: f64,
    /// `None` picks 4x the median nearest-neighbor spacing of inlier points.
    pub voxel_size: Option<f64>,
    pub k: usize,
    pub l_encoding: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub feature_dim: usize,
    pub lambda_ssim: f64,
    pub lambda_vol: f64,
    pub lambda_laplacian: f64,
    pub lambda_ncc: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let weights = LossWeights::default();
        Self {
            sampson_threshold: crate::epipolar::DEFAULT_SAMPSON_THRESHOLD,
            voxel_size: None,
            k: crate::graph::DEFAULT_K,
            l_encoding: crate::graph::DEFAULT_FREQUENCIES,
            heads: crate::attention::DEFAULT_HEADS,
            model_dim: crate::attention::DEFAULT_MODEL_DIM,
            feature_dim: 8,
            lambda_ssim: weights.lambda_ssim,
            lambda_vol: weights.lambda_vol,
            lambda_laplacian: weights.lambda_laplacian,
            lambda_ncc: weights.lambda_ncc,
            seed: 42,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sampson_threshold: Option<f64>,
    pub voxel_size: Option<f64>,
    pub k: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(mut self, overrides: &Overrides) -> Result<Self, CliError> {
        if let Some(v) = overrides.seed {
            self.seed = v;
        }
        if let Some(v) = overrides.sampson_threshold {
            self.sampson_threshold = v;
        }
        if let Some(v) = overrides.voxel_size {
            self.voxel_size = Some(v);
        }
        if let Some(v) = overrides.k {
            self.k = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("sampson_threshold", self.sampson_threshold)?;
        if let Some(v) = self.voxel_size {
            positive("voxel_size", v)?;
        }
        for (name, v) in [
            ("k", self.k),
            ("l_encoding", self.l_encoding),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(CliError::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        self.loss_weights()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ssim: self.lambda_ssim,
            lambda_vol: self.lambda_vol,
            lambda_laplacian: self.lambda_laplacian,
            lambda_ncc: self.lambda_ncc,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let config = RunConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), config);
        assert_eq!(RunConfig::from_json("{}").unwrap(), config);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"k": 4, "voxel": 1.0}"#).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("voxel"));
    }

    #[test]
    fn overrides_win_and_are_validated() {
        let base = RunConfig::from_json(r#"{"k": 4, "seed": 1}"#).unwrap();
        let cfg = base
            .clone()
            .apply(&Overrides {
                k: Some(6),
                voxel_size: Some(0.5),
                ..Default::default()
            })
            .unwrap();
        assert_eq!((cfg.k, cfg.voxel_size, cfg.seed), (6, Some(0.5), 1));
        assert!(base
            .apply(&Overrides {
                sampson_threshold: Some(-1.0),
                ..Default::default()
            })
            .is_err());
        assert!(RunConfig::from_json(r#"{"heads": 3}"#).is_err());
    }
}
