//! Point-cloud initialization and feature machinery for anchor-based
//! Gaussian splatting.
//!
//! - [`epipolar`]: fundamental matrices, Sampson residuals, DLT
//!   triangulation and Gauss-Newton reprojection refinement.
//! - [`graph`]: voxel anchors, exact k-NN tables, neighbor aggregation and
//!   angular encoding.
//! - [`attention`]: angle-biased multi-head attention over neighbor tokens,
//!   with analytic gradients and a finite-difference checker.
//! - [`losses`]: NCC, Laplacian pyramid, SSIM, L1 and volume losses.
//! - [`cli`]: scene file formats and the command implementations behind the
//!   `splatinit` binary.

pub mod attention;
pub mod cli;
pub mod epipolar;
pub mod graph;
pub mod losses;
pub mod tensor;

pub use attention::{attention_backward, attention_forward, AttentionConfig, AttentionParams};
pub use epipolar::{build_point_cloud, fundamental_matrix, CameraView, Correspondence, TriangulatedPoint};
pub use graph::{aggregate_features, encode_angles, knn_indices, neighbor_angles, voxelize, Anchor, AnchorGraph};
pub use losses::{total_loss, Image, LossReport, LossWeights};
pub use tensor::Tensor3;
