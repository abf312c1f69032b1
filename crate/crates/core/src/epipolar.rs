//! Two-view epipolar geometry and multi-view triangulation.
//!
//! Cameras use the world-to-camera convention `x_cam = R * x_world + t`.
//! Pixel coordinates are lifted to homogeneous form by appending `1`.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector2, Vector3};
use thiserror::Error;

/// Relative translations shorter than this make a camera pair degenerate.
pub const DEGENERATE_BASELINE: f64 = 1e-12;

/// Default Sampson threshold used to classify correspondences.
pub const DEFAULT_SAMPSON_THRESHOLD: f64 = 2.0;

const ORTHONORMAL_TOLERANCE: f64 = 1e-9;
const AT_INFINITY_TOLERANCE: f64 = 1e-12;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate camera pair: relative translation is zero")]
    DegeneratePair,
    #[error("triangulated point lies at infinity")]
    AtInfinity,
    #[error("degenerate triangulation geometry: linear system is rank deficient")]
    DegenerateGeometry,
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
    #[error("views and pixels differ in length ({views} vs {pixels})")]
    LengthMismatch { views: usize, pixels: usize },
    #[error("initial point has no positive depth in any view")]
    NoPositiveDepth,
    #[error("non-finite reprojection objective; last finite iterate {last:?}")]
    NumericalFailure { last: Vector3<f64> },
    #[error("unknown view id {0:?}")]
    UnknownView(String),
    #[error("pixel ({u}, {v}) lies outside view {view:?}")]
    PixelOutOfBounds { view: String, u: f64, v: f64 },
    #[error("correspondence {index}: {source}")]
    AtCorrespondence {
        index: usize,
        #[source]
        source: Box<GeometryError>,
    },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::with_skew(fx, fy, cx, cy, 0.0)
    }

    pub fn with_skew(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy, skew };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.skew];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Upper-triangular calibration matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>, GeometryError> {
        self.matrix()
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidCamera("singular intrinsic matrix".into()))
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite pose".into()));
        }
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if gram.amax() > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::InvalidCamera("rotation is not orthonormal".into()));
        }
        if (self.rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::InvalidCamera("rotation determinant is not 1".into()));
        }
        Ok(())
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub width: u32,
    pub height: u32,
}

impl CameraView {
    pub fn new(
        id: impl Into<String>,
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let view = Self {
            id: id.into(),
            intrinsics,
            pose,
            width,
            height,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "view {:?} has an empty image",
                self.id
            )));
        }
        Ok(())
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.pose.rotation);
        rt.set_column(3, &self.pose.translation);
        self.intrinsics.matrix() * rt
    }

    /// Camera-frame depth of a world point.
    pub fn depth(&self, world: &Vector3<f64>) -> f64 {
        self.pose.transform(world).z
    }

    /// Perspective projection to pixels. Points behind the camera still
    /// project; check [`CameraView::depth`] for cheirality.
    pub fn project(&self, world: &Vector3<f64>) -> Vector2<f64> {
        let h = self.intrinsics.matrix() * self.pose.transform(world);
        Vector2::new(h.x / h.z, h.y / h.z)
    }

    pub fn contains_pixel(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width as f64 && px.y <= self.height as f64
    }
}

/// A pixel match between two views.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub view_a: String,
    pub view_b: String,
    pub x1: Vector2<f64>,
    pub x2: Vector2<f64>,
}

impl Correspondence {
    pub fn new(
        view_a: impl Into<String>,
        x1: Vector2<f64>,
        view_b: impl Into<String>,
        x2: Vector2<f64>,
    ) -> Self {
        Self {
            view_a: view_a.into(),
            view_b: view_b.into(),
            x1,
            x2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulatedPoint {
    pub position: Vector3<f64>,
    pub reprojection_rmse: f64,
    pub sampson_residual: f64,
    pub inlier: bool,
    pub source: Correspondence,
}

pub fn skew_symmetric(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Pose of `second` relative to `first`: `(R₂R₁ᵀ, t₂ − R₂R₁ᵀ t₁)`.
pub fn relative_pose(first: &CameraPose, second: &CameraPose) -> (Matrix3<f64>, Vector3<f64>) {
    let rotation = second.rotation * first.rotation.transpose();
    let translation = second.translation - rotation * first.translation;
    (rotation, translation)
}

/// Fundamental matrix mapping pixels of `view1` to epipolar lines in `view2`,
/// so that `x₂ᵀ F x₁ = 0` for matching pixels.
pub fn fundamental_matrix(view1: &CameraView, view2: &CameraView) -> Result<Matrix3<f64>, GeometryError> {
    let k1_inv = view1.intrinsics.inverse()?;
    let k2_inv = view2.intrinsics.inverse()?;
    let (rotation, translation) = relative_pose(&view1.pose, &view2.pose);
    if translation.norm() < DEGENERATE_BASELINE {
        return Err(GeometryError::DegeneratePair);
    }
    let essential = skew_symmetric(&translation) * rotation;
    Ok(k2_inv.transpose() * essential * k1_inv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarResidual {
    /// `x₂ᵀ F x₁`.
    pub algebraic: f64,
    /// First-order geometric error; `+inf` when `degenerate`.
    pub sampson: f64,
    pub degenerate: bool,
}

pub fn epipolar_residuals(f: &Matrix3<f64>, c: &Correspondence) -> EpipolarResidual {
    epipolar_residuals_px(f, &c.x1, &c.x2)
}

pub fn epipolar_residuals_px(f: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> EpipolarResidual {
    let h1 = x1.push(1.0);
    let h2 = x2.push(1.0);
    let fx1 = f * h1;
    let ftx2 = f.transpose() * h2;
    let algebraic = h2.dot(&fx1);
    let denom = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if denom == 0.0 {
        return EpipolarResidual {
            algebraic,
            sampson: f64::INFINITY,
            degenerate: true,
        };
    }
    EpipolarResidual {
        algebraic,
        sampson: algebraic * algebraic / denom,
        degenerate: false,
    }
}

fn check_lengths(views: &[&CameraView], pixels: &[Vector2<f64>]) -> Result<(), GeometryError> {
    if views.len() != pixels.len() {
        return Err(GeometryError::LengthMismatch {
            views: views.len(),
            pixels: pixels.len(),
        });
    }
    if views.len() < 2 {
        return Err(GeometryError::TooFewViews(views.len()));
    }
    Ok(())
}

/// Linear (DLT) triangulation from two or more views.
///
/// Each view contributes the rows `u·P³ − P¹` and `v·P³ − P²`; rows are
/// normalized to unit length before the SVD so that pixel scale does not
/// dominate the conditioning.
pub fn triangulate_dlt(views: &[&CameraView], pixels: &[Vector2<f64>]) -> Result<Vector3<f64>, GeometryError> {
    check_lengths(views, pixels)?;
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (n, (view, px)) in views.iter().zip(pixels).enumerate() {
        let p = view.projection_matrix();
        let p3 = p.row(2);
        for (r, (coord, row)) in [(px.x, p.row(0)), (px.y, p.row(1))].into_iter().enumerate() {
            let eq = p3 * coord - row;
            let norm = eq.norm();
            let eq = if norm > 0.0 { eq / norm } else { eq };
            a.row_mut(2 * n + r).copy_from(&eq);
        }
    }
    // Pad to a square system so that the SVD yields a full 4x4 right basis.
    if a.nrows() < 4 {
        a = a.resize_vertically(4, 0.0);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateGeometry)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let third = svd.singular_values[order[2]];
    if largest.is_nan() || largest <= 0.0 || third / largest < RANK_TOLERANCE {
        return Err(GeometryError::DegenerateGeometry);
    }
    let null = v_t.row(order[3]);
    let w = null[3];
    if w.abs() < AT_INFINITY_TOLERANCE || !w.is_finite() {
        return Err(GeometryError::AtInfinity);
    }
    Ok(Vector3::new(null[0] / w, null[1] / w, null[2] / w))
}

/// Stopping rules for [`refine_reprojection`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub step_tolerance: f64,
    pub decrease_tolerance: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            max_halvings: 10,
            step_tolerance: 1e-10,
            decrease_tolerance: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPoint {
    pub position: Vector3<f64>,
    pub reprojection_rmse: f64,
    /// Objective at the initial point followed by each accepted iterate.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl RefinedPoint {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("history is never empty")
    }
}

/// Sum of squared pixel reprojection errors over all views.
pub fn reprojection_objective(x: &Vector3<f64>, views: &[&CameraView], pixels: &[Vector2<f64>]) -> f64 {
    views
        .iter()
        .zip(pixels)
        .map(|(view, px)| (view.project(x) - px).norm_squared())
        .sum()
}

/// Residual `π(P X) − x` and its 2x3 Jacobian with respect to `X`.
fn residual_and_jacobian(
    p: &Matrix3x4<f64>,
    x: &Vector3<f64>,
    px: &Vector2<f64>,
) -> (Vector2<f64>, nalgebra::Matrix2x3<f64>) {
    let h = p.fixed_view::<3, 3>(0, 0) * x + p.column(3);
    let inv = 1.0 / h.z;
    let residual = Vector2::new(h.x * inv - px.x, h.y * inv - px.y);
    let m = p.fixed_view::<3, 3>(0, 0);
    let row_u = (m.row(0) - m.row(2) * (h.x * inv)) * inv;
    let row_v = (m.row(1) - m.row(2) * (h.y * inv)) * inv;
    let jac = nalgebra::Matrix2x3::from_rows(&[row_u, row_v]);
    (residual, jac)
}

/// Analytic Jacobian of the stacked reprojection residual, one 2x3 block per view.
pub fn reprojection_jacobian(x: &Vector3<f64>, views: &[&CameraView], pixels: &[Vector2<f64>]) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(2 * views.len(), 3);
    for (n, (view, px)) in views.iter().zip(pixels).enumerate() {
        let (_, block) = residual_and_jacobian(&view.projection_matrix(), x, px);
        jac.view_mut((2 * n, 0), (2, 3)).copy_from(&block);
    }
    jac
}

/// Gauss-Newton refinement of a triangulated point under geometric
/// reprojection error, with step-halving line search.
pub fn refine_reprojection(
    x0: &Vector3<f64>,
    views: &[&CameraView],
    pixels: &[Vector2<f64>],
) -> Result<RefinedPoint, GeometryError> {
    refine_reprojection_with(x0, views, pixels, &RefineOptions::default())
}

pub fn refine_reprojection_with(
    x0: &Vector3<f64>,
    views: &[&CameraView],
    pixels: &[Vector2<f64>],
    options: &RefineOptions,
) -> Result<RefinedPoint, GeometryError> {
    check_lengths(views, pixels)?;
    if !views.iter().any(|v| v.depth(x0) > 0.0) {
        return Err(GeometryError::NoPositiveDepth);
    }
    let projections: Vec<Matrix3x4<f64>> = views.iter().map(|v| v.projection_matrix()).collect();
    let objective = |x: &Vector3<f64>| reprojection_objective(x, views, pixels);

    let mut x = *x0;
    let mut current = objective(&x);
    if !current.is_finite() {
        return Err(GeometryError::NumericalFailure { last: x });
    }
    let mut history = vec![current];
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (p, px) in projections.iter().zip(pixels) {
            let (r, j) = residual_and_jacobian(p, &x, px);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else {
            break;
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NumericalFailure { last: x });
        }

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let trial = x + step * scale;
            let value = objective(&trial);
            if value.is_finite() && value <= current {
                accepted = Some((trial, value, scale));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, value, scale)) = accepted else {
            break;
        };
        let decrease = current - value;
        x = trial;
        current = value;
        history.push(current);
        if (step * scale).norm() < options.step_tolerance || decrease < options.decrease_tolerance {
            break;
        }
    }

    Ok(RefinedPoint {
        position: x,
        reprojection_rmse: (current / views.len() as f64).sqrt(),
        objective_history: history,
        iterations,
    })
}

/// Lookup of views by id.
#[derive(Debug, Clone, Default)]
pub struct ViewIndex<'a> {
    by_id: HashMap<&'a str, &'a CameraView>,
}

impl<'a> ViewIndex<'a> {
    pub fn new(views: &'a [CameraView]) -> Self {
        Self {
            by_id: views.iter().map(|v| (v.id.as_str(), v)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&'a CameraView, GeometryError> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| GeometryError::UnknownView(id.to_string()))
    }
}

/// Triangulates one correspondence and classifies it.
pub fn triangulate_correspondence(
    c: &Correspondence,
    views: &ViewIndex<'_>,
    sampson_threshold: f64,
) -> Result<TriangulatedPoint, GeometryError> {
    let va = views.get(&c.view_a)?;
    let vb = views.get(&c.view_b)?;
    for (view, px) in [(va, &c.x1), (vb, &c.x2)] {
        if !view.contains_pixel(px) {
            return Err(GeometryError::PixelOutOfBounds {
                view: view.id.clone(),
                u: px.x,
                v: px.y,
            });
        }
    }
    let f = fundamental_matrix(va, vb)?;
    let residual = epipolar_residuals(&f, c);
    let pair = [va, vb];
    let pixels = [c.x1, c.x2];
    let x0 = triangulate_dlt(&pair, &pixels)?;
    let refined = refine_reprojection(&x0, &pair, &pixels)?;
    let in_front = pair.iter().all(|v| v.depth(&refined.position) > 0.0);
    let inlier = !residual.degenerate && residual.sampson <= sampson_threshold && in_front;
    Ok(TriangulatedPoint {
        position: refined.position,
        reprojection_rmse: refined.reprojection_rmse,
        sampson_residual: residual.sampson,
        inlier,
        source: c.clone(),
    })
}

/// Runs the full per-correspondence pipeline. Outliers stay in the output
/// with `inlier == false`; output order follows input order.
pub fn build_point_cloud(
    correspondences: &[Correspondence],
    views: &[CameraView],
    sampson_threshold: f64,
) -> Result<Vec<TriangulatedPoint>, GeometryError> {
    let index = ViewIndex::new(views);
    correspondences
        .iter()
        .enumerate()
        .map(|(i, c)| {
            triangulate_correspondence(c, &index, sampson_threshold).map_err(|e| GeometryError::AtCorrespondence {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}
