//! Two cameras, a handful of points, one planted outlier.
//!
//! ```bash
//! cargo run -p splatinit --example epipolar_triangulation
//! ```

use nalgebra::{Matrix3, Vector2, Vector3};
use splatinit::epipolar::{
    build_point_cloud, epipolar_residuals, fundamental_matrix, CameraIntrinsics, CameraPose, CameraView,
    Correspondence, GeometryError, DEFAULT_SAMPSON_THRESHOLD,
};

fn looking_at(id: &str, center: Vector3<f64>, target: Vector3<f64>) -> Result<CameraView, GeometryError> {
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let pose = CameraPose::new(rotation, -(rotation * center))?;
    CameraView::new(id, CameraIntrinsics::new(700.0, 700.0, 320.0, 240.0)?, pose, 640, 480)
}

fn main() -> Result<(), GeometryError> {
    let target = Vector3::new(0.0, 0.0, 5.0);
    let left = looking_at("left", Vector3::new(-0.5, 0.0, 0.0), target)?;
    let right = looking_at("right", Vector3::new(0.5, 0.05, 0.0), target)?;
    let f = fundamental_matrix(&left, &right)?;
    println!("F =\n{f:.3e}");

    let points = [
        Vector3::new(0.2, -0.1, 5.0),
        Vector3::new(-0.4, 0.3, 4.5),
        Vector3::new(0.6, 0.5, 5.8),
        Vector3::new(-0.1, -0.6, 5.2),
    ];
    let mut matches: Vec<Correspondence> = points
        .iter()
        .map(|x| Correspondence::new("left", left.project(x), "right", right.project(x)))
        .collect();
    // Push the last match 10 px off its epipolar line (mostly vertical here).
    matches[3].x2 += Vector2::new(0.0, 10.0);

    for c in &matches {
        let r = epipolar_residuals(&f, c);
        println!("algebraic {:+.3e}  sampson {:.3e}", r.algebraic, r.sampson);
    }

    let views = [left, right];
    let cloud = build_point_cloud(&matches, &views, DEFAULT_SAMPSON_THRESHOLD)?;
    for (p, truth) in cloud.iter().zip(&points) {
        println!(
            "{} at ({:.4}, {:.4}, {:.4}) rmse {:.2e} px, error {:.2e}",
            if p.inlier { "inlier " } else { "outlier" },
            p.position.x,
            p.position.y,
            p.position.z,
            p.reprojection_rmse,
            (p.position - truth).norm()
        );
    }
    Ok(())
}
