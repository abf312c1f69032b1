mod common;

use common::*;
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use splatinit::epipolar::{
    build_point_cloud, epipolar_residuals, epipolar_residuals_px, fundamental_matrix, refine_reprojection,
    reprojection_objective, triangulate_dlt, GeometryError,
};

fn homogeneous(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_projections_satisfy_the_epipolar_constraint(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rig = random_rig(&mut r);
        let f = fundamental_matrix(&rig.first, &rig.second).unwrap();
        let sv = f.singular_values();
        prop_assert!(sv.min() / sv.max() < 1e-12);
        for _ in 0..10 {
            let x = visible_point(&rig, &mut r);
            let c = exact_correspondence(&rig, &x);
            let alg = homogeneous(&c.x2).dot(&(f * homogeneous(&c.x1)));
            prop_assert!(alg.abs() < 1e-9, "algebraic residual {alg}");
            prop_assert!(epipolar_residuals(&f, &c).sampson < 1e-12);
        }
    }

    #[test]
    fn swapping_views_transposes_f(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rig = random_rig(&mut r);
        let f12 = fundamental_matrix(&rig.first, &rig.second).unwrap();
        let f21 = fundamental_matrix(&rig.second, &rig.first).unwrap();
        let a = f12 / f12.norm();
        let b = f21.transpose() / f21.norm();
        let diff = (a - b).norm().min((a + b).norm());
        prop_assert!(diff < 1e-9, "diff {diff}");
    }

    #[test]
    fn sliding_along_the_epipolar_line_keeps_sampson_near_zero(seed in any::<u64>(), shift in -40.0f64..40.0) {
        let mut r = rng(seed);
        let rig = random_rig(&mut r);
        let f = fundamental_matrix(&rig.first, &rig.second).unwrap();
        let x = visible_point(&rig, &mut r);
        let c = exact_correspondence(&rig, &x);
        let (along, normal) = epipolar_frame(&rig, &x);
        let on_line = epipolar_residuals_px(&f, &c.x1, &(c.x2 + along * shift));
        prop_assert!(on_line.sampson < 1e-9, "on-line sampson {}", on_line.sampson);
        let off_line = epipolar_residuals_px(&f, &c.x1, &(c.x2 + normal * 10.0));
        prop_assert!(off_line.sampson > 2.0, "off-line sampson {}", off_line.sampson);
    }

    #[test]
    fn objective_matches_the_explicit_division(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rig = random_rig(&mut r);
        let x = visible_point(&rig, &mut r);
        let views = [&rig.first, &rig.second];
        let pixels = [rig.first.project(&x) + Vector2::new(1.5, -0.5), rig.second.project(&x)];
        let probe = x + Vector3::new(0.01, -0.02, 0.03);
        let ours = reprojection_objective(&probe, &views, &pixels);
        let oracle = objective_oracle(&probe, &views, &pixels);
        prop_assert!((ours - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn refinement_never_increases_the_objective(seed in any::<u64>(), sigma in 0.0f64..3.0) {
        let mut r = rng(seed);
        let rig = random_rig(&mut r);
        let x = visible_point(&rig, &mut r);
        let views = [&rig.first, &rig.second];
        let pixels = [
            rig.first.project(&x) + Vector2::new(gauss(&mut r), gauss(&mut r)) * sigma,
            rig.second.project(&x) + Vector2::new(gauss(&mut r), gauss(&mut r)) * sigma,
        ];
        let start = x + Vector3::new(gauss(&mut r), gauss(&mut r), gauss(&mut r)) * 0.05;
        let refined = refine_reprojection(&start, &views, &pixels).unwrap();
        for w in refined.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0], "objective rose from {} to {}", w[0], w[1]);
        }
    }
}

#[test]
fn noisy_refinement_is_a_grid_search_local_minimum() {
    let mut r = rng(7);
    for _ in 0..5 {
        let rig = random_rig(&mut r);
        let x = visible_point(&rig, &mut r);
        let views = [&rig.first, &rig.second];
        let pixels = [
            rig.first.project(&x) + Vector2::new(gauss(&mut r), gauss(&mut r)),
            rig.second.project(&x) + Vector2::new(gauss(&mut r), gauss(&mut r)),
        ];
        let x0 = triangulate_dlt(&views, &pixels).unwrap();
        let refined = refine_reprojection(&x0, &views, &pixels).unwrap();
        let oracle = grid_search_minimum(&x0, 0.2, &views, &pixels);
        let ours = reprojection_objective(&refined.position, &views, &pixels);
        let best = objective_oracle(&oracle, &views, &pixels);
        assert!(ours <= best + 1e-9, "refined {ours} vs grid {best}");
        let polished = grid_search_minimum(&refined.position, 1e-3, &views, &pixels);
        let gain = ours - objective_oracle(&polished, &views, &pixels);
        assert!(gain <= 1e-9 * ours.max(1.0), "grid search improved the refined point by {gain}");
    }
}

#[test]
fn three_view_triangulation_recovers_the_point() {
    let target = Vector3::new(0.0, 0.0, 6.0);
    let views = [
        camera("a", Vector3::new(-1.0, 0.0, 0.0), target, 700.0, 700.0),
        camera("b", Vector3::new(0.0, 0.3, 0.0), target, 650.0, 660.0),
        camera("c", Vector3::new(1.0, -0.2, 0.2), target, 720.0, 710.0),
    ];
    let refs: Vec<_> = views.iter().collect();
    let x = Vector3::new(0.4, -0.3, 6.5);
    let pixels: Vec<_> = views.iter().map(|v| v.project(&x)).collect();
    let est = triangulate_dlt(&refs, &pixels).unwrap();
    assert!((est - x).norm() < 1e-9);
}

#[test]
fn coincident_centers_are_degenerate() {
    let target = Vector3::new(0.0, 0.0, 5.0);
    let a = camera("a", Vector3::zeros(), target, 600.0, 600.0);
    let b = camera("b", Vector3::zeros(), Vector3::new(1.0, 0.0, 5.0), 600.0, 600.0);
    assert!(matches!(fundamental_matrix(&a, &b), Err(GeometryError::DegeneratePair)));
}

#[test]
fn point_cloud_keeps_input_order_and_flags() {
    let mut r = rng(11);
    let rig = random_rig(&mut r);
    let views = vec![rig.first.clone(), rig.second.clone()];
    let mut matches = Vec::new();
    let mut expected = Vec::new();
    for n in 0..20 {
        let x = visible_point(&rig, &mut r);
        let mut c = exact_correspondence(&rig, &x);
        if n % 4 == 3 {
            let (_, normal) = epipolar_frame(&rig, &x);
            let moved = c.x2 + normal * 10.0;
            if !rig.second.contains_pixel(&moved) {
                continue;
            }
            c.x2 = moved;
            expected.push(false);
        } else {
            expected.push(true);
        }
        matches.push(c);
    }
    let cloud = build_point_cloud(&matches, &views, 2.0).unwrap();
    let flags: Vec<bool> = cloud.iter().map(|p| p.inlier).collect();
    assert_eq!(flags, expected);
    for (p, c) in cloud.iter().zip(&matches) {
        assert_eq!(&p.source, c);
    }
}
