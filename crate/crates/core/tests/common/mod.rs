//! Fixtures and independent reference implementations shared by the
//! integration suites. Nothing here calls into the code path it checks.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use splatinit::epipolar::{CameraIntrinsics, CameraPose, CameraView, Correspondence};
use splatinit::graph::Anchor;
use splatinit::losses::Image;
use splatinit::{AttentionParams, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// World-to-camera pose of a camera at `center` looking at `target`.
pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> CameraPose {
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    CameraPose::new(rotation, -(rotation * center)).unwrap()
}

pub fn camera(id: &str, center: Vector3<f64>, target: Vector3<f64>, fx: f64, fy: f64) -> CameraView {
    CameraView::new(
        id,
        CameraIntrinsics::new(fx, fy, 320.0, 240.0).unwrap(),
        look_at(center, target),
        640,
        480,
    )
    .unwrap()
}

pub struct Rig {
    pub first: CameraView,
    pub second: CameraView,
    pub target: Vector3<f64>,
}

/// Two cameras with random intrinsics, a baseline of 0.5 to 2 units and a
/// common look-at target about 6 units ahead.
pub fn random_rig(rng: &mut ChaCha8Rng) -> Rig {
    let target = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(5.0..8.0),
    );
    let c1 = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)).normalize();
    let c2 = c1 + dir * rng.random_range(0.5..2.0);
    let mut intr = |id: &str, c: Vector3<f64>| {
        let fx = rng.random_range(400.0..900.0);
        let fy = fx * rng.random_range(0.95..1.05);
        let mut view = camera(id, c, target, fx, fy);
        view.intrinsics.cx = rng.random_range(280.0..360.0);
        view.intrinsics.cy = rng.random_range(200.0..280.0);
        view.intrinsics.skew = rng.random_range(-0.5..0.5);
        view
    };
    let first = intr("a", c1);
    let second = intr("b", c2);
    Rig { first, second, target }
}

/// A point near the rig target that projects inside both images.
pub fn visible_point(rig: &Rig, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let p = rig.target
            + Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let ok = [&rig.first, &rig.second]
            .iter()
            .all(|v| v.depth(&p) > 0.5 && v.contains_pixel(&v.project(&p)));
        if ok {
            return p;
        }
    }
}

pub fn exact_correspondence(rig: &Rig, x: &Vector3<f64>) -> Correspondence {
    Correspondence::new(
        rig.first.id.clone(),
        rig.first.project(x),
        rig.second.id.clone(),
        rig.second.project(x),
    )
}

/// Unit direction of the epipolar line of `x1` in the second image, and its
/// normal, computed from the projections of two points on the back-projected ray.
pub fn epipolar_frame(rig: &Rig, x: &Vector3<f64>) -> (Vector2<f64>, Vector2<f64>) {
    let c1 = rig.first.pose.center();
    let near = c1 + (x - c1) * 0.8;
    let along = (rig.second.project(x) - rig.second.project(&near)).normalize();
    (along, Vector2::new(-along.y, along.x))
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Squared reprojection error written out with explicit homogeneous division.
pub fn objective_oracle(x: &Vector3<f64>, views: &[&CameraView], pixels: &[Vector2<f64>]) -> f64 {
    let mut total = 0.0;
    for (v, px) in views.iter().zip(pixels) {
        let p = v.projection_matrix();
        let h = [0, 1, 2].map(|r| p[(r, 0)] * x.x + p[(r, 1)] * x.y + p[(r, 2)] * x.z + p[(r, 3)]);
        let du = h[0] / h[2] - px.x;
        let dv = h[1] / h[2] - px.y;
        total += du * du + dv * dv;
    }
    total
}

/// Coarse-to-fine grid search for the reprojection minimum around `center`.
pub fn grid_search_minimum(center: &Vector3<f64>, radius: f64, views: &[&CameraView], pixels: &[Vector2<f64>]) -> Vector3<f64> {
    let mut best = *center;
    let mut half = radius;
    let steps = 10i32;
    for _ in 0..12 {
        let mut best_val = objective_oracle(&best, views, pixels);
        let origin = best;
        for ix in -steps..=steps {
            for iy in -steps..=steps {
                for iz in -steps..=steps {
                    let p = origin + Vector3::new(ix as f64, iy as f64, iz as f64) * (half / steps as f64);
                    let val = objective_oracle(&p, views, pixels);
                    if val < best_val {
                        best_val = val;
                        best = p;
                    }
                }
            }
        }
        half /= 4.0;
    }
    best
}

pub fn anchors_from(points: &[Vector3<f64>], feature_dim: usize, rng: &mut ChaCha8Rng) -> Vec<Anchor> {
    points
        .iter()
        .map(|p| Anchor {
            position: *p,
            feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            scale: Vector3::repeat(0.5),
        })
        .collect()
}

pub fn random_cloud(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
        .collect()
}

/// Exhaustive k-NN: full sort of every other point by (distance², index).
pub fn knn_oracle(points: &[Vector3<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d = points[j] - points[i];
                    (d.x * d.x + d.y * d.y + d.z * d.z, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.iter().take(k).map(|&(_, j)| j).collect()
        })
        .collect()
}

/// Angle between two vectors via `atan2(|a × b|, a · b)`.
pub fn angle_oracle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

pub fn random_tensor(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor3 {
    let n = shape.iter().product();
    Tensor3::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn randomize_angular_bias(params: &mut AttentionParams, rng: &mut ChaCha8Rng) {
    params.w_theta.apply(|v| *v = rng.random_range(-0.8..0.8));
    params.b_theta.apply(|v| *v = rng.random_range(-0.8..0.8));
}

/// Scalar-loop attention forward pass.
pub fn attention_oracle(agg: &Tensor3, enc: &Tensor3, p: &AttentionParams) -> DMatrix<f64> {
    let [m, k, width] = agg.shape();
    let enc_w = enc.shape()[2];
    let heads = p.w_q.len();
    let d = p.w_o.nrows();
    let dh = d / heads;
    let mut out = DMatrix::zeros(m, d);
    for i in 0..m {
        let mut t = vec![vec![0.0; d]; k];
        for j in 0..k {
            for c in 0..d {
                for e in 0..width {
                    t[j][c] += agg.get(i, j, e) * p.w_in[(e, c)];
                }
            }
        }
        let mut concat = vec![vec![0.0; d]; k];
        for h in 0..heads {
            let proj = |w: &DMatrix<f64>| {
                let mut r = vec![vec![0.0; dh]; k];
                for j in 0..k {
                    for c in 0..dh {
                        for e in 0..dh {
                            r[j][c] += t[j][h * dh + e] * w[(e, c)];
                        }
                    }
                }
                r
            };
            let (q, kk, v) = (proj(&p.w_q[h]), proj(&p.w_k[h]), proj(&p.w_v[h]));
            for j in 0..k {
                let mut logits = vec![0.0; k];
                for jj in 0..k {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q[j][c] * kk[jj][c];
                    }
                    let mut bias = p.b_theta[h];
                    for e in 0..enc_w {
                        bias += p.w_theta[(h, e)] * enc.get(i, jj, e);
                    }
                    logits[jj] = dot / (dh as f64).sqrt() + bias;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for jj in 0..k {
                        acc += exps[jj] / z * v[jj][c];
                    }
                    concat[j][h * dh + c] = acc;
                }
            }
        }
        for c in 0..d {
            let mut acc = 0.0;
            for row in &concat {
                for e in 0..d {
                    acc += row[e] * p.w_o[(e, c)];
                }
            }
            out[(i, c)] = acc / k as f64;
        }
    }
    out
}

pub fn weighted_sum(f: &DMatrix<f64>, upstream: &DMatrix<f64>) -> f64 {
    f.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, c, data).unwrap()
}

/// Smooth, high-contrast texture with values in [0.05, 0.95].
pub fn texture(h: usize, w: usize, c: usize) -> Image {
    Image::from_fn(h, w, c, |y, x, ch| {
        let v = ((x as f64 * 0.9 + ch as f64).sin() * (y as f64 * 0.7).cos() + 1.0) / 2.0;
        0.05 + 0.9 * v
    })
    .unwrap()
}

pub fn plane(img: &Image, c: usize) -> Vec<Vec<f64>> {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.get(y, x, c)).collect()).collect()
}

pub fn ncc_oracle(a: &Image, b: &Image, window: usize) -> f64 {
    let mut per_channel = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (plane(a, c), plane(b, c));
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=a.height() - window {
            for x0 in 0..=a.width() - window {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for y in y0..y0 + window {
                    for x in x0..x0 + window {
                        xs.push(pa[y][x]);
                        ys.push(pb[y][x]);
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let sx = (xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
                let sy = (ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
                let cov = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
                total += cov / (sx * sy + 1e-8);
                count += 1.0;
            }
        }
        per_channel += total / count;
    }
    1.0 - per_channel / a.channels() as f64
}

pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let mut kernel = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (dy, row) in kernel.iter_mut().enumerate() {
        for (dx, w) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *w = (-(fy * fy + fx * fx) / (2.0 * 1.5 * 1.5)).exp();
            sum += *w;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut per_channel = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (plane(a, c), plane(b, c));
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=a.height() - 11 {
            for x0 in 0..=a.width() - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let w = kernel[dy][dx] / sum;
                        let (p, q) = (pa[y0 + dy][x0 + dx], pb[y0 + dy][x0 + dx]);
                        mx += w * p;
                        my += w * q;
                        xx += w * p * p;
                        yy += w * q * q;
                        xy += w * p * q;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        per_channel += total / count;
    }
    per_channel / a.channels() as f64
}

fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

const TAPS: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

fn blur_2d(p: &[Vec<f64>], gain: f64) -> Vec<Vec<f64>> {
    let (h, w) = (p.len(), p[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..5 {
                for dx in 0..5 {
                    let yy = mirror(y as i64 + dy as i64 - 2, h);
                    let xx = mirror(x as i64 + dx as i64 - 2, w);
                    acc += TAPS[dy] * TAPS[dx] * p[yy][xx];
                }
            }
            out[y][x] = acc * gain / 256.0;
        }
    }
    out
}

fn expand(p: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<f64>> {
    let mut stuffed = vec![vec![0.0; w]; h];
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            stuffed[y][x] = p[y / 2][x / 2];
        }
    }
    blur_2d(&stuffed, 4.0)
}

/// Per-channel Laplacian pyramid built with direct 5x5 convolutions.
pub fn pyramid_oracle(img: &Image, levels: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    (0..img.channels())
        .map(|c| {
            let mut gauss = vec![plane(img, c)];
            for _ in 1..levels {
                let b = blur_2d(gauss.last().unwrap(), 1.0);
                let down: Vec<Vec<f64>> = b.iter().step_by(2).map(|r| r.iter().step_by(2).copied().collect()).collect();
                gauss.push(down);
            }
            let mut out = Vec::new();
            for l in 0..levels - 1 {
                let (h, w) = (gauss[l].len(), gauss[l][0].len());
                let up = expand(&gauss[l + 1], h, w);
                out.push(
                    (0..h)
                        .map(|y| (0..w).map(|x| gauss[l][y][x] - up[y][x]).collect())
                        .collect(),
                );
            }
            out.push(gauss[levels - 1].clone());
            out
        })
        .collect()
}

pub fn laplacian_loss_oracle(a: &Image, b: &Image, levels: usize) -> f64 {
    let (pa, pb) = (pyramid_oracle(a, levels), pyramid_oracle(b, levels));
    let mut total = 0.0;
    for l in 0..levels {
        let mut sum = 0.0;
        let mut n = 0.0;
        for c in 0..a.channels() {
            for (ra, rb) in pa[c][l].iter().zip(&pb[c][l]) {
                for (x, y) in ra.iter().zip(rb) {
                    sum += (x - y).abs();
                    n += 1.0;
                }
            }
        }
        total += sum / n;
    }
    total
}

fn forward_objective(agg: &Tensor3, enc: &Tensor3, p: &AttentionParams, upstream: &DMatrix<f64>) -> f64 {
    weighted_sum(&splatinit::attention_forward(agg, enc, p).unwrap(), upstream)
}

/// Worst relative error between the analytic gradients and central
/// differences of the public forward pass, over every parameter and input.
pub fn finite_difference_error(agg: &Tensor3, enc: &Tensor3, params: &AttentionParams, upstream: &DMatrix<f64>, h: f64) -> f64 {
    let grads = splatinit::attention_backward(agg, enc, params, upstream).unwrap();
    let mut analytic = grads.params.clone();
    let tensors = 3 * params.w_q.len() + 4;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for t in 0..tensors {
        for e in 0..probe.tensor_mut(t).len() {
            let base = probe.tensor_mut(t)[e];
            probe.tensor_mut(t)[e] = base + h;
            let plus = forward_objective(agg, enc, &probe, upstream);
            probe.tensor_mut(t)[e] = base - h;
            let minus = forward_objective(agg, enc, &probe, upstream);
            probe.tensor_mut(t)[e] = base;
            worst = worst.max(rel_err(analytic.tensor_mut(t)[e], (plus - minus) / (2.0 * h)));
        }
    }
    let mut shifted = agg.clone();
    for idx in 0..agg.as_slice().len() {
        let base = agg.as_slice()[idx];
        shifted.as_mut_slice()[idx] = base + h;
        let plus = forward_objective(&shifted, enc, params, upstream);
        shifted.as_mut_slice()[idx] = base - h;
        let minus = forward_objective(&shifted, enc, params, upstream);
        shifted.as_mut_slice()[idx] = base;
        worst = worst.max(rel_err(grads.inputs.as_slice()[idx], (plus - minus) / (2.0 * h)));
    }
    worst
}
