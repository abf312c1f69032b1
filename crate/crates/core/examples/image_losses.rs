//! Compares a synthetic render against a relit copy and a shifted copy.
//! NCC ignores the relighting; the pixel terms do not.
//!
//! ```bash
//! cargo run -p splatinit --example image_losses [IMAGE.png]
//! ```

use nalgebra::Vector3;
use splatinit::losses::{laplacian_pyramid, total_loss, Image, LossError, LossWeights};

fn scene(height: usize, width: usize) -> Result<Image, LossError> {
    Image::from_fn(height, width, 3, |y, x, c| {
        let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
        let stripes = ((fx * 18.0 + c as f64).sin() * (fy * 11.0).cos() + 1.0) / 2.0;
        0.1 + 0.8 * stripes
    })
}

fn main() -> Result<(), LossError> {
    let reference = match std::env::args().nth(1) {
        Some(path) => Image::load(path)?,
        None => scene(96, 128)?,
    };
    let (h, w, c) = reference.dims();
    let relit = Image::from_fn(h, w, c, |y, x, ch| 0.6 * reference.get(y, x, ch) + 0.05)?;
    let shifted = Image::from_fn(h, w, c, |y, x, ch| reference.get(y, x.saturating_sub(3), ch))?;

    let scales = vec![Vector3::new(0.05, 0.05, 0.05); 500];
    let weights = LossWeights::default();
    for (name, other) in [("identical", &reference), ("relit", &relit), ("shifted", &shifted)] {
        let r = total_loss(&reference, other, &scales, &weights)?;
        println!(
            "{name:9}  l1 {:.4}  1-ssim {:.4}  ncc {:.2e}  laplacian {:.4}  total {:.4}",
            r.l1, r.ssim_loss, r.ncc, r.laplacian, r.total
        );
    }

    let pyramid = laplacian_pyramid(&reference, 4)?;
    for (l, level) in pyramid.levels.iter().enumerate() {
        let energy = level.data.iter().map(|v| v.abs()).sum::<f64>() / level.data.len() as f64;
        println!("level {l}: {}x{}  mean |band| {energy:.4}", level.height, level.width);
    }
    let back = pyramid.collapse();
    let err = back.data.iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("collapse error {err:.2e}");
    Ok(())
}
