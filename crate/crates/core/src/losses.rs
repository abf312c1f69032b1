//! Image-space losses: windowed NCC, Laplacian pyramid, SSIM, L1 and the
//! volume regularizer on anchor scales.
//!
//! Multi-channel images are handled per channel and averaged. Means are
//! accumulated with a pairwise tree sum so results do not depend on how
//! the work is split.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_NCC_WINDOW: usize = 11;
pub const DEFAULT_PYRAMID_LEVELS: usize = 4;
pub const NCC_EPSILON: f64 = 1e-8;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

const BLUR_KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("window {window} must be odd and fit in a {height}x{width} image")]
    InvalidWindow { window: usize, height: usize, width: usize },
    #[error("image {height}x{width} is too small for {levels} pyramid levels")]
    TooSmallForPyramid { height: usize, width: usize, levels: usize },
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmallForSsim { height: usize, width: usize, window: usize },
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("scale {index} has a non-positive component")]
    NonPositiveScale { index: usize },
    #[error("negative or non-finite loss weight {0}")]
    InvalidWeight(&'static str),
    #[error("image i/o: {0}")]
    Io(String),
}

/// Sum with a balanced binary reduction tree.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if channels != 1 && channels != 3 {
            return Err(LossError::InvalidImage(format!("{channels} channels, expected 1 or 3")));
        }
        if height == 0 || width == 0 {
            return Err(LossError::InvalidImage("empty image".into()));
        }
        if data.len() != height * width * channels {
            return Err(LossError::InvalidImage(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(LossError::InvalidImage(format!("value {} at offset {bad} outside [0, 1]", data[bad])));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self, LossError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, LossError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Loads an 8-bit grayscale or RGB image (PNG or PPM/PGM), scaled by `1/255`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LossError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| LossError::Io(format!("{}: {e}", path.display())))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, bytes) = if img.color().has_color() {
            (3, img.to_rgb8().into_raw())
        } else {
            (1, img.to_luma8().into_raw())
        };
        Self::new(height, width, channels, bytes.into_iter().map(|b| f64::from(b) / 255.0).collect())
    }

    /// Writes the image quantized to 8 bits; the format follows the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LossError> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let result = if self.channels == 3 {
            image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path))
        } else {
            image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path))
        };
        result
            .ok_or_else(|| LossError::Io("buffer size mismatch".into()))?
            .map_err(|e| LossError::Io(format!("{}: {e}", path.display())))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Single channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

/// Unbounded single-channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn same_dims(a: &Image, b: &Image) -> Result<(), LossError> {
    if a.dims() != b.dims() {
        return Err(LossError::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// Reflect-101 border: `-1 -> 1`, `n -> n - 2`.
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    let mut i = i;
    while i < 0 || i > last {
        i = if i < 0 { -i } else { 2 * last - i };
    }
    i as usize
}

fn convolve_separable(plane: &Plane, kernel: &[f64; 5]) -> Plane {
    let (h, w) = (plane.height, plane.width);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (0..5)
                .map(|t| kernel[t] * plane.at(y, reflect101(x as isize + t as isize - 2, w)))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5)
                .map(|t| kernel[t] * rows[reflect101(y as isize + t as isize - 2, h) * w + x])
                .sum();
        }
    }
    Plane {
        height: h,
        width: w,
        data: out,
    }
}

pub fn blur(plane: &Plane) -> Plane {
    convolve_separable(plane, &BLUR_KERNEL)
}

/// Keeps even-indexed rows and columns.
pub fn downsample(plane: &Plane) -> Plane {
    let (h, w) = (plane.height.div_ceil(2), plane.width.div_ceil(2));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(plane.at(2 * y, 2 * x));
        }
    }
    Plane { height: h, width: w, data }
}

/// Zero-stuffs into a `height x width` plane and blurs with the kernel
/// doubled per axis.
pub fn upsample(plane: &Plane, height: usize, width: usize) -> Plane {
    let mut stuffed = Plane {
        height,
        width,
        data: vec![0.0; height * width],
    };
    for y in 0..plane.height.min(height.div_ceil(2)) {
        for x in 0..plane.width.min(width.div_ceil(2)) {
            stuffed.data[2 * y * width + 2 * x] = plane.at(y, x);
        }
    }
    let doubled = BLUR_KERNEL.map(|k| 2.0 * k);
    convolve_separable(&stuffed, &doubled)
}

/// One pyramid level; `data` is channel-interleaved like [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Level {
    fn from_planes(planes: &[Plane]) -> Self {
        let (height, width) = (planes[0].height, planes[0].width);
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, p) in planes.iter().enumerate() {
            for (n, v) in p.data.iter().enumerate() {
                data[n * channels + c] = *v;
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    fn planes(&self) -> Vec<Plane> {
        (0..self.channels)
            .map(|c| Plane {
                height: self.height,
                width: self.width,
                data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
            })
            .collect()
    }
}

/// Band-pass levels `0..L-1` followed by the coarsest Gaussian level.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Level>,
}

impl Pyramid {
    /// Upsample-and-add from the coarsest level back to full resolution.
    pub fn collapse(&self) -> Level {
        let mut current = self.levels.last().expect("pyramid has at least one level").planes();
        for level in self.levels.iter().rev().skip(1) {
            current = level
                .planes()
                .iter()
                .zip(&current)
                .map(|(detail, coarse)| {
                    let up = upsample(coarse, detail.height, detail.width);
                    Plane {
                        height: detail.height,
                        width: detail.width,
                        data: detail.data.iter().zip(&up.data).map(|(d, u)| d + u).collect(),
                    }
                })
                .collect();
        }
        Level::from_planes(&current)
    }
}

fn plane_pyramid(plane: &Plane, levels: usize) -> Vec<Plane> {
    let mut gaussian = vec![plane.clone()];
    for _ in 1..levels {
        let next = downsample(&blur(gaussian.last().unwrap()));
        gaussian.push(next);
    }
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels - 1 {
        let fine = &gaussian[l];
        let up = upsample(&gaussian[l + 1], fine.height, fine.width);
        out.push(Plane {
            height: fine.height,
            width: fine.width,
            data: fine.data.iter().zip(&up.data).map(|(g, u)| g - u).collect(),
        });
    }
    out.push(gaussian.pop().unwrap());
    out
}

pub fn laplacian_pyramid(image: &Image, levels: usize) -> Result<Pyramid, LossError> {
    if levels == 0 {
        return Err(LossError::NoLevels);
    }
    let min_dim = image.height.min(image.width);
    if levels > 63 || min_dim < 1usize << (levels - 1) {
        return Err(LossError::TooSmallForPyramid {
            height: image.height,
            width: image.width,
            levels,
        });
    }
    let per_channel: Vec<Vec<Plane>> = (0..image.channels).map(|c| plane_pyramid(&image.channel(c), levels)).collect();
    let levels = (0..levels)
        .map(|l| Level::from_planes(&per_channel.iter().map(|p| p[l].clone()).collect::<Vec<_>>()))
        .collect();
    Ok(Pyramid { levels })
}

/// Sum over levels of the per-level mean absolute difference.
pub fn laplacian_loss(a: &Image, b: &Image, levels: usize) -> Result<f64, LossError> {
    same_dims(a, b)?;
    let pa = laplacian_pyramid(a, levels)?;
    let pb = laplacian_pyramid(b, levels)?;
    let per_level: Vec<f64> = pa
        .levels
        .iter()
        .zip(&pb.levels)
        .map(|(la, lb)| {
            let diffs: Vec<f64> = la.data.iter().zip(&lb.data).map(|(x, y)| (x - y).abs()).collect();
            pairwise_mean(&diffs)
        })
        .collect();
    Ok(per_level.iter().sum())
}

fn check_window(image: &Image, window: usize) -> Result<(), LossError> {
    if window == 0 || window.is_multiple_of(2) || window > image.height.min(image.width) {
        return Err(LossError::InvalidWindow {
            window,
            height: image.height,
            width: image.width,
        });
    }
    Ok(())
}

fn ncc_plane(a: &Plane, b: &Plane, window: usize) -> f64 {
    let n = (window * window) as f64;
    let mut scores = Vec::with_capacity((a.height - window + 1) * (a.width - window + 1));
    for y0 in 0..=a.height - window {
        for x0 in 0..=a.width - window {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    sa += a.at(y, x);
                    sb += b.at(y, x);
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let da = a.at(y, x) - ma;
                    let db = b.at(y, x) - mb;
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let sigma_a = (vaa / n).sqrt();
            let sigma_b = (vbb / n).sqrt();
            scores.push((vab / n) / (sigma_a * sigma_b + NCC_EPSILON));
        }
    }
    pairwise_mean(&scores)
}

/// `1 − mean windowed normalized cross-correlation` over all valid
/// (unpadded, stride-1) window positions.
pub fn ncc_loss(a: &Image, b: &Image, window: usize) -> Result<f64, LossError> {
    same_dims(a, b)?;
    check_window(a, window)?;
    let per_channel: Vec<f64> = (0..a.channels)
        .map(|c| ncc_plane(&a.channel(c), &b.channel(c), window))
        .collect();
    Ok(1.0 - per_channel.iter().sum::<f64>() / a.channels as f64)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn ssim_plane(a: &Plane, b: &Plane, taps: &[f64]) -> f64 {
    let win = taps.len();
    let mut scores = Vec::with_capacity((a.height - win + 1) * (a.width - win + 1));
    for y0 in 0..=a.height - win {
        for x0 in 0..=a.width - win {
            let (mut ma, mut mb) = (0.0, 0.0);
            for (dy, wy) in taps.iter().enumerate() {
                for (dx, wx) in taps.iter().enumerate() {
                    let w = wy * wx;
                    ma += w * a.at(y0 + dy, x0 + dx);
                    mb += w * b.at(y0 + dy, x0 + dx);
                }
            }
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for (dy, wy) in taps.iter().enumerate() {
                for (dx, wx) in taps.iter().enumerate() {
                    let w = wy * wx;
                    let da = a.at(y0 + dy, x0 + dx) - ma;
                    let db = b.at(y0 + dy, x0 + dx) - mb;
                    vaa += w * da * da;
                    vbb += w * db * db;
                    vab += w * da * db;
                }
            }
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (vaa + vbb + SSIM_C2);
            scores.push(num / den);
        }
    }
    pairwise_mean(&scores)
}

/// Mean SSIM with an 11x11 Gaussian window (σ = 1.5) over valid positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, LossError> {
    same_dims(a, b)?;
    if a.height.min(a.width) < SSIM_WINDOW {
        return Err(LossError::TooSmallForSsim {
            height: a.height,
            width: a.width,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let per_channel: Vec<f64> = (0..a.channels)
        .map(|c| ssim_plane(&a.channel(c), &b.channel(c), &taps))
        .collect();
    Ok(per_channel.iter().sum::<f64>() / a.channels as f64)
}

pub fn l1_loss(a: &Image, b: &Image) -> Result<f64, LossError> {
    same_dims(a, b)?;
    let diffs: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect();
    Ok(pairwise_mean(&diffs))
}

/// `Σ sx·sy·sz` over all scales.
pub fn volume_regularization(scales: &[Vector3<f64>]) -> Result<f64, LossError> {
    let mut total = 0.0;
    for (index, s) in scales.iter().enumerate() {
        if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) || s.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonPositiveScale { index });
        }
        total += s.x * s.y * s.z;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_vol: f64,
    pub lambda_laplacian: f64,
    pub lambda_ncc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_vol: 0.001,
            lambda_laplacian: 1.0,
            lambda_ncc: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_vol", self.lambda_vol),
            ("lambda_laplacian", self.lambda_laplacian),
            ("lambda_ncc", self.lambda_ncc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidWeight(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossOptions {
    pub ncc_window: usize,
    pub pyramid_levels: usize,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            ncc_window: DEFAULT_NCC_WINDOW,
            pyramid_levels: DEFAULT_PYRAMID_LEVELS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub ssim_loss: f64,
    pub vol: f64,
    pub pixel: f64,
    pub ncc: f64,
    pub laplacian: f64,
    pub total: f64,
}

/// `L1 + λ_ssim·(1 − SSIM) + λ_vol·Σ prod(s)`.
pub fn pixel_loss(a: &Image, b: &Image, scales: &[Vector3<f64>], weights: &LossWeights) -> Result<f64, LossError> {
    weights.validate()?;
    let l1 = l1_loss(a, b)?;
    let ssim_loss = 1.0 - ssim(a, b)?;
    let vol = volume_regularization(scales)?;
    Ok(l1 + weights.lambda_ssim * ssim_loss + weights.lambda_vol * vol)
}

pub fn total_loss(a: &Image, b: &Image, scales: &[Vector3<f64>], weights: &LossWeights) -> Result<LossReport, LossError> {
    total_loss_with(a, b, scales, weights, &LossOptions::default())
}

pub fn total_loss_with(
    a: &Image,
    b: &Image,
    scales: &[Vector3<f64>],
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<LossReport, LossError> {
    weights.validate()?;
    let l1 = l1_loss(a, b)?;
    let ssim_loss = 1.0 - ssim(a, b)?;
    let vol = volume_regularization(scales)?;
    let pixel = l1 + weights.lambda_ssim * ssim_loss + weights.lambda_vol * vol;
    let ncc = ncc_loss(a, b, options.ncc_window)?;
    let laplacian = laplacian_loss(a, b, options.pyramid_levels)?;
    let total = pixel + weights.lambda_laplacian * laplacian + weights.lambda_ncc * ncc;
    Ok(LossReport {
        l1,
        ssim_loss,
        vol,
        pixel,
        ncc,
        laplacian,
        total,
    })
}
