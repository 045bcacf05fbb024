//! Breast-region localization and raster normalization.
//!
//! The detector is deterministic: Otsu's threshold over a 256-bin
//! histogram, then the largest 4-connected foreground component's bounding
//! box, padded and clamped. The crop is bilinearly resized to the target
//! shape and min-max scaled to [0,1].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("degenerate image: no separating intensity threshold exists")]
    DegenerateImage,
    #[error("no foreground pixels above the threshold")]
    EmptyForeground,
    #[error("invalid preprocess config: {0}")]
    Config(String),
}

/// A pixel-coordinate box, half-open on the max edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Intersection-over-union of two boxes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        if ix1 <= ix0 || iy1 <= iy0 {
            return 0.0;
        }
        let inter = ((ix1 - ix0) * (iy1 - iy0)) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        inter / union
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub pad_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_height: 128, target_width: 96, pad_fraction: 0.02 }
    }
}

impl PreprocessConfig {
    /// 512x512 preset matching the smaller backbone input shape.
    pub fn preset_512() -> Self {
        PreprocessConfig { target_height: 512, target_width: 512, ..Default::default() }
    }

    /// 1024x768 preset matching the larger backbone input shape.
    pub fn preset_1024x768() -> Self {
        PreprocessConfig { target_height: 1024, target_width: 768, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.target_height < 16 || self.target_width < 16 {
            return Err(PreprocessError::Config(format!(
                "target {}x{} below the 16-pixel minimum",
                self.target_height, self.target_width
            )));
        }
        if !(0.0..=0.25).contains(&self.pad_fraction) {
            return Err(PreprocessError::Config(format!(
                "pad_fraction {} outside [0, 0.25]",
                self.pad_fraction
            )));
        }
        Ok(())
    }
}

/// A real-valued grid in [0,1] produced by [`preprocess_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl NormalizedRaster {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub raster: NormalizedRaster,
    pub roi: BoundingBox,
    /// The crop had a single intensity; the output is all zeros.
    pub constant_crop: bool,
}

const OTSU_BINS: usize = 256;

fn histogram_shift(image: &GrayImage) -> u32 {
    u32::from(image.bit_depth) - 8
}

/// Otsu's threshold over a 256-bin histogram (16-bit images are binned by
/// their high byte). Returns the intensity `t` such that foreground pixels
/// are exactly those with value >= `t`; among equally good cuts the lowest
/// is chosen.
pub fn otsu_threshold(image: &GrayImage) -> Result<u32, PreprocessError> {
    let shift = histogram_shift(image);
    let mut hist = [0u64; OTSU_BINS];
    for &p in &image.pixels {
        hist[(u32::from(p) >> shift) as usize] += 1;
    }
    let total = image.pixels.len() as f64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(bin, &count)| bin as f64 * count as f64)
        .sum();

    // Scan every cut bin t, keeping class 0 = bins <= t, class 1 = bins > t.
    let mut best_bin: Option<usize> = None;
    let mut best_variance = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..OTSU_BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let variance = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if variance > best_variance {
            best_variance = variance;
            best_bin = Some(t);
        }
    }
    match best_bin {
        Some(bin) => Ok(((bin as u32) + 1) << shift),
        None => Err(PreprocessError::DegenerateImage),
    }
}

/// Labels of the largest 4-connected component of `foreground`, by pixel
/// count; ties resolve to the component discovered first in scan order.
fn largest_component(
    foreground: &[bool],
    width: usize,
    height: usize,
) -> Option<(Vec<usize>, usize)> {
    let mut visited = vec![false; foreground.len()];
    let mut best: Option<(Vec<usize>, usize)> = None;
    let mut stack = Vec::new();
    for start in 0..foreground.len() {
        if !foreground[start] || visited[start] {
            continue;
        }
        let mut members = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            members.push(idx);
            let (x, y) = (idx % width, idx / width);
            let mut visit = |nx: usize, ny: usize| {
                let nidx = ny * width + nx;
                if foreground[nidx] && !visited[nidx] {
                    visited[nidx] = true;
                    stack.push(nidx);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < width {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < height {
                visit(x, y + 1);
            }
        }
        let size = members.len();
        if best.as_ref().map_or(true, |(_, s)| size > *s) {
            best = Some((members, size));
        }
    }
    best
}

/// Bounding box of the largest foreground component, padded by
/// `pad_fraction` of the box dimension on each side and clamped to the
/// image bounds.
pub fn breast_roi(image: &GrayImage, pad_fraction: f64) -> Result<BoundingBox, PreprocessError> {
    let threshold = otsu_threshold(image)?;
    let foreground: Vec<bool> = image.pixels.iter().map(|&p| u32::from(p) >= threshold).collect();
    let (members, _) = largest_component(&foreground, image.width, image.height)
        .ok_or(PreprocessError::EmptyForeground)?;

    let mut x0 = usize::MAX;
    let mut y0 = usize::MAX;
    let mut x1 = 0usize;
    let mut y1 = 0usize;
    for idx in members {
        let (x, y) = (idx % image.width, idx / image.width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    let pad_x = ((x1 - x0) as f64 * pad_fraction).round() as usize;
    let pad_y = ((y1 - y0) as f64 * pad_fraction).round() as usize;
    Ok(BoundingBox {
        x0: x0.saturating_sub(pad_x),
        y0: y0.saturating_sub(pad_y),
        x1: (x1 + pad_x).min(image.width),
        y1: (y1 + pad_y).min(image.height),
    })
}

/// Bilinear resample with the half-pixel-center convention: output pixel
/// (i,j) samples input position ((j+0.5)*sx - 0.5, (i+0.5)*sy - 0.5).
/// When the shapes match, this is the identity.
fn bilinear_resize(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let sx = src_w as f64 / dst_w as f64;
    let sy = src_h as f64 / dst_h as f64;
    let mut dst = Vec::with_capacity(dst_w * dst_h);
    for i in 0..dst_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for j in 0..dst_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bot = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            dst.push(top * (1.0 - wy) + bot * wy);
        }
    }
    dst
}

/// Crop to `roi`, bilinear-resize to the configured target, min-max scale
/// intensities within the crop to [0,1].
pub fn preprocess_with_roi(
    image: &GrayImage,
    roi: BoundingBox,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed, PreprocessError> {
    cfg.validate()?;
    let (cw, ch) = (roi.width(), roi.height());
    let mut crop = Vec::with_capacity(cw * ch);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for y in roi.y0..roi.y1 {
        for x in roi.x0..roi.x1 {
            let v = f64::from(image.get(x, y));
            min = min.min(v);
            max = max.max(v);
            crop.push(v);
        }
    }
    let resized = bilinear_resize(&crop, cw, ch, cfg.target_width, cfg.target_height);
    let constant_crop = min == max;
    let data = if constant_crop {
        vec![0.0; resized.len()]
    } else {
        let range = max - min;
        resized.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
    };
    Ok(Preprocessed {
        raster: NormalizedRaster {
            height: cfg.target_height,
            width: cfg.target_width,
            data,
        },
        roi,
        constant_crop,
    })
}

/// Full preprocessing: detect the ROI then crop/resize/normalize. An
/// externally supplied box (e.g. a manifest ROI column) skips detection.
pub fn preprocess_image(
    image: &GrayImage,
    cfg: &PreprocessConfig,
    roi_override: Option<BoundingBox>,
) -> Result<Preprocessed, PreprocessError> {
    cfg.validate()?;
    let roi = match roi_override {
        Some(roi) => roi,
        None => breast_roi(image, cfg.pad_fraction)?,
    };
    preprocess_with_roi(image, roi, cfg)
}
