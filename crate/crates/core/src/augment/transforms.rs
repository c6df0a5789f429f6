//! The individual image transforms of the strong-augmentation pool.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{quantize8, GrayImage};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Equalize,
    Invert,
    Posterize,
    Brightness,
    Contrast,
    Solarize,
    Sharpness,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    RandomErase,
}

/// Admissible magnitudes for one transform kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MagnitudeRange {
    /// Off (0) or on (1).
    Toggle,
    /// Integers in `lo..=hi`.
    Integer { lo: u32, hi: u32 },
    /// Reals in `[lo, hi]`.
    Real { lo: f64, hi: f64 },
}

impl MagnitudeRange {
    pub fn contains(&self, m: f64) -> bool {
        match *self {
            MagnitudeRange::Toggle => m == 0.0 || m == 1.0,
            MagnitudeRange::Integer { lo, hi } => m.fract() == 0.0 && m >= f64::from(lo) && m <= f64::from(hi),
            MagnitudeRange::Real { lo, hi } => m >= lo && m <= hi,
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            MagnitudeRange::Toggle => rng.below(2) as f64,
            MagnitudeRange::Integer { lo, hi } => (u64::from(lo) + rng.below(u64::from(hi - lo) + 1)) as f64,
            MagnitudeRange::Real { lo, hi } => rng.uniform(lo, hi),
        }
    }
}

impl TransformKind {
    pub const ALL: [TransformKind; 13] = [
        TransformKind::Equalize,
        TransformKind::Invert,
        TransformKind::Posterize,
        TransformKind::Brightness,
        TransformKind::Contrast,
        TransformKind::Solarize,
        TransformKind::Sharpness,
        TransformKind::Rotate,
        TransformKind::ShearX,
        TransformKind::ShearY,
        TransformKind::TranslateX,
        TransformKind::TranslateY,
        TransformKind::RandomErase,
    ];

    /// Magnitude range of each transform; erase is a toggle whose geometry is
    /// governed by [`EraseParams`].
    pub fn range(self) -> MagnitudeRange {
        use TransformKind::*;
        match self {
            Equalize | Invert | RandomErase => MagnitudeRange::Toggle,
            Posterize => MagnitudeRange::Integer { lo: 4, hi: 8 },
            Brightness | Contrast | Sharpness => MagnitudeRange::Real { lo: 0.05, hi: 0.95 },
            Solarize => MagnitudeRange::Real { lo: 0.0, hi: 1.0 },
            Rotate => MagnitudeRange::Real { lo: -30.0, hi: 30.0 },
            ShearX | ShearY | TranslateX | TranslateY => MagnitudeRange::Real { lo: -0.3, hi: 0.3 },
        }
    }

    pub fn name(self) -> &'static str {
        use TransformKind::*;
        match self {
            Equalize => "equalize",
            Invert => "invert",
            Posterize => "posterize",
            Brightness => "brightness",
            Contrast => "contrast",
            Solarize => "solarize",
            Sharpness => "sharpness",
            Rotate => "rotate",
            ShearX => "shear_x",
            ShearY => "shear_y",
            TranslateX => "translate_x",
            TranslateY => "translate_y",
            RandomErase => "random_erase",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown transform `{s}`"))
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("{kind} magnitude {magnitude} outside its range {range:?}")]
pub struct MagnitudeError {
    pub kind: TransformKind,
    pub magnitude: f64,
    pub range: MagnitudeRange,
}

/// Geometry of the random-erase rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraseParams {
    /// Minimum area fraction.
    pub sl: f64,
    /// Maximum area fraction.
    pub sh: f64,
    /// Minimum aspect ratio; the maximum is `1 / r1`.
    pub r1: f64,
}

impl Default for EraseParams {
    fn default() -> Self {
        Self {
            sl: 0.02,
            sh: 0.4,
            r1: 0.3,
        }
    }
}

/// Applies `kind` at `magnitude`. Only [`TransformKind::RandomErase`] draws
/// from `rng`. Output pixels are clamped to `[0, 1]`.
pub fn apply_transform(
    kind: TransformKind,
    magnitude: f64,
    img: &GrayImage,
    rng: &mut SeededRng,
    erase: &EraseParams,
) -> Result<GrayImage, MagnitudeError> {
    let range = kind.range();
    if !range.contains(magnitude) {
        return Err(MagnitudeError { kind, magnitude, range });
    }
    use TransformKind::*;
    let on = magnitude == 1.0;
    Ok(match kind {
        Equalize if on => equalize(img),
        Invert if on => img.map(|p| 1.0 - p),
        RandomErase if on => random_erase(img, rng, erase),
        Equalize | Invert | RandomErase => img.clone(),
        Posterize => posterize(img, magnitude as u32),
        Brightness => blend(&GrayImage::zeros(img.height(), img.width()), img, magnitude),
        Contrast => {
            let mean = img.mean();
            img.map(|p| mean * (1.0 - magnitude) + p * magnitude)
        }
        Sharpness => blend(&smooth(img), img, magnitude),
        Solarize => img.map(|p| if p >= magnitude { 1.0 - p } else { p }),
        Rotate => {
            let rad = magnitude.to_radians();
            let (s, c) = (libm::sin(rad), libm::cos(rad));
            // inverse map: source = R(-θ)·(dst - centre) + centre
            warp(img, |dy, dx| (c * dy - s * dx, s * dy + c * dx))
        }
        ShearX => warp(img, |dy, dx| (dy, dx + magnitude * dy)),
        ShearY => warp(img, |dy, dx| (dy + magnitude * dx, dx)),
        TranslateX => {
            let shift = magnitude * img.width() as f64;
            warp(img, |dy, dx| (dy, dx - shift))
        }
        TranslateY => {
            let shift = magnitude * img.height() as f64;
            warp(img, |dy, dx| (dy - shift, dx))
        }
    })
}

/// `degenerate·(1−m) + img·m`.
fn blend(degenerate: &GrayImage, img: &GrayImage, m: f64) -> GrayImage {
    let px = degenerate
        .pixels()
        .iter()
        .zip(img.pixels())
        .map(|(&d, &p)| d * (1.0 - m) + p * m)
        .collect();
    GrayImage::from_clamped(img.height(), img.width(), px)
}

/// 3×3 box blur of interior pixels; the one-pixel border is left as is.
fn smooth(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let mut px = img.pixels().to_vec();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut acc = 0.0;
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    acc += img.get(yy, xx);
                }
            }
            px[y * w + x] = acc / 9.0;
        }
    }
    GrayImage::from_clamped(h, w, px)
}

/// Histogram equalization over 256 bins. Constant images are returned
/// unchanged.
fn equalize(img: &GrayImage) -> GrayImage {
    let q = img.to_u8();
    let mut hist = [0usize; 256];
    for &v in &q {
        hist[v as usize] += 1;
    }
    let n = q.len();
    let mut cdf = [0usize; 256];
    let mut run = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        run += h;
        *c = run;
    }
    let cdf_min = cdf[q.iter().copied().min().unwrap_or(0) as usize];
    if n == cdf_min {
        return img.clone();
    }
    let denom = (n - cdf_min) as f64;
    let lut: Vec<f64> = cdf
        .iter()
        .map(|&c| (c.saturating_sub(cdf_min) as f64 / denom * 255.0).round() / 255.0)
        .collect();
    GrayImage::from_clamped(img.height(), img.width(), q.iter().map(|&v| lut[v as usize]).collect())
}

/// Keeps the top `bits` bits of the 8-bit quantized intensity.
fn posterize(img: &GrayImage, bits: u32) -> GrayImage {
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    let px = img
        .pixels()
        .iter()
        .map(|&p| f64::from(quantize8(p) & mask) / 255.0)
        .collect();
    GrayImage::from_clamped(img.height(), img.width(), px)
}

/// Inverse-mapped affine warp about the image centre. `map(dy, dx)` takes a
/// destination offset from the centre to a source offset. Out-of-bounds taps
/// read 0.
fn warp(img: &GrayImage, map: impl Fn(f64, f64) -> (f64, f64)) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64 - cy, x as f64 - cx);
            px.push(img.sample_bilinear(sy + cy, sx + cx));
        }
    }
    GrayImage::from_clamped(h, w, px)
}

/// Fills a random rectangle with uniform noise. The rectangle covers an area
/// fraction in `[sl, sh]` with aspect ratio in `[r1, 1/r1]`; up to 100
/// placements are tried before giving up.
fn random_erase(img: &GrayImage, rng: &mut SeededRng, p: &EraseParams) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.uniform(p.sl, p.sh) * area;
        let ratio = rng.uniform(p.r1, 1.0 / p.r1);
        let eh = libm::round(libm::sqrt(target * ratio)) as usize;
        let ew = libm::round(libm::sqrt(target / ratio)) as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.below((h - eh + 1) as u64) as usize;
        let left = rng.below((w - ew + 1) as u64) as usize;
        let mut px = img.pixels().to_vec();
        for y in top..top + eh {
            for x in left..left + ew {
                px[y * w + x] = rng.next_f64();
            }
        }
        return GrayImage::from_clamped(h, w, px);
    }
    img.clone()
}
