//! Procedural two-domain glyph benchmark.
//!
//! Each class is a fixed chain of quadratic Bézier strokes drawn from a
//! per-class seed. Samples re-render the class strokes under a per-sample
//! style (control-point jitter, scale, shift, stroke width). Target samples
//! use a looser style and are then corrupted by rotation, erosion, contrast
//! loss and speckle. Both domains mirror glyphs at random, so horizontal
//! flips never change a label.

use serde::{Deserialize, Serialize};

use super::{Benchmark, DataError, Dataset, Domain, Split};
use crate::image::GrayImage;
use crate::rng::SeededRng;

/// Per-sample rendering variation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    /// Std of control-point displacement, as a fraction of the side.
    pub jitter: f64,
    /// Uniform scale factor range is `1 ± scale`.
    pub scale: f64,
    /// Uniform shift range is `± shift` of the side, per axis.
    pub shift: f64,
    /// Stroke width range in pixels.
    pub width: (f64, f64),
}

/// Target-domain degradations, all disabled at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Radius of the grayscale erosion disk in pixels.
    pub erosion_radius: f64,
    /// Fraction of pixels replaced by bright speckle.
    pub speckle_density: f64,
    /// Ink contrast is drawn from `[contrast_min, 1]`; the freed headroom
    /// raises the background.
    pub contrast_min: f64,
    /// Rotation drawn uniformly from `± rotation` degrees.
    pub rotation: f64,
}

impl Corruption {
    pub const NONE: Corruption = Corruption {
        erosion_radius: 0.0,
        speckle_density: 0.0,
        contrast_min: 1.0,
        rotation: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub classes: usize,
    pub strokes: usize,
    pub size: usize,
    /// Seed of the class prototypes; shared by both domains.
    pub class_seed: u64,
    pub mirror: bool,
    pub source_style: Style,
    pub target_style: Style,
    pub corruption: Corruption,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            strokes: 3,
            size: 32,
            class_seed: 2024,
            mirror: true,
            source_style: Style {
                jitter: 0.02,
                scale: 0.08,
                shift: 0.04,
                width: (1.8, 2.6),
            },
            target_style: Style {
                jitter: 0.05,
                scale: 0.12,
                shift: 0.06,
                width: (2.2, 3.4),
            },
            corruption: Corruption {
                erosion_radius: 1.0,
                speckle_density: 0.03,
                contrast_min: 0.35,
                rotation: 20.0,
            },
        }
    }
}

impl GlyphSpec {
    /// Spec whose target domain is drawn from the source distribution.
    pub fn without_shift(&self) -> Self {
        Self {
            target_style: self.source_style,
            corruption: Corruption::NONE,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::Spec(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.strokes == 0 {
            return Err(DataError::Spec("glyphs need at least one stroke".into()));
        }
        if self.size < 4 {
            return Err(DataError::Spec(format!("raster side {} is below 4", self.size)));
        }
        let c = &self.corruption;
        if !(0.0..=1.0).contains(&c.contrast_min) || !(0.0..=1.0).contains(&c.speckle_density) {
            return Err(DataError::Spec(
                "contrast_min and speckle_density must lie in [0, 1]".into(),
            ));
        }
        for s in [&self.source_style, &self.target_style] {
            if s.width.0 <= 0.0 || s.width.1 < s.width.0 {
                return Err(DataError::Spec(format!("bad stroke width range {:?}", s.width)));
            }
        }
        Ok(())
    }

    /// Control points (unit square) of every stroke of `class`.
    pub fn prototype(&self, class: usize) -> Vec<[(f64, f64); 3]> {
        let mut rng = SeededRng::new(self.class_seed).fork(class as u64);
        let mut point = || (rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8));
        let mut strokes = Vec::with_capacity(self.strokes);
        let mut start = point();
        for _ in 0..self.strokes {
            let ctrl = point();
            let end = point();
            strokes.push([start, ctrl, end]);
            start = end;
        }
        strokes
    }
}

/// Images per class for each split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphCounts {
    pub source_train: usize,
    pub target_train: usize,
    pub test: usize,
}

impl Default for GlyphCounts {
    fn default() -> Self {
        Self {
            source_train: 200,
            target_train: 200,
            test: 50,
        }
    }
}

const SEGMENTS: usize = 16;

fn bezier(p: &[(f64, f64); 3], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * p[0].0 + 2.0 * u * t * p[1].0 + t * t * p[2].0,
        u * u * p[0].1 + 2.0 * u * t * p[1].1 + t * t * p[2].1,
    )
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    libm::sqrt(qx * qx + qy * qy)
}

/// Anti-aliased rendering of strokes given in pixel coordinates.
fn rasterize(strokes: &[[(f64, f64); 3]], size: usize, width: f64) -> Vec<f64> {
    let half = width / 2.0;
    let mut polylines = Vec::with_capacity(strokes.len());
    for s in strokes {
        let pts: Vec<(f64, f64)> = (0..=SEGMENTS).map(|k| bezier(s, k as f64 / SEGMENTS as f64)).collect();
        polylines.push(pts);
    }
    let mut px = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut d = f64::INFINITY;
            for pts in &polylines {
                for w in pts.windows(2) {
                    d = d.min(segment_distance(cx, cy, w[0], w[1]));
                }
            }
            px[y * size + x] = (half + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    px
}

/// Renders one sample of `class` under `style`, rotated by `rotation`
/// degrees and optionally mirrored.
pub fn render_glyph(spec: &GlyphSpec, class: usize, style: &Style, rotation: f64, rng: &mut SeededRng) -> GrayImage {
    let n = spec.size as f64;
    let scale = 1.0 + rng.uniform(-style.scale, style.scale);
    let shift = (
        rng.uniform(-style.shift, style.shift),
        rng.uniform(-style.shift, style.shift),
    );
    let width = rng.uniform(style.width.0, style.width.1);
    let mirror = spec.mirror && rng.bernoulli(0.5);
    let rad = rotation.to_radians();
    let (s, c) = (libm::sin(rad), libm::cos(rad));
    let strokes: Vec<[(f64, f64); 3]> = spec
        .prototype(class)
        .into_iter()
        .map(|stroke| {
            stroke.map(|(x, y)| {
                let x = x + style.jitter * rng.normal();
                let y = y + style.jitter * rng.normal();
                let (x, y) = (if mirror { 1.0 - x } else { x } - 0.5, y - 0.5);
                let (x, y) = (scale * (c * x - s * y), scale * (s * x + c * y));
                ((x + 0.5 + shift.0) * n, (y + 0.5 + shift.1) * n)
            })
        })
        .collect();
    GrayImage::from_clamped(spec.size, spec.size, rasterize(&strokes, spec.size, width))
}

fn erode(img: &GrayImage, radius: f64) -> GrayImage {
    let r = radius.floor() as isize;
    if r <= 0 {
        return img.clone();
    }
    let (h, w) = (img.height() as isize, img.width() as isize);
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    let mut px = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                let v = if yy < 0 || xx < 0 || yy >= h || xx >= w {
                    0.0
                } else {
                    img.get(yy as usize, xx as usize)
                };
                m = m.min(v);
            }
            px.push(m);
        }
    }
    GrayImage::from_clamped(img.height(), img.width(), px)
}

fn corrupt(img: &GrayImage, c: &Corruption, rng: &mut SeededRng) -> GrayImage {
    let eroded = erode(img, c.erosion_radius);
    let contrast = rng.uniform(c.contrast_min, 1.0);
    let background = rng.uniform(0.0, 0.5 * (1.0 - contrast));
    let px = eroded
        .pixels()
        .iter()
        .map(|&p| {
            let v = background + contrast * p;
            if c.speckle_density > 0.0 && rng.bernoulli(c.speckle_density) {
                v.max(rng.uniform(0.4, 1.0))
            } else {
                v
            }
        })
        .collect();
    GrayImage::from_clamped(img.height(), img.width(), px)
}

fn build(spec: &GlyphSpec, per_class: usize, domain: Domain, split: Split, rng: &SeededRng) -> Dataset {
    let tag = match (domain, split) {
        (Domain::Source, Split::Train) => 0,
        (Domain::Source, Split::Test) => 1,
        (Domain::Target, Split::Train) => 2,
        (Domain::Target, Split::Test) => 3,
    };
    let n = per_class * spec.classes;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // interleave classes so any prefix is roughly balanced
        let class = i % spec.classes;
        let mut r = rng.fork_path(&[tag, i as u64]);
        let img = match domain {
            Domain::Source => render_glyph(spec, class, &spec.source_style, 0.0, &mut r),
            Domain::Target => {
                let c = &spec.corruption;
                let rot = if c.rotation > 0.0 {
                    r.uniform(-c.rotation, c.rotation)
                } else {
                    0.0
                };
                let clean = render_glyph(spec, class, &spec.target_style, rot, &mut r);
                corrupt(&clean, c, &mut r)
            }
        };
        images.push(img.quantized8());
        labels.push(class);
    }
    Dataset {
        images,
        labels: Some(labels),
        domain,
        split,
        classes: spec.classes,
    }
}

/// Generates all four splits deterministically from `seed`.
pub fn generate_glyph_benchmark(spec: &GlyphSpec, counts: &GlyphCounts, seed: u64) -> Result<Benchmark, DataError> {
    spec.validate()?;
    if counts.source_train == 0 || counts.target_train == 0 || counts.test == 0 {
        return Err(DataError::Spec("per-class counts must be positive".into()));
    }
    let rng = SeededRng::new(seed);
    Ok(Benchmark {
        source_train: build(spec, counts.source_train, Domain::Source, Split::Train, &rng),
        source_test: build(spec, counts.test, Domain::Source, Split::Test, &rng),
        target_train: build(spec, counts.target_train, Domain::Target, Split::Train, &rng),
        target_test: build(spec, counts.test, Domain::Target, Split::Test, &rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strokes_rejected() {
        let spec = GlyphSpec {
            strokes: 0,
            ..GlyphSpec::default()
        };
        assert!(matches!(
            generate_glyph_benchmark(&spec, &GlyphCounts::default(), 0),
            Err(DataError::Spec(_))
        ));
    }

    #[test]
    fn erosion_thins_and_zero_radius_is_identity() {
        let mut px = vec![0.0; 25];
        for y in 1..4 {
            for x in 1..4 {
                px[y * 5 + x] = 1.0;
            }
        }
        let img = GrayImage::new(5, 5, px).unwrap();
        assert_eq!(erode(&img, 0.0), img);
        let e = erode(&img, 1.0);
        assert_eq!(e.pixels().iter().filter(|&&p| p > 0.0).count(), 1);
        assert_eq!(e.get(2, 2), 1.0);
    }

    #[test]
    fn strokes_have_ink() {
        let spec = GlyphSpec::default();
        let img = render_glyph(&spec, 3, &spec.source_style, 0.0, &mut SeededRng::new(1));
        let ink = img.pixels().iter().filter(|&&p| p > 0.5).count();
        assert!(ink > 30 && ink < 600, "{ink}");
    }
}
