//! Weak and strong augmentation of grayscale glyphs.
//!
//! The weak view is a horizontal flip with probability one half. The strong
//! view applies `ops_per_image` distinct transforms drawn from the pool, each
//! at a uniformly drawn magnitude, followed by a random erase with
//! probability `erase_prob`.

mod transforms;

use serde::{Deserialize, Serialize};

pub use crate::image::GrayImage;
pub use crate::rng::SeededRng;
pub use transforms::{apply_transform, EraseParams, MagnitudeError, MagnitudeRange, TransformKind};

/// Horizontal flip iff `draw < 0.5`.
pub fn weak_augment_with_draw(img: &GrayImage, draw: f64) -> GrayImage {
    if draw < 0.5 {
        img.flip_horizontal()
    } else {
        img.clone()
    }
}

pub fn weak_augment(img: &GrayImage, rng: &mut SeededRng) -> GrayImage {
    let draw = rng.next_f64();
    weak_augment_with_draw(img, draw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongPolicy {
    /// Transforms eligible for the magnitude stage.
    pub pool: Vec<TransformKind>,
    pub ops_per_image: usize,
    pub erase: EraseParams,
    pub erase_prob: f64,
}

impl Default for StrongPolicy {
    fn default() -> Self {
        use TransformKind::*;
        Self {
            pool: vec![
                Equalize, Invert, Posterize, Brightness, Contrast, Solarize, Sharpness, Rotate, ShearX, ShearY,
                TranslateX, TranslateY,
            ],
            ops_per_image: 2,
            erase: EraseParams::default(),
            erase_prob: 0.5,
        }
    }
}

/// The concrete draws behind one strong augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub ops: Vec<(TransformKind, f64)>,
    pub erase: bool,
}

impl StrongPolicy {
    pub fn sample_plan(&self, rng: &mut SeededRng) -> AugmentPlan {
        let n = self.ops_per_image.min(self.pool.len());
        let ops = rng
            .sample_distinct(self.pool.len(), n)
            .into_iter()
            .map(|i| {
                let kind = self.pool[i];
                (kind, kind.range().sample(rng))
            })
            .collect();
        let erase = rng.bernoulli(self.erase_prob);
        AugmentPlan { ops, erase }
    }

    /// Applies the plan's ops in order, then the erase if drawn. `rng` feeds
    /// the erase rectangle.
    pub fn apply_plan(
        &self,
        img: &GrayImage,
        plan: &AugmentPlan,
        rng: &mut SeededRng,
    ) -> Result<GrayImage, MagnitudeError> {
        let mut out = img.clone();
        for &(kind, m) in &plan.ops {
            out = apply_transform(kind, m, &out, rng, &self.erase)?;
        }
        if plan.erase {
            out = apply_transform(TransformKind::RandomErase, 1.0, &out, rng, &self.erase)?;
        }
        Ok(out)
    }
}

pub fn strong_augment(img: &GrayImage, policy: &StrongPolicy, rng: &mut SeededRng) -> GrayImage {
    let plan = policy.sample_plan(rng);
    policy
        .apply_plan(img, &plan, rng)
        .expect("sampled magnitudes lie inside their ranges")
}
