use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::augment::StrongPolicy;
use crate::data::{Corruption, GlyphCounts, GlyphSpec};
use crate::nets::Architecture;

/// Every knob of a training run. Serialized as a flat TOML table whose keys
/// are the field names; missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the discriminative transition loss.
    pub lambda: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Initial learning rate.
    pub lr: f64,
    pub t_max: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate every this many iterations (and at the end).
    pub eval_interval: usize,

    pub use_adv: bool,
    pub use_lu: bool,
    pub use_ld: bool,
    /// Consistency loss on the strong view; otherwise on the weak view.
    pub strong_in_lu: bool,
    /// Correlation of weak with strong predictions; otherwise weak with weak.
    pub strong_in_ld: bool,

    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub feature_dim: usize,
    pub classifier_hidden: usize,
    pub disc_hidden: usize,

    pub augment_ops: usize,
    pub erase_prob: f64,

    /// Directory written by `gen-data`; when absent the glyph benchmark is
    /// generated in memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub classes: usize,
    pub image_size: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub test_per_class: usize,
    pub glyph_strokes: usize,
    pub target_jitter: f64,
    pub erosion_radius: f64,
    pub speckle_density: f64,
    pub contrast_min: f64,
    pub rotation_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        let glyph = GlyphSpec::default();
        let counts = GlyphCounts::default();
        let policy = StrongPolicy::default();
        Self {
            lambda: 1.0,
            tau: 0.95,
            lr: 0.001,
            t_max: 5000,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
            eval_interval: 500,
            use_adv: true,
            use_lu: true,
            use_ld: true,
            strong_in_lu: true,
            strong_in_ld: true,
            conv1_channels: arch.conv1_channels,
            conv2_channels: arch.conv2_channels,
            feature_dim: arch.feature_dim,
            classifier_hidden: arch.classifier_hidden,
            disc_hidden: arch.disc_hidden,
            augment_ops: policy.ops_per_image,
            erase_prob: policy.erase_prob,
            data_dir: None,
            data_seed: 0,
            classes: glyph.classes,
            image_size: glyph.size,
            source_per_class: counts.source_train,
            target_per_class: counts.target_train,
            test_per_class: counts.test,
            glyph_strokes: glyph.strokes,
            target_jitter: glyph.target_style.jitter,
            erosion_radius: glyph.corruption.erosion_radius,
            speckle_density: glyph.corruption.speckle_density,
            contrast_min: glyph.corruption.contrast_min,
            rotation_jitter: glyph.corruption.rotation,
        }
    }
}

impl TrainConfig {
    /// L_cls only.
    pub fn source_only() -> Self {
        Self::default().with_losses(false, false, false)
    }

    pub fn with_losses(self, use_adv: bool, use_lu: bool, use_ld: bool) -> Self {
        Self {
            use_adv,
            use_lu,
            use_ld,
            ..self
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`. Values are parsed as TOML scalars, falling back
    /// to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<(), HarnessError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let parsed = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut table = toml::Table::try_from(&*self).map_err(|e| HarnessError::Config(e.to_string()))?;
        table.insert(key.to_string(), parsed);
        let next: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("override `{key}`: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return fail("batch_size and eval_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return fail(format!("erase_prob must lie in [0, 1], got {}", self.erase_prob));
        }
        self.architecture().validate().map_err(HarnessError::Config)?;
        self.glyph_spec()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            height: self.image_size,
            width: self.image_size,
            classes: self.classes,
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            feature_dim: self.feature_dim,
            classifier_hidden: self.classifier_hidden,
            disc_hidden: self.disc_hidden,
        }
    }

    pub fn policy(&self) -> StrongPolicy {
        StrongPolicy {
            ops_per_image: self.augment_ops,
            erase_prob: self.erase_prob,
            ..StrongPolicy::default()
        }
    }

    pub fn glyph_spec(&self) -> GlyphSpec {
        let base = GlyphSpec::default();
        GlyphSpec {
            classes: self.classes,
            strokes: self.glyph_strokes,
            size: self.image_size,
            target_style: crate::data::Style {
                jitter: self.target_jitter,
                ..base.target_style
            },
            corruption: Corruption {
                erosion_radius: self.erosion_radius,
                speckle_density: self.speckle_density,
                contrast_min: self.contrast_min,
                rotation: self.rotation_jitter,
            },
            ..base
        }
    }

    pub fn glyph_counts(&self) -> GlyphCounts {
        GlyphCounts {
            source_train: self.source_per_class,
            target_train: self.target_per_class,
            test: self.test_per_class,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_validation() {
        let mut cfg = TrainConfig::default();
        cfg.set("lambda=0.5").unwrap();
        cfg.set("use_ld = false").unwrap();
        cfg.set("data_dir=/tmp/x").unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert!(!cfg.use_ld);
        assert_eq!(cfg.data_dir.as_deref(), Some(Path::new("/tmp/x")));
        assert!(cfg.set("tau=1.0").is_err());
        assert!(cfg.set("nonsense=1").is_err());
        assert!(TrainConfig::from_toml_str("lr = -1.0").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
    }
}
