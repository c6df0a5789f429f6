//! Feature extractor, classifier and domain discriminator.
//!
//! All three networks store their weights in one shared [`ParamSet`] under
//! the prefixes `f.`, `g.` and `d.`; each forward pass reads them through a
//! [`Bound`] set of tape handles.

use serde::{Deserialize, Serialize};

use crate::autograd::{AutogradError, Bound, Conv2dSpec, ParamSet, Tape, Tensor, Var};
use crate::image::GrayImage;
use crate::rng::SeededRng;

/// Shape knobs for the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub feature_dim: usize,
    /// Width of the optional hidden layer in G; 0 means a single affine map.
    pub classifier_hidden: usize,
    pub disc_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 10,
            conv1_channels: 8,
            conv2_channels: 16,
            feature_dim: 64,
            classifier_hidden: 0,
            disc_hidden: 64,
        }
    }
}

impl Architecture {
    /// Flattened size after the two conv+pool blocks.
    pub fn flat_dim(&self) -> usize {
        self.conv2_channels * (self.height / 4) * (self.width / 4)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.height < 4 || self.width < 4 {
            return Err(format!("input {}×{} is smaller than 4×4", self.height, self.width));
        }
        if self.classes < 2 {
            return Err(format!("need at least 2 classes, got {}", self.classes));
        }
        for (name, v) in [
            ("conv1_channels", self.conv1_channels),
            ("conv2_channels", self.conv2_channels),
            ("feature_dim", self.feature_dim),
            ("disc_hidden", self.disc_hidden),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn insert_affine(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) {
    let w = kaiming(&[fan_in, fan_out], fan_in, rng);
    params.insert(format!("{name}.w"), w).expect("fresh name");
    params
        .insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
        .expect("fresh name");
}

fn affine(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var, AutogradError> {
    let h = tape.matmul(x, p.get(&format!("{name}.w")))?;
    tape.add_row(h, p.get(&format!("{name}.b")))
}

/// Initializes every parameter of F, G and D from `rng`: fan-in scaled
/// normal weights and zero biases.
pub fn init_params(arch: &Architecture, rng: &mut SeededRng) -> ParamSet {
    let mut params = ParamSet::new();
    let (c1, c2) = (arch.conv1_channels, arch.conv2_channels);
    params
        .insert("f.conv1.w", kaiming(&[c1, 1, 3, 3], 9, rng))
        .expect("fresh name");
    params.insert("f.conv1.b", Tensor::zeros(&[c1])).expect("fresh name");
    params
        .insert("f.conv2.w", kaiming(&[c2, c1, 3, 3], 9 * c1, rng))
        .expect("fresh name");
    params.insert("f.conv2.b", Tensor::zeros(&[c2])).expect("fresh name");
    insert_affine(&mut params, "f.fc", arch.flat_dim(), arch.feature_dim, rng);
    if arch.classifier_hidden > 0 {
        insert_affine(&mut params, "g.hidden", arch.feature_dim, arch.classifier_hidden, rng);
        insert_affine(&mut params, "g.out", arch.classifier_hidden, arch.classes, rng);
    } else {
        insert_affine(&mut params, "g.out", arch.feature_dim, arch.classes, rng);
    }
    insert_affine(&mut params, "d.fc1", arch.feature_dim, arch.disc_hidden, rng);
    insert_affine(&mut params, "d.fc2", arch.disc_hidden, arch.disc_hidden, rng);
    insert_affine(&mut params, "d.out", arch.disc_hidden, 1, rng);
    params
}

/// Stacks images into an `N × 1 × H × W` tensor.
pub fn images_to_tensor(images: &[&GrayImage], height: usize, width: usize) -> Result<Tensor, AutogradError> {
    let mut data = Vec::with_capacity(images.len() * height * width);
    for img in images {
        if img.height() != height || img.width() != width {
            return Err(AutogradError::ShapeMismatch {
                op: "extract",
                lhs: vec![height, width],
                rhs: vec![img.height(), img.width()],
            });
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), 1, height, width], data)
}

/// F: two conv(3×3, pad 1)+relu+maxpool(2) blocks, then affine+relu to `d`.
pub fn extract(tape: &mut Tape, p: &Bound, arch: &Architecture, input: Var) -> Result<Var, AutogradError> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != arch.height || shape[3] != arch.width {
        return Err(AutogradError::ShapeMismatch {
            op: "extract",
            lhs: vec![1, arch.height, arch.width],
            rhs: shape,
        });
    }
    let n = shape[0];
    let spec = Conv2dSpec { stride: 1, pad: 1 };
    let h = tape.conv2d(input, p.get("f.conv1.w"), p.get("f.conv1.b"), spec)?;
    let h = tape.relu(h);
    let h = tape.max_pool(h, 2)?;
    let h = tape.conv2d(h, p.get("f.conv2.w"), p.get("f.conv2.b"), spec)?;
    let h = tape.relu(h);
    let h = tape.max_pool(h, 2)?;
    let h = tape.reshape(h, &[n, arch.flat_dim()])?;
    let h = affine(tape, p, "f.fc", h)?;
    Ok(tape.relu(h))
}

/// G: class logits (`B × C`) from features.
pub fn logits(tape: &mut Tape, p: &Bound, arch: &Architecture, features: Var) -> Result<Var, AutogradError> {
    check_features("classify", tape, arch, features)?;
    if arch.classifier_hidden > 0 {
        let h = affine(tape, p, "g.hidden", features)?;
        let h = tape.relu(h);
        affine(tape, p, "g.out", h)
    } else {
        affine(tape, p, "g.out", features)
    }
}

/// Row-stochastic class predictions.
pub fn classify(tape: &mut Tape, p: &Bound, arch: &Architecture, features: Var) -> Result<Var, AutogradError> {
    let z = logits(tape, p, arch, features)?;
    tape.row_softmax(z)
}

/// D: pre-sigmoid domain scores (`B × 1`). With `reverse`, a gradient
/// reversal node sits between the features and D.
pub fn disc_logits(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    features: Var,
    reverse: bool,
) -> Result<Var, AutogradError> {
    check_features("discriminate", tape, arch, features)?;
    let x = if reverse { tape.grad_reverse(features) } else { features };
    let h = affine(tape, p, "d.fc1", x)?;
    let h = tape.relu(h);
    let h = affine(tape, p, "d.fc2", h)?;
    let h = tape.relu(h);
    affine(tape, p, "d.out", h)
}

/// Probability that each feature row comes from the source domain.
pub fn discriminate(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    features: Var,
    reverse: bool,
) -> Result<Var, AutogradError> {
    let z = disc_logits(tape, p, arch, features, reverse)?;
    Ok(tape.sigmoid(z))
}

fn check_features(op: &'static str, tape: &Tape, arch: &Architecture, features: Var) -> Result<(), AutogradError> {
    let shape = tape.value(features).shape();
    if shape.len() != 2 || shape[1] != arch.feature_dim {
        return Err(AutogradError::ShapeMismatch {
            op,
            lhs: vec![arch.feature_dim],
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}
