//! Unsupervised domain adaptation with adversarial alignment, pseudo-label
//! consistency and a class-transition discriminative loss.

pub mod augment;
pub mod autograd;
pub mod data;
pub mod harness;
pub mod image;
pub mod losses;
pub mod nets;
pub mod pseudo;
pub mod rng;
