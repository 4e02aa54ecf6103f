//! Classifier and dual-encoder abstractions, the built-in reference models,
//! zero-shot classifier synthesis and the external-model bridge client.

pub mod bridge;
pub mod dual;
pub mod feedforward;
pub mod snapshot;
pub mod tokenizer;
pub mod train;
pub mod zeroshot;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, InputShape};

pub use dual::{train_dual_encoder, DualEncoder};
pub use feedforward::{Dense, FeedForward};
pub use tokenizer::Tokenizer;
pub use train::{train_classifier, Arch, TrainConfig};
pub use zeroshot::{synthesize_zero_shot_classifier, ZeroShotClassifier};

/// Which way an attack moves along the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Ascent on the cross-entropy of the given label (untargeted attacks).
    Maximize,
    /// Descent on the cross-entropy of the given label (targeted attacks).
    Minimize,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Maximize => "maximize",
            Direction::Minimize => "minimize",
        }
    }
}

/// A model that scores images into `C` class logits.
///
/// Implementations must be pure: identical inputs under the same snapshot give
/// identical logits. Models are shared read-only across worker threads.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_shape(&self) -> InputShape;

    /// Raw logits; callers normally go through [`forward_logits`].
    fn logits(&self, image: &Image) -> Result<Vec<f64>>;

    fn has_input_gradient(&self) -> bool {
        false
    }

    /// Gradient of the cross-entropy of `label` with respect to the image.
    fn loss_gradient(&self, _image: &Image, _label: usize) -> Result<Vec<f64>> {
        Err(Error::Unsupported(format!("model {} has no input gradient", self.snapshot_id())))
    }

    /// Deterministic identifier of the parameters in use.
    fn snapshot_id(&self) -> String;
}

/// Produces unit-norm image embeddings.
pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;

    fn embedder_id(&self) -> String;
}

fn check_shape(model: &dyn Classifier, image: &Image) -> Result<()> {
    let want = model.input_shape();
    if image.shape() != want {
        return Err(Error::ShapeMismatch { expected: want.to_string(), got: image.shape().to_string() });
    }
    Ok(())
}

/// Logits with shape and finiteness checks.
pub fn forward_logits(model: &dyn Classifier, image: &Image) -> Result<Vec<f64>> {
    check_shape(model, image)?;
    let logits = model.logits(image)?;
    if logits.len() != model.num_classes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} logits", model.num_classes()),
            got: format!("{} logits", logits.len()),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits from {}", model.snapshot_id())));
    }
    Ok(logits)
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &dyn Classifier, image: &Image) -> Result<usize> {
    Ok(argmax(&forward_logits(model, image)?))
}

/// Gradient of the cross-entropy of `label`, oriented by `direction`:
/// `Maximize` returns the ascent direction, `Minimize` the descent direction.
pub fn input_gradient(model: &dyn Classifier, image: &Image, label: usize, direction: Direction) -> Result<Vec<f64>> {
    if !model.has_input_gradient() {
        return Err(Error::Unsupported(format!("model {} has no input gradient", model.snapshot_id())));
    }
    check_shape(model, image)?;
    if label >= model.num_classes() {
        return Err(crate::error::invalid(format!("label {label} >= class count {}", model.num_classes())));
    }
    let mut grad = model.loss_gradient(image, label)?;
    if grad.len() != image.data().len() {
        return Err(Error::ShapeMismatch { expected: format!("{} gradient values", image.data().len()), got: grad.len().to_string() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("input gradient from {}", model.snapshot_id())));
    }
    if direction == Direction::Minimize {
        grad.iter_mut().for_each(|g| *g = -*g);
    }
    Ok(grad)
}

/// A model whose logits ignore the input. Useful as a degenerate reference.
#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    pub shape: InputShape,
    pub logits: Vec<f64>,
}

impl Classifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.logits.len()
    }

    fn input_shape(&self) -> InputShape {
        self.shape
    }

    fn logits(&self, _image: &Image) -> Result<Vec<f64>> {
        Ok(self.logits.clone())
    }

    fn has_input_gradient(&self) -> bool {
        true
    }

    fn loss_gradient(&self, _image: &Image, _label: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.shape.len()])
    }

    fn snapshot_id(&self) -> String {
        format!("constant{:?}", self.logits)
    }
}
