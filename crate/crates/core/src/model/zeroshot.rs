//! Zero-shot linear classifiers synthesized from class prompts.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::dual::{normalized, DualEncoder};
use super::{Classifier, ImageEmbedder};
use crate::error::{invalid, Result};
use crate::image::{Image, InputShape};
use crate::tape::{dot, Matrix, Tape};

/// Placeholder replaced by the class name in prompt templates.
pub const CLASS_PLACEHOLDER: &str = "{}";

/// Prompt templates used for manual ensembling on the toy corpus.
pub const DEFAULT_TEMPLATES: &[&str] = &[
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
    "a photo of the {}",
    "a drawing of a {}",
    "a small {}",
    "a big {}",
    "a rendering of a {}",
];

/// Expands every template once per class name.
pub fn expand_templates(templates: &[&str], class_names: &[String]) -> Vec<Vec<String>> {
    class_names
        .iter()
        .map(|name| {
            templates
                .iter()
                .map(|t| if t.contains(CLASS_PLACEHOLDER) { t.replace(CLASS_PLACEHOLDER, name) } else { format!("{t} {name}") })
                .collect()
        })
        .collect()
}

/// Cosine-similarity classifier over a dual encoder's image embeddings.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier {
    encoder: Arc<DualEncoder>,
    class_embeddings: Matrix,
    id: String,
}

impl ZeroShotClassifier {
    /// Uses the given class embedding rows as-is (no renormalization).
    pub fn from_class_embeddings(encoder: Arc<DualEncoder>, class_embeddings: Matrix) -> Result<Self> {
        if class_embeddings.rows == 0 || class_embeddings.cols != encoder.embed_dim() {
            return Err(invalid(format!(
                "class embeddings must be C x {}, got {} x {}",
                encoder.embed_dim(),
                class_embeddings.rows,
                class_embeddings.cols
            )));
        }
        let mut hasher = Sha256::new();
        hasher.update(encoder.id().as_bytes());
        for v in &class_embeddings.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
        let id = format!("zeroshot:{}", hex::encode(&hasher.finalize()[..8]));
        Ok(Self { encoder, class_embeddings, id })
    }

    pub fn encoder(&self) -> &Arc<DualEncoder> {
        &self.encoder
    }

    pub fn class_embeddings(&self) -> &Matrix {
        &self.class_embeddings
    }
}

/// Embeds every prompt of each class, averages the embeddings, renormalizes,
/// and returns a classifier whose logits are `τ · cos(image, class)`.
pub fn synthesize_zero_shot_classifier(encoder: Arc<DualEncoder>, class_prompts: &[Vec<String>]) -> Result<ZeroShotClassifier> {
    if class_prompts.is_empty() {
        return Err(invalid("no classes given"));
    }
    let d = encoder.embed_dim();
    let mut rows = Vec::with_capacity(class_prompts.len() * d);
    for (c, prompts) in class_prompts.iter().enumerate() {
        if prompts.is_empty() {
            return Err(invalid(format!("class {c} has no prompts")));
        }
        let mut mean = vec![0.0; d];
        for p in prompts {
            for (m, v) in mean.iter_mut().zip(encoder.embed_text(p)) {
                *m += v;
            }
        }
        let inv = 1.0 / prompts.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        rows.extend(normalized(mean));
    }
    let m = Matrix::from_vec(class_prompts.len(), d, rows);
    ZeroShotClassifier::from_class_embeddings(encoder, m)
}

impl Classifier for ZeroShotClassifier {
    fn num_classes(&self) -> usize {
        self.class_embeddings.rows
    }

    fn input_shape(&self) -> InputShape {
        self.encoder.input_shape()
    }

    fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        let e = self.encoder.embed_image(image)?;
        let t = self.encoder.temperature();
        Ok((0..self.class_embeddings.rows).map(|c| t * dot(&e, self.class_embeddings.row(c))).collect())
    }

    fn has_input_gradient(&self) -> bool {
        true
    }

    fn loss_gradient(&self, image: &Image, label: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(image.data().to_vec()));
        let trunk = self.encoder.image_trunk().leaves(&mut tape);
        let classes = tape.leaf(self.class_embeddings.clone());
        let lt = tape.leaf(Matrix::scalar(self.encoder.log_temperature()));
        let img = self.encoder.record_images(&mut tape, x, &trunk);
        let sims = tape.matmul_t(img, classes);
        let logits = tape.scale_exp(sims, lt);
        let loss = tape.cross_entropy(logits, vec![label]);
        let mut grads = tape.backward(loss);
        Ok(grads.take(x, &tape).data)
    }

    fn snapshot_id(&self) -> String {
        self.id.clone()
    }
}

impl ImageEmbedder for ZeroShotClassifier {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        self.encoder.embed_image(image)
    }

    fn embedder_id(&self) -> String {
        self.encoder.embedder_id()
    }
}
