use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{Image, InputShape};
use crate::model::dual::normalized;
use crate::model::ImageEmbedder;
use crate::rng::substream;

/// Seeded Gaussian projection of centred pixels: a model-free embedder for
/// spotting near-identical images.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    shape: InputShape,
    dim: usize,
    seed: u64,
    /// `dim` rows of `shape.len()` weights.
    weights: Vec<f64>,
}

impl RandomProjectionEmbedder {
    pub fn new(shape: InputShape, dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "random-projection", 0);
        let weights = (0..dim * shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { shape, dim, seed, weights }
    }
}

impl ImageEmbedder for RandomProjectionEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        if image.shape() != self.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.to_string(), got: image.shape().to_string() });
        }
        let x = image.data();
        let out = self.weights.chunks_exact(x.len()).map(|w| w.iter().zip(x).map(|(a, v)| a * (v - 0.5)).sum()).collect();
        Ok(normalized(out))
    }

    fn embedder_id(&self) -> String {
        format!("random-projection:{}x{}:{}", self.shape, self.dim, self.seed)
    }
}
