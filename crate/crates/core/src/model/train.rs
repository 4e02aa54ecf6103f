//! Supervised training of the reference classifiers.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::feedforward::{Dense, FeedForward};
use crate::error::{invalid, Error, Result};
use crate::image::Dataset;
use crate::optim::Adam;
use crate::rng::substream;
use crate::tape::{Matrix, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Initial softmax temperature of the dual encoder.
    pub temperature_init: f64,
    /// Joint embedding width of the dual encoder.
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, learning_rate: 1e-3, seed: 0, temperature_init: 10.0, embed_dim: 32 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return Err(invalid("temperature_init must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(invalid("embed_dim must be positive"));
        }
        Ok(())
    }
}

/// Reference classifier architectures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    Linear { pool: usize },
    Mlp { hidden: Vec<usize>, pool: usize },
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Mlp { hidden: vec![64], pool: 2 }
    }
}

/// Trains a classifier with Adam on mean cross-entropy.
///
/// Parameters are kept at `f32` precision so a model saved to a snapshot and
/// loaded back is identical to the one returned here.
pub fn train_classifier(dataset: &Dataset, arch: &Arch, config: &TrainConfig) -> Result<FeedForward> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    dataset.validate()?;
    let shape = dataset.input_shape().expect("non-empty");
    let classes = dataset.num_classes();
    let (pool, widths) = match arch {
        Arch::Linear { pool } => (*pool, vec![classes]),
        Arch::Mlp { hidden, pool } => {
            let mut w = hidden.clone();
            w.push(classes);
            (*pool, w)
        }
    };
    let mut init_rng = substream(config.seed, "classifier-init", 0);
    let mut model = FeedForward::init(shape, pool, &widths, &mut init_rng)?.quantized();
    if config.epochs == 0 {
        return Ok(model);
    }

    let mut layers: Vec<Dense> = model.layers().to_vec();
    let mut opt = {
        let shapes: Vec<&Matrix> = layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        Adam::new(config.learning_rate, &shapes)
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut substream(config.seed, "classifier-shuffle", epoch as u64));
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let x = tape.leaf(batch_matrix(dataset, chunk));
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.examples[i].label).collect();
            let current = model.with_layers(layers.clone())?;
            let vars = current.leaves(&mut tape);
            let logits = current.record(&mut tape, x, &vars);
            let loss = tape.cross_entropy(logits, labels);
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}, batch {b}")));
            }
            let mut grads = tape.backward(loss);
            let g: Vec<Matrix> = vars.iter().flat_map(|v| [grads.take(v.weight, &tape), grads.take(v.bias, &tape)]).collect();
            let mut params: Vec<&mut Matrix> = layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
            opt.update(&mut params, &g);
        }
        model = model.with_layers(layers.clone())?;
    }
    Ok(model.quantized())
}

pub(crate) fn batch_matrix(dataset: &Dataset, indices: &[usize]) -> Matrix {
    let d = dataset.examples[indices[0]].image.data().len();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(dataset.examples[i].image.data());
    }
    Matrix::from_vec(indices.len(), d, data)
}
