//! Mean-pool + affine/ReLU stacks. A single layer with no pooling is the
//! linear classifier; deeper stacks are the MLP classifier and the image
//! trunk of the dual encoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::Classifier;
use crate::error::{invalid, Result};
use crate::image::{Image, InputShape};
use crate::tape::{Matrix, PoolSpec, Tape, Var};

/// Affine layer, `y = x · weight + bias` with `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols {
            return Err(invalid(format!("bias length {} != output width {}", bias.len(), weight.cols)));
        }
        Ok(Self { weight, bias: Matrix::row_vector(bias) })
    }

    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        let weight = Matrix::from_vec(inputs, outputs, (0..inputs * outputs).map(|_| normal.sample(rng)).collect());
        Self { weight, bias: Matrix::zeros(1, outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }
}

/// Parameter leaves of one layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    input: InputShape,
    pool: usize,
    layers: Vec<Dense>,
    id: String,
}

impl PartialEq for FeedForward {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.pool == other.pool && self.layers == other.layers
    }
}

impl FeedForward {
    pub fn new(input: InputShape, pool: usize, layers: Vec<Dense>) -> Result<Self> {
        if pool == 0 || input.h % pool != 0 || input.w % pool != 0 {
            return Err(invalid(format!("pool factor {pool} does not divide {input}")));
        }
        if layers.is_empty() {
            return Err(invalid("feed-forward stack needs at least one layer"));
        }
        let mut width = input.len() / (pool * pool);
        for (i, l) in layers.iter().enumerate() {
            if l.inputs() != width {
                return Err(invalid(format!("layer {i} expects {} inputs, previous width is {width}", l.inputs())));
            }
            width = l.outputs();
        }
        let mut ff = Self { input, pool, layers, id: String::new() };
        ff.id = ff.compute_id();
        Ok(ff)
    }

    /// Random initialization with the given hidden and output widths.
    pub fn init(input: InputShape, pool: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if pool == 0 || input.h % pool != 0 || input.w % pool != 0 {
            return Err(invalid(format!("pool factor {pool} does not divide {input}")));
        }
        let mut prev = input.len() / (pool * pool);
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            layers.push(Dense::init(prev, w, rng));
            prev = w;
        }
        Self::new(input, pool, layers)
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn pool_factor(&self) -> usize {
        self.pool
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn pool_spec(&self) -> Option<PoolSpec> {
        (self.pool > 1).then_some(PoolSpec {
            channels: self.input.c,
            height: self.input.h,
            width: self.input.w,
            factor: self.pool,
        })
    }

    /// Rounds every parameter to `f32`, the precision of model snapshots.
    pub fn quantized(mut self) -> Self {
        for l in &mut self.layers {
            quantize(&mut l.weight);
            quantize(&mut l.bias);
        }
        self.id = self.compute_id();
        self
    }

    pub(crate) fn with_layers(&self, layers: Vec<Dense>) -> Result<Self> {
        Self::new(self.input, self.pool, layers)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}layer{i}.weight"), &l.weight));
            out.push((format!("{prefix}layer{i}.bias"), &l.bias));
        }
        out
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<DenseVars> {
        self.layers
            .iter()
            .map(|l| DenseVars { weight: tape.leaf(l.weight.clone()), bias: tape.leaf(l.bias.clone()) })
            .collect()
    }

    /// Records the forward pass of `x` (one flattened image per row).
    pub fn record(&self, tape: &mut Tape, x: Var, vars: &[DenseVars]) -> Var {
        let mut h = match self.pool_spec() {
            Some(spec) => tape.avg_pool(x, spec),
            None => x,
        };
        let last = vars.len() - 1;
        for (i, v) in vars.iter().enumerate() {
            let z = tape.matmul(h, v.weight);
            h = tape.add_row(z, v.bias);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Plain forward pass of one flattened input.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut h = match self.pool_spec() {
            Some(spec) => spec.apply(input),
            None => input.to_vec(),
        };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Matrix::row_vector(h).matmul(&l.weight).data;
            for (v, b) in z.iter_mut().zip(&l.bias.data) {
                *v += b;
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        h
    }

    fn compute_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("ff:{}:{}", self.input, self.pool).as_bytes());
        for l in &self.layers {
            for m in [&l.weight, &l.bias] {
                hasher.update((m.rows as u64).to_le_bytes());
                hasher.update((m.cols as u64).to_le_bytes());
                for v in &m.data {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

pub(crate) fn quantize(m: &mut Matrix) {
    m.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

impl Classifier for FeedForward {
    fn num_classes(&self) -> usize {
        self.output_width()
    }

    fn input_shape(&self) -> InputShape {
        self.input
    }

    fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(image.data()))
    }

    fn has_input_gradient(&self) -> bool {
        true
    }

    fn loss_gradient(&self, image: &Image, label: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(image.data().to_vec()));
        let vars = self.leaves(&mut tape);
        let logits = self.record(&mut tape, x, &vars);
        let loss = tape.cross_entropy(logits, vec![label]);
        let mut grads = tape.backward(loss);
        Ok(grads.take(x, &tape).data)
    }

    fn snapshot_id(&self) -> String {
        self.id.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, input_gradient, Direction};
    use rand::SeedableRng;

    fn linear_fixture() -> FeedForward {
        let w = Matrix::from_vec(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        FeedForward::new(InputShape::new(1, 1), 1, vec![Dense::new(w, vec![0.0, 0.0]).unwrap()]).unwrap()
    }

    #[test]
    fn linear_margin_by_hand() {
        let m = linear_fixture();
        let img = Image::new(1, 1, vec![0.6, 0.5, 0.0]).unwrap();
        let z = forward_logits(&m, &img).unwrap();
        assert!((z[0] - z[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn linear_gradient_matches_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = FeedForward::init(InputShape::new(2, 2), 1, &[4], &mut rng).unwrap();
        let img = Image::new(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let label = 2;
        let z = m.forward(img.data());
        let (_, p) = crate::tape::log_softmax_parts(&z);
        let w = &m.layers()[0].weight;
        let g = input_gradient(&m, &img, label, Direction::Maximize).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let expected: f64 = (0..4).map(|k| (p[k] - if k == label { 1.0 } else { 0.0 }) * w.at(i, k)).sum();
            assert!((gi - expected).abs() < 1e-12);
        }
        let gmin = input_gradient(&m, &img, label, Direction::Minimize).unwrap();
        assert!(g.iter().zip(&gmin).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn rejects_mismatched_layers() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Dense::init(12, 4, &mut rng);
        let b = Dense::init(5, 2, &mut rng);
        assert!(FeedForward::new(InputShape::new(2, 2), 1, vec![a, b]).is_err());
        assert!(FeedForward::init(InputShape::new(3, 3), 2, &[2], &mut rng).is_err());
    }
}
