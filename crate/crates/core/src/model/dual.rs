//! Miniature contrastive image/text dual encoder.
//!
//! The image side is a [`FeedForward`] trunk; the text side averages token
//! embeddings and applies an affine map. Both outputs are ℓ2-normalized and
//! compared by temperature-scaled cosine similarity.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::feedforward::{quantize, Dense, DenseVars, FeedForward};
use super::tokenizer::Tokenizer;
use super::{Classifier, ImageEmbedder};
use crate::error::{invalid, Error, Result};
use crate::image::{Image, InputShape};
use crate::optim::Adam;
use crate::rng::substream;
use crate::tape::{dot, log_softmax_parts, Matrix, Tape, Var};

use super::train::TrainConfig;

pub const MIN_LOG_TEMPERATURE: f64 = -2.0;
pub const MAX_LOG_TEMPERATURE: f64 = 5.0;

/// Layer widths of the dual encoder, apart from the joint embedding width
/// which comes from [`TrainConfig::embed_dim`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualEncoderArch {
    pub hidden: Vec<usize>,
    pub pool: usize,
    pub token_dim: usize,
}

impl Default for DualEncoderArch {
    fn default() -> Self {
        Self { hidden: vec![128], pool: 2, token_dim: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    image_trunk: FeedForward,
    token_embeddings: Matrix,
    text_proj: Dense,
    log_temperature: f64,
    tokenizer: Tokenizer,
    id: String,
}

impl PartialEq for DualEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.image_trunk == other.image_trunk
            && self.token_embeddings == other.token_embeddings
            && self.text_proj == other.text_proj
            && self.log_temperature.to_bits() == other.log_temperature.to_bits()
            && self.tokenizer == other.tokenizer
    }
}

/// Tape handles for every dual-encoder parameter.
#[derive(Debug, Clone)]
pub struct DualVars {
    pub trunk: Vec<DenseVars>,
    pub token_embeddings: Var,
    pub proj: DenseVars,
    pub log_temperature: Var,
}

impl DualEncoder {
    pub fn new(
        image_trunk: FeedForward,
        token_embeddings: Matrix,
        text_proj: Dense,
        log_temperature: f64,
        tokenizer: Tokenizer,
    ) -> Result<Self> {
        if token_embeddings.rows != tokenizer.vocab_size() {
            return Err(invalid(format!(
                "{} token embeddings for a vocabulary of {}",
                token_embeddings.rows,
                tokenizer.vocab_size()
            )));
        }
        if text_proj.inputs() != token_embeddings.cols || text_proj.outputs() != image_trunk.output_width() {
            return Err(invalid("text projection does not connect token and joint embedding widths"));
        }
        if !log_temperature.is_finite() {
            return Err(invalid("temperature must be positive and finite"));
        }
        let mut enc = Self {
            image_trunk,
            token_embeddings,
            text_proj,
            log_temperature: log_temperature.clamp(MIN_LOG_TEMPERATURE, MAX_LOG_TEMPERATURE),
            tokenizer,
            id: String::new(),
        };
        enc.id = enc.compute_id();
        Ok(enc)
    }

    pub fn init(shape: InputShape, tokenizer: Tokenizer, arch: &DualEncoderArch, config: &TrainConfig) -> Result<Self> {
        let mut rng = substream(config.seed, "dual-init", 0);
        let mut widths = arch.hidden.clone();
        widths.push(config.embed_dim);
        let trunk = FeedForward::init(shape, arch.pool, &widths, &mut rng)?.quantized();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let v = tokenizer.vocab_size();
        let mut table = Matrix::from_vec(v, arch.token_dim, (0..v * arch.token_dim).map(|_| normal.sample(&mut rng)).collect());
        quantize(&mut table);
        let mut proj = Dense::init(arch.token_dim, config.embed_dim, &mut rng);
        quantize(&mut proj.weight);
        let log_t = (config.temperature_init.ln() as f32) as f64;
        Self::new(trunk, table, proj, log_t, tokenizer)
    }

    pub fn image_trunk(&self) -> &FeedForward {
        &self.image_trunk
    }

    pub fn token_embeddings(&self) -> &Matrix {
        &self.token_embeddings
    }

    pub fn text_proj(&self) -> &Dense {
        &self.text_proj
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn input_shape(&self) -> InputShape {
        self.image_trunk.input_shape()
    }

    pub fn embed_dim(&self) -> usize {
        self.image_trunk.output_width()
    }

    pub fn log_temperature(&self) -> f64 {
        self.log_temperature
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        if image.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch { expected: self.input_shape().to_string(), got: image.shape().to_string() });
        }
        Ok(normalized(self.image_trunk.forward(image.data())))
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Vec<f64> {
        let t = self.token_embeddings.cols;
        let mut mean = vec![0.0; t];
        for &id in ids {
            for (m, v) in mean.iter_mut().zip(self.token_embeddings.row(id)) {
                *m += v;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut out = Matrix::row_vector(mean).matmul(&self.text_proj.weight).data;
        for (o, b) in out.iter_mut().zip(&self.text_proj.bias.data) {
            *o += b;
        }
        normalized(out)
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.embed_tokens(&self.tokenizer.encode(text))
    }

    pub fn leaves(&self, tape: &mut Tape) -> DualVars {
        DualVars {
            trunk: self.image_trunk.leaves(tape),
            token_embeddings: tape.leaf(self.token_embeddings.clone()),
            proj: DenseVars { weight: tape.leaf(self.text_proj.weight.clone()), bias: tape.leaf(self.text_proj.bias.clone()) },
            log_temperature: tape.leaf(Matrix::scalar(self.log_temperature)),
        }
    }

    /// Normalized image embeddings, one row per input row.
    pub fn record_images(&self, tape: &mut Tape, x: Var, trunk: &[DenseVars]) -> Var {
        let h = self.image_trunk.record(tape, x, trunk);
        tape.normalize_rows(h)
    }

    /// Normalized text embeddings from already gathered token-embedding rows;
    /// output row `s` encodes rows `segments[s]`.
    pub fn record_text_rows(&self, tape: &mut Tape, rows: Var, segments: Vec<Range<usize>>, proj: DenseVars) -> Var {
        let mean = tape.segment_mean(rows, segments);
        let z = tape.matmul(mean, proj.weight);
        let z = tape.add_row(z, proj.bias);
        tape.normalize_rows(z)
    }

    pub fn record_texts(&self, tape: &mut Tape, table: Var, captions: &[Vec<usize>], proj: DenseVars) -> Var {
        let (ids, segments) = flatten_segments(captions);
        let rows = tape.gather(table, ids);
        self.record_text_rows(tape, rows, segments, proj)
    }

    /// Symmetric in-batch contrastive loss recorded on `tape`.
    pub fn record_batch_loss(&self, tape: &mut Tape, vars: &DualVars, images: &[&Image], captions: &[Vec<usize>]) -> Var {
        let d = images[0].data().len();
        let mut data = Vec::with_capacity(images.len() * d);
        for img in images {
            data.extend_from_slice(img.data());
        }
        let x = tape.leaf(Matrix::from_vec(images.len(), d, data));
        let img = self.record_images(tape, x, &vars.trunk);
        let txt = self.record_texts(tape, vars.token_embeddings, captions, vars.proj);
        let sims = tape.matmul_t(img, txt);
        let logits = tape.scale_exp(sims, vars.log_temperature);
        let diag: Vec<usize> = (0..images.len()).collect();
        let i2t = tape.cross_entropy(logits, diag.clone());
        let logits_t = tape.transpose(logits);
        let t2i = tape.cross_entropy(logits_t, diag);
        let sum = tape.add(i2t, t2i);
        tape.scale(sum, 0.5)
    }

    /// Contrastive loss of one batch of `(image, caption)` pairs.
    pub fn batch_loss(&self, images: &[&Image], captions: &[&str]) -> Result<f64> {
        if images.len() < 2 || images.len() != captions.len() {
            return Err(invalid("contrastive loss needs at least two aligned pairs"));
        }
        let ids: Vec<Vec<usize>> = captions.iter().map(|c| self.tokenizer.encode(c)).collect();
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let loss = self.record_batch_loss(&mut tape, &vars, images, &ids);
        Ok(tape.value(loss).data[0])
    }

    /// Loss and gradients for every parameter, in [`DualEncoder::named_params`] order.
    pub fn batch_loss_gradients(&self, images: &[&Image], captions: &[&str]) -> Result<(f64, Vec<(String, Matrix)>)> {
        if images.len() < 2 || images.len() != captions.len() {
            return Err(invalid("contrastive loss needs at least two aligned pairs"));
        }
        let ids: Vec<Vec<usize>> = captions.iter().map(|c| self.tokenizer.encode(c)).collect();
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let loss = self.record_batch_loss(&mut tape, &vars, images, &ids);
        let value = tape.value(loss).data[0];
        let mut grads = tape.backward(loss);
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let g = param_vars(&vars).into_iter().map(|v| grads.take(v, &tape));
        Ok((value, names.into_iter().zip(g).collect()))
    }

    pub fn named_params(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> =
            self.image_trunk.named_params("image.").into_iter().map(|(n, m)| (n, m.clone())).collect();
        out.push(("text.token_embeddings".into(), self.token_embeddings.clone()));
        out.push(("text.proj.weight".into(), self.text_proj.weight.clone()));
        out.push(("text.proj.bias".into(), self.text_proj.bias.clone()));
        out.push(("log_temperature".into(), Matrix::scalar(self.log_temperature)));
        out
    }

    /// Rebuilds the encoder with parameters in [`DualEncoder::named_params`] order.
    pub fn with_params(&self, params: Vec<Matrix>) -> Result<Self> {
        let n_layers = self.image_trunk.layers().len();
        if params.len() != 2 * n_layers + 4 {
            return Err(invalid("wrong number of dual-encoder parameters"));
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let w = it.next().expect("len checked");
            let b = it.next().expect("len checked");
            layers.push(Dense::new(w, b.data)?);
        }
        let trunk = self.image_trunk.with_layers(layers)?;
        let table = it.next().expect("len checked");
        let pw = it.next().expect("len checked");
        let pb = it.next().expect("len checked");
        let lt = it.next().expect("len checked");
        Self::new(trunk, table, Dense::new(pw, pb.data)?, lt.data[0], self.tokenizer.clone())
    }

    fn quantized(self) -> Result<Self> {
        let params = self
            .named_params()
            .into_iter()
            .map(|(_, mut m)| {
                quantize(&mut m);
                m
            })
            .collect();
        self.with_params(params)
    }

    fn compute_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"dual:");
        hasher.update(self.image_trunk.snapshot_id().as_bytes());
        for m in [&self.token_embeddings, &self.text_proj.weight, &self.text_proj.bias] {
            for v in &m.data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.update(self.log_temperature.to_bits().to_le_bytes());
        for t in self.tokenizer.tokens() {
            hasher.update(t.as_bytes());
            hasher.update([0]);
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

impl ImageEmbedder for DualEncoder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        DualEncoder::embed_image(self, image)
    }

    fn embedder_id(&self) -> String {
        format!("dual-encoder:{}", self.id)
    }
}

fn param_vars(vars: &DualVars) -> Vec<Var> {
    let mut out: Vec<Var> = vars.trunk.iter().flat_map(|v| [v.weight, v.bias]).collect();
    out.extend([vars.token_embeddings, vars.proj.weight, vars.proj.bias, vars.log_temperature]);
    out
}

pub(crate) fn flatten_segments(seqs: &[Vec<usize>]) -> (Vec<usize>, Vec<Range<usize>>) {
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        let start = ids.len();
        ids.extend_from_slice(s);
        segments.push(start..ids.len());
    }
    (ids, segments)
}

pub fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Per-direction contrastive losses `(image→text, text→image)` for a matrix
/// of already temperature-scaled similarities with matching pairs on the
/// diagonal.
pub fn contrastive_losses(logits: &Matrix) -> (f64, f64) {
    let b = logits.rows;
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    let lt = logits.transpose();
    for i in 0..b {
        let (lse, _) = log_softmax_parts(logits.row(i));
        i2t += lse - logits.at(i, i);
        let (lse, _) = log_softmax_parts(lt.row(i));
        t2i += lse - lt.at(i, i);
    }
    (i2t / b as f64, t2i / b as f64)
}

/// Trains a dual encoder with the default architecture.
pub fn train_dual_encoder(pairs: &[(Image, String)], config: &TrainConfig) -> Result<DualEncoder> {
    train_dual_encoder_with(pairs, &DualEncoderArch::default(), config)
}

/// Trains on in-batch symmetric contrastive loss with Adam. The vocabulary is
/// built from the captions; the log-temperature is clamped after each step.
pub fn train_dual_encoder_with(pairs: &[(Image, String)], arch: &DualEncoderArch, config: &TrainConfig) -> Result<DualEncoder> {
    config.validate()?;
    if config.batch_size < 2 || pairs.len() < 2 {
        return Err(invalid("contrastive training needs batches of at least 2 pairs"));
    }
    let shape = pairs[0].0.shape();
    if let Some((i, _)) = pairs.iter().enumerate().find(|(_, p)| p.0.shape() != shape) {
        return Err(Error::ShapeMismatch { expected: shape.to_string(), got: format!("{} at pair {i}", pairs[i].0.shape()) });
    }
    let tokenizer = Tokenizer::build(pairs.iter().map(|p| p.1.as_str()));
    let mut enc = DualEncoder::init(shape, tokenizer, arch, config)?;
    let captions: Vec<Vec<usize>> = pairs.iter().map(|p| enc.tokenizer.encode(&p.1)).collect();

    let mut params: Vec<Matrix> = enc.named_params().into_iter().map(|(_, m)| m).collect();
    let mut opt = Adam::new(config.learning_rate, &params.iter().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut substream(config.seed, "dual-shuffle", epoch as u64));
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<&Image> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let caps: Vec<Vec<usize>> = chunk.iter().map(|&i| captions[i].clone()).collect();
            let mut tape = Tape::new();
            let vars = enc.leaves(&mut tape);
            let loss = enc.record_batch_loss(&mut tape, &vars, &images, &caps);
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("contrastive loss {value} at epoch {epoch}, batch {b}")));
            }
            let mut grads = tape.backward(loss);
            let g: Vec<Matrix> = param_vars(&vars).into_iter().map(|v| grads.take(v, &tape)).collect();
            opt.update(&mut params.iter_mut().collect::<Vec<_>>(), &g);
            let lt = params.last_mut().expect("log temperature");
            lt.data[0] = lt.data[0].clamp(MIN_LOG_TEMPERATURE, MAX_LOG_TEMPERATURE);
            enc = enc.with_params(params.clone())?;
        }
    }
    enc.quantized()
}

/// Fraction of images whose most similar caption within their batch has the
/// same text as their own caption. Batches follow dataset order.
pub fn in_batch_retrieval_accuracy(encoder: &DualEncoder, pairs: &[(Image, String)], batch_size: usize) -> Result<f64> {
    if pairs.is_empty() || batch_size == 0 {
        return Err(invalid("retrieval needs pairs and a positive batch size"));
    }
    let mut correct = 0usize;
    for chunk in pairs.chunks(batch_size) {
        let img: Vec<Vec<f64>> = chunk.iter().map(|p| encoder.embed_image(&p.0)).collect::<Result<_>>()?;
        let txt: Vec<Vec<f64>> = chunk.iter().map(|p| encoder.embed_text(&p.1)).collect();
        for (i, e) in img.iter().enumerate() {
            let sims: Vec<f64> = txt.iter().map(|t| dot(e, t)).collect();
            let best = super::argmax(&sims);
            if chunk[best].1 == chunk[i].1 {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}
