//! Losses the prompt search minimizes.

use std::sync::Arc;

use super::template::PromptTemplate;
use crate::error::{invalid, Result};
use crate::image::Dataset;
use crate::model::feedforward::DenseVars;
use crate::model::tokenizer::{PAD_ID, UNK_ID};
use crate::model::DualEncoder;
use crate::parallel::try_map_indexed;
use crate::tape::{cross_entropy, dot, Matrix, Tape};

/// Loss over trigger-token choices, with the gradient with respect to the
/// embedding of one trigger slot.
pub trait PromptObjective: Sync {
    fn template(&self) -> &PromptTemplate;

    /// Searchable vocabulary, ascending token ids.
    fn candidates(&self) -> &[usize];

    fn token_embedding(&self, token: usize) -> &[f64];

    /// Number of training examples batches are drawn from.
    fn num_examples(&self) -> usize;

    fn loss(&self, triggers: &[usize], batch: &[usize]) -> Result<f64>;

    /// Loss and `∂L/∂e` for the embedding `e` at trigger `slot`.
    fn slot_gradient(&self, triggers: &[usize], slot: usize, batch: &[usize]) -> Result<(f64, Vec<f64>)>;
}

fn check_triggers(template: &PromptTemplate, triggers: &[usize], vocab: usize) -> Result<()> {
    if triggers.len() != template.num_triggers() {
        return Err(invalid(format!("{} trigger tokens for {} slots", triggers.len(), template.num_triggers())));
    }
    if let Some(t) = triggers.iter().find(|t| **t >= vocab) {
        return Err(invalid(format!("token {t} is outside the {vocab}-token vocabulary")));
    }
    Ok(())
}

/// Mean zero-shot cross-entropy of a dual encoder whose class prompts are
/// the template filled with each class name.
pub struct ZeroShotObjective {
    encoder: Arc<DualEncoder>,
    template: PromptTemplate,
    class_tokens: Vec<Vec<usize>>,
    candidates: Vec<usize>,
    image_embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl ZeroShotObjective {
    /// Embeds the training images once; the vocabulary is every tokenizer
    /// token except padding and `<unk>`.
    pub fn new(encoder: Arc<DualEncoder>, template: PromptTemplate, train: &Dataset, workers: usize) -> Result<Self> {
        train.validate()?;
        let tok = encoder.tokenizer();
        let class_tokens = train.class_names.iter().map(|n| tok.encode(n)).collect();
        let candidates: Vec<usize> = (0..tok.vocab_size()).filter(|&t| t != PAD_ID && t != UNK_ID).collect();
        if candidates.is_empty() {
            return Err(invalid("tokenizer has no searchable tokens"));
        }
        let image_embeddings = try_map_indexed(workers, train.len(), |i| encoder.embed_image(&train.examples[i].image))?;
        let labels = train.examples.iter().map(|e| e.label).collect();
        Ok(Self { encoder, template, class_tokens, candidates, image_embeddings, labels })
    }

    pub fn encoder(&self) -> &Arc<DualEncoder> {
        &self.encoder
    }

    pub fn class_tokens(&self) -> &[Vec<usize>] {
        &self.class_tokens
    }

    fn fill(&self, triggers: &[usize], class: usize) -> (Vec<usize>, Vec<usize>) {
        let tok = self.encoder.tokenizer();
        self.template.fill(triggers, &self.class_tokens[class], |w| tok.id(w))
    }

    /// Maps whitespace-separated words onto trigger tokens. Words outside the
    /// vocabulary map to the lowest searchable token.
    pub fn init_tokens(&self, init: &str) -> Result<Vec<usize>> {
        let tok = self.encoder.tokenizer();
        let words: Vec<&str> = init.split_whitespace().collect();
        if words.len() != self.template.num_triggers() {
            return Err(invalid(format!("{} init words for {} trigger slots", words.len(), self.template.num_triggers())));
        }
        Ok(words
            .iter()
            .map(|w| {
                let id = tok.id(w);
                if self.candidates.binary_search(&id).is_ok() {
                    id
                } else {
                    self.candidates[0]
                }
            })
            .collect())
    }

    fn class_matrix(&self, triggers: &[usize]) -> Vec<Vec<f64>> {
        (0..self.class_tokens.len()).map(|c| self.encoder.embed_tokens(&self.fill(triggers, c).0)).collect()
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.is_empty() || batch.iter().any(|&i| i >= self.labels.len()) {
            return Err(invalid("scoring batch is empty or out of range"));
        }
        Ok(())
    }
}

impl PromptObjective for ZeroShotObjective {
    fn template(&self) -> &PromptTemplate {
        &self.template
    }

    fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    fn token_embedding(&self, token: usize) -> &[f64] {
        self.encoder.token_embeddings().row(token)
    }

    fn num_examples(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, triggers: &[usize], batch: &[usize]) -> Result<f64> {
        check_triggers(&self.template, triggers, self.encoder.tokenizer().vocab_size())?;
        self.check_batch(batch)?;
        let classes = self.class_matrix(triggers);
        let tau = self.encoder.temperature();
        let total: f64 = batch
            .iter()
            .map(|&i| {
                let z: Vec<f64> = classes.iter().map(|c| tau * dot(&self.image_embeddings[i], c)).collect();
                cross_entropy(&z, self.labels[i])
            })
            .sum();
        Ok(total / batch.len() as f64)
    }

    fn slot_gradient(&self, triggers: &[usize], slot: usize, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        check_triggers(&self.template, triggers, self.encoder.tokenizer().vocab_size())?;
        self.check_batch(batch)?;
        if slot >= triggers.len() {
            return Err(invalid(format!("no trigger slot {slot}")));
        }
        let enc = &self.encoder;
        let mut tape = Tape::new();
        let table = tape.leaf(enc.token_embeddings().clone());
        let e = tape.leaf(Matrix::row_vector(self.token_embedding(triggers[slot]).to_vec()));
        let mut parts = Vec::new();
        let mut segments = Vec::with_capacity(self.class_tokens.len());
        let mut start = 0;
        for c in 0..self.class_tokens.len() {
            let (ids, rows) = self.fill(triggers, c);
            let at = rows[slot];
            if at > 0 {
                parts.push(tape.gather(table, ids[..at].to_vec()));
            }
            parts.push(e);
            if at + 1 < ids.len() {
                parts.push(tape.gather(table, ids[at + 1..].to_vec()));
            }
            segments.push(start..start + ids.len());
            start += ids.len();
        }
        let rows = tape.vstack(parts);
        let proj = enc.text_proj();
        let proj = DenseVars { weight: tape.leaf(proj.weight.clone()), bias: tape.leaf(proj.bias.clone()) };
        let classes = enc.record_text_rows(&mut tape, rows, segments, proj);
        let d = enc.embed_dim();
        let images = tape.leaf(Matrix::from_vec(batch.len(), d, batch.iter().flat_map(|&i| self.image_embeddings[i].iter().copied()).collect()));
        let sims = tape.matmul_t(images, classes);
        let logits = tape.scale(sims, enc.temperature());
        let loss = tape.cross_entropy(logits, batch.iter().map(|&i| self.labels[i]).collect());
        let value = tape.value(loss).data[0];
        let mut grads = tape.backward(loss);
        Ok((value, grads.take(e, &tape).data))
    }
}

/// Objective of a text encoder that is linear in its token embeddings:
/// `text(ids) = (mean of E[ids]) · P`, with loss `−mean_i ⟨image_i, text(prompt of y_i)⟩`.
/// The loss is affine in every token embedding, so first-order replacement
/// scores are exact.
pub struct LinearTextObjective {
    pub template: PromptTemplate,
    /// `V × t` token embeddings.
    pub embeddings: Matrix,
    /// `t × d` projection.
    pub projection: Matrix,
    pub class_tokens: Vec<Vec<usize>>,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    candidates: Vec<usize>,
}

impl LinearTextObjective {
    pub fn new(
        template: PromptTemplate,
        embeddings: Matrix,
        projection: Matrix,
        class_tokens: Vec<Vec<usize>>,
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if embeddings.cols != projection.rows || images.iter().any(|x| x.len() != projection.cols) || images.len() != labels.len() {
            return Err(invalid("inconsistent linear objective dimensions"));
        }
        if labels.iter().any(|&y| y >= class_tokens.len()) {
            return Err(invalid("label without class tokens"));
        }
        let candidates = (0..embeddings.rows).collect();
        Ok(Self { template, embeddings, projection, class_tokens, images, labels, candidates })
    }

    fn text(&self, ids: &[usize]) -> Vec<f64> {
        let mut mean = vec![0.0; self.embeddings.cols];
        for &id in ids {
            for (m, v) in mean.iter_mut().zip(self.embeddings.row(id)) {
                *m += v / ids.len() as f64;
            }
        }
        Matrix::row_vector(mean).matmul(&self.projection).data
    }
}

impl PromptObjective for LinearTextObjective {
    fn template(&self) -> &PromptTemplate {
        &self.template
    }

    fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    fn token_embedding(&self, token: usize) -> &[f64] {
        self.embeddings.row(token)
    }

    fn num_examples(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, triggers: &[usize], batch: &[usize]) -> Result<f64> {
        check_triggers(&self.template, triggers, self.embeddings.rows)?;
        let texts: Vec<Vec<f64>> = self.class_tokens.iter().map(|c| self.text(&self.template.fill(triggers, c, |_| 0).0)).collect();
        Ok(-batch.iter().map(|&i| dot(&self.images[i], &texts[self.labels[i]])).sum::<f64>() / batch.len() as f64)
    }

    fn slot_gradient(&self, triggers: &[usize], slot: usize, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let loss = self.loss(triggers, batch)?;
        // ∂L/∂e = −(1/B) Σ_i P·image_i / len(prompt of y_i)
        let mut g = vec![0.0; self.embeddings.cols];
        for &i in batch {
            let len = self.template.fill(triggers, &self.class_tokens[self.labels[i]], |_| 0).0.len() as f64;
            let pi = self.projection.matmul(&Matrix::from_vec(self.projection.cols, 1, self.images[i].clone())).data;
            for (gk, v) in g.iter_mut().zip(pi) {
                *gk -= v / (len * batch.len() as f64);
            }
        }
        if slot >= triggers.len() {
            return Err(invalid(format!("no trigger slot {slot}")));
        }
        Ok((loss, g))
    }
}
