//! Automated prompt search: first-order trigger-token scoring, left-to-right
//! beam search and validation-selected prompt ensembles.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Dataset;
use crate::model::dual::normalized;
use crate::model::{argmax, DualEncoder, ZeroShotClassifier};
use crate::parallel::try_map_indexed;
use crate::rng::substream;
use crate::tape::{dot, Matrix};

mod objective;
mod template;

pub use objective::{LinearTextObjective, PromptObjective, ZeroShotObjective};
pub use template::{PromptTemplate, Slot, DEFAULT_TEMPLATE};

pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_BEAM_SIZE: usize = 5;
pub const DEFAULT_BATCH_SIZE: usize = 512;
pub const DEFAULT_INIT: &str = "A photo of a";
/// Prompt counts the reference search selected for six model families.
pub const REFERENCE_ENSEMBLE_SIZES: [usize; 6] = [49, 8, 186, 84, 7, 22];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_beam_size")]
    pub beam_size: usize,
    /// Search steps; step `s` edits trigger `s mod #triggers`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Held-out examples used to rank candidates.
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "default_template")]
    pub template: PromptTemplate,
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_beam_size() -> usize {
    DEFAULT_BEAM_SIZE
}
fn default_steps() -> usize {
    8
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_validation_size() -> usize {
    120
}
fn default_ensemble_size() -> usize {
    4
}
fn default_template() -> PromptTemplate {
    PromptTemplate::default()
}
fn default_init() -> String {
    DEFAULT_INIT.to_string()
}

impl Default for SearchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SearchConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > vocab {
            return Err(invalid(format!("top_k must be in 1..={vocab}, got {}", self.top_k)));
        }
        if self.beam_size == 0 {
            return Err(invalid("beam_size must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.ensemble_size == 0 {
            return Err(invalid("ensemble_size must be >= 1"));
        }
        Ok(())
    }
}

/// Current token per trigger slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerState {
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: usize,
    /// `L + (e_token − e_current) · ∂L/∂e`.
    pub approx_loss: f64,
}

/// The `top_k` replacement tokens for template position `position` by
/// first-order loss estimate; ties go to the lowest token id.
pub fn score_token_candidates(
    objective: &dyn PromptObjective,
    batch: &[usize],
    position: usize,
    state: &TriggerState,
    top_k: usize,
) -> Result<Vec<Candidate>> {
    let slot = objective.template().trigger_index(position)?;
    let (loss, grad) = objective.slot_gradient(&state.tokens, slot, batch)?;
    let current = objective.token_embedding(state.tokens[slot]);
    let mut scored: Vec<Candidate> = objective
        .candidates()
        .iter()
        .map(|&t| {
            let shift: f64 = objective.token_embedding(t).iter().zip(current).zip(&grad).map(|((a, b), g)| (a - b) * g).sum();
            Candidate { token: t, approx_loss: loss + shift }
        })
        .collect();
    scored.sort_by(|a, b| a.approx_loss.total_cmp(&b.approx_loss).then(a.token.cmp(&b.token)));
    scored.truncate(top_k);
    Ok(scored)
}

/// Example indices scored at `step`: everything when the pool fits in one
/// batch, otherwise a seeded sample without replacement, sorted.
pub fn scoring_batch(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    if n <= batch_size {
        return (0..n).collect();
    }
    let mut idx = sample(&mut substream(seed, "prompt-batch", step as u64), n, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub tokens: Vec<usize>,
    /// True loss on the scoring batch of `step`.
    pub loss: f64,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSearchResult {
    /// Final beams, best first.
    pub ranked: Vec<ScoredSequence>,
    /// Best sequence of every step, in step order (step 0 is the init).
    pub step_best: Vec<ScoredSequence>,
}

impl BeamSearchResult {
    /// Per-step winners, the candidate pool for ensembling.
    pub fn candidates(&self) -> Vec<Vec<usize>> {
        self.step_best.iter().map(|s| s.tokens.clone()).collect()
    }
}

/// Left-to-right beam search. Each step expands every beam at the next
/// trigger slot with its `top_k` candidates, scores the union (beams
/// included) by true loss, and keeps the `beam_size` best; ties go to the
/// earlier-discovered sequence.
pub fn beam_search_prompts(objective: &dyn PromptObjective, init: &[usize], config: &SearchConfig, workers: usize) -> Result<BeamSearchResult> {
    config.validate(objective.candidates().len())?;
    let n_slots = objective.template().num_triggers();
    if init.len() != n_slots {
        return Err(invalid(format!("{} init tokens for {n_slots} trigger slots", init.len())));
    }
    if objective.num_examples() == 0 {
        return Err(invalid("no training examples to score on"));
    }
    let batch0 = scoring_batch(objective.num_examples(), config.batch_size, config.seed, 0);
    let start = ScoredSequence { tokens: init.to_vec(), loss: objective.loss(init, &batch0)?, step: 0 };
    let mut beams = vec![start.clone()];
    let mut step_best = vec![start];
    for step in 1..=config.steps {
        let batch = scoring_batch(objective.num_examples(), config.batch_size, config.seed, step);
        let slot = (step - 1) % n_slots;
        let position = objective.template().trigger_position(slot)?;
        let mut seen = HashSet::new();
        let mut pool: Vec<(Vec<usize>, usize)> = Vec::new();
        for b in &beams {
            if seen.insert(b.tokens.clone()) {
                pool.push((b.tokens.clone(), b.step));
            }
        }
        for b in &beams {
            let state = TriggerState { tokens: b.tokens.clone() };
            for c in score_token_candidates(objective, &batch, position, &state, config.top_k)? {
                let mut tokens = b.tokens.clone();
                tokens[slot] = c.token;
                if seen.insert(tokens.clone()) {
                    pool.push((tokens, step));
                }
            }
        }
        let losses = try_map_indexed(workers, pool.len(), |i| objective.loss(&pool[i].0, &batch))?;
        let mut scored: Vec<(usize, ScoredSequence)> = pool
            .into_iter()
            .zip(losses)
            .enumerate()
            .map(|(order, ((tokens, found), loss))| (order, ScoredSequence { tokens, loss, step: found }))
            .collect();
        scored.sort_by(|a, b| a.1.loss.total_cmp(&b.1.loss).then(a.0.cmp(&b.0)));
        scored.truncate(config.beam_size);
        beams = scored.into_iter().map(|(_, s)| s).collect();
        step_best.push(ScoredSequence { step, ..beams[0].clone() });
    }
    Ok(BeamSearchResult { ranked: beams, step_best })
}

/// Embedding-space ensemble: per class, the normalized mean of the
/// normalized prompt embeddings.
pub fn ensemble_classifier(encoder: &Arc<DualEncoder>, template: &PromptTemplate, class_tokens: &[Vec<usize>], sequences: &[Vec<usize>]) -> Result<ZeroShotClassifier> {
    if sequences.is_empty() {
        return Err(invalid("no prompt sequences"));
    }
    let d = encoder.embed_dim();
    let tok = encoder.tokenizer();
    let mut rows = Vec::with_capacity(class_tokens.len() * d);
    for class in class_tokens {
        let mut mean = vec![0.0; d];
        for s in sequences {
            for (m, v) in mean.iter_mut().zip(encoder.embed_tokens(&template.fill(s, class, |w| tok.id(w)).0)) {
                *m += v;
            }
        }
        rows.extend(normalized(mean));
    }
    ZeroShotClassifier::from_class_embeddings(encoder.clone(), Matrix::from_vec(class_tokens.len(), d, rows))
}

/// Readable form of a trigger sequence with `{}` for the class slot.
pub fn render_prompt(encoder: &DualEncoder, template: &PromptTemplate, tokens: &[usize]) -> String {
    let mut t = tokens.iter();
    template
        .slots()
        .iter()
        .map(|s| match s {
            Slot::Trigger => encoder.tokenizer().token(*t.next().expect("one token per slot")).to_string(),
            Slot::Class => "{}".to_string(),
            Slot::Literal(w) => w.clone(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct PromptEnsemble {
    pub sequences: Vec<Vec<usize>>,
    pub validation_accuracy: Vec<f64>,
    pub classifier: ZeroShotClassifier,
    /// Fewer than the requested number of distinct candidates survived.
    pub short: bool,
}

/// Deduplicates `candidates` (first occurrence wins), ranks them by
/// validation accuracy (ties by position) and ensembles the best `n`.
pub fn select_prompt_ensemble(
    encoder: &Arc<DualEncoder>,
    template: &PromptTemplate,
    candidates: &[Vec<usize>],
    validation: &Dataset,
    n: usize,
    workers: usize,
) -> Result<PromptEnsemble> {
    if candidates.is_empty() {
        return Err(invalid("no candidate sequences"));
    }
    if validation.is_empty() || n == 0 {
        return Err(invalid("ensemble selection needs validation data and n >= 1"));
    }
    let mut seen = HashSet::new();
    let unique: Vec<Vec<usize>> = candidates.iter().filter(|c| seen.insert((*c).clone())).cloned().collect();
    let tok = encoder.tokenizer();
    let class_tokens: Vec<Vec<usize>> = validation.class_names.iter().map(|c| tok.encode(c)).collect();
    let images = try_map_indexed(workers, validation.len(), |i| encoder.embed_image(&validation.examples[i].image))?;
    let accuracy = try_map_indexed(workers, unique.len(), |k| {
        let classes: Vec<Vec<f64>> = class_tokens.iter().map(|c| encoder.embed_tokens(&template.fill(&unique[k], c, |w| tok.id(w)).0)).collect();
        let hits = images
            .iter()
            .zip(&validation.examples)
            .filter(|(e, ex)| argmax(&classes.iter().map(|c| dot(e, c)).collect::<Vec<_>>()) == ex.label)
            .count();
        Ok(hits as f64 / validation.len() as f64)
    })?;
    let mut order: Vec<usize> = (0..unique.len()).collect();
    order.sort_by(|&a, &b| accuracy[b].total_cmp(&accuracy[a]).then(a.cmp(&b)));
    order.truncate(n);
    let sequences: Vec<Vec<usize>> = order.iter().map(|&k| unique[k].clone()).collect();
    let classifier = ensemble_classifier(encoder, template, &class_tokens, &sequences)?;
    Ok(PromptEnsemble { validation_accuracy: order.iter().map(|&k| accuracy[k]).collect(), short: unique.len() < n, sequences, classifier })
}

/// Seeded split into `(search, validation)` with `validation_size` held out.
pub fn holdout_split(dataset: &Dataset, validation_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if validation_size == 0 || validation_size >= dataset.len() {
        return Err(invalid(format!("validation size {validation_size} must be in 1..{}", dataset.len())));
    }
    let mut val = sample(&mut substream(seed, "prompt-validation", 0), dataset.len(), validation_size).into_vec();
    val.sort_unstable();
    let held: HashSet<usize> = val.iter().copied().collect();
    let rest: Vec<usize> = (0..dataset.len()).filter(|i| !held.contains(i)).collect();
    Ok((dataset.subset(format!("{}-search", dataset.name), &rest), dataset.subset(format!("{}-val", dataset.name), &val)))
}

/// On-disk prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSetFile {
    pub template: PromptTemplate,
    pub sequences: Vec<Vec<usize>>,
    pub rendered: Vec<String>,
    pub config: SearchConfig,
    pub validation_accuracy: Vec<f64>,
    pub encoder_id: String,
    #[serde(default)]
    pub short: bool,
}

impl PromptSetFile {
    pub fn new(encoder: &DualEncoder, config: &SearchConfig, ensemble: &PromptEnsemble) -> Self {
        Self {
            template: config.template.clone(),
            rendered: ensemble.sequences.iter().map(|s| render_prompt(encoder, &config.template, s)).collect(),
            sequences: ensemble.sequences.clone(),
            config: config.clone(),
            validation_accuracy: ensemble.validation_accuracy.clone(),
            encoder_id: encoder.id().to_string(),
            short: ensemble.short,
        }
    }

    /// Rebuilds the ensembled classifier; the encoder must match.
    pub fn classifier(&self, encoder: &Arc<DualEncoder>, class_names: &[String]) -> Result<ZeroShotClassifier> {
        if encoder.id() != self.encoder_id {
            return Err(invalid(format!("prompt set was searched with encoder {}, not {}", self.encoder_id, encoder.id())));
        }
        let class_tokens: Vec<Vec<usize>> = class_names.iter().map(|c| encoder.tokenizer().encode(c)).collect();
        ensemble_classifier(encoder, &self.template, &class_tokens, &self.sequences)
    }
}

#[cfg(test)]
mod tests;
