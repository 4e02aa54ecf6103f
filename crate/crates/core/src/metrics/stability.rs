//! Flip rate and top-5 distance over perturbation sequences.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{forward_logits, Classifier};
use crate::parallel::try_map_indexed;
use crate::shiftgen::PerturbationSequence;

/// Which frame pairs are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Frame j against frame j−1 (geometric kinds).
    Consecutive,
    /// Frame j against frame 1 (noise kinds).
    FirstFrame,
}

impl Pairing {
    fn pairs(self, len: usize) -> impl Iterator<Item = (usize, usize)> {
        (1..len).map(move |j| match self {
            Pairing::Consecutive => (j - 1, j),
            Pairing::FirstFrame => (0, j),
        })
    }
}

/// Ranked class lists (best first) for every frame of every sequence of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRankings {
    pub kind: String,
    pub pairing: Pairing,
    /// `sequences[s][frame]` is the top-k list of that frame.
    pub sequences: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindStability {
    pub kind: String,
    pub fr_raw: f64,
    pub t5d_raw: f64,
    pub fr_normalized: Option<f64>,
    pub t5d_normalized: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub kinds: Vec<KindStability>,
    /// Mean normalized flip rate over kinds that normalized cleanly.
    pub mfr: Option<f64>,
    pub mt5d: Option<f64>,
    pub reference_id: Option<String>,
}

/// Top-`k` classes by logit, ties to the lower index.
pub fn rank_logits(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mean of `1[top-1 changes]` over all compared frame pairs.
pub fn flip_rate(pairing: Pairing, sequences: &[Vec<Vec<usize>>]) -> Result<f64> {
    mean_over_pairs(pairing, sequences, |a, b| if a[0] != b[0] { 1.0 } else { 0.0 })
}

/// Sum over classes in either list of |rank_a − rank_b|, ranks 1-based and
/// clamped to `k + 1` for classes outside a list.
pub fn top5_distance(a: &[usize], b: &[usize]) -> f64 {
    let k = a.len().max(b.len());
    let rank = |l: &[usize], c: usize| l.iter().position(|&x| x == c).map_or(k + 1, |p| p + 1);
    let mut seen: Vec<usize> = a.iter().chain(b).copied().collect();
    seen.sort_unstable();
    seen.dedup();
    seen.iter().map(|&c| rank(a, c).abs_diff(rank(b, c)) as f64).sum()
}

fn mean_over_pairs(pairing: Pairing, sequences: &[Vec<Vec<usize>>], f: impl Fn(&[usize], &[usize]) -> f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in sequences {
        if s.len() < 2 {
            return Err(invalid(format!("sequence of length {} has no frame pairs", s.len())));
        }
        for (i, j) in pairing.pairs(s.len()) {
            if s[i].is_empty() || s[j].is_empty() {
                return Err(invalid("empty ranking"));
            }
            total += f(&s[i], &s[j]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("no sequences"));
    }
    Ok(total / count as f64)
}

fn raw(r: &SequenceRankings) -> Result<(f64, f64)> {
    Ok((flip_rate(r.pairing, &r.sequences)?, mean_over_pairs(r.pairing, &r.sequences, top5_distance)?))
}

/// Raw and reference-normalized (`100 · raw / raw_ref`) scores per kind. A zero
/// reference value leaves that kind unnormalized with an error note.
pub fn stability_from_rankings(model: &[SequenceRankings], reference: Option<(&[SequenceRankings], String)>) -> Result<StabilityReport> {
    if model.is_empty() {
        return Err(invalid("no perturbation kinds"));
    }
    let mut kinds = Vec::with_capacity(model.len());
    for (i, r) in model.iter().enumerate() {
        let (fr, t5d) = raw(r)?;
        let mut k = KindStability { kind: r.kind.clone(), fr_raw: fr, t5d_raw: t5d, fr_normalized: None, t5d_normalized: None, error: None };
        if let Some((refs, _)) = &reference {
            let rr = refs.get(i).filter(|x| x.kind == r.kind).ok_or_else(|| invalid(format!("reference lacks kind {}", r.kind)))?;
            let (rfr, rt5d) = raw(rr)?;
            let mut errs = Vec::new();
            if rfr > 0.0 {
                k.fr_normalized = Some(fr / rfr * 100.0);
            } else {
                errs.push("reference flip rate is zero");
            }
            if rt5d > 0.0 {
                k.t5d_normalized = Some(t5d / rt5d * 100.0);
            } else {
                errs.push("reference top-5 distance is zero");
            }
            if !errs.is_empty() {
                k.error = Some(errs.join("; "));
            }
        }
        kinds.push(k);
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(StabilityReport {
        mfr: mean(kinds.iter().filter_map(|k| k.fr_normalized).collect()),
        mt5d: mean(kinds.iter().filter_map(|k| k.t5d_normalized).collect()),
        kinds,
        reference_id: reference.map(|(_, id)| id),
    })
}

fn rankings(model: &dyn Classifier, sequences: &[PerturbationSequence], workers: usize) -> Result<Vec<SequenceRankings>> {
    let mut kinds: Vec<SequenceRankings> = Vec::new();
    let ranked = try_map_indexed(workers, sequences.len(), |i| {
        let s = &sequences[i];
        let frames = s
            .frames
            .iter()
            .map(|f| Ok(rank_logits(&forward_logits(model, f)?, 5)))
            .collect::<Result<Vec<_>>>()?;
        Ok(frames)
    })?;
    for (s, frames) in sequences.iter().zip(ranked) {
        let name = s.kind.as_str();
        match kinds.iter_mut().find(|k| k.kind == name) {
            Some(k) => k.sequences.push(frames),
            None => kinds.push(SequenceRankings { kind: name.to_string(), pairing: s.kind.pairing(), sequences: vec![frames] }),
        }
    }
    Ok(kinds)
}

/// Stability of `model` over the sequences, normalized by `reference` when given.
pub fn sequence_stability(model: &dyn Classifier, sequences: &[PerturbationSequence], reference: Option<&dyn Classifier>, workers: usize) -> Result<StabilityReport> {
    let ours = rankings(model, sequences, workers)?;
    match reference {
        Some(r) => {
            let theirs = rankings(r, sequences, workers)?;
            stability_from_rankings(&ours, Some((&theirs, r.snapshot_id())))
        }
        None => stability_from_rankings(&ours, None),
    }
}
