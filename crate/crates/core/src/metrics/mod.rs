//! Evaluation numbers: accuracy, baseline trends with effective and relative
//! robustness, targeted success, attack aggregates, corruption averages and
//! sequence stability.
//!
//! Accuracies are fractions in `[0,1]`; robustness gaps are signed percentage
//! points.

mod attack;
mod corruption;
mod stability;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::image::Dataset;
use crate::model::{argmax, forward_logits, Classifier};
use crate::parallel::try_map_indexed;

pub use attack::{format_attack_cell, median, summarize_attack_outcomes, AttackSummary};
pub use corruption::{corruption_summary, CorruptionSummary, SEVERITIES};
pub use stability::{
    flip_rate, rank_logits, sequence_stability, stability_from_rankings, top5_distance, KindStability, Pairing, SequenceRankings,
    StabilityReport,
};

/// Clamp applied before transforming accuracies.
pub const ACC_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Standard,
    Shift,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub dataset_id: String,
    pub accuracy: f64,
    pub kind: RecordKind,
    pub correct: usize,
    pub total: usize,
}

/// Argmax predictions for every example, in dataset order.
pub fn predictions(model: &dyn Classifier, dataset: &Dataset, workers: usize) -> Result<Vec<usize>> {
    try_map_indexed(workers, dataset.len(), |i| Ok(argmax(&forward_logits(model, &dataset.examples[i].image)?)))
}

/// Fraction of argmax predictions equal to the labels (ties go to the lowest class).
pub fn evaluate_accuracy(model: &dyn Classifier, dataset: &Dataset, kind: RecordKind, workers: usize) -> Result<EvalRecord> {
    if dataset.is_empty() {
        return Err(invalid(format!("dataset {} is empty", dataset.name)));
    }
    let preds = predictions(model, dataset, workers)?;
    let correct = preds.iter().zip(&dataset.examples).filter(|(p, e)| **p == e.label).count();
    Ok(EvalRecord {
        model_id: model.snapshot_id(),
        dataset_id: dataset.identity(),
        accuracy: correct as f64 / dataset.len() as f64,
        kind,
        correct,
        total: dataset.len(),
    })
}

/// Fraction of predictions that hit the attack target.
pub fn targeted_success_rate(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(invalid(format!("{} predictions vs {} targets", predictions.len(), targets.len())));
    }
    if predictions.is_empty() {
        return Err(invalid("no predictions to score"));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Coordinate transform applied to accuracies before the linear fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Probit,
    Logit,
    Linear,
}

impl Transform {
    pub fn as_str(self) -> &'static str {
        match self {
            Transform::Probit => "probit",
            Transform::Logit => "logit",
            Transform::Linear => "linear",
        }
    }

    pub fn forward(self, acc: f64) -> f64 {
        let a = acc.clamp(ACC_CLAMP, 1.0 - ACC_CLAMP);
        match self {
            Transform::Probit => std_normal().inverse_cdf(a),
            Transform::Logit => (a / (1.0 - a)).ln(),
            Transform::Linear => acc,
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            Transform::Probit => std_normal().cdf(v),
            Transform::Logit => 1.0 / (1.0 + (-v).exp()),
            Transform::Linear => v.clamp(0.0, 1.0),
        }
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Probit of an accuracy, clamped to `[1e-4, 1 − 1e-4]` first.
pub fn probit(acc: f64) -> f64 {
    Transform::Probit.forward(acc)
}

/// Linear fit `T(acc₂) ≈ slope · T(acc₁) + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrend {
    pub slope: f64,
    pub intercept: f64,
    pub transform: Transform,
    /// `(acc₁, acc₂)` pairs the fit came from.
    pub source: Vec<(f64, f64)>,
}

impl BaselineTrend {
    /// β(a): expected robustness-set accuracy at standard accuracy `a`.
    pub fn beta(&self, acc: f64) -> f64 {
        self.transform.inverse(self.slope * self.transform.forward(acc) + self.intercept)
    }

    /// `(a, β(a))` at `n` evenly spaced points in `[lo, hi]`.
    pub fn samples(&self, lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let a = if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
                (a, self.beta(a))
            })
            .collect()
    }
}

/// Least-squares trend in probit coordinates.
pub fn fit_baseline_trend(records: &[(f64, f64)]) -> Result<BaselineTrend> {
    fit_baseline_trend_with(records, Transform::Probit)
}

pub fn fit_baseline_trend_with(records: &[(f64, f64)], transform: Transform) -> Result<BaselineTrend> {
    if records.len() < 2 {
        return Err(Error::DegenerateFit(format!("need at least 2 records, got {}", records.len())));
    }
    if records.iter().any(|(a, b)| !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b)) {
        return Err(invalid("accuracies must lie in [0,1]"));
    }
    let xs: Vec<f64> = records.iter().map(|r| transform.forward(r.0)).collect();
    let ys: Vec<f64> = records.iter().map(|r| transform.forward(r.1)).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all standard accuracies are identical".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(BaselineTrend { slope, intercept: my - slope * mx, transform, source: records.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessGaps {
    /// `acc₂(m) − β(acc₁(m))`, percentage points.
    pub effective: f64,
    /// `acc₂(m) − acc₂(other)`, percentage points.
    pub relative: Option<f64>,
}

/// Effective robustness of the model behind `standard`/`shift`, and its
/// relative robustness over `other_shift` when given.
pub fn compute_robustness_gaps(standard: &EvalRecord, shift: &EvalRecord, trend: &BaselineTrend, other_shift: Option<&EvalRecord>) -> Result<RobustnessGaps> {
    if standard.model_id != shift.model_id {
        return Err(invalid(format!("records belong to different models: {} vs {}", standard.model_id, shift.model_id)));
    }
    if standard.dataset_id == shift.dataset_id {
        return Err(invalid("standard and robustness records use the same dataset"));
    }
    if let Some(o) = other_shift {
        if o.dataset_id != shift.dataset_id {
            return Err(invalid(format!("relative robustness across datasets {} and {}", o.dataset_id, shift.dataset_id)));
        }
    }
    Ok(RobustnessGaps {
        effective: 100.0 * (shift.accuracy - trend.beta(standard.accuracy)),
        relative: other_shift.map(|o| relative_robustness(shift.accuracy, o.accuracy)),
    })
}

/// `acc₂(m') − acc₂(m)` in percentage points.
pub fn relative_robustness(acc_model: f64, acc_other: f64) -> f64 {
    100.0 * (acc_model - acc_other)
}

/// Formats a percentage-point value at the paper's two-decimal precision.
pub fn format_points(v: f64) -> String {
    format!("{v:+.2}")
}

/// One point of a Figure-1-style scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub acc1: f64,
    pub acc2: f64,
    pub probit_acc1: f64,
    pub probit_acc2: f64,
    pub tag: String,
}

impl ScatterRow {
    pub fn new(acc1: f64, acc2: f64, tag: impl Into<String>) -> Self {
        Self { acc1, acc2, probit_acc1: probit(acc1), probit_acc2: probit(acc2), tag: tag.into() }
    }
}
