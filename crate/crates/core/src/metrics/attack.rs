use serde::{Deserialize, Serialize};

use crate::attacks::{AttackRecord, Mode};
use crate::error::{invalid, Result};

/// Aggregate of one attack configuration over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub count: usize,
    /// Fraction still classified correctly after the attack.
    pub robust_accuracy: f64,
    pub success_rate: f64,
    /// Median minimum ℓ∞ distance over minimum-perturbation records.
    /// Already-misclassified samples count as 0, unfound ones at ε_max.
    pub median_min_linf: Option<f64>,
    pub unfound_count: usize,
    pub flagged_count: usize,
    pub total_queries: u64,
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn summarize_attack_outcomes(records: &[AttackRecord]) -> Result<AttackSummary> {
    if records.is_empty() {
        return Err(invalid("no attack outcomes to summarize"));
    }
    let n = records.len() as f64;
    let min_distances: Vec<f64> = records.iter().filter(|r| r.mode == Mode::MinPerturbation).map(|r| r.linf).collect();
    Ok(AttackSummary {
        count: records.len(),
        robust_accuracy: records.iter().filter(|r| r.correct()).count() as f64 / n,
        success_rate: records.iter().filter(|r| r.success).count() as f64 / n,
        median_min_linf: median(&min_distances),
        unfound_count: records.iter().filter(|r| r.mode == Mode::MinPerturbation && !r.found_min).count(),
        flagged_count: records.iter().filter(|r| r.flag.is_some()).count(),
        total_queries: records.iter().map(|r| r.queries).sum(),
    })
}

/// Table-1 style cell: median distance (3 decimals) / accuracy in percent.
pub fn format_attack_cell(median_linf: f64, accuracy: f64) -> String {
    format!("{median_linf:.3} / {:.2}", 100.0 * accuracy)
}
