use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Number of severities per corruption.
pub const SEVERITIES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSummary {
    /// `(corruption, mean over severities)` in input order.
    pub per_corruption: Vec<(String, f64)>,
    /// Mean of the per-corruption means.
    pub overall: f64,
}

/// Averages each corruption over its five severities, then across corruptions.
pub fn corruption_summary(grid: &[(String, Vec<f64>)]) -> Result<CorruptionSummary> {
    if grid.is_empty() {
        return Err(invalid("empty corruption grid"));
    }
    let mut per = Vec::with_capacity(grid.len());
    for (name, row) in grid {
        if row.len() != SEVERITIES {
            return Err(invalid(format!("corruption {name} has {} severities, expected {SEVERITIES}", row.len())));
        }
        per.push((name.clone(), row.iter().sum::<f64>() / SEVERITIES as f64));
    }
    let overall = per.iter().map(|(_, m)| m).sum::<f64>() / per.len() as f64;
    Ok(CorruptionSummary { per_corruption: per, overall })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_grid() {
        let g: Vec<(String, Vec<f64>)> = (0..3).map(|i| (format!("c{i}"), vec![0.4; 5])).collect();
        let s = corruption_summary(&g).unwrap();
        assert!(s.per_corruption.iter().all(|(_, m)| (m - 0.4).abs() < 1e-15));
        assert!((s.overall - 0.4).abs() < 1e-15);
    }

    #[test]
    fn loop_oracle() {
        let g: Vec<(String, Vec<f64>)> = (0..4).map(|i| (format!("c{i}"), (0..5).map(|s| ((i * 7 + s * 3) % 11) as f64 / 11.0).collect())).collect();
        let s = corruption_summary(&g).unwrap();
        let mut total = 0.0;
        for (_, row) in &g {
            let mut acc = 0.0;
            for v in row {
                acc += v;
            }
            total += acc / 5.0;
        }
        assert!((s.overall - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn missing_severity_rejected() {
        assert!(corruption_summary(&[("x".into(), vec![0.1; 4])]).is_err());
    }
}
