//! Fits the baseline accuracy trend and computes effective and relative
//! robustness for a model that sits above it.

use zsrobust::metrics::{compute_robustness_gaps, fit_baseline_trend, format_points, relative_robustness, EvalRecord, RecordKind};

fn record(model: &str, dataset: &str, accuracy: f64, kind: RecordKind) -> EvalRecord {
    EvalRecord { model_id: model.into(), dataset_id: dataset.into(), accuracy, kind, correct: (accuracy * 1000.0) as usize, total: 1000 }
}

fn main() -> anyhow::Result<()> {
    // (clean, shifted) accuracy of supervised baselines.
    let baselines = [(0.62, 0.21), (0.70, 0.27), (0.76, 0.33), (0.80, 0.37), (0.85, 0.44)];
    let trend = fit_baseline_trend(&baselines)?;
    for acc in [0.6, 0.7, 0.8, 0.9] {
        println!("trend at {acc:.2}: {:.3}", trend.beta(acc));
    }

    let zs_clean = record("zero-shot", "clean", 0.76, RecordKind::Standard);
    let zs_shift = record("zero-shot", "shift", 0.60, RecordKind::Shift);
    let sup_shift = record("supervised", "shift", 0.35, RecordKind::Shift);
    let gaps = compute_robustness_gaps(&zs_clean, &zs_shift, &trend, Some(&sup_shift))?;
    println!("{gaps:?}");
    println!("relative robustness vs supervised: {} points", format_points(relative_robustness(zs_shift.accuracy, sup_shift.accuracy)));
    Ok(())
}
