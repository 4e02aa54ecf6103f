//! Corruption grid and perturbation-sequence stability for a small trained
//! classifier.

use zsrobust::metrics::{corruption_summary, evaluate_accuracy, sequence_stability, RecordKind};
use zsrobust::model::{train_classifier, Arch, TrainConfig};
use zsrobust::shiftgen::{build_perturbation_sequences, corrupt_dataset, generate_toy_dataset, CorruptionKind, CorruptionSpec, SequenceKind, ToySpec};

fn main() -> anyhow::Result<()> {
    let train = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(40, 1) })?;
    let test = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(10, 2) })?;
    let model = train_classifier(&train, &Arch::default(), &TrainConfig { epochs: 30, learning_rate: 3e-3, ..TrainConfig::default() })?;

    let mut grid = Vec::new();
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::Contrast, CorruptionKind::Pixelate] {
        let mut row = Vec::new();
        for severity in 1..=5 {
            let shifted = corrupt_dataset(&test, CorruptionSpec::new(kind, severity)?, 3, 4)?;
            row.push(100.0 * evaluate_accuracy(&model, &shifted, RecordKind::Shift, 4)?.accuracy);
        }
        println!("{:<15} {}", kind.as_str(), row.iter().map(|a| format!("{a:6.1}")).collect::<String>());
        grid.push((kind.as_str().to_string(), row));
    }
    println!("mean corruption accuracy {:.2}", corruption_summary(&grid)?.overall);

    let mut seqs = build_perturbation_sequences(&test, SequenceKind::Translate, 6, 5, 4)?;
    seqs.extend(build_perturbation_sequences(&test, SequenceKind::GaussianNoise, 6, 5, 4)?);
    let report = sequence_stability(&model, &seqs, None, 4)?;
    for k in &report.kinds {
        println!("{:<15} flip rate {:.3}  top-5 distance {:.3}", k.kind, k.fr_raw, k.t5d_raw);
    }
    Ok(())
}
