//! Trains the supervised reference classifier, saves a snapshot and checks
//! that the reloaded model predicts identically.

use zsrobust::metrics::{evaluate_accuracy, predictions, RecordKind};
use zsrobust::model::snapshot::{load, save_classifier, Snapshot};
use zsrobust::model::{train_classifier, Arch, TrainConfig};
use zsrobust::shiftgen::{generate_toy_dataset, ShiftVariant, ToySpec};

fn main() -> anyhow::Result<()> {
    let train = generate_toy_dataset(&ToySpec::new(60, 1))?;
    let test = generate_toy_dataset(&ToySpec::new(20, 2))?;
    let shifted = generate_toy_dataset(&ToySpec::new(20, 2).with_shift(ShiftVariant::Background))?;

    let config = TrainConfig { epochs: 30, learning_rate: 3e-3, seed: 3, ..TrainConfig::default() };
    for arch in [Arch::Linear { pool: 2 }, Arch::Mlp { hidden: vec![64], pool: 2 }] {
        let model = train_classifier(&train, &arch, &config)?;
        let clean = evaluate_accuracy(&model, &test, RecordKind::Standard, 4)?;
        let shift = evaluate_accuracy(&model, &shifted, RecordKind::Shift, 4)?;
        println!("{arch:?}: clean {:.3}, background shift {:.3}", clean.accuracy, shift.accuracy);

        let path = std::env::temp_dir().join("zsrobust-example.rozm");
        save_classifier(&path, &model)?;
        let Snapshot::Classifier(back) = load(&path)? else { anyhow::bail!("snapshot kind changed") };
        anyhow::ensure!(predictions(&back, &test, 4)? == predictions(&model, &test, 4)?, "reloaded model disagrees");
    }
    Ok(())
}
