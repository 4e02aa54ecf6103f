//! Flags test images that nearly duplicate training images and reports how
//! much accuracy depends on them.

use zsrobust::dedup::{build_embedding_index, overlap_sweep_report, sweep_csv, RandomProjectionEmbedder, DEFAULT_THRESHOLDS};
use zsrobust::model::{train_classifier, Arch, TrainConfig};
use zsrobust::shiftgen::{generate_toy_dataset, ToySpec};
use zsrobust::{Dataset, InputShape};

fn main() -> anyhow::Result<()> {
    let train = generate_toy_dataset(&ToySpec::new(30, 1))?;
    let fresh = generate_toy_dataset(&ToySpec::new(10, 2))?;
    // Leak a quarter of the test set straight from the training data.
    let mut examples = fresh.examples.clone();
    for (i, e) in examples.iter_mut().enumerate().filter(|(i, _)| i % 4 == 0) {
        *e = train.examples[i * 3].clone();
    }
    let test = Dataset::new("leaky", fresh.class_names.clone(), examples)?;

    let model = train_classifier(&train, &Arch::default(), &TrainConfig { epochs: 30, learning_rate: 3e-3, ..TrainConfig::default() })?;
    let embedder = RandomProjectionEmbedder::new(InputShape::new(32, 32), 64, 4);
    let train_index = build_embedding_index(&embedder, &train, 4)?;
    let test_index = build_embedding_index(&embedder, &test, 4)?;
    let sweep = overlap_sweep_report(&model, &test, &test_index, &train_index, &DEFAULT_THRESHOLDS, 4)?;
    print!("{}", sweep_csv(&sweep));
    Ok(())
}
