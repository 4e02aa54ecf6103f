//! Generates the toy shape dataset and its shifted variants, then saves the
//! clean split as PNGs with a manifest.
//!
//!     cargo run --example toy_data -- /tmp/toy

use anyhow::Context;
use zsrobust::shiftgen::io::{load_dataset, save_dataset, Storage};
use zsrobust::shiftgen::{generate_toy_dataset, ShiftVariant, ToySpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("zsrobust-toy").display().to_string());

    for shift in [ShiftVariant::None, ShiftVariant::Background, ShiftVariant::Texture] {
        let ds = generate_toy_dataset(&ToySpec::new(10, 1).with_shift(shift))?;
        println!("{:<10} {} images of {:?}, hash {}", shift.as_str(), ds.len(), ds.class_names, &ds.content_hash()[..12]);
    }

    let clean = generate_toy_dataset(&ToySpec::new(10, 1))?;
    let dir = std::path::Path::new(&out);
    save_dataset(dir, &clean, Storage::Png, serde_json::json!({"generator": "toy", "seed": 1}))?;
    let (back, manifest) = load_dataset(dir).context("reloading the saved set")?;
    println!("wrote {} entries to {out}; reload hash matches: {}", manifest.entries.len(), back.content_hash() == manifest.content_hash);
    Ok(())
}
