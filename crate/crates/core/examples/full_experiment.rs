//! Runs the whole pipeline from a JSON config (or a small default) and prints
//! the stage ledger and the typographic comparison.
//!
//!     cargo run --release --example full_experiment -- config.json /tmp/run

use zsrobust::harness::{run_experiment, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let config: ExperimentConfig = match args.next() {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => serde_json::from_value(serde_json::json!({
            "version": 1,
            "seed": 3,
            "typographic": {"k_coords": 1},
            "attacks": {"samples": 10, "configs": [{"method": "fgsm"}, {"method": "bim", "mode": "min_perturbation"}]}
        }))?,
    };
    config.validate()?;
    let out = args.next().map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("zsrobust-run"));

    let run = run_experiment(&config, &out)?;
    for s in &run.ledger.stages {
        println!("{:<18} {:?}", s.name, s.status);
    }
    if let Some(t) = &run.report.derived.typographic {
        println!("typographic success: {} {:.3}, {} {:.3}", t.zero_shot_model, t.zero_shot_success, t.supervised_model, t.supervised_success);
    }
    println!("report in {}", out.display());
    anyhow::ensure!(run.succeeded(), "some stages failed");
    Ok(())
}
