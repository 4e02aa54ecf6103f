//! Connects to an external model peer and attacks it like a native model.
//!
//!     cargo run --example bridge_client -- tcp:127.0.0.1:7000
//!     cargo run --example bridge_client -- "python -m bridge serve"

use zsrobust::attacks::{evaluate_under_attack, AttackConfig, Method, Threat};
use zsrobust::model::bridge::connect_external_model;
use zsrobust::model::Classifier;
use zsrobust::shiftgen::{generate_toy_dataset, ToySpec};
use zsrobust::Dataset;

fn main() -> anyhow::Result<()> {
    let endpoint = std::env::args().nth(1).ok_or_else(|| anyhow::anyhow!("usage: bridge_client <tcp:HOST:PORT | command>"))?;
    let peer = connect_external_model(&endpoint.parse()?)?;
    let info = peer.info().clone();
    println!("peer at {}: {} classes, input {:?}, gradients {}", peer.endpoint(), info.classes.len(), peer.input_shape(), info.has_input_gradient);

    let shape = peer.input_shape();
    let toy = generate_toy_dataset(&ToySpec { size: shape.h, ..ToySpec::new(2, 1) })?;
    // Reuse toy images under the peer's class names.
    let examples = toy.examples.into_iter().map(|mut e| {
        e.label %= info.classes.len();
        e
    });
    let ds = Dataset::new("probe", info.classes.clone(), examples.collect())?;

    let method = if info.has_input_gradient { Method::Fgsm } else { Method::Nes };
    let run = evaluate_under_attack(Threat::direct(&peer, method), &ds, &AttackConfig::budgeted(method, 8.0 / 255.0), 1)?;
    println!("{} robust accuracy {:.3} over {} images", method.as_str(), run.summary.robust_accuracy, run.summary.count);
    Ok(())
}
