//! Runs every attack method against a trained classifier: budgeted robust
//! accuracy, minimum-perturbation medians, and a transfer attack.

use zsrobust::attacks::{evaluate_under_attack, AttackConfig, Method, Threat, DEFAULT_EPSILON};
use zsrobust::metrics::format_attack_cell;
use zsrobust::model::{train_classifier, Arch, TrainConfig};
use zsrobust::shiftgen::{generate_toy_dataset, ToySpec};

fn main() -> anyhow::Result<()> {
    let train = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(40, 1) })?;
    let test = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(4, 2) })?;
    let target = train_classifier(&train, &Arch::default(), &TrainConfig { epochs: 30, learning_rate: 3e-3, ..TrainConfig::default() })?;
    let source = train_classifier(&train, &Arch::Linear { pool: 2 }, &TrainConfig { epochs: 30, learning_rate: 3e-3, seed: 9, ..TrainConfig::default() })?;

    println!("{:<9} {:>8} {:>16} {:>9}", "method", "acc@8", "median min-pert", "queries");
    for method in Method::ALL {
        let threat = Threat::direct(&target, method);
        let budgeted = evaluate_under_attack(threat, &test, &AttackConfig::budgeted(method, DEFAULT_EPSILON), 4)?;
        let minpert = evaluate_under_attack(threat, &test, &AttackConfig::min_perturbation(method), 4)?;
        let median = minpert.summary.median_min_linf.unwrap_or(f64::NAN);
        println!(
            "{:<9} {:>8.3} {:>16} {:>9}",
            method.as_str(),
            budgeted.summary.robust_accuracy,
            format_attack_cell(median, budgeted.summary.robust_accuracy),
            budgeted.summary.total_queries
        );
    }

    let transfer = evaluate_under_attack(Threat::Transfer { substitute: &source, target: &target }, &test, &AttackConfig::budgeted(Method::Mim, DEFAULT_EPSILON), 4)?;
    println!("MIM transferred from the linear model: robust accuracy {:.3}", transfer.summary.robust_accuracy);
    Ok(())
}
