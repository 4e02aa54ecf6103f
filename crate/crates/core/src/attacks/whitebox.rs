//! Gradient attacks: FGSM, BIM, MIM, DIM, DeepFool, and their transfer use.

use rand::Rng;

use super::diversity::ResizePad;
use super::{check_labels, find_min_perturbation, judge_outcome, project, sign, Access, AttackConfig, AttackOutcome, Goal, Method, Mode};
use crate::error::{invalid, Error, Result};
use crate::image::{Image, LabeledExample};
use crate::model::{argmax, forward_logits, input_gradient, Classifier, Direction};
use crate::rng::substream;

/// Smallest DIM shrink factor.
const DIM_MIN_SCALE: f64 = 0.9;

/// Attacks `model` with its own gradients; success is judged on `model`.
pub fn run_white_box_attack(model: &dyn Classifier, example: &LabeledExample, config: &AttackConfig) -> Result<AttackOutcome> {
    if config.method.is_black_box() {
        return Err(invalid(format!("{} is not a white-box method", config.method.as_str())));
    }
    run_gradient_attack(model, model, Access::WhiteBox, example, config)
}

/// Crafts on `substitute`, judges on `target`. With `substitute` and `target`
/// the same model this is exactly [`run_white_box_attack`].
pub fn run_transfer_attack(substitute: &dyn Classifier, target: &dyn Classifier, example: &LabeledExample, config: &AttackConfig) -> Result<AttackOutcome> {
    if !config.method.transfers() {
        return Err(invalid(format!("{} is not a transfer method", config.method.as_str())));
    }
    if substitute.num_classes() != target.num_classes() {
        return Err(invalid(format!(
            "substitute has {} classes, target has {}",
            substitute.num_classes(),
            target.num_classes()
        )));
    }
    if substitute.input_shape() != target.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: target.input_shape().to_string(),
            got: substitute.input_shape().to_string(),
        });
    }
    run_gradient_attack(substitute, target, Access::Transfer, example, config)
}

fn run_gradient_attack(source: &dyn Classifier, judge: &dyn Classifier, access: Access, example: &LabeledExample, config: &AttackConfig) -> Result<AttackOutcome> {
    config.validate()?;
    if !source.has_input_gradient() {
        return Err(Error::Unsupported(format!("model {} has no input gradient", source.snapshot_id())));
    }
    match config.mode {
        Mode::MinPerturbation if config.method != Method::DeepFool => {
            let mut c = config.clone();
            c.steps = Some(config.resolved_steps(access));
            find_min_perturbation(&|ex: &LabeledExample, c: &AttackConfig| run_gradient_attack(source, judge, access, ex, c), example, &c)
        }
        _ => {
            let goal = Goal::new(example, config)?;
            check_labels(source, &goal)?;
            let crafted = if config.method == Method::DeepFool {
                deepfool(source, example, &goal, config)
            } else {
                iterate(source, example, &goal, config, config.resolved_steps(access))
            };
            match crafted {
                Ok((adv, calls)) => {
                    let mut out = judge_outcome(judge, example, &goal, adv, config.epsilon, calls)?;
                    if config.mode == Mode::MinPerturbation {
                        // DeepFool minimizes natively.
                        out.found_min = out.success;
                        if out.success {
                            out.epsilon = out.linf_distance;
                        } else {
                            out.epsilon = config.max_epsilon;
                            out.linf_distance = config.max_epsilon;
                            out.flag.get_or_insert_with(|| "no adversarial found within the iteration cap".into());
                        }
                    }
                    Ok(out)
                }
                Err(Error::NonFinite(msg)) => {
                    let pred = forward_logits(judge, &example.image).ok().map(|z| argmax(&z));
                    Ok(AttackOutcome::flagged(&example.image, config.epsilon, pred, 0, msg))
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// FGSM (one full-ε step) and the iterative BIM / MIM / DIM family.
fn iterate(model: &dyn Classifier, example: &LabeledExample, goal: &Goal, config: &AttackConfig, steps: usize) -> Result<(Image, u64)> {
    let clean = example.image.data();
    let shape = example.image.shape();
    let (h, w) = (example.image.height(), example.image.width());
    let eps = config.epsilon;
    let (steps, alpha) = match config.method {
        Method::Fgsm => (1, eps),
        _ => (steps, config.resolved_step_size(steps)),
    };
    let momentum = matches!(config.method, Method::Mim | Method::Dim);
    let mut rng = substream(config.seed, "dim-transform", 0);
    let mut adv = clean.to_vec();
    let mut acc = vec![0.0; adv.len()];
    let mut calls = 0;
    for _ in 0..steps {
        let transform = (config.method == Method::Dim && rng.random::<f64>() < config.diversity_prob)
            .then(|| ResizePad::sample(shape, DIM_MIN_SCALE, &mut rng));
        let grad = match &transform {
            Some(t) => {
                let probe = Image::new(h, w, t.apply(&adv))?;
                calls += 1;
                t.transpose(&input_gradient(model, &probe, goal.loss_class(), goal.direction())?)
            }
            None => {
                calls += 1;
                input_gradient(model, &Image::new(h, w, adv.clone())?, goal.loss_class(), goal.direction())?
            }
        };
        let dir = if momentum {
            let l1: f64 = grad.iter().map(|g| g.abs()).sum();
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a = config.momentum_decay * *a + if l1 > 0.0 { g / l1 } else { 0.0 };
            }
            &acc
        } else {
            &grad
        };
        for (a, d) in adv.iter_mut().zip(dir) {
            *a += alpha * sign(*d);
        }
        project(&mut adv, clean, eps);
    }
    Ok((Image::new(h, w, adv)?, calls))
}

/// Multiclass ℓ∞ DeepFool. Class-score gradient differences come from
/// cross-entropy gradients: ∇CE_y − ∇CE_k = ∇f_k − ∇f_y.
fn deepfool(model: &dyn Classifier, example: &LabeledExample, goal: &Goal, config: &AttackConfig) -> Result<(Image, u64)> {
    let clean = example.image.data();
    let (h, w) = (example.image.height(), example.image.width());
    let y = goal.label;
    let candidates: Vec<usize> = match goal.target {
        Some(t) => vec![t],
        None => (0..model.num_classes()).filter(|&k| k != y).collect(),
    };
    let mut total = vec![0.0; clean.len()];
    let mut adv = example.image.clone();
    let mut calls = 0;
    for _ in 0..DEEPFOOL_ITERATIONS {
        let z = forward_logits(model, &adv)?;
        if goal.reached(argmax(&z)) {
            break;
        }
        let g_y = input_gradient(model, &adv, y, Direction::Maximize)?;
        calls += 1;
        let mut best: Option<(f64, Vec<f64>)> = None;
        for &k in &candidates {
            let g_k = input_gradient(model, &adv, k, Direction::Maximize)?;
            calls += 1;
            let wk: Vec<f64> = g_y.iter().zip(&g_k).map(|(a, b)| a - b).collect();
            let l1: f64 = wk.iter().map(|v| v.abs()).sum();
            if l1 == 0.0 {
                continue;
            }
            let ratio = (z[k] - z[y]).abs() / l1;
            if best.as_ref().is_none_or(|(r, _)| ratio < *r) {
                best = Some((ratio, wk));
            }
        }
        let Some((ratio, wk)) = best else { break };
        for (t, v) in total.iter_mut().zip(&wk) {
            *t += ratio * sign(*v);
        }
        let scale = 1.0 + config.overshoot;
        adv = Image::from_clamped(h, w, clean.iter().zip(&total).map(|(x, t)| x + scale * t).collect())?;
    }
    let mut data = adv.into_data();
    if config.mode == Mode::Budgeted {
        // Budgeted DeepFool: the minimal step is capped at ε.
        project(&mut data, clean, config.epsilon);
    }
    Ok((Image::new(h, w, data)?, calls))
}

const DEEPFOOL_ITERATIONS: usize = super::DEEPFOOL_MAX_ITERATIONS;
