//! Logit-only attacks: NES and SPSA gradient estimates in a BIM-style loop.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_labels, find_min_perturbation, judge_outcome, project, sign, Access, AttackConfig, AttackOutcome, Goal, Method, Mode};
use crate::error::{invalid, Error, Result};
use crate::image::{Image, LabeledExample};
use crate::model::{argmax, forward_logits, Classifier, Direction};
use crate::rng::substream;
use crate::tape::cross_entropy;

/// NES with antithetic Gaussian directions:
/// `ĝ = 1/(2σn) Σ [L(x+σuᵢ) − L(x−σuᵢ)] uᵢ` over `pairs` directions.
pub fn nes_estimate<F>(loss: &mut F, x: &[f64], pairs: usize, sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_sampling(pairs, sigma)?;
    let mut grad = vec![0.0; x.len()];
    let mut plus = vec![0.0; x.len()];
    let mut minus = vec![0.0; x.len()];
    for _ in 0..pairs {
        let u: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..x.len() {
            plus[i] = x[i] + sigma * u[i];
            minus[i] = x[i] - sigma * u[i];
        }
        let diff = loss(&plus)? - loss(&minus)?;
        for (g, ui) in grad.iter_mut().zip(&u) {
            *g += diff * ui;
        }
    }
    let k = 1.0 / (2.0 * sigma * pairs as f64);
    grad.iter_mut().for_each(|g| *g *= k);
    Ok(grad)
}

/// SPSA with Rademacher directions Δ:
/// `ĝᵢ = mean over pairs of [L(x+σΔ) − L(x−σΔ)] / (2σΔᵢ)`.
pub fn spsa_estimate<F>(loss: &mut F, x: &[f64], pairs: usize, sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_sampling(pairs, sigma)?;
    let mut grad = vec![0.0; x.len()];
    let mut plus = vec![0.0; x.len()];
    let mut minus = vec![0.0; x.len()];
    for _ in 0..pairs {
        let d: Vec<f64> = (0..x.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        for i in 0..x.len() {
            plus[i] = x[i] + sigma * d[i];
            minus[i] = x[i] - sigma * d[i];
        }
        let diff = loss(&plus)? - loss(&minus)?;
        for (g, di) in grad.iter_mut().zip(&d) {
            *g += diff / (2.0 * sigma * di);
        }
    }
    let k = 1.0 / pairs as f64;
    grad.iter_mut().for_each(|g| *g *= k);
    Ok(grad)
}

fn check_sampling(pairs: usize, sigma: f64) -> Result<()> {
    if pairs == 0 {
        return Err(invalid("estimator needs at least one sample pair"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("smoothing sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Attack loss seen through logits only. Query points are clamped into
/// `[0,1]` so every query is a valid image.
fn logit_loss<'a>(model: &'a dyn Classifier, image: &'a Image, class: usize, direction: Direction, queries: &'a mut u64) -> impl FnMut(&[f64]) -> Result<f64> + 'a {
    let (h, w) = (image.height(), image.width());
    move |x: &[f64]| {
        *queries += 1;
        let probe = Image::from_clamped(h, w, x.to_vec())?;
        let ce = cross_entropy(&forward_logits(model, &probe)?, class);
        Ok(match direction {
            Direction::Maximize => ce,
            Direction::Minimize => -ce,
        })
    }
}

fn estimate(model: &dyn Classifier, image: &Image, class: usize, direction: Direction, config: &AttackConfig, rng: &mut impl Rng, queries: &mut u64) -> Result<Vec<f64>> {
    let est = config.resolved_estimator();
    est.validate()?;
    let mut loss = logit_loss(model, image, class, direction, queries);
    match config.method {
        Method::Nes => nes_estimate(&mut loss, image.data(), est.samples, est.sigma, rng),
        Method::Spsa => spsa_estimate(&mut loss, image.data(), est.samples, est.sigma, rng),
        m => Err(invalid(format!("{} is not a black-box method", m.as_str()))),
    }
}

/// Estimated ascent direction of the cross-entropy of `label`, using only
/// logits. Draws from the `(config.seed, "estimator", 0)` stream.
pub fn estimate_gradient_black_box(model: &dyn Classifier, image: &Image, label: usize, config: &AttackConfig) -> Result<Vec<f64>> {
    if label >= model.num_classes() {
        return Err(invalid(format!("label {label} >= class count {}", model.num_classes())));
    }
    let mut rng = substream(config.seed, "estimator", 0);
    let mut queries = 0;
    estimate(model, image, label, Direction::Maximize, config, &mut rng, &mut queries)
}

/// NES/SPSA attack. Reported queries are the estimator's logit queries,
/// exactly `steps · samples · 2`.
pub fn run_black_box_attack(model: &dyn Classifier, example: &LabeledExample, config: &AttackConfig) -> Result<AttackOutcome> {
    if !config.method.is_black_box() {
        return Err(invalid(format!("{} is not a black-box method", config.method.as_str())));
    }
    config.validate()?;
    if config.mode == Mode::MinPerturbation {
        let mut c = config.clone();
        c.steps = Some(config.resolved_steps(Access::BlackBox));
        return find_min_perturbation(&|ex: &LabeledExample, c: &AttackConfig| run_black_box_attack(model, ex, c), example, &c);
    }
    let goal = Goal::new(example, config)?;
    check_labels(model, &goal)?;
    let steps = config.resolved_steps(Access::BlackBox);
    let alpha = config.resolved_step_size(steps);
    let clean = example.image.data();
    let (h, w) = (example.image.height(), example.image.width());
    let mut rng = substream(config.seed, "estimator", 0);
    let mut queries = 0;
    let mut adv = example.image.clone();
    for _ in 0..steps {
        let g = match estimate(model, &adv, goal.loss_class(), goal.direction(), config, &mut rng, &mut queries) {
            Ok(g) => g,
            Err(Error::NonFinite(msg)) => {
                let pred = forward_logits(model, &example.image).ok().map(|z| argmax(&z));
                return Ok(AttackOutcome::flagged(&example.image, config.epsilon, pred, queries, msg));
            }
            Err(e) => return Err(e),
        };
        let mut data = adv.into_data();
        for (a, gi) in data.iter_mut().zip(&g) {
            *a += alpha * sign(*gi);
        }
        project(&mut data, clean, config.epsilon);
        adv = Image::new(h, w, data)?;
    }
    judge_outcome(model, example, &goal, adv, config.epsilon, queries)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{linear_example, linear_model};
    use super::super::Estimator;
    use super::*;
    use crate::image::InputShape;
    use crate::model::ConstantClassifier;
    use crate::tape::dot;
    use rand::SeedableRng;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn constant_model_estimates_zero() {
        let m = ConstantClassifier { shape: InputShape::new(2, 2), logits: vec![0.3, 0.1] };
        let img = Image::filled(2, 2, 0.5).unwrap();
        for method in [Method::Nes, Method::Spsa] {
            let g = estimate_gradient_black_box(&m, &img, 0, &AttackConfig::budgeted(method, 0.1)).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn nes_tracks_quadratic_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let d = 48;
        let x0: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let mut loss = |p: &[f64]| Ok(p.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        let g = nes_estimate(&mut loss, &x, 1000, 0.01, &mut rng).unwrap();
        let exact: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| 2.0 * (a - b)).collect();
        assert!(cosine(&g, &exact) >= 0.95);
    }

    #[test]
    fn spsa_is_exact_in_one_dimension() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut loss = |p: &[f64]| Ok(-1.7 * p[0]);
        let g = spsa_estimate(&mut loss, &[0.4], 500, 0.01, &mut rng).unwrap();
        assert!((g[0] + 1.7).abs() < 1e-9);
    }

    #[test]
    fn query_accounting() {
        let m = linear_model();
        let ex = linear_example();
        for (method, n) in [(Method::Nes, 6), (Method::Spsa, 4)] {
            let mut c = AttackConfig::budgeted(method, 0.02);
            c.estimator = Some(Estimator { samples: n, sigma: 0.01 });
            c.steps = Some(5);
            let o = run_black_box_attack(&m, &ex, &c).unwrap();
            assert_eq!(o.queries, 5 * n as u64 * 2);
            assert!(o.linf_distance <= 0.02 + 1e-12);
        }
    }

    #[test]
    fn black_box_attack_flips_the_linear_model() {
        let c = AttackConfig::budgeted(Method::Nes, 0.08).with_seed(1);
        let o = run_black_box_attack(&linear_model(), &linear_example(), &c).unwrap();
        assert!(o.success);
    }

    #[test]
    fn odd_or_nonpositive_sampling_rejected() {
        let m = linear_model();
        let mut c = AttackConfig::budgeted(Method::Spsa, 0.02);
        c.estimator = Some(Estimator { samples: 5, sigma: 0.01 });
        assert!(run_black_box_attack(&m, &linear_example(), &c).is_err());
        c.estimator = Some(Estimator { samples: 4, sigma: -1.0 });
        assert!(estimate_gradient_black_box(&m, &linear_example().image, 0, &c).is_err());
    }
}
