//! Minimum-perturbation search by bisection on the budget.

use super::{AttackConfig, AttackOutcome, Method, Mode};
use crate::error::Result;
use crate::image::LabeledExample;

/// Budgeted attack runner, called with `config.mode == Budgeted`.
pub type BudgetedRunner<'a> = dyn Fn(&LabeledExample, &AttackConfig) -> Result<AttackOutcome> + 'a;

/// Bisects ε over `[0, max_epsilon]` for `search_iterations` rounds and
/// returns the outcome at the smallest successful ε. `epsilon` on the result
/// is that ε and `linf_distance` the actual perturbation size. Inputs that
/// already fail return distance 0. When even `max_epsilon` fails, the outcome
/// has `found_min = false`, distance `max_epsilon`, and a flag. DeepFool runs
/// once in its native minimizing mode.
pub fn find_min_perturbation(attack: &BudgetedRunner<'_>, example: &LabeledExample, config: &AttackConfig) -> Result<AttackOutcome> {
    config.validate()?;
    if config.method == Method::DeepFool {
        return attack(example, &AttackConfig { mode: Mode::MinPerturbation, ..config.clone() });
    }
    let at = |eps: f64| attack(example, &AttackConfig { epsilon: eps, mode: Mode::Budgeted, ..config.clone() });

    let zero = at(0.0)?;
    let mut queries = zero.queries;
    if zero.flag.is_some() {
        return Ok(zero);
    }
    if zero.success {
        return Ok(AttackOutcome { found_min: true, epsilon: 0.0, ..zero });
    }

    let top = at(config.max_epsilon)?;
    queries += top.queries;
    if !top.success {
        return Ok(AttackOutcome {
            found_min: false,
            epsilon: config.max_epsilon,
            linf_distance: config.max_epsilon,
            queries,
            flag: Some(top.flag.unwrap_or_else(|| format!("no success at epsilon {}", config.max_epsilon))),
            ..top
        });
    }

    let (mut lo, mut hi, mut best) = (0.0, config.max_epsilon, top);
    for _ in 0..config.search_iterations {
        let mid = 0.5 * (lo + hi);
        let o = at(mid)?;
        queries += o.queries;
        if o.success {
            hi = mid;
            best = o;
        } else {
            lo = mid;
        }
    }
    Ok(AttackOutcome { found_min: true, epsilon: hi, queries, ..best })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{linear_example, linear_model};
    use super::super::{run_white_box_attack, AttackConfig, Method, Mode};
    use super::*;
    use crate::image::{Image, InputShape};
    use crate::model::{Dense, FeedForward};
    use crate::tape::Matrix;
    use proptest::prelude::*;

    #[test]
    fn linear_oracle_distance() {
        for method in [Method::Fgsm, Method::Bim, Method::Mim] {
            let o = run_white_box_attack(&linear_model(), &linear_example(), &AttackConfig::min_perturbation(method)).unwrap();
            assert!(o.found_min && o.success);
            assert!(o.epsilon >= 0.05 && o.epsilon - 0.05 <= 2f64.powi(-12), "{method:?} {}", o.epsilon);
            assert!((o.linf_distance - 0.05).abs() <= 2f64.powi(-12));
        }
    }

    #[test]
    fn misclassified_input_costs_nothing() {
        let ex = LabeledExample::new(linear_example().image, 1);
        let o = run_white_box_attack(&linear_model(), &ex, &AttackConfig::min_perturbation(Method::Bim)).unwrap();
        assert!(o.success && o.found_min);
        assert_eq!(o.linf_distance, 0.0);
    }

    #[test]
    fn unreachable_target_is_flagged() {
        // Class 1 needs r − g < 0, impossible from (1, 0, ·) with max ε 0.2.
        let ex = LabeledExample::new(Image::new(1, 1, vec![1.0, 0.0, 0.5]).unwrap(), 0);
        let mut c = AttackConfig::min_perturbation(Method::Fgsm);
        c.max_epsilon = 0.2;
        let o = run_white_box_attack(&linear_model(), &ex, &c).unwrap();
        assert!(!o.found_min);
        assert_eq!(o.linf_distance, 0.2);
        assert!(o.flag.is_some());
    }

    fn margined(r: f64, g: f64, scale: f64) -> (FeedForward, LabeledExample) {
        let w = Matrix::from_vec(3, 2, vec![scale, 0.0, -scale, 0.0, 0.0, 0.0]);
        let m = FeedForward::new(InputShape::new(1, 1), 1, vec![Dense::new(w, vec![0.0, 0.0]).unwrap()]).unwrap();
        (m, LabeledExample::new(Image::new(1, 1, vec![r, g, 0.3]).unwrap(), 0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn replay_consistency(r in 0.2f64..0.9, gap in 0.01f64..0.15, scale in 0.5f64..3.0, method in 0usize..3) {
            let method = [Method::Fgsm, Method::Bim, Method::Mim][method];
            let (m, ex) = margined(r, r - gap, scale);
            let mut c = AttackConfig::min_perturbation(method);
            c.search_iterations = 24;
            let o = run_white_box_attack(&m, &ex, &c).unwrap();
            prop_assert!(o.found_min);
            let replay = |eps: f64| {
                let mut b = AttackConfig { epsilon: eps, mode: Mode::Budgeted, ..c.clone() };
                b.steps = Some(20);
                run_white_box_attack(&m, &ex, &b).unwrap().success
            };
            prop_assert!(replay(o.epsilon));
            prop_assert!(!replay(o.epsilon * (1.0 - 2f64.powi(-10))));
        }

        #[test]
        fn default_search_brackets_the_minimum(r in 0.2f64..0.9, gap in 0.01f64..0.15) {
            let (m, ex) = margined(r, r - gap, 1.0);
            let o = run_white_box_attack(&m, &ex, &AttackConfig::min_perturbation(Method::Fgsm)).unwrap();
            prop_assert!(o.found_min);
            prop_assert!(o.epsilon >= gap / 2.0 - 1e-12);
            prop_assert!(o.epsilon - gap / 2.0 <= 2f64.powi(-12));
        }
    }
}
