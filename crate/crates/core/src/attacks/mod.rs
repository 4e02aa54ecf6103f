//! Adversarial attacks under the ℓ∞ threat model.
//!
//! Three access modes share one configuration type:
//!
//! * white-box: FGSM, BIM, MIM, DIM and DeepFool on exact input gradients;
//! * transfer: FGSM/BIM/MIM/DIM crafted on a substitute, judged on a target;
//! * black-box: NES and SPSA gradient estimates driving a BIM-style loop.
//!
//! Each runs either with a fixed budget ε or as a minimum-perturbation search
//! ([`find_min_perturbation`]).

mod blackbox;
mod diversity;
mod minpert;
mod whitebox;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Dataset, Image, LabeledExample};
use crate::metrics::{summarize_attack_outcomes, AttackSummary};
use crate::model::{predict, Classifier, Direction};
use crate::parallel::try_map_indexed;
use crate::rng::derive_seed;

pub use blackbox::{estimate_gradient_black_box, nes_estimate, run_black_box_attack, spsa_estimate};
pub use diversity::ResizePad;
pub use minpert::find_min_perturbation;
pub use whitebox::{run_transfer_attack, run_white_box_attack};

/// Default perturbation budget, 8/255.
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
/// Upper end of the minimum-perturbation search interval.
pub const DEFAULT_MAX_EPSILON: f64 = 1.0;
/// Bisection iterations of the minimum-perturbation search.
pub const DEFAULT_SEARCH_ITERATIONS: usize = 12;
/// Iteration cap of DeepFool.
pub const DEEPFOOL_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Bim,
    Mim,
    Dim,
    #[serde(rename = "deepfool")]
    DeepFool,
    Nes,
    Spsa,
}

impl Method {
    pub const ALL: [Method; 7] = [Method::Fgsm, Method::Bim, Method::Mim, Method::Dim, Method::DeepFool, Method::Nes, Method::Spsa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Bim => "bim",
            Method::Mim => "mim",
            Method::Dim => "dim",
            Method::DeepFool => "deepfool",
            Method::Nes => "nes",
            Method::Spsa => "spsa",
        }
    }

    pub fn is_black_box(self) -> bool {
        matches!(self, Method::Nes | Method::Spsa)
    }

    /// Methods usable on a substitute model.
    pub fn transfers(self) -> bool {
        matches!(self, Method::Fgsm | Method::Bim | Method::Mim | Method::Dim)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown attack method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Budgeted,
    MinPerturbation,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Budgeted => "budgeted",
            Mode::MinPerturbation => "min_perturbation",
        }
    }
}

/// Only the ℓ∞ threat model is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    WhiteBox,
    Transfer,
    BlackBox,
}

impl Access {
    pub fn as_str(self) -> &'static str {
        match self {
            Access::WhiteBox => "white_box",
            Access::Transfer => "transfer",
            Access::BlackBox => "black_box",
        }
    }
}

/// Sampling parameters of NES and SPSA. `samples` counts antithetic pairs, so
/// one estimate costs `2 · samples` queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimator {
    pub samples: usize,
    pub sigma: f64,
}

impl Estimator {
    pub fn default_for(method: Method) -> Self {
        match method {
            Method::Spsa => Estimator { samples: 64, sigma: 0.01 },
            _ => Estimator { samples: 50, sigma: 0.01 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.samples % 2 != 0 {
            return Err(invalid(format!("estimator samples must be even and >= 2, got {}", self.samples)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("estimator sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Iteration count; `None` picks the per-method default for the access mode.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Per-step size; `None` means `max(ε / steps, 1/255)`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum_decay: f64,
    #[serde(default = "default_diversity")]
    pub diversity_prob: f64,
    /// Defaults per method when absent.
    #[serde(default)]
    pub estimator: Option<Estimator>,
    #[serde(default = "default_overshoot")]
    pub overshoot: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub targeted: bool,
    #[serde(default = "default_search_iterations")]
    pub search_iterations: usize,
    #[serde(default = "default_max_epsilon")]
    pub max_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_momentum() -> f64 {
    1.0
}
fn default_diversity() -> f64 {
    0.5
}
fn default_overshoot() -> f64 {
    0.02
}
fn default_mode() -> Mode {
    Mode::Budgeted
}
fn default_search_iterations() -> usize {
    DEFAULT_SEARCH_ITERATIONS
}
fn default_max_epsilon() -> f64 {
    DEFAULT_MAX_EPSILON
}

impl AttackConfig {
    pub fn new(method: Method, mode: Mode) -> Self {
        Self {
            method,
            norm: Norm::Linf,
            epsilon: DEFAULT_EPSILON,
            steps: None,
            step_size: None,
            momentum_decay: default_momentum(),
            diversity_prob: default_diversity(),
            estimator: None,
            overshoot: default_overshoot(),
            mode,
            targeted: false,
            search_iterations: DEFAULT_SEARCH_ITERATIONS,
            max_epsilon: DEFAULT_MAX_EPSILON,
            seed: 0,
        }
    }

    pub fn budgeted(method: Method, epsilon: f64) -> Self {
        Self { epsilon, ..Self::new(method, Mode::Budgeted) }
    }

    pub fn min_perturbation(method: Method) -> Self {
        Self::new(method, Mode::MinPerturbation)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Iterations: BIM/MIM/DIM and NES/SPSA use 12 budgeted and 20 inside the
    /// minimum search; transfer attacks use 12 and 10; DeepFool caps at 50.
    pub fn resolved_steps(&self, access: Access) -> usize {
        if let Some(s) = self.steps {
            return s;
        }
        match (self.method, access, self.mode) {
            (Method::Fgsm, _, _) => 1,
            (Method::DeepFool, _, _) => DEEPFOOL_MAX_ITERATIONS,
            (_, _, Mode::Budgeted) => 12,
            (_, Access::Transfer, Mode::MinPerturbation) => 10,
            (_, _, Mode::MinPerturbation) => 20,
        }
    }

    pub fn resolved_step_size(&self, steps: usize) -> f64 {
        self.step_size.unwrap_or_else(|| (self.epsilon / steps.max(1) as f64).max(1.0 / 255.0))
    }

    pub fn resolved_estimator(&self) -> Estimator {
        self.estimator.unwrap_or_else(|| Estimator::default_for(self.method))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(invalid(format!("epsilon must lie in [0,1], got {}", self.epsilon)));
        }
        if self.steps == Some(0) {
            return Err(invalid("steps must be >= 1"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("step size must be positive, got {s}")));
            }
        }
        if !(self.momentum_decay >= 0.0 && self.momentum_decay.is_finite()) {
            return Err(invalid(format!("momentum decay must be >= 0, got {}", self.momentum_decay)));
        }
        if !(0.0..=1.0).contains(&self.diversity_prob) {
            return Err(invalid(format!("diversity probability must lie in [0,1], got {}", self.diversity_prob)));
        }
        if !(self.overshoot >= 0.0 && self.overshoot.is_finite()) {
            return Err(invalid(format!("overshoot must be >= 0, got {}", self.overshoot)));
        }
        if self.search_iterations == 0 {
            return Err(invalid("search iterations must be >= 1"));
        }
        if !(self.max_epsilon > 0.0 && self.max_epsilon <= 1.0) {
            return Err(invalid(format!("max epsilon must lie in (0,1], got {}", self.max_epsilon)));
        }
        self.resolved_estimator().validate()
    }
}

/// Result of attacking one example.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    pub adversarial: Image,
    /// `max |adversarial − clean|`; in an unfound minimum search, `max_epsilon`.
    pub linf_distance: f64,
    /// Budget used, or the smallest successful ε of a minimum search.
    pub epsilon: f64,
    /// Gradient calls (white-box, transfer) or logit queries (black-box).
    pub queries: u64,
    pub found_min: bool,
    /// Prediction of the judging model on the adversarial image.
    pub prediction: Option<usize>,
    /// Why the attack was cut short, if it was.
    pub flag: Option<String>,
}

impl AttackOutcome {
    pub(crate) fn flagged(clean: &Image, epsilon: f64, prediction: Option<usize>, queries: u64, reason: String) -> Self {
        Self {
            success: false,
            adversarial: clean.clone(),
            linf_distance: 0.0,
            epsilon,
            queries,
            found_min: false,
            prediction,
            flag: Some(reason),
        }
    }
}

/// Per-sample primitives, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub method: Method,
    pub mode: Mode,
    pub epsilon: f64,
    pub success: bool,
    pub linf: f64,
    pub queries: u64,
    pub found_min: bool,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl AttackRecord {
    pub fn from_outcome(index: usize, config: &AttackConfig, label: usize, o: &AttackOutcome) -> Self {
        Self {
            index,
            method: config.method,
            mode: config.mode,
            epsilon: o.epsilon,
            success: o.success,
            linf: o.linf_distance,
            queries: o.queries,
            found_min: o.found_min,
            label,
            prediction: o.prediction,
            flag: o.flag.clone(),
        }
    }

    /// Still classified correctly after the attack.
    pub fn correct(&self) -> bool {
        self.prediction == Some(self.label)
    }
}

/// How the attacker reaches the model.
#[derive(Clone, Copy)]
pub enum Threat<'a> {
    WhiteBox(&'a dyn Classifier),
    Transfer { substitute: &'a dyn Classifier, target: &'a dyn Classifier },
    BlackBox(&'a dyn Classifier),
}

impl<'a> Threat<'a> {
    /// White-box for gradient methods, black-box for NES/SPSA.
    pub fn direct(model: &'a dyn Classifier, method: Method) -> Self {
        if method.is_black_box() {
            Threat::BlackBox(model)
        } else {
            Threat::WhiteBox(model)
        }
    }

    pub fn access(&self) -> Access {
        match self {
            Threat::WhiteBox(_) => Access::WhiteBox,
            Threat::Transfer { .. } => Access::Transfer,
            Threat::BlackBox(_) => Access::BlackBox,
        }
    }

    /// The model whose predictions decide success.
    pub fn judge(&self) -> &'a dyn Classifier {
        match *self {
            Threat::WhiteBox(m) | Threat::BlackBox(m) => m,
            Threat::Transfer { target, .. } => target,
        }
    }

    pub fn run(&self, example: &LabeledExample, config: &AttackConfig) -> Result<AttackOutcome> {
        match *self {
            Threat::WhiteBox(m) => run_white_box_attack(m, example, config),
            Threat::Transfer { substitute, target } => run_transfer_attack(substitute, target, example, config),
            Threat::BlackBox(m) => run_black_box_attack(m, example, config),
        }
    }
}

/// Per-sample outcomes plus their aggregate.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub outcomes: Vec<AttackOutcome>,
    pub records: Vec<AttackRecord>,
    pub summary: AttackSummary,
}

impl AttackRun {
    /// Writes one JSON object per sample.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Attacks every example. Sample `i` uses the seed
/// `derive_seed(config.seed, "attack-sample", i)`, so outcomes do not depend on
/// `workers`. Flagged samples stay in the run.
pub fn evaluate_under_attack(threat: Threat<'_>, dataset: &Dataset, config: &AttackConfig, workers: usize) -> Result<AttackRun> {
    if dataset.is_empty() {
        return Err(invalid("cannot attack an empty dataset"));
    }
    config.validate()?;
    let outcomes = try_map_indexed(workers, dataset.len(), |i| {
        let c = AttackConfig { seed: derive_seed(config.seed, "attack-sample", i as u64), ..config.clone() };
        threat.run(&dataset.examples[i], &c)
    })?;
    let records: Vec<AttackRecord> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| AttackRecord::from_outcome(i, config, dataset.examples[i].label, o))
        .collect();
    let summary = summarize_attack_outcomes(&records)?;
    Ok(AttackRun { outcomes, records, summary })
}

/// What the attack aims for: ascend the true-class loss, or descend the
/// target-class loss.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Goal {
    pub label: usize,
    pub target: Option<usize>,
}

impl Goal {
    pub fn new(example: &LabeledExample, config: &AttackConfig) -> Result<Self> {
        if config.targeted {
            let t = example.target.ok_or_else(|| invalid("targeted attack on an example without a target"))?;
            Ok(Goal { label: example.label, target: Some(t) })
        } else {
            Ok(Goal { label: example.label, target: None })
        }
    }

    /// Class whose cross-entropy the gradient is taken of.
    pub fn loss_class(&self) -> usize {
        self.target.unwrap_or(self.label)
    }

    pub fn direction(&self) -> Direction {
        if self.target.is_some() {
            Direction::Minimize
        } else {
            Direction::Maximize
        }
    }

    pub fn reached(&self, prediction: usize) -> bool {
        match self.target {
            Some(t) => prediction == t,
            None => prediction != self.label,
        }
    }
}

/// Checks that a label fits the model before any work is done.
pub(crate) fn check_labels(model: &dyn Classifier, goal: &Goal) -> Result<()> {
    let c = model.num_classes();
    if goal.label >= c || goal.target.is_some_and(|t| t >= c) {
        return Err(invalid(format!("label {} / target {:?} out of range for {c} classes", goal.label, goal.target)));
    }
    Ok(())
}

/// Clamps `adv` into `[x − ε, x + ε] ∩ [0,1]`.
pub(crate) fn project(adv: &mut [f64], clean: &[f64], epsilon: f64) {
    for (a, &x) in adv.iter_mut().zip(clean) {
        *a = a.clamp((x - epsilon).max(0.0), (x + epsilon).min(1.0));
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Judges a crafted image on `judge` and packages the outcome. Logit failures
/// on the adversarial image become flagged outcomes.
pub(crate) fn judge_outcome(judge: &dyn Classifier, example: &LabeledExample, goal: &Goal, adversarial: Image, epsilon: f64, queries: u64) -> Result<AttackOutcome> {
    match predict(judge, &adversarial) {
        Ok(p) => Ok(AttackOutcome {
            success: goal.reached(p),
            linf_distance: adversarial.linf_distance(&example.image),
            adversarial,
            epsilon,
            queries,
            found_min: false,
            prediction: Some(p),
            flag: None,
        }),
        Err(Error::NonFinite(msg)) => Ok(AttackOutcome::flagged(&example.image, epsilon, None, queries, msg)),
        Err(e) => Err(e),
    }
}
