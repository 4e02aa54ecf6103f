//! Acceptance suite. Prints one status line per criterion, then fails if any
//! criterion failed. `PART` marks a criterion whose literal tolerance cannot be
//! met by any correct implementation; the line states what was verified.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use zsrobust::attacks::{evaluate_under_attack, nes_estimate, spsa_estimate, AttackConfig, Method, Threat};
use zsrobust::dedup::{detect_overlaps, detect_overlaps_exhaustive, EmbeddingIndex, DEFAULT_THRESHOLDS};
use zsrobust::harness::{run_experiment, ExperimentConfig};
use zsrobust::metrics::{
    corruption_summary, flip_rate, format_points, predictions, relative_robustness, sequence_stability, stability_from_rankings,
    targeted_success_rate, top5_distance, Pairing, SequenceRankings,
};
use zsrobust::model::dual::{contrastive_losses, DualEncoderArch};
use zsrobust::model::zeroshot::expand_templates;
use zsrobust::model::{
    input_gradient, synthesize_zero_shot_classifier, train_classifier, Arch, Classifier, Dense, Direction, DualEncoder, FeedForward, Tokenizer,
    TrainConfig,
};
use zsrobust::promptsearch::{
    beam_search_prompts, score_token_candidates, LinearTextObjective, PromptObjective, PromptTemplate, SearchConfig, TriggerState,
};
use zsrobust::shiftgen::{
    build_perturbation_sequences, corrupt_dataset, generate_toy_dataset, generate_typographic_dataset, render_text, CorruptionKind,
    CorruptionSpec, SequenceKind, ToySpec, TypographicSpec, GLYPH,
};
use zsrobust::tape::{cross_entropy, dot, Matrix};
use zsrobust::{Dataset, Image, InputShape, LabeledExample};

type Outcome = Result<Verdict, String>;

enum Verdict {
    Pass(String),
    /// Everything attainable holds; the literal tolerance does not.
    Partial(String),
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(h: usize, w: usize, r: &mut impl Rng) -> Image {
    // Interior values keep finite-difference probes inside the box.
    Image::new(h, w, (0..3 * h * w).map(|_| r.random_range(0.05..0.95)).collect()).unwrap()
}

// ---------------------------------------------------------------- metrics

/// Table 4, standard ResNet50: the 15 per-corruption accuracies and the
/// printed mean.
const TABLE4_STANDARD: [f64; 15] =
    [29.29, 27.03, 23.81, 38.75, 26.79, 38.67, 36.24, 32.53, 38.14, 45.83, 68.02, 39.06, 45.25, 44.79, 53.41];

fn metric_arithmetic() -> Outcome {
    let t = Instant::now();
    // Table 2, ImageNet-R: CLIP ResNet50 60.51 vs standard ResNet50 35.05.
    let rel = relative_robustness(0.6051, 0.3505);
    ensure(format_points(rel) == "+25.46", || format!("relative robustness renders as {}", format_points(rel)))?;
    ensure((rel - 25.46).abs() < 1e-9, || format!("relative robustness {rel}"))?;
    let grid: Vec<(String, Vec<f64>)> = TABLE4_STANDARD.iter().enumerate().map(|(i, a)| (format!("c{i}"), vec![*a; 5])).collect();
    let mean = corruption_summary(&grid).map_err(|e| e.to_string())?.overall;
    ensure((mean - 39.17).abs() <= 0.01, || format!("Table 4 mean {mean}"))?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(Verdict::Pass(format!("relative {} pts; corruption mean {mean:.4} vs 39.17", format_points(rel))))
}

// ---------------------------------------------------------------- attacks

/// Binary linear model on a 1×1 RGB input: logit₀ = r − g, logit₁ = 0.
fn linear_fixture() -> (FeedForward, LabeledExample) {
    let w = Matrix::from_vec(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
    let m = FeedForward::new(InputShape::new(1, 1), 1, vec![Dense::new(w, vec![0.0, 0.0]).unwrap()]).unwrap();
    // Margin 0.1 and ‖w‖₁ = 2: the smallest flipping ℓ∞ budget is 0.05.
    let ex = LabeledExample::new(Image::new(1, 1, vec![0.6, 0.5, 0.0]).unwrap(), 0);
    (m, ex)
}

fn linear_attack_oracle() -> Outcome {
    let t = Instant::now();
    let (m, ex) = linear_fixture();
    let tol = 2f64.powi(-12);
    let mut found = Vec::new();
    for method in [Method::Fgsm, Method::Bim, Method::Mim] {
        let o = Threat::WhiteBox(&m).run(&ex, &AttackConfig::min_perturbation(method)).map_err(|e| e.to_string())?;
        ensure(o.success && o.found_min, || format!("{method:?} found no flip"))?;
        ensure((o.linf_distance - 0.05).abs() <= tol, || format!("{method:?} distance {}", o.linf_distance))?;
        found.push(format!("{}={:.6}", method.as_str(), o.linf_distance));
    }
    let o = Threat::WhiteBox(&m).run(&ex, &AttackConfig::min_perturbation(Method::DeepFool)).map_err(|e| e.to_string())?;
    let factor = o.linf_distance / 0.05;
    ensure(o.success && (factor - 1.02).abs() <= 1e-4, || format!("deepfool factor {factor}"))?;
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(Verdict::Pass(format!("{}; deepfool ×{factor:.6}", found.join(" "))))
}

// ---------------------------------------------------------------- gradients

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error of the input gradient over `probes` random
/// (image, label, pixel) triples.
fn input_gradient_check(model: &dyn Classifier, probes: usize, seed: u64) -> Result<f64, String> {
    let shape = model.input_shape();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let img = random_image(shape.h, shape.w, &mut r);
        let label = r.random_range(0..model.num_classes());
        let i = r.random_range(0..shape.len());
        let g = input_gradient(model, &img, label, Direction::Maximize).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let loss_at = |d: f64| {
            let mut x = img.data().to_vec();
            x[i] += d;
            cross_entropy(&model.logits(&Image::new(shape.h, shape.w, x).unwrap()).unwrap(), label)
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        worst = worst.max(rel_err(g[i], fd));
    }
    Ok(worst)
}

fn small_encoder(seed: u64) -> DualEncoder {
    let tok = Tokenizer::build(["a photo of a disk box tri plus", "drawing of the ring gem"]);
    let cfg = TrainConfig { embed_dim: 8, seed, ..TrainConfig::default() };
    DualEncoder::init(InputShape::new(8, 8), tok, &DualEncoderArch { hidden: vec![16], pool: 2, token_dim: 8 }, &cfg).unwrap()
}

/// Worst relative error of the contrastive-loss parameter gradients.
fn dual_parameter_check(probes: usize, seed: u64) -> Result<f64, String> {
    let enc = small_encoder(seed);
    let mut r = rng(seed);
    let images: Vec<Image> = (0..4).map(|_| random_image(8, 8, &mut r)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let captions = ["a photo of a disk", "drawing of the ring", "a gem", "box of plus"];
    let (_, grads) = enc.batch_loss_gradients(&refs, &captions).map_err(|e| e.to_string())?;
    let params: Vec<Matrix> = enc.named_params().into_iter().map(|(_, m)| m).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let p = r.random_range(0..params.len());
        let k = r.random_range(0..params[p].data.len());
        let h = 1e-5;
        let loss_at = |d: f64| {
            let mut ps = params.clone();
            ps[p].data[k] += d;
            enc.with_params(ps).unwrap().batch_loss(&refs, &captions).unwrap()
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        worst = worst.max(rel_err(grads[p].1.data[k], fd));
    }
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let mut r = rng(1);
    let shape = InputShape::new(8, 8);
    let linear = FeedForward::init(shape, 1, &[5], &mut r).unwrap();
    let pooled = FeedForward::init(shape, 2, &[5], &mut r).unwrap();
    let mlp = FeedForward::init(shape, 2, &[16, 12, 5], &mut r).unwrap();
    let names: Vec<String> = ["disk", "box", "tri", "ring"].iter().map(|s| s.to_string()).collect();
    let zs = synthesize_zero_shot_classifier(Arc::new(small_encoder(3)), &expand_templates(&["a photo of a {}", "drawing of the {}"], &names))
        .map_err(|e| e.to_string())?;

    let mut parts = Vec::new();
    let checks: [(&str, &dyn Classifier); 4] = [("linear", &linear), ("linear-pool2", &pooled), ("mlp", &mlp), ("zero-shot", &zs)];
    for (i, (name, m)) in checks.into_iter().enumerate() {
        let worst = input_gradient_check(m, 100, 10 + i as u64)?;
        ensure(worst <= 1e-3, || format!("{name} input gradient relative error {worst:.2e}"))?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let worst = dual_parameter_check(100, 4)?;
    ensure(worst <= 1e-3, || format!("dual-encoder parameter gradient relative error {worst:.2e}"))?;
    parts.push(format!("dual-params {worst:.1e}"));

    // Uniform similarities: every row and column softmax is flat.
    let mut uniform_err: f64 = 0.0;
    for b in [2usize, 5, 32] {
        let (i2t, t2i) = contrastive_losses(&Matrix::from_vec(b, b, vec![0.7; b * b]));
        uniform_err = uniform_err.max((i2t - (b as f64).ln()).abs()).max((t2i - (b as f64).ln()).abs());
        let enc = small_encoder(5);
        let img = Image::filled(8, 8, 0.3).unwrap();
        let imgs = vec![&img; b];
        let caps = vec!["a photo of a disk"; b];
        uniform_err = uniform_err.max((enc.batch_loss(&imgs, &caps).map_err(|e| e.to_string())? - (b as f64).ln()).abs());
    }
    ensure(uniform_err <= 1e-9, || format!("uniform contrastive loss off ln B by {uniform_err:.2e}"))?;
    Ok(Verdict::Pass(format!("100 probes each, worst rel err: {}; |loss − ln B| ≤ {uniform_err:.1e}", parts.join(", "))))
}

// ---------------------------------------------------------------- black box

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn black_box_estimators() -> Outcome {
    let d = 48;
    let mut min_cos = f64::INFINITY;
    for seed in 0..20 {
        let mut r = rng(seed);
        let x0: Vec<f64> = (0..d).map(|_| r.random()).collect();
        let x: Vec<f64> = (0..d).map(|_| r.random()).collect();
        let mut loss = |p: &[f64]| Ok(p.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        let g = nes_estimate(&mut loss, &x, 1000, 0.01, &mut r).map_err(|e| e.to_string())?;
        let exact: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| 2.0 * (a - b)).collect();
        min_cos = min_cos.min(cosine(&g, &exact));
    }
    ensure(min_cos >= 0.95, || format!("NES cosine {min_cos:.4} < 0.95"))?;

    // SPSA on linear losses. In one dimension the estimate is exact; in
    // d dimensions coordinate i carries Σ_{j≠i} g_j Δ_j/Δ_i as zero-mean
    // noise, so a 500-pair mean has standard error √(Σ_{j≠i} g_j² / 500).
    let mut worst_1d: f64 = 0.0;
    let (mut within_5pct, mut within_4se, mut total) = (0usize, 0usize, 0usize);
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let g1: f64 = r.random_range(-2.0..2.0);
        let mut l1 = |p: &[f64]| Ok(g1 * p[0]);
        let e = spsa_estimate(&mut l1, &[0.5], 500, 0.01, &mut r).map_err(|e| e.to_string())?;
        worst_1d = worst_1d.max((e[0] - g1).abs() / g1.abs());

        let g: Vec<f64> = (0..8).map(|_| r.random_range(0.5..2.0) * if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let x: Vec<f64> = (0..8).map(|_| r.random()).collect();
        let mut l = |p: &[f64]| Ok(dot(p, &g));
        let e = spsa_estimate(&mut l, &x, 500, 0.01, &mut r).map_err(|e| e.to_string())?;
        let sq: f64 = g.iter().map(|v| v * v).sum();
        for i in 0..8 {
            let err = (e[i] - g[i]).abs();
            let se = ((sq - g[i] * g[i]) / 500.0).sqrt();
            total += 1;
            within_5pct += (err <= 0.05 * g[i].abs()) as usize;
            within_4se += (err <= 4.0 * se) as usize;
        }
    }
    ensure(worst_1d <= 0.05, || format!("1-d SPSA relative error {worst_1d:.2e}"))?;
    ensure(within_4se == total, || format!("SPSA: {}/{total} coordinates beyond 4 standard errors", total - within_4se))?;
    let detail = format!(
        "NES min cosine {min_cos:.4} over 20 seeds; SPSA 1-d rel err {worst_1d:.1e}; 8-d: {within_4se}/{total} within 4 SE, \
         {within_5pct}/{total} within 5% (per-coordinate 5% is below the estimator's noise floor for d ≥ 2)"
    );
    if within_5pct == total {
        Ok(Verdict::Pass(detail))
    } else {
        Ok(Verdict::Partial(detail))
    }
}

// ---------------------------------------------------------------- box/budget

fn box_and_budget() -> Outcome {
    let mut r = rng(7);
    let model = FeedForward::init(InputShape::new(6, 6), 1, &[10, 4], &mut r).unwrap();
    let mut checked = 0usize;
    for method in Method::ALL {
        for i in 0..8u64 {
            let img = Image::new(6, 6, (0..108).map(|k| if k % 7 == 0 { (k % 2) as f64 } else { r.random() }).collect()).unwrap();
            let ex = LabeledExample::new(img, (i % 4) as usize);
            let threat = Threat::direct(&model, method);
            for c in [AttackConfig::budgeted(method, 8.0 / 255.0).with_seed(i), AttackConfig::min_perturbation(method).with_seed(i)] {
                let o = threat.run(&ex, &c).map_err(|e| format!("{method:?}: {e}"))?;
                let eps = if c.mode == zsrobust::attacks::Mode::Budgeted { c.epsilon } else { o.epsilon.max(o.linf_distance.min(c.max_epsilon)) };
                let ok = o.adversarial.data().iter().zip(ex.image.data()).all(|(a, x)| (0.0..=1.0).contains(a) && (a - x).abs() <= eps + 1e-12);
                ensure(ok, || format!("{method:?} {:?} left the box or budget", c.mode))?;
                checked += 1;
            }
        }
    }

    // FGSM robust accuracy of a linear classifier as the budget grows.
    let train = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(30, 1) }).unwrap();
    let test = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(15, 2) }).unwrap();
    let linear = train_classifier(&train, &Arch::Linear { pool: 2 }, &TrainConfig { epochs: 8, ..TrainConfig::default() }).unwrap();
    let mut accs = Vec::new();
    for k in [0.0, 2.0, 4.0, 8.0, 16.0] {
        let run = evaluate_under_attack(Threat::WhiteBox(&linear), &test, &AttackConfig::budgeted(Method::Fgsm, k / 255.0), 4).map_err(|e| e.to_string())?;
        accs.push(run.summary.robust_accuracy);
    }
    ensure(accs.windows(2).all(|w| w[1] <= w[0]), || format!("FGSM robust accuracy not monotone: {accs:?}"))?;
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    Ok(Verdict::Pass(format!("{checked}/{checked} outputs in box and budget; FGSM accuracy over ε∈{{0,2,4,8,16}}/255: {}", shown.join(" ≥ "))))
}

// ---------------------------------------------------------------- typographic

/// Reads the rendered class name back: the image is unchanged by re-rendering
/// exactly the text already there.
struct TextOracle {
    shape: InputShape,
    names: Vec<String>,
    at: (usize, usize),
    scale: usize,
}

impl Classifier for TextOracle {
    fn num_classes(&self) -> usize {
        self.names.len()
    }
    fn input_shape(&self) -> InputShape {
        self.shape
    }
    fn logits(&self, image: &Image) -> zsrobust::Result<Vec<f64>> {
        let fit = (self.shape.w - self.at.0) / (GLYPH * self.scale);
        let mut out = vec![0.0; self.names.len()];
        for (c, name) in self.names.iter().enumerate() {
            let text: String = name.chars().take(fit).collect();
            let mut copy = image.clone();
            render_text(&mut copy, &text, self.at.0, self.at.1, self.scale)?;
            if copy == *image {
                out[c] = 1.0;
                break;
            }
        }
        Ok(out)
    }
    fn snapshot_id(&self) -> String {
        "text-oracle".into()
    }
}

fn typographic_suite() -> Outcome {
    let source = generate_toy_dataset(&ToySpec::new(20, 3)).unwrap();
    let spec = TypographicSpec::new(4, 11);
    let (a, m) = generate_typographic_dataset(&source, &spec, 1).map_err(|e| e.to_string())?;
    let (b, _) = generate_typographic_dataset(&source, &spec, 1).unwrap();
    let (c, _) = generate_typographic_dataset(&source, &spec, 8).unwrap();
    let bits = |d: &Dataset| d.examples.iter().flat_map(|e| e.image.data().iter().map(|v| v.to_bits())).collect::<Vec<u64>>();
    ensure(bits(&a) == bits(&b) && bits(&a) == bits(&c), || "typographic dataset not bit-identical across runs/workers".into())?;

    // Untouched pixels.
    let cell = GLYPH * m.font_scale;
    let (h, w) = (32, 32);
    let mut outside = 0usize;
    for (i, (t, s)) in a.examples.iter().zip(&source.examples).enumerate() {
        let name = &source.class_names[m.entries[i].target];
        let rects: Vec<(usize, usize, usize)> = m.coordinates.iter().map(|&(x, y)| (x, y, name.len().min((w - x) / cell) * cell)).collect();
        for y in 0..h {
            for x in 0..w {
                if rects.iter().any(|&(rx, ry, rw)| x >= rx && x < rx + rw && y >= ry && y < ry + cell) {
                    continue;
                }
                for ch in 0..3 {
                    ensure(t.image.get(ch, y, x).to_bits() == s.image.get(ch, y, x).to_bits(), || format!("image {i} changed outside text at ({x},{y})"))?;
                    outside += 1;
                }
            }
        }
    }

    // Target uniformity over the (label, target ≠ label) cells.
    let classes = 10;
    let names: Vec<String> = (0..classes).map(|i| format!("c{i}")).collect();
    let ex: Vec<LabeledExample> = (0..10_000).map(|i| LabeledExample::new(Image::filled(8, 16, 0.5).unwrap(), i % classes)).collect();
    let big = Dataset::new("uniform", names, ex).unwrap();
    let (_, um) = generate_typographic_dataset(&big, &TypographicSpec::new(1, 5), 8).map_err(|e| e.to_string())?;
    let mut counts: HashMap<(usize, usize), f64> = HashMap::new();
    for e in &um.entries {
        *counts.entry((e.label, e.target)).or_default() += 1.0;
    }
    ensure(um.entries.iter().all(|e| e.target != e.label), || "a target equals its label".into())?;
    let cells = classes * (classes - 1);
    let expected = 10_000.0 / cells as f64;
    let stat: f64 = (0..classes)
        .flat_map(|l| (0..classes).filter(move |&t| t != l).map(move |t| (l, t)))
        .map(|k| {
            let o = counts.get(&k).copied().unwrap_or(0.0);
            (o - expected).powi(2) / expected
        })
        .sum();
    let p = ChiSquared::new((cells - 1) as f64).unwrap().sf(stat);
    ensure(p > 0.01, || format!("chi-square p = {p:.4}"))?;

    // An oracle that reads the rendered word.
    let oracle = TextOracle { shape: InputShape::new(h, w), names: source.class_names.clone(), at: m.coordinates[0], scale: m.font_scale };
    let preds = predictions(&oracle, &a, 4).map_err(|e| e.to_string())?;
    let targets: Vec<usize> = a.examples.iter().map(|e| e.target.unwrap()).collect();
    let rate = targeted_success_rate(&preds, &targets).map_err(|e| e.to_string())?;
    ensure(rate == 1.0, || format!("oracle success rate {rate}"))?;
    Ok(Verdict::Pass(format!(
        "bit-identical across runs and 1/8 workers; {outside} outside-rectangle values unchanged; chi-square({}) = {stat:.1}, p = {p:.3}; oracle success {rate}",
        cells - 1
    )))
}

// ---------------------------------------------------------------- prompt search

fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Arbitrary loss table over two trigger tokens.
struct TableObjective {
    template: PromptTemplate,
    table: Vec<f64>,
    v: usize,
    embeddings: Matrix,
    candidates: Vec<usize>,
}

impl PromptObjective for TableObjective {
    fn template(&self) -> &PromptTemplate {
        &self.template
    }
    fn candidates(&self) -> &[usize] {
        &self.candidates
    }
    fn token_embedding(&self, token: usize) -> &[f64] {
        self.embeddings.row(token)
    }
    fn num_examples(&self) -> usize {
        1
    }
    fn loss(&self, t: &[usize], _: &[usize]) -> zsrobust::Result<f64> {
        Ok(self.table[t[0] * self.v + t[1]])
    }
    fn slot_gradient(&self, t: &[usize], slot: usize, b: &[usize]) -> zsrobust::Result<(f64, Vec<f64>)> {
        Ok((self.loss(t, b)?, vec![0.3 - slot as f64, 0.7]))
    }
}

fn prompt_search() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut r = rng(seed);
        let images: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let obj = LinearTextObjective::new(
            "[T][T] of [C]".parse().unwrap(),
            random_matrix(7, 3, &mut r),
            random_matrix(3, 4, &mut r),
            vec![vec![5], vec![6, 4]],
            images,
            (0..10).map(|i| i % 2).collect(),
        )
        .map_err(|e| e.to_string())?;
        let batch: Vec<usize> = (0..10).collect();
        let state = TriggerState { tokens: vec![2, 3] };
        for (position, slot) in [(0, 0), (1, 1)] {
            for c in score_token_candidates(&obj, &batch, position, &state, 7).map_err(|e| e.to_string())? {
                let mut t = state.tokens.clone();
                t[slot] = c.token;
                worst = worst.max((c.approx_loss - obj.loss(&t, &batch).unwrap()).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("Taylor score error {worst:.2e}"))?;

    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let v = 6;
        let obj = TableObjective {
            template: "[T][T][C]".parse().unwrap(),
            table: (0..v * v).map(|_| r.random::<f64>()).collect(),
            v,
            embeddings: random_matrix(v, 2, &mut r),
            candidates: (0..v).collect(),
        };
        let config = SearchConfig { top_k: v, beam_size: v * v, steps: 2, ..SearchConfig::default() };
        let res = beam_search_prompts(&obj, &[0, 0], &config, 2).map_err(|e| e.to_string())?;
        let (best, arg) = (0..v * v).map(|i| (obj.table[i], vec![i / v, i % v])).min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
        ensure(res.ranked[0].tokens == arg && res.ranked[0].loss == best, || format!("seed {seed}: beam {:?} vs exhaustive {arg:?}", res.ranked[0].tokens))?;
    }

    let c = SearchConfig::default();
    let back: SearchConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    ensure(back == c, || "config round trip changed the defaults".into())?;
    ensure(
        (c.top_k, c.beam_size) == (20, 5) && c.template.to_string() == "[T][T][T][T][C]" && c.init == "A photo of a",
        || format!("defaults {c:?}"),
    )?;
    Ok(Verdict::Pass(format!("Taylor max error {worst:.1e}; beam = exhaustive on 20 |V|=6 instances; defaults top_k 20, beam 5, {}, {:?}", c.template, c.init)))
}

// ---------------------------------------------------------------- dedup

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(d: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

fn brute_force(test: &[Vec<f64>], train: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, q) in test.iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, t) in train.iter().enumerate() {
            let s = dot(q, t);
            if s > best.1 {
                best = (j, s);
            }
        }
        if best.1 >= threshold {
            out.push((i, best.0));
        }
    }
    out
}

fn dedup_checks() -> Outcome {
    let d = 32;
    let mut r = rng(21);
    let train: Vec<Vec<f64>> = (0..200).map(|_| unit(gaussian(d, &mut r))).collect();
    // A spread of near-duplicates so every default threshold flags a different set.
    let test: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            if i % 2 == 0 {
                let noise = 0.02 + 0.6 * (i as f64 / 200.0);
                let base = &train[(i * 7) % 200];
                unit(base.iter().zip(gaussian(d, &mut r)).map(|(b, n)| b + noise * n / (d as f64).sqrt()).collect())
            } else {
                unit(gaussian(d, &mut r))
            }
        })
        .collect();
    let tr = EmbeddingIndex::new("train", "toy", train.clone()).map_err(|e| e.to_string())?;
    let te = EmbeddingIndex::new("test", "toy", test.clone()).map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for &t in DEFAULT_THRESHOLDS.iter().chain(&[0.5, 0.999]) {
        let fast: Vec<(usize, usize)> = detect_overlaps(&te, &tr, t, 4).unwrap().iter().map(|o| (o.test_id, o.train_id)).collect();
        let exhaustive: Vec<(usize, usize)> = detect_overlaps_exhaustive(&te, &tr, t, 1).unwrap().iter().map(|o| (o.test_id, o.train_id)).collect();
        let brute = brute_force(&test, &train, t);
        ensure(fast == brute && exhaustive == brute, || format!("threshold {t}: flags differ from brute force"))?;
        if DEFAULT_THRESHOLDS.contains(&t) {
            counts.push(fast.len());
        }
    }
    ensure(counts.windows(2).all(|w| w[1] <= w[0]), || format!("flag counts not monotone: {counts:?}"))?;

    // Planted 20% exact overlap.
    let mut order: Vec<usize> = (0..200).collect();
    order.shuffle(&mut r);
    let planted: BTreeSet<usize> = order[..40].iter().copied().collect();
    let sources: HashMap<usize, usize> = planted.iter().map(|&i| (i, r.random_range(0..200))).collect();
    let test2: Vec<Vec<f64>> = (0..200).map(|i| sources.get(&i).map_or_else(|| unit(gaussian(d, &mut r)), |&j| train[j].clone())).collect();
    let te2 = EmbeddingIndex::new("test2", "toy", test2).unwrap();
    let flagged = detect_overlaps(&te2, &tr, 0.999, 4).unwrap();
    let got: BTreeSet<usize> = flagged.iter().map(|o| o.test_id).collect();
    ensure(got == planted, || format!("recovered {} of 40 planted, {} extra", got.intersection(&planted).count(), got.difference(&planted).count()))?;
    ensure(flagged.iter().all(|o| sources[&o.test_id] == o.train_id), || "planted copy matched to the wrong train row".into())?;
    Ok(Verdict::Pass(format!("200×200 flags equal brute force at 7 thresholds; default-grid counts {counts:?}; planted 40/200 recovered exactly at 0.999")))
}

// ---------------------------------------------------------------- stability

fn brute_fr(pairing: Pairing, seqs: &[Vec<Vec<usize>>]) -> f64 {
    let (mut flips, mut n) = (0.0, 0.0);
    for s in seqs {
        for j in 1..s.len() {
            let i = if pairing == Pairing::Consecutive { j - 1 } else { 0 };
            flips += (s[i][0] != s[j][0]) as u8 as f64;
            n += 1.0;
        }
    }
    flips / n
}

fn brute_t5d(pairing: Pairing, seqs: &[Vec<Vec<usize>>]) -> f64 {
    let (mut total, mut n) = (0.0, 0.0);
    for s in seqs {
        for j in 1..s.len() {
            let i = if pairing == Pairing::Consecutive { j - 1 } else { 0 };
            let (a, b) = (&s[i], &s[j]);
            let rank = |l: &Vec<usize>, c: usize| l.iter().position(|&x| x == c).map(|p| p + 1).unwrap_or(6) as f64;
            let classes: BTreeSet<usize> = a.iter().chain(b.iter()).copied().collect();
            total += classes.iter().map(|&c| (rank(a, c) - rank(b, c)).abs()).sum::<f64>();
            n += 1.0;
        }
    }
    total / n
}

fn random_rankings(kind: &str, pairing: Pairing, r: &mut impl Rng) -> SequenceRankings {
    let sequences = (0..12)
        .map(|_| {
            (0..5)
                .map(|_| {
                    let mut c: Vec<usize> = (0..10).collect();
                    // Mostly stable frames with occasional reshuffles.
                    if r.random::<f64>() < 0.4 {
                        c.shuffle(r);
                    }
                    c.truncate(5);
                    c
                })
                .collect()
        })
        .collect();
    SequenceRankings { kind: kind.into(), pairing, sequences }
}

fn stability_checks() -> Outcome {
    let constant = vec![vec![vec![3, 1, 2, 0, 4]; 6]; 4];
    let alternating: Vec<Vec<Vec<usize>>> = vec![(0..6).map(|j| if j % 2 == 0 { vec![0, 1, 2, 3, 4] } else { vec![1, 0, 2, 3, 4] }).collect(); 4];
    for p in [Pairing::Consecutive, Pairing::FirstFrame] {
        ensure(flip_rate(p, &constant).unwrap() == 0.0, || "constant sequences flip".into())?;
    }
    ensure(flip_rate(Pairing::Consecutive, &alternating).unwrap() == 1.0, || "alternating sequences do not always flip".into())?;
    ensure(top5_distance(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]) == 0.0, || "identical rankings at nonzero distance".into())?;

    let mut r = rng(31);
    let kinds = [("translate", Pairing::Consecutive), ("gaussian_noise", Pairing::FirstFrame), ("rotate", Pairing::Consecutive)];
    let model: Vec<SequenceRankings> = kinds.iter().map(|(k, p)| random_rankings(k, *p, &mut r)).collect();
    let reference: Vec<SequenceRankings> = kinds.iter().map(|(k, p)| random_rankings(k, *p, &mut r)).collect();
    let rep = stability_from_rankings(&model, Some((&reference, "ref".into()))).map_err(|e| e.to_string())?;
    let mut fr_norm = Vec::new();
    let mut t5_norm = Vec::new();
    for ((k, m), rf) in rep.kinds.iter().zip(&model).zip(&reference) {
        let (fr, t5) = (brute_fr(m.pairing, &m.sequences), brute_t5d(m.pairing, &m.sequences));
        let (rfr, rt5) = (brute_fr(rf.pairing, &rf.sequences), brute_t5d(rf.pairing, &rf.sequences));
        ensure((k.fr_raw - fr).abs() < 1e-12 && (k.t5d_raw - t5).abs() < 1e-12, || format!("{} raw scores differ", k.kind))?;
        ensure((k.fr_normalized.unwrap() - 100.0 * fr / rfr).abs() < 1e-9, || format!("{} normalized FR differs", k.kind))?;
        ensure((k.t5d_normalized.unwrap() - 100.0 * t5 / rt5).abs() < 1e-9, || format!("{} normalized T5D differs", k.kind))?;
        fr_norm.push(100.0 * fr / rfr);
        t5_norm.push(100.0 * t5 / rt5);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ensure((rep.mfr.unwrap() - mean(&fr_norm)).abs() < 1e-9 && (rep.mt5d.unwrap() - mean(&t5_norm)).abs() < 1e-9, || "mFR/mT5D differ from brute force".into())?;

    let self_rep = stability_from_rankings(&model, Some((&model, "self".into()))).unwrap();
    ensure(self_rep.mfr == Some(100.0) && self_rep.mt5d == Some(100.0), || format!("self-normalized mFR {:?}", self_rep.mfr))?;

    // Same check through real perturbation sequences and a real model.
    let ds = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(2, 8) }).unwrap();
    let clf = FeedForward::init(InputShape::new(16, 16), 2, &[12, 6], &mut r).unwrap();
    let mut seqs = build_perturbation_sequences(&ds, SequenceKind::GaussianNoise, 5, 3, 2).unwrap();
    seqs.extend(build_perturbation_sequences(&ds, SequenceKind::Translate, 5, 3, 2).unwrap());
    let real = sequence_stability(&clf, &seqs, Some(&clf), 2).map_err(|e| e.to_string())?;
    ensure(real.kinds.iter().all(|k| k.fr_normalized.is_none_or(|v| v == 100.0)), || "model vs itself is not 100".into())?;
    ensure(real.mt5d == Some(100.0), || format!("model vs itself mT5D {:?}", real.mt5d))?;
    Ok(Verdict::Pass(format!(
        "FR constant 0, alternating 1; mFR {:.2} / mT5D {:.2} match brute force; self-reference gives 100",
        rep.mfr.unwrap(),
        rep.mt5d.unwrap()
    )))
}

// ---------------------------------------------------------------- pipeline

fn full_config(workers: usize) -> ExperimentConfig {
    let mut c: ExperimentConfig = serde_json::from_value(json!({
        "version": 1,
        "seed": 7,
        "prompt_search": {"steps": 4, "top_k": 10, "beam_size": 3, "batch_size": 128, "validation_size": 60, "ensemble_size": 3},
        "typographic": {"k_coords": 1},
        "corruptions": {"samples": 40},
        "stability": {"samples": 20, "length": 4},
        "attacks": {"samples": 20, "configs": [
            {"method": "fgsm", "epsilon": 0.0},
            {"method": "fgsm", "epsilon": 2.0 / 255.0},
            {"method": "fgsm", "epsilon": 8.0 / 255.0},
            {"method": "fgsm", "mode": "min_perturbation"},
            {"method": "nes", "epsilon": 8.0 / 255.0, "steps": 4}
        ], "transfer_source": "supervised"},
        "dedup": {}
    }))
    .unwrap();
    c.workers = workers;
    c
}

fn end_to_end(out: &Path) -> Outcome {
    let t = Instant::now();
    let run = run_experiment(&full_config(8), out).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure(run.succeeded(), || format!("failed stages: {:?}", run.ledger.failures().map(|s| &s.name).collect::<Vec<_>>()))?;
    within(elapsed, Duration::from_secs(600))?;
    let cmp = run.report.derived.typographic.as_ref().ok_or("no typographic comparison in the report")?;
    let stored = zsrobust::harness::RobustnessReport::load(&out.join("report.json")).map_err(|e| e.to_string())?;
    ensure(stored.derived.typographic.as_ref() == Some(cmp), || "typographic comparison missing from report.json".into())?;
    ensure(cmp.zero_shot_more_susceptible, || format!("zero-shot {:.3} vs supervised {:.3}", cmp.zero_shot_success, cmp.supervised_success))?;
    Ok(Verdict::Pass(format!(
        "typographic success {} {:.3} > {} {:.3}; {} stages in {:.1}s",
        cmp.zero_shot_model,
        cmp.zero_shot_success,
        cmp.supervised_model,
        cmp.supervised_success,
        run.ledger.stages.len(),
        elapsed.as_secs_f64()
    )))
}

fn library_pipelines_agree(workers: usize) -> Vec<String> {
    let ds = generate_toy_dataset(&ToySpec { size: 16, ..ToySpec::new(6, 4) }).unwrap();
    let mut r = rng(2);
    let clf = FeedForward::init(InputShape::new(16, 16), 2, &[12, 6], &mut r).unwrap();
    let typo = generate_typographic_dataset(&ds, &TypographicSpec::new(2, 1), workers).unwrap().0;
    let corrupt = corrupt_dataset(&ds, CorruptionSpec::new(CorruptionKind::ShotNoise, 3).unwrap(), 9, workers).unwrap();
    let seqs = build_perturbation_sequences(&ds, SequenceKind::Rotate, 4, 9, workers).unwrap();
    let seq_bits: Vec<u64> = seqs.iter().flat_map(|s| s.frames.iter().flat_map(|f| f.data().iter().map(|v| v.to_bits()))).collect();
    let attack = evaluate_under_attack(Threat::direct(&clf, Method::Spsa), &ds, &AttackConfig::budgeted(Method::Spsa, 0.03).with_seed(5), workers).unwrap();
    let stab = sequence_stability(&clf, &seqs, None, workers).unwrap();
    vec![
        typo.content_hash(),
        corrupt.content_hash(),
        format!("{:x}", seq_bits.iter().fold(0u64, |h, b| h.rotate_left(5) ^ b)),
        serde_json::to_string(&attack.records).unwrap(),
        serde_json::to_string(&stab).unwrap(),
    ]
}

fn determinism(e2e_out: &Path) -> Outcome {
    let files = ["report.json", "report.csv", "scatter.json", "scatter.csv"];
    let read = |dir: &Path| files.iter().map(|f| std::fs::read(dir.join(f)).unwrap_or_default()).collect::<Vec<_>>();
    let one = tempfile::tempdir().unwrap();
    let again = tempfile::tempdir().unwrap();
    run_experiment(&full_config(1), one.path()).map_err(|e| e.to_string())?;
    run_experiment(&full_config(8), again.path()).map_err(|e| e.to_string())?;
    let base = read(e2e_out);
    ensure(base.iter().all(|b| !b.is_empty()), || "report artifacts missing".into())?;
    ensure(read(one.path()) == base, || "workers 1 vs 8 reports differ".into())?;
    ensure(read(again.path()) == base, || "repeated 8-worker reports differ".into())?;
    let lib = library_pipelines_agree(1);
    ensure(lib == library_pipelines_agree(1) && lib == library_pipelines_agree(8), || "library pipelines depend on workers".into())?;
    Ok(Verdict::Pass(format!(
        "{} report artifacts byte-identical over 3 runs (1, 8, 8 workers); typographic/corruption/sequence/attack/stability outputs identical at 1 and 8 workers",
        files.len()
    )))
}

#[test]
fn acceptance_criteria() {
    let e2e = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("metric arithmetic vs paper tables", Box::new(metric_arithmetic)),
        ("linear attack oracle", Box::new(linear_attack_oracle)),
        ("gradient checks", Box::new(gradient_checks)),
        ("black-box estimators", Box::new(black_box_estimators)),
        ("box/budget invariants", Box::new(box_and_budget)),
        ("typographic suite", Box::new(typographic_suite)),
        ("prompt search", Box::new(prompt_search)),
        ("dedup", Box::new(dedup_checks)),
        ("stability metrics", Box::new(stability_checks)),
        ("end-to-end typographic direction", Box::new(|| end_to_end(e2e.path()))),
        ("determinism", Box::new(|| determinism(e2e.path()))),
    ];
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout();
    for (name, check) in &criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(Verdict::Pass(d)) => ("PASS", d),
            Ok(Verdict::Partial(d)) => ("PART", d),
            Err(e) => {
                failed.push(*name);
                ("FAIL", e)
            }
        };
        // Written to the handle directly so the lines survive output capture.
        writeln!(stdout, "[{tag}] {name} ({:.2}s): {detail}", t.elapsed().as_secs_f64()).unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
