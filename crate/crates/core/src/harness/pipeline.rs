//! Stage-by-stage execution of an [`ExperimentConfig`]. Stages talk to each
//! other only through files in the run directory, so any completed stage
//! can be reused by a later run.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{DataSource, EmbedderChoice, ExperimentConfig, ReportFormat};
use super::ledger::{hash_bytes, hash_file, input_hash, Artifact, RunLedger, StageRecord, StageStatus};
use super::report::{
    derive, emit_report, AttackResult, CorruptionResult, DedupResult, Metadata, ModelEntry, ModelFamily, PromptSummary,
    RobustnessReport, StabilityResult, StageFailure, TypographicResult, CLEAN, REPORT_JSON, REPORT_VERSION,
};
use crate::attacks::{evaluate_under_attack, Threat};
use crate::dedup::{build_embedding_index, overlap_sweep_report, sweep_csv, RandomProjectionEmbedder};
use crate::error::{invalid, Error, Result};
use crate::image::{Dataset, Image};
use crate::metrics::{evaluate_accuracy, predictions, sequence_stability, targeted_success_rate, EvalRecord, RecordKind};
use crate::model::dual::train_dual_encoder_with;
use crate::model::snapshot::{self, Snapshot};
use crate::model::zeroshot::expand_templates;
use crate::model::{synthesize_zero_shot_classifier, train_classifier, Classifier, DualEncoder, FeedForward, ImageEmbedder};
use crate::promptsearch::{beam_search_prompts, holdout_split, select_prompt_ensemble, PromptSetFile, PromptTemplate, ZeroShotObjective};
use crate::rng::{derive_seed, substream};
use crate::shiftgen::io::{load_dataset, save_dataset, DatasetManifest, Storage};
use crate::shiftgen::{
    build_perturbation_sequences, corrupt_dataset, default_font_scale, generate_toy_dataset, generate_typographic_dataset, render_text, text_width,
    CorruptionSpec, ToySpec, TypographicManifest, TypographicSpec, GLYPH,
};

pub const SUPERVISED: &str = "supervised";
pub const ZERO_SHOT: &str = "zero-shot";
/// Zero-shot classifier over the searched prompt ensemble.
pub const ZERO_SHOT_SEARCHED: &str = "zero-shot-searched";

const TRAIN_DIR: &str = "data/train";
const TEST_DIR: &str = "data/test";
const TYPO_DIR: &str = "data/typographic";
const TYPO_MANIFEST: &str = "data/typographic.json";
const SUPERVISED_MODEL: &str = "models/supervised.rozm";
const DUAL_MODEL: &str = "models/dual.rozm";
const PROMPTS: &str = "prompts/prompts.json";
const ACCURACY: &str = "results/accuracy.json";
const MODELS: &str = "results/models.json";
const CORRUPTIONS: &str = "results/corruptions.json";
const STABILITY: &str = "results/stability.json";
const ATTACKS: &str = "results/attacks.json";
const TYPOGRAPHIC: &str = "results/typographic.json";
const DEDUP: &str = "results/dedup.json";

/// Stage names, in execution order.
pub const STAGES: [&str; 12] = [
    "data",
    "typographic",
    "train-classifier",
    "train-baselines",
    "train-dual",
    "prompt-search",
    "evaluate",
    "corruptions",
    "stability",
    "attacks",
    "typographic-eval",
    "dedup",
];

fn shift_dir(name: &str) -> String {
    format!("data/shift/{name}")
}

fn baseline_model(name: &str) -> String {
    format!("models/baseline-{name}.rozm")
}

/// Names of the shifted test sets the config produces.
pub fn shift_names(config: &ExperimentConfig) -> Vec<String> {
    match &config.data {
        DataSource::Toy { shifts, .. } => shifts.iter().map(|s| s.as_str().to_string()).collect(),
        DataSource::Directory { shifts, .. } => shifts.iter().map(|(n, _)| n.clone()).collect(),
    }
}

pub struct RunOutcome {
    pub report: RobustnessReport,
    pub ledger: RunLedger,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        !self.ledger.has_failures()
    }
}

struct Runner<'a> {
    out: &'a Path,
    previous: Option<RunLedger>,
    ledger: RunLedger,
}

impl Runner<'_> {
    fn ok(&self, name: &str) -> bool {
        self.ledger.stage(name).is_some_and(|s| s.status.ok())
    }

    /// Runs `f` unless an identical earlier run can be reused. `f` returns the
    /// files it wrote, relative to the run directory.
    fn stage(&mut self, name: &str, section: Value, deps: &[&str], f: impl FnOnce() -> Result<Vec<String>>) {
        let started = Instant::now();
        let mut record = StageRecord { name: name.to_string(), status: StageStatus::Skipped, input_hash: String::new(), outputs: vec![], wall_ms: 0, error: None };
        let mut upstream = Vec::with_capacity(deps.len());
        for d in deps {
            match self.ledger.stage(d) {
                Some(s) if s.status.ok() => upstream.push(s),
                _ => {
                    record.error = Some(format!("upstream stage {d} did not complete"));
                    self.ledger.stages.push(record);
                    return;
                }
            }
        }
        record.input_hash = input_hash(name, &section, &upstream);
        if let Some(prev) = self.previous.as_ref().and_then(|p| p.reusable(self.out, name, &record.input_hash)) {
            record.outputs = prev.outputs.clone();
            record.status = StageStatus::Cached;
        } else {
            let result = f().and_then(|files| {
                files.into_iter().map(|path| Ok(Artifact { sha256: hash_file(&self.out.join(&path))?, path })).collect::<Result<Vec<_>>>()
            });
            match result {
                Ok(outputs) => {
                    record.outputs = outputs;
                    record.status = StageStatus::Completed;
                }
                Err(e) => {
                    record.status = StageStatus::Failed;
                    record.error = Some(e.to_string());
                }
            }
        }
        record.wall_ms = started.elapsed().as_millis() as u64;
        self.ledger.stages.push(record);
    }
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("config sections serialize")
}

fn write_json(out: &Path, rel: &str, value: &impl Serialize) -> Result<String> {
    let path = out.join(rel);
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(rel.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(out: &Path, rel: &str) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(out.join(rel))?)?)
}

fn dataset_files(rel: &str) -> Vec<String> {
    vec![format!("{rel}/{}", crate::shiftgen::io::MANIFEST_FILE), format!("{rel}/{}", crate::shiftgen::io::TENSOR_FILE)]
}

fn save_ds(out: &Path, rel: &str, ds: &Dataset, generator: Value) -> Result<Vec<String>> {
    save_dataset(&out.join(rel), ds, Storage::Tensor, generator)?;
    Ok(dataset_files(rel))
}

fn load_ds(out: &Path, rel: &str) -> Result<Dataset> {
    Ok(load_dataset(&out.join(rel))?.0)
}

fn load_classifier(path: &Path) -> Result<FeedForward> {
    match snapshot::load(path)? {
        Snapshot::Classifier(m) => Ok(m),
        Snapshot::DualEncoder(_) => Err(invalid(format!("{} holds a dual encoder, not a classifier", path.display()))),
    }
}

fn load_dual(path: &Path) -> Result<DualEncoder> {
    match snapshot::load(path)? {
        Snapshot::DualEncoder(m) => Ok(m),
        Snapshot::Classifier(_) => Err(invalid(format!("{} holds a classifier, not a dual encoder", path.display()))),
    }
}

/// Image-caption pairs for the dual encoder. A `text_fraction` share of the
/// images gets a class name rendered onto it, and then the caption names
/// that word instead of the shape.
pub fn caption_corpus(train: &Dataset, templates: &[String], text_fraction: f64, seed: u64) -> Result<Vec<(Image, String)>> {
    let shape = train.input_shape().ok_or_else(|| invalid("empty training set"))?;
    let scale = default_font_scale(shape.h);
    let names: Vec<String> = train.class_names.iter().map(|n| n.to_lowercase()).collect();
    train
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = substream(seed, "dual-corpus", i as u64);
            let template = &templates[rng.random_range(0..templates.len())];
            let mut image = e.image.clone();
            let mut word = &names[e.label];
            if rng.random::<f64>() < text_fraction {
                word = &names[rng.random_range(0..names.len())];
                let fit = (shape.w / (GLYPH * scale)).min(word.chars().count());
                let text: String = word.chars().take(fit).collect();
                if fit > 0 && GLYPH * scale <= shape.h {
                    let x = rng.random_range(0..=shape.w - text_width(fit, scale));
                    let y = rng.random_range(0..=shape.h - GLYPH * scale);
                    render_text(&mut image, &text, x, y, scale)?;
                }
            }
            Ok((image, expand_templates(&[template.as_str()], std::slice::from_ref(word))[0][0].clone()))
        })
        .collect()
}

/// The models under study, in report order.
struct Subjects {
    entries: Vec<ModelEntry>,
    models: Vec<Box<dyn Classifier>>,
}

impl Subjects {
    fn load(out: &Path, config: &ExperimentConfig, class_names: &[String], searched: bool) -> Result<Self> {
        let supervised = load_classifier(&out.join(SUPERVISED_MODEL))?;
        let encoder = Arc::new(load_dual(&out.join(DUAL_MODEL))?);
        let templates: Vec<&str> = config.dual_encoder.templates.iter().map(String::as_str).collect();
        let zero_shot = synthesize_zero_shot_classifier(encoder.clone(), &expand_templates(&templates, class_names))?;
        let mut models: Vec<(String, ModelFamily, Box<dyn Classifier>)> =
            vec![(SUPERVISED.into(), ModelFamily::Supervised, Box::new(supervised)), (ZERO_SHOT.into(), ModelFamily::ZeroShot, Box::new(zero_shot))];
        if searched {
            let prompts: PromptSetFile = read_json(out, PROMPTS)?;
            models.push((ZERO_SHOT_SEARCHED.into(), ModelFamily::ZeroShot, Box::new(prompts.classifier(&encoder, class_names)?)));
        }
        let entries = models.iter().map(|(n, f, m)| ModelEntry { name: n.clone(), family: *f, snapshot_id: m.snapshot_id() }).collect();
        Ok(Self { entries, models: models.into_iter().map(|(_, _, m)| m).collect() })
    }

    fn iter(&self) -> impl Iterator<Item = (&ModelEntry, &dyn Classifier)> {
        self.entries.iter().zip(self.models.iter().map(|m| m.as_ref()))
    }

    fn get(&self, name: &str) -> Option<&dyn Classifier> {
        self.iter().find(|(e, _)| e.name == name).map(|(_, m)| m)
    }
}

fn leading(ds: &Dataset, n: usize) -> Dataset {
    let idx: Vec<usize> = (0..n.min(ds.len())).collect();
    ds.subset(ds.name.clone(), &idx)
}

fn record(model: &dyn Classifier, name: &str, ds: &Dataset, dataset_id: &str, kind: RecordKind, workers: usize) -> Result<EvalRecord> {
    let mut r = evaluate_accuracy(model, ds, kind, workers)?;
    r.model_id = name.to_string();
    r.dataset_id = dataset_id.to_string();
    Ok(r)
}

/// Executes every configured stage under `out` and assembles the report.
///
/// A stage whose inputs and outputs match the ledger already in `out` is
/// reused. A failing stage is recorded, its dependents are skipped, and the
/// remaining stages still run; check [`RunOutcome::succeeded`].
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let config_hash = hash_bytes(&serde_json::to_vec(config)?);
    let previous = RunLedger::load(out).ok().flatten();
    let mut r = Runner { out, previous, ledger: RunLedger::new(config_hash.clone(), config.seed) };
    let seed = config.seed;
    let workers = config.workers;
    let shifts = shift_names(config);
    let searched = config.prompt_search.is_some();

    r.stage("data", json!({ "data": to_value(&config.data), "seed": seed }), &[], || {
        let mut files = Vec::new();
        match &config.data {
            DataSource::Toy { classes, size, train_per_class, test_per_class, shifts } => {
                let spec = |n, name: &str| ToySpec { classes: classes.clone(), n_per_class: n, size: *size, shift: Default::default(), seed: derive_seed(seed, name, 0) };
                let train = spec(*train_per_class, "data/train");
                files.extend(save_ds(out, TRAIN_DIR, &generate_toy_dataset(&train)?.renamed("train"), to_value(&train))?);
                let test = spec(*test_per_class, "data/test");
                files.extend(save_ds(out, TEST_DIR, &generate_toy_dataset(&test)?.renamed("test"), to_value(&test))?);
                for s in shifts {
                    let spec = test.clone().with_shift(*s);
                    files.extend(save_ds(out, &shift_dir(s.as_str()), &generate_toy_dataset(&spec)?.renamed(s.as_str()), to_value(&spec))?);
                }
            }
            DataSource::Directory { train, test, shifts } => {
                let copy = |src: &Path, rel: &str, name: &str| -> Result<Vec<String>> {
                    if !src.join(crate::shiftgen::io::MANIFEST_FILE).exists() {
                        return Err(invalid(format!("dataset directory {} has no manifest", src.display())));
                    }
                    let (ds, m) = load_dataset(src)?;
                    save_ds(out, rel, &ds.renamed(name), json!({ "source": src, "content_hash": m.content_hash }))
                };
                files.extend(copy(train, TRAIN_DIR, "train")?);
                files.extend(copy(test, TEST_DIR, "test")?);
                for (name, dir) in shifts {
                    files.extend(copy(dir, &shift_dir(name), name)?);
                }
            }
        }
        Ok(files)
    });

    if let Some(t) = &config.typographic {
        r.stage("typographic", json!({ "typographic": to_value(t), "seed": seed }), &["data"], || {
            let test = load_ds(out, TEST_DIR)?;
            let spec = TypographicSpec { k_coords: t.k_coords, coordinates: None, font_scale: t.font_scale, seed: derive_seed(seed, "typographic", 0) };
            let (ds, manifest) = generate_typographic_dataset(&test, &spec, workers)?;
            let mut files = save_ds(out, TYPO_DIR, &ds.renamed("typographic"), to_value(&spec))?;
            files.push(write_json(out, TYPO_MANIFEST, &manifest)?);
            Ok(files)
        });
    }

    r.stage("train-classifier", json!({ "classifier": to_value(&config.classifier), "seed": seed }), &["data"], || {
        let train = load_ds(out, TRAIN_DIR)?;
        let cfg = crate::model::TrainConfig { seed: derive_seed(seed, "train/classifier", 0), ..config.classifier.train.clone() };
        let model = train_classifier(&train, &config.classifier.arch, &cfg)?;
        std::fs::create_dir_all(out.join("models"))?;
        snapshot::save_classifier(&out.join(SUPERVISED_MODEL), &model)?;
        Ok(vec![SUPERVISED_MODEL.to_string()])
    });

    r.stage("train-baselines", json!({ "baselines": to_value(&config.baselines), "seed": seed }), &["data"], || {
        let train = load_ds(out, TRAIN_DIR)?;
        std::fs::create_dir_all(out.join("models"))?;
        let mut files = Vec::new();
        for (i, b) in config.baselines.iter().enumerate() {
            let cfg = crate::model::TrainConfig { seed: derive_seed(seed, "train/baseline", i as u64), ..b.train.clone() };
            let model = train_classifier(&train, &b.arch, &cfg)?;
            let rel = baseline_model(&b.name);
            snapshot::save_classifier(&out.join(&rel), &model)?;
            files.push(rel);
        }
        Ok(files)
    });

    r.stage("train-dual", json!({ "dual_encoder": to_value(&config.dual_encoder), "seed": seed }), &["data"], || {
        let train = load_ds(out, TRAIN_DIR)?;
        let d = &config.dual_encoder;
        let pairs = caption_corpus(&train, &d.templates, d.text_fraction, derive_seed(seed, "train/dual-corpus", 0))?;
        let cfg = crate::model::TrainConfig { seed: derive_seed(seed, "train/dual", 0), ..d.train.clone() };
        let enc = train_dual_encoder_with(&pairs, &d.arch, &cfg)?;
        std::fs::create_dir_all(out.join("models"))?;
        snapshot::save_dual_encoder(&out.join(DUAL_MODEL), &enc)?;
        Ok(vec![DUAL_MODEL.to_string()])
    });

    if let Some(search) = &config.prompt_search {
        r.stage("prompt-search", json!({ "prompt_search": to_value(search), "seed": seed }), &["data", "train-dual"], || {
            let train = load_ds(out, TRAIN_DIR)?;
            let encoder = Arc::new(load_dual(&out.join(DUAL_MODEL))?);
            let cfg = crate::promptsearch::SearchConfig { seed: derive_seed(seed, "prompt-search", 0), ..search.clone() };
            cfg.validate(encoder.tokenizer().vocab_size())?;
            let (search_set, validation) = holdout_split(&train, cfg.validation_size, cfg.seed)?;
            let template: PromptTemplate = cfg.template.clone();
            let objective = ZeroShotObjective::new(encoder.clone(), template.clone(), &search_set, workers)?;
            let init = objective.init_tokens(&cfg.init)?;
            let result = beam_search_prompts(&objective, &init, &cfg, workers)?;
            let ensemble = select_prompt_ensemble(&encoder, &template, &result.candidates(), &validation, cfg.ensemble_size, workers)?;
            Ok(vec![write_json(out, PROMPTS, &PromptSetFile::new(&encoder, &cfg, &ensemble))?])
        });
    }

    let mut model_deps = vec!["data", "train-classifier", "train-dual"];
    if searched {
        model_deps.push("prompt-search");
    }
    let searched_ok = searched;

    let mut eval_deps = model_deps.clone();
    eval_deps.push("train-baselines");
    r.stage("evaluate", json!({ "shifts": shifts, "templates": to_value(&config.dual_encoder.templates), "baselines": to_value(&config.baselines) }), &eval_deps, || {
        let test = load_ds(out, TEST_DIR)?;
        let shifted = shifts.iter().map(|s| Ok((s.clone(), load_ds(out, &shift_dir(s))?))).collect::<Result<Vec<_>>>()?;
        let subjects = Subjects::load(out, config, &test.class_names, searched_ok)?;
        let mut entries = subjects.entries.clone();
        let mut runs = Vec::new();
        let mut evaluate = |name: &str, model: &dyn Classifier| -> Result<()> {
            runs.push(record(model, name, &test, CLEAN, RecordKind::Standard, workers)?);
            for (s, ds) in &shifted {
                runs.push(record(model, name, ds, s, RecordKind::Shift, workers)?);
            }
            Ok(())
        };
        for (e, m) in subjects.iter() {
            evaluate(&e.name, m)?;
        }
        for b in &config.baselines {
            let model = load_classifier(&out.join(baseline_model(&b.name)))?;
            let name = format!("baseline/{}", b.name);
            evaluate(&name, &model)?;
            entries.push(ModelEntry { name, family: ModelFamily::Baseline, snapshot_id: model.snapshot_id() });
        }
        Ok(vec![write_json(out, ACCURACY, &runs)?, write_json(out, MODELS, &entries)?])
    });

    if let Some(c) = &config.corruptions {
        r.stage("corruptions", json!({ "corruptions": to_value(c), "seed": seed, "templates": to_value(&config.dual_encoder.templates) }), &model_deps, || {
            let test = leading(&load_ds(out, TEST_DIR)?, c.samples);
            let subjects = Subjects::load(out, config, &test.class_names, searched_ok)?;
            let mut results: Vec<CorruptionResult> = subjects.entries.iter().map(|e| CorruptionResult { model: e.name.clone(), grid: vec![] }).collect();
            for kind in &c.kinds {
                let mut rows = vec![Vec::new(); results.len()];
                for severity in 1..=crate::metrics::SEVERITIES as u8 {
                    let spec = CorruptionSpec::new(*kind, severity)?;
                    let ds = corrupt_dataset(&test, spec, derive_seed(seed, &format!("corruption/{}", kind.as_str()), severity as u64), workers)?;
                    for (row, (_, m)) in rows.iter_mut().zip(subjects.iter()) {
                        row.push(evaluate_accuracy(m, &ds, RecordKind::Shift, workers)?.accuracy);
                    }
                }
                for (res, row) in results.iter_mut().zip(rows) {
                    res.grid.push((kind.as_str().to_string(), row));
                }
            }
            Ok(vec![write_json(out, CORRUPTIONS, &results)?])
        });
    }

    if let Some(s) = &config.stability {
        r.stage("stability", json!({ "stability": to_value(s), "seed": seed, "templates": to_value(&config.dual_encoder.templates) }), &model_deps, || {
            let test = leading(&load_ds(out, TEST_DIR)?, s.samples);
            let subjects = Subjects::load(out, config, &test.class_names, searched_ok)?;
            let mut sequences = Vec::new();
            for kind in &s.kinds {
                sequences.extend(build_perturbation_sequences(&test, *kind, s.length, derive_seed(seed, &format!("stability/{}", kind.as_str()), 0), workers)?);
            }
            let reference = subjects.get(SUPERVISED).expect("supervised model is always loaded");
            let results = subjects
                .iter()
                .map(|(e, m)| Ok(StabilityResult { model: e.name.clone(), report: sequence_stability(m, &sequences, Some(reference), workers)? }))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![write_json(out, STABILITY, &results)?])
        });
    }

    if let Some(a) = &config.attacks {
        r.stage("attacks", json!({ "attacks": to_value(a), "seed": seed, "templates": to_value(&config.dual_encoder.templates) }), &model_deps, || {
            let test = leading(&load_ds(out, TEST_DIR)?, a.samples);
            let subjects = Subjects::load(out, config, &test.class_names, searched_ok)?;
            let source = match &a.transfer_source {
                Some(s) => Some((s.as_str(), subjects.get(s).ok_or_else(|| invalid(format!("unknown transfer source model {s:?}")))?)),
                None => None,
            };
            std::fs::create_dir_all(out.join("results/attacks"))?;
            let mut files = Vec::new();
            let mut results = Vec::new();
            for (i, base) in a.configs.iter().enumerate() {
                let cfg = base.clone().with_seed(derive_seed(seed, "attack", i as u64));
                let mut jobs: Vec<(String, Option<String>, Threat)> = subjects.iter().map(|(e, m)| (e.name.clone(), None, Threat::direct(m, cfg.method))).collect();
                if let Some((src_name, src)) = source.filter(|_| cfg.method.transfers()) {
                    for (e, m) in subjects.iter().filter(|(e, _)| e.name != src_name) {
                        jobs.push((e.name.clone(), Some(src_name.to_string()), Threat::Transfer { substitute: src, target: m }));
                    }
                }
                for (model, from, threat) in jobs {
                    let run = evaluate_under_attack(threat, &test, &cfg, workers)?;
                    let rel = match &from {
                        Some(s) => format!("results/attacks/{model}-from-{s}-{i:02}.jsonl"),
                        None => format!("results/attacks/{model}-{i:02}.jsonl"),
                    };
                    let mut bytes = Vec::new();
                    run.write_jsonl(&mut bytes)?;
                    std::fs::write(out.join(&rel), bytes)?;
                    results.push(AttackResult {
                        model,
                        source: from,
                        access: threat.access().as_str().to_string(),
                        config: cfg.clone(),
                        records: rel.clone(),
                        summary: run.summary,
                    });
                    files.push(rel);
                }
            }
            files.push(write_json(out, ATTACKS, &results)?);
            Ok(files)
        });
    }

    if config.typographic.is_some() {
        let mut deps = model_deps.clone();
        deps.push("typographic");
        r.stage("typographic-eval", json!({ "templates": to_value(&config.dual_encoder.templates) }), &deps, || {
            let ds = load_ds(out, TYPO_DIR)?;
            let manifest: TypographicManifest = read_json(out, TYPO_MANIFEST)?;
            let subjects = Subjects::load(out, config, &ds.class_names, searched_ok)?;
            let targets: Vec<usize> = ds.examples.iter().map(|e| e.target.ok_or_else(|| invalid("typographic example without target"))).collect::<Result<_>>()?;
            let results = subjects
                .iter()
                .map(|(e, m)| {
                    let preds = predictions(m, &ds, workers)?;
                    let correct = preds.iter().zip(&ds.examples).filter(|(p, x)| **p == x.label).count();
                    Ok(TypographicResult {
                        model: e.name.clone(),
                        success_rate: targeted_success_rate(&preds, &targets)?,
                        accuracy: correct as f64 / ds.len() as f64,
                        count: ds.len(),
                        k_coords: manifest.k_coords,
                        truncated_count: manifest.truncated_count,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![write_json(out, TYPOGRAPHIC, &results)?])
        });
    }

    if let Some(d) = &config.dedup {
        r.stage("dedup", json!({ "dedup": to_value(d), "seed": seed, "templates": to_value(&config.dual_encoder.templates) }), &model_deps, || {
            let train = load_ds(out, TRAIN_DIR)?;
            let test = load_ds(out, TEST_DIR)?;
            let subjects = Subjects::load(out, config, &test.class_names, searched_ok)?;
            let embedder: Box<dyn ImageEmbedder> = match d.embedder {
                EmbedderChoice::DualEncoder => Box::new(load_dual(&out.join(DUAL_MODEL))?),
                EmbedderChoice::RandomProjection { dim } => {
                    let shape = test.input_shape().ok_or_else(|| invalid("empty test set"))?;
                    Box::new(RandomProjectionEmbedder::new(shape, dim, derive_seed(seed, "dedup/projection", 0)))
                }
            };
            let train_index = build_embedding_index(embedder.as_ref(), &train, workers)?;
            let test_index = build_embedding_index(embedder.as_ref(), &test, workers)?;
            std::fs::create_dir_all(out.join("results/dedup"))?;
            train_index.save(&out.join("results/dedup/train.roze"))?;
            test_index.save(&out.join("results/dedup/test.roze"))?;
            let model = subjects.get(ZERO_SHOT).expect("zero-shot model is always loaded");
            let sweep = overlap_sweep_report(model, &test, &test_index, &train_index, &d.thresholds, workers)?;
            std::fs::write(out.join("results/dedup/sweep.csv"), sweep_csv(&sweep))?;
            let result = DedupResult { encoder_id: embedder.embedder_id(), model: ZERO_SHOT.to_string(), sweep };
            Ok(vec![
                "results/dedup/train.roze".into(),
                "results/dedup/test.roze".into(),
                "results/dedup/sweep.csv".into(),
                write_json(out, DEDUP, &result)?,
            ])
        });
    }

    let report = assemble_report(&mut r, config, &config_hash, &shifts)?;
    r.ledger.save(out)?;
    Ok(RunOutcome { report, ledger: r.ledger })
}

/// Runs the report stage over whatever the earlier stages produced.
fn assemble_report(r: &mut Runner<'_>, config: &ExperimentConfig, config_hash: &str, shifts: &[String]) -> Result<RobustnessReport> {
    let out = r.out;
    let failures: Vec<StageFailure> = r
        .ledger
        .failures()
        .map(|s| StageFailure { stage: s.name.clone(), error: s.error.clone().unwrap_or_default() })
        .collect();
    let done: Vec<String> = STAGES.iter().filter(|s| r.ok(s)).map(|s| s.to_string()).collect();
    let deps: Vec<&str> = done.iter().map(String::as_str).collect();
    let section = json!({ "report": to_value(&config.report), "failures": to_value(&failures), "seed": config.seed, "config": config_hash });
    let ok = |s: &str| done.iter().any(|d| d == s);
    let mut built = None;
    r.stage("report", section, &deps, || {
        let mut datasets = Vec::new();
        let mut dirs: Vec<String> = vec![TRAIN_DIR.into(), TEST_DIR.into()];
        dirs.extend(shifts.iter().map(|s| shift_dir(s)));
        if ok("typographic") {
            dirs.push(TYPO_DIR.into());
        }
        if ok("data") {
            for d in &dirs {
                let m: DatasetManifest = read_json(out, &format!("{d}/{}", crate::shiftgen::io::MANIFEST_FILE))?;
                datasets.push((m.name, m.content_hash));
            }
        }
        let models: Vec<ModelEntry> = if ok("evaluate") { read_json(out, MODELS)? } else { vec![] };
        let runs: Vec<EvalRecord> = if ok("evaluate") { read_json(out, ACCURACY)? } else { vec![] };
        let corruptions: Vec<CorruptionResult> = if ok("corruptions") { read_json(out, CORRUPTIONS)? } else { vec![] };
        let stability: Vec<StabilityResult> = if ok("stability") { read_json(out, STABILITY)? } else { vec![] };
        let attacks: Vec<AttackResult> = if ok("attacks") { read_json(out, ATTACKS)? } else { vec![] };
        let typographic: Vec<TypographicResult> = if ok("typographic-eval") { read_json(out, TYPOGRAPHIC)? } else { vec![] };
        let dedup: Option<DedupResult> = if ok("dedup") { Some(read_json(out, DEDUP)?) } else { None };
        let prompts = if ok("prompt-search") {
            let p: PromptSetFile = read_json(out, PROMPTS)?;
            Some(PromptSummary { rendered: p.rendered, validation_accuracy: p.validation_accuracy, short: p.short })
        } else {
            None
        };
        let metadata = Metadata { seed: config.seed, config_hash: config_hash.to_string(), datasets, models };
        let derived = derive(&metadata, &runs, &corruptions, &attacks, &typographic)?;
        let report = RobustnessReport {
            version: REPORT_VERSION,
            metadata,
            runs,
            corruptions,
            stability,
            attacks,
            typographic,
            dedup,
            prompts,
            failures: failures.clone(),
            derived,
        };
        let mut files = vec![REPORT_JSON.to_string()];
        std::fs::write(out.join(REPORT_JSON), report.to_json()?)?;
        for f in &config.report.formats {
            if *f != ReportFormat::Json {
                for p in emit_report(&report, *f, out)? {
                    files.push(p.strip_prefix(out).map_err(|e| Error::Format(e.to_string()))?.to_string_lossy().replace('\\', "/"));
                }
            }
        }
        built = Some(report);
        Ok(files)
    });
    match built {
        Some(report) => Ok(report),
        None => {
            let rec = r.ledger.stage("report").expect("report stage recorded");
            match rec.status {
                StageStatus::Cached => RobustnessReport::load(&out.join(REPORT_JSON)),
                _ => {
                    let msg = rec.error.clone().unwrap_or_default();
                    r.ledger.save(out)?;
                    Err(Error::Format(format!("report stage failed: {msg}")))
                }
            }
        }
    }
}
