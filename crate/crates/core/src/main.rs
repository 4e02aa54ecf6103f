//! Command-line front end. Exit codes: 0 ok, 2 config error, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use zsrobust::attacks::{evaluate_under_attack, AttackConfig, Method, Threat};
use zsrobust::dedup::{build_embedding_index, overlap_sweep_report, sweep_csv, RandomProjectionEmbedder, DEFAULT_THRESHOLDS};
use zsrobust::harness::{caption_corpus, emit_report, run_experiment, ExperimentConfig, ReportFormat, RobustnessReport};
use zsrobust::metrics::{evaluate_accuracy, RecordKind};
use zsrobust::model::bridge::{connect_external_model, Endpoint};
use zsrobust::model::dual::{train_dual_encoder_with, DualEncoderArch};
use zsrobust::model::snapshot::{self, Snapshot};
use zsrobust::model::zeroshot::{expand_templates, DEFAULT_TEMPLATES};
use zsrobust::model::{argmax, forward_logits, synthesize_zero_shot_classifier, train_classifier, Arch, Classifier, DualEncoder, ImageEmbedder, TrainConfig};
use zsrobust::promptsearch::{beam_search_prompts, holdout_split, select_prompt_ensemble, PromptSetFile, SearchConfig, ZeroShotObjective};
use zsrobust::rng::derive_seed;
use zsrobust::shiftgen::io::{load_dataset, save_dataset, Storage};
use zsrobust::shiftgen::{corrupt_dataset, generate_toy_dataset, generate_typographic_dataset, CorruptionKind, CorruptionSpec, ShiftVariant, ToySpec, TypographicSpec};
use zsrobust::{Dataset, Error};

#[derive(Parser)]
#[command(name = "zsrobust", version, about = "Robustness evaluation for zero-shot dual-encoder classifiers")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy shapes dataset.
    GenToy {
        #[arg(long, default_value_t = 50)]
        n_per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value = "none")]
        shift: ShiftVariant,
        /// Store raw f32 tensors instead of PNGs.
        #[arg(long)]
        tensor: bool,
    },
    /// Render wrong class names onto a dataset.
    TypoGen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = zsrobust::shiftgen::CIFAR_STYLE_COORDS)]
        k: usize,
    },
    /// Apply one corruption at one severity.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: CorruptionKind,
        #[arg(long, default_value_t = 3)]
        severity: u8,
    },
    /// Train a supervised classifier, or a dual encoder with `--dual`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dual: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Search trigger prompts for a dual encoder.
    Promptsearch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Attack a model on a dataset.
    Attack {
        #[command(flatten)]
        target: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "fgsm")]
        method: Method,
        /// ℓ∞ budget in 1/255 units.
        #[arg(long, default_value_t = 4.0)]
        epsilon: f64,
        /// Search the smallest successful budget instead.
        #[arg(long)]
        min_perturbation: bool,
        /// Craft on this model and evaluate on the target.
        #[arg(long)]
        substitute: Option<PathBuf>,
    },
    /// Train/test overlap sweep.
    Dedup {
        #[command(flatten)]
        target: ModelArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Use a seeded random projection of this width instead of the model's image encoder.
        #[arg(long)]
        projection_dim: Option<usize>,
    },
    /// Clean accuracy of a model.
    Eval {
        #[command(flatten)]
        target: ModelArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a full experiment config, or re-emit an existing report.
    Report {
        /// Existing report.json to re-emit instead of running.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        format: Vec<ReportFormat>,
    },
    /// Handshake with a bridge peer and check one logits call.
    BridgeCheck {
        /// `tcp:HOST:PORT` or a command line.
        endpoint: String,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// `.rozm` snapshot or bridge endpoint (`tcp:HOST:PORT`, `cmd:...`).
    #[arg(long)]
    model: String,
    /// Prompt set for a dual-encoder snapshot (default: built-in templates).
    #[arg(long)]
    prompts: Option<PathBuf>,
}

/// Config problems map to exit code 2.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    ConfigError(e.into()).into()
}

fn read_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(config_err)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display())).map_err(config_err)
        }
    }
}

fn load(dir: &Path) -> anyhow::Result<Dataset> {
    Ok(load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?.0)
}

fn load_dual(path: &Path) -> anyhow::Result<DualEncoder> {
    match snapshot::load(path)? {
        Snapshot::DualEncoder(d) => Ok(d),
        Snapshot::Classifier(_) => bail!("{} is a classifier, not a dual encoder", path.display()),
    }
}

fn load_model(args: &ModelArgs, class_names: &[String]) -> anyhow::Result<Box<dyn Classifier>> {
    let path = Path::new(&args.model);
    if !path.exists() && (args.model.starts_with("tcp:") || args.model.starts_with("cmd:")) {
        let endpoint: Endpoint = args.model.parse()?;
        return Ok(Box::new(connect_external_model(&endpoint)?));
    }
    match snapshot::load(path).with_context(|| format!("loading model {}", path.display()))? {
        Snapshot::Classifier(m) => Ok(Box::new(m)),
        Snapshot::DualEncoder(d) => {
            let encoder = Arc::new(d);
            match &args.prompts {
                Some(p) => {
                    let set: PromptSetFile = serde_json::from_slice(&std::fs::read(p)?).map_err(config_err)?;
                    Ok(Box::new(set.classifier(&encoder, class_names)?))
                }
                None => Ok(Box::new(synthesize_zero_shot_classifier(encoder, &expand_templates(DEFAULT_TEMPLATES, class_names))?)),
            }
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (seed, workers, out) = (cli.seed, cli.workers, cli.out.as_path());
    if workers == 0 {
        return Err(config_err(anyhow!("--workers must be >= 1")));
    }
    match cli.command {
        Command::GenToy { n_per_class, size, shift, tensor } => {
            let spec = ToySpec { n_per_class, size, ..ToySpec::new(n_per_class, seed) }.with_shift(shift);
            let ds = generate_toy_dataset(&spec).map_err(config_err)?;
            let storage = if tensor { Storage::Tensor } else { Storage::Png };
            let m = save_dataset(out, &ds, storage, serde_json::to_value(&spec)?)?;
            println!("{} images in {} ({})", ds.len(), out.display(), m.content_hash);
        }
        Command::TypoGen { data, k } => {
            let ds = load(&data)?;
            let spec: TypographicSpec = match &cli.config {
                Some(_) => read_config::<Option<TypographicSpec>>(&cli.config)?.expect("config given"),
                None => TypographicSpec::new(k, seed),
            };
            let (typo, manifest) = generate_typographic_dataset(&ds, &spec, workers).map_err(config_err)?;
            save_dataset(out, &typo, Storage::Png, serde_json::to_value(&spec)?)?;
            write_json(&out.join("typographic.json"), &manifest)?;
            println!("{} images, {} truncated", typo.len(), manifest.truncated_count);
        }
        Command::Corrupt { data, kind, severity } => {
            let ds = load(&data)?;
            let spec = CorruptionSpec::new(kind, severity).map_err(config_err)?;
            let c = corrupt_dataset(&ds, spec, seed, workers)?;
            save_dataset(out, &c, Storage::Png, serde_json::json!({ "corruption": kind.as_str(), "severity": severity, "seed": seed }))?;
            println!("{} images in {}", c.len(), out.display());
        }
        Command::Train { data, dual, epochs } => {
            let ds = load(&data)?;
            let mut cfg: TrainConfig = read_config(&cli.config)?;
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate().map_err(config_err)?;
            std::fs::create_dir_all(out)?;
            if dual {
                let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
                let pairs = caption_corpus(&ds, &templates, 0.3, derive_seed(seed, "train/dual-corpus", 0))?;
                let enc = train_dual_encoder_with(&pairs, &DualEncoderArch::default(), &cfg)?;
                let path = out.join("dual.rozm");
                snapshot::save_dual_encoder(&path, &enc)?;
                println!("wrote {} ({})", path.display(), enc.id());
            } else {
                let model = train_classifier(&ds, &Arch::default(), &cfg)?;
                let path = out.join("classifier.rozm");
                snapshot::save_classifier(&path, &model)?;
                println!("wrote {} ({})", path.display(), model.snapshot_id());
            }
        }
        Command::Promptsearch { model, data } => {
            let ds = load(&data)?;
            let encoder = Arc::new(load_dual(&model)?);
            let mut cfg: SearchConfig = read_config(&cli.config)?;
            cfg.seed = seed;
            cfg.validate(encoder.tokenizer().vocab_size()).map_err(config_err)?;
            let (search, validation) = holdout_split(&ds, cfg.validation_size.min(ds.len() / 4).max(1), seed).map_err(config_err)?;
            let objective = ZeroShotObjective::new(encoder.clone(), cfg.template.clone(), &search, workers)?;
            let init = objective.init_tokens(&cfg.init).map_err(config_err)?;
            let result = beam_search_prompts(&objective, &init, &cfg, workers)?;
            let ensemble = select_prompt_ensemble(&encoder, &cfg.template, &result.candidates(), &validation, cfg.ensemble_size, workers)?;
            let file = PromptSetFile::new(&encoder, &cfg, &ensemble);
            for (p, a) in file.rendered.iter().zip(&file.validation_accuracy) {
                println!("{a:.3}  {p}");
            }
            write_json(&out.join("prompts.json"), &file)?;
        }
        Command::Attack { target, data, method, epsilon, min_perturbation, substitute } => {
            let ds = load(&data)?;
            let model = load_model(&target, &ds.class_names)?;
            let mut cfg: AttackConfig = match &cli.config {
                Some(_) => read_config::<Option<AttackConfig>>(&cli.config)?.expect("config given"),
                None if min_perturbation => AttackConfig::min_perturbation(method),
                None => AttackConfig::budgeted(method, epsilon / 255.0),
            };
            cfg.seed = seed;
            cfg.validate().map_err(config_err)?;
            let sub = match &substitute {
                Some(p) => Some(load_model(&ModelArgs { model: p.to_string_lossy().into_owned(), prompts: None }, &ds.class_names)?),
                None => None,
            };
            let threat = match &sub {
                Some(s) => Threat::Transfer { substitute: s.as_ref(), target: model.as_ref() },
                None => Threat::direct(model.as_ref(), cfg.method),
            };
            let run = evaluate_under_attack(threat, &ds, &cfg, workers)?;
            std::fs::create_dir_all(out)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("attack.jsonl"))?);
            run.write_jsonl(&mut f)?;
            write_json(&out.join("attack-summary.json"), &run.summary)?;
            let s = &run.summary;
            println!("robust accuracy {:.4}, success rate {:.4}", s.robust_accuracy, s.success_rate);
            if let Some(m) = s.median_min_linf {
                println!("{}", zsrobust::metrics::format_attack_cell(m, s.robust_accuracy));
            }
        }
        Command::Dedup { target, train, test, projection_dim } => {
            let (train, test) = (load(&train)?, load(&test)?);
            let model = load_model(&target, &test.class_names)?;
            let embedder: Box<dyn ImageEmbedder> = match projection_dim {
                Some(d) => Box::new(RandomProjectionEmbedder::new(test.input_shape().ok_or_else(|| anyhow!("empty test set"))?, d, seed)),
                None => Box::new(load_dual(Path::new(&target.model)).context("dedup without --projection-dim needs a dual-encoder model")?),
            };
            let thresholds: Vec<f64> = match &cli.config {
                Some(_) => read_config::<Vec<f64>>(&cli.config)?,
                None => DEFAULT_THRESHOLDS.to_vec(),
            };
            let tr = build_embedding_index(embedder.as_ref(), &train, workers)?;
            let te = build_embedding_index(embedder.as_ref(), &test, workers)?;
            let sweep = overlap_sweep_report(model.as_ref(), &test, &te, &tr, &thresholds, workers).map_err(config_err)?;
            std::fs::create_dir_all(out)?;
            let csv = sweep_csv(&sweep);
            std::fs::write(out.join("dedup.csv"), &csv)?;
            write_json(&out.join("dedup.json"), &sweep)?;
            print!("{csv}");
        }
        Command::Eval { target, data } => {
            let ds = load(&data)?;
            let model = load_model(&target, &ds.class_names)?;
            let mut r = evaluate_accuracy(model.as_ref(), &ds, RecordKind::Standard, workers)?;
            r.dataset_id = ds.identity();
            println!("{}: {}/{} = {:.4}", r.model_id, r.correct, r.total, r.accuracy);
            write_json(&out.join("eval.json"), &r)?;
        }
        Command::Report { from, format } => {
            if let Some(path) = from {
                let report = RobustnessReport::load(&path).map_err(config_err)?;
                let formats = if format.is_empty() { vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Scatter] } else { format };
                for f in formats {
                    for p in emit_report(&report, f, out)? {
                        println!("wrote {}", p.display());
                    }
                }
                return Ok(true);
            }
            let path = cli.config.as_ref().ok_or_else(|| config_err(anyhow!("report needs --config or --from")))?;
            let mut config = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display())).map_err(config_err)?;
            config.workers = workers;
            if seed != 0 {
                config.seed = seed;
            }
            if !format.is_empty() {
                config.report.formats = format;
            }
            let outcome = run_experiment(&config, out)?;
            for s in &outcome.ledger.stages {
                let err = s.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default();
                println!("{:<18} {:<10} {:>8} ms{err}", s.name, format!("{:?}", s.status).to_lowercase(), s.wall_ms);
            }
            if let Some(t) = &outcome.report.derived.typographic {
                println!(
                    "typographic success: {} {:.3} vs {} {:.3}",
                    t.zero_shot_model, t.zero_shot_success, t.supervised_model, t.supervised_success
                );
            }
            return Ok(outcome.succeeded());
        }
        Command::BridgeCheck { endpoint } => {
            let endpoint: Endpoint = endpoint.parse().map_err(config_err)?;
            let peer = connect_external_model(&endpoint)?;
            let info = peer.info();
            println!("protocol {} | {} classes | input {} | gradients {} | embeddings {}", info.protocol_version, info.classes.len(), info.input, info.has_input_gradient, info.has_embeddings);
            if !info.classes.is_empty() {
                let image = zsrobust::Image::filled(info.input.h, info.input.w, 0.5)?;
                let logits = forward_logits(&peer, &image)?;
                println!("logits on a gray image: {logits:?} (argmax {})", argmax(&logits));
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more stages failed; see ledger.json");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::InvalidArgument(_) | Error::Json(_)));
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}
