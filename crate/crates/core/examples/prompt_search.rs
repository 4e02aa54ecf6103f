//! Gradient-guided beam search over trigger tokens for a zero-shot prompt,
//! followed by validation-based ensembling.

use std::sync::Arc;

use zsrobust::harness::caption_corpus;
use zsrobust::metrics::{evaluate_accuracy, RecordKind};
use zsrobust::model::dual::{train_dual_encoder_with, DualEncoderArch};
use zsrobust::model::zeroshot::{expand_templates, DEFAULT_TEMPLATES};
use zsrobust::model::{synthesize_zero_shot_classifier, TrainConfig};
use zsrobust::promptsearch::{beam_search_prompts, holdout_split, render_prompt, select_prompt_ensemble, SearchConfig, ZeroShotObjective};
use zsrobust::shiftgen::{generate_toy_dataset, ToySpec};

fn main() -> anyhow::Result<()> {
    let train = generate_toy_dataset(&ToySpec::new(40, 1))?;
    let test = generate_toy_dataset(&ToySpec::new(20, 2))?;
    let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
    let pairs = caption_corpus(&train, &templates, 0.3, 5)?;
    let encoder = Arc::new(train_dual_encoder_with(&pairs, &DualEncoderArch::default(), &TrainConfig { epochs: 10, ..TrainConfig::default() })?);

    let config = SearchConfig { steps: 4, top_k: 10, beam_size: 3, batch_size: 128, validation_size: 60, ensemble_size: 3, ..SearchConfig::default() };
    let (search_set, validation) = holdout_split(&train, config.validation_size, 1)?;
    let objective = ZeroShotObjective::new(encoder.clone(), config.template.clone(), &search_set, 4)?;
    let init = objective.init_tokens(&config.init)?;
    let result = beam_search_prompts(&objective, &init, &config, 4)?;
    for s in &result.step_best {
        println!("step {} loss {:.4}  {:?}", s.step, s.loss, render_prompt(&encoder, &config.template, &s.tokens));
    }

    let ensemble = select_prompt_ensemble(&encoder, &config.template, &result.candidates(), &validation, config.ensemble_size, 4)?;
    let baseline = synthesize_zero_shot_classifier(encoder.clone(), &expand_templates(DEFAULT_TEMPLATES, &test.class_names))?;
    println!("hand-written templates: {:.3}", evaluate_accuracy(&baseline, &test, RecordKind::Standard, 4)?.accuracy);
    println!("searched ensemble:      {:.3}", evaluate_accuracy(&ensemble.classifier, &test, RecordKind::Standard, 4)?.accuracy);
    Ok(())
}
