use super::*;
use crate::image::{Image, InputShape, LabeledExample};
use crate::model::dual::DualEncoderArch;
use crate::model::{Tokenizer, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64, name: &str) -> Matrix {
    let mut rng = substream(seed, name, 0);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn linear_fixture(seed: u64) -> LinearTextObjective {
    let mut rng = substream(seed, "images", 0);
    let images: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    LinearTextObjective::new(
        "[T][T] of [C]".parse().unwrap(),
        random_matrix(7, 3, seed, "emb"),
        random_matrix(3, 4, seed, "proj"),
        vec![vec![5], vec![6, 4]],
        images,
        (0..10).map(|i| i % 2).collect(),
    )
    .unwrap()
}

#[test]
fn taylor_scores_are_exact_on_linear_text_encoder() {
    for seed in 0..5 {
        let obj = linear_fixture(seed);
        let batch: Vec<usize> = (0..10).collect();
        let state = TriggerState { tokens: vec![2, 3] };
        for (position, slot) in [(0, 0), (1, 1)] {
            let cands = score_token_candidates(&obj, &batch, position, &state, 7).unwrap();
            assert_eq!(cands.len(), 7);
            for c in &cands {
                let mut t = state.tokens.clone();
                t[slot] = c.token;
                let truth = obj.loss(&t, &batch).unwrap();
                assert!((c.approx_loss - truth).abs() <= 1e-6, "{} vs {truth}", c.approx_loss);
            }
        }
    }
}

#[test]
fn full_vocabulary_is_sorted_and_current_token_keeps_loss() {
    let obj = linear_fixture(1);
    let batch: Vec<usize> = (0..10).collect();
    let state = TriggerState { tokens: vec![4, 0] };
    let l = obj.loss(&state.tokens, &batch).unwrap();
    let c = score_token_candidates(&obj, &batch, 1, &state, 7).unwrap();
    assert!(c.windows(2).all(|w| w[0].approx_loss <= w[1].approx_loss));
    let mut tokens: Vec<usize> = c.iter().map(|c| c.token).collect();
    tokens.sort_unstable();
    assert_eq!(tokens, (0..7).collect::<Vec<_>>());
    assert_eq!(c.iter().find(|c| c.token == 0).unwrap().approx_loss, l);
    assert!(score_token_candidates(&obj, &batch, 2, &state, 3).is_err(), "literal position");
    assert!(score_token_candidates(&obj, &batch, 3, &state, 3).is_err(), "class position");
}

/// Arbitrary loss table over two trigger tokens; the gradient is a fixed
/// pseudo-random vector, so the first-order scores carry no information.
struct TableObjective {
    template: PromptTemplate,
    table: Vec<f64>,
    v: usize,
    embeddings: Matrix,
    candidates: Vec<usize>,
}

impl TableObjective {
    fn new(v: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "table", 0);
        Self {
            template: "[T][T][C]".parse().unwrap(),
            table: (0..v * v).map(|_| rng.random::<f64>()).collect(),
            v,
            embeddings: random_matrix(v, 2, seed, "table-emb"),
            candidates: (0..v).collect(),
        }
    }
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
    fn loss(&self, t: &[usize], _: &[usize]) -> Result<f64> {
        Ok(self.table[t[0] * self.v + t[1]])
    }
    fn slot_gradient(&self, t: &[usize], slot: usize, b: &[usize]) -> Result<(f64, Vec<f64>)> {
        Ok((self.loss(t, b)?, vec![0.3 - slot as f64, 0.7]))
    }
}

fn exhaustive_best(obj: &TableObjective) -> (Vec<usize>, f64) {
    let mut best = (vec![0, 0], f64::INFINITY);
    for a in 0..obj.v {
        for b in 0..obj.v {
            let l = obj.table[a * obj.v + b];
            if l < best.1 {
                best = (vec![a, b], l);
            }
        }
    }
    best
}

#[test]
fn beam_search_matches_exhaustive_enumeration() {
    for seed in 0..20 {
        let obj = TableObjective::new(6, seed);
        let config = SearchConfig { top_k: 6, beam_size: 36, steps: 2, ..SearchConfig::default() };
        let res = beam_search_prompts(&obj, &[0, 0], &config, 2).unwrap();
        let (tokens, loss) = exhaustive_best(&obj);
        assert_eq!(res.ranked[0].tokens, tokens);
        assert_eq!(res.ranked[0].loss, loss);
        assert_eq!(res.ranked.len(), 36);
    }
}

#[test]
fn singleton_vocabulary_forces_the_sequence() {
    let obj = TableObjective::new(1, 0);
    let config = SearchConfig { top_k: 1, beam_size: 5, steps: 3, ..SearchConfig::default() };
    let res = beam_search_prompts(&obj, &[0, 0], &config, 1).unwrap();
    assert_eq!(res.ranked.len(), 1);
    assert_eq!(res.ranked[0].tokens, vec![0, 0]);
}

#[test]
fn zero_steps_return_the_init() {
    let obj = TableObjective::new(6, 3);
    let res = beam_search_prompts(&obj, &[4, 1], &SearchConfig { top_k: 6, steps: 0, ..SearchConfig::default() }, 1).unwrap();
    assert_eq!(res.candidates(), vec![vec![4, 1]]);
    assert!(beam_search_prompts(&obj, &[4], &SearchConfig { top_k: 6, ..SearchConfig::default() }, 1).is_err());
    assert!(beam_search_prompts(&obj, &[4, 1], &SearchConfig { top_k: 7, ..SearchConfig::default() }, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn best_retained_loss_never_increases(seed in 0u64..10_000, beam in 1usize..4, top_k in 1usize..6, steps in 1usize..7) {
        let obj = TableObjective::new(6, seed);
        let config = SearchConfig { top_k, beam_size: beam, steps, ..SearchConfig::default() };
        let res = beam_search_prompts(&obj, &[1, 2], &config, 1).unwrap();
        for w in res.step_best.windows(2) {
            prop_assert!(w[1].loss <= w[0].loss);
        }
        prop_assert_eq!(&res, &beam_search_prompts(&obj, &[1, 2], &config, 3).unwrap());
    }
}

#[test]
fn defaults_round_trip() {
    let c = SearchConfig::default();
    assert_eq!((c.top_k, c.beam_size, c.batch_size), (20, 5, 512));
    assert_eq!(c.template.to_string(), "[T][T][T][T][C]");
    assert_eq!(c.init, "A photo of a");
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<SearchConfig>(&json).unwrap(), c);
    assert!(serde_json::from_str::<SearchConfig>(r#"{"beam":3}"#).is_err());
    assert!(serde_json::from_str::<SearchConfig>(r#"{"template":"[T][T]"}"#).is_err());
}

#[test]
fn scoring_batches_are_seeded_subsets() {
    assert_eq!(scoring_batch(5, 512, 0, 3), vec![0, 1, 2, 3, 4]);
    let a = scoring_batch(100, 10, 7, 1);
    assert_eq!(a.len(), 10);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a, scoring_batch(100, 10, 7, 1));
    assert_ne!(a, scoring_batch(100, 10, 7, 2));
}

fn encoder_and_data() -> (Arc<DualEncoder>, Dataset) {
    let tok = Tokenizer::build(["a photo of a red blue", "green picture"]);
    let shape = InputShape::new(2, 2);
    let config = TrainConfig { embed_dim: 6, ..TrainConfig::default() };
    let enc = DualEncoder::init(shape, tok, &DualEncoderArch { hidden: vec![8], pool: 1, token_dim: 5 }, &config).unwrap();
    let mut rng = substream(5, "prompt-images", 0);
    let ex = (0..30).map(|i| LabeledExample::new(Image::new(2, 2, (0..12).map(|_| rng.random::<f64>()).collect()).unwrap(), i % 3)).collect();
    (Arc::new(enc), Dataset::new("p", vec!["red".into(), "blue".into(), "green".into()], ex).unwrap())
}

#[test]
fn zero_shot_gradient_matches_finite_differences() {
    let (enc, ds) = encoder_and_data();
    let obj = ZeroShotObjective::new(enc.clone(), "[T][T] of [C]".parse().unwrap(), &ds, 1).unwrap();
    let triggers = obj.init_tokens("photo a").unwrap();
    let batch: Vec<usize> = (0..ds.len()).collect();
    for slot in 0..2 {
        let (l, g) = obj.slot_gradient(&triggers, slot, &batch).unwrap();
        assert!((l - obj.loss(&triggers, &batch).unwrap()).abs() < 1e-12);
        let token = triggers[slot];
        for k in 0..g.len() {
            let shifted = |h: f64| {
                let mut params: Vec<Matrix> = enc.named_params().into_iter().map(|(_, m)| m).collect();
                let table = params.iter_mut().find(|m| m.rows == enc.tokenizer().vocab_size()).unwrap();
                table.data[token * table.cols + k] += h;
                let e2 = Arc::new(enc.with_params(params).unwrap());
                ZeroShotObjective::new(e2, "[T][T] of [C]".parse().unwrap(), &ds, 1).unwrap().loss(&triggers, &batch).unwrap()
            };
            let h = 1e-5;
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-3 * fd.abs().max(1e-4), "slot {slot} dim {k}: {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn init_words_outside_the_vocabulary_map_to_the_first_token() {
    let (enc, ds) = encoder_and_data();
    let obj = ZeroShotObjective::new(enc.clone(), PromptTemplate::default(), &ds, 1).unwrap();
    let t = obj.init_tokens("A photo of zebra").unwrap();
    let tok = enc.tokenizer();
    assert_eq!(t, vec![tok.id("a"), tok.id("photo"), tok.id("of"), obj.candidates()[0]]);
    assert!(obj.init_tokens("A photo").is_err());
}

#[test]
fn ensemble_selection_dedups_and_ranks() {
    let (enc, ds) = encoder_and_data();
    let template: PromptTemplate = "[T][T][C]".parse().unwrap();
    let tok = enc.tokenizer();
    let s = vec![tok.id("photo"), tok.id("of")];
    let s2 = vec![tok.id("picture"), tok.id("a")];
    let e = select_prompt_ensemble(&enc, &template, &[s.clone(), s.clone(), s2.clone()], &ds, 5, 1).unwrap();
    assert_eq!(e.sequences.len(), 2);
    assert!(e.short);
    assert!(e.validation_accuracy[0] >= e.validation_accuracy[1]);

    let one = select_prompt_ensemble(&enc, &template, &[s.clone(), s2.clone()], &ds, 1, 1).unwrap();
    assert!(!one.short);
    assert_eq!(one.sequences.len(), 1);
    assert_eq!(one.validation_accuracy[0], e.validation_accuracy[0]);
    assert_eq!(one.sequences[0], e.sequences[0]);

    // The single-prompt classifier agrees with the validation accuracy it was ranked by.
    let acc = crate::metrics::evaluate_accuracy(&one.classifier, &ds, crate::metrics::RecordKind::Standard, 1).unwrap().accuracy;
    assert_eq!(acc, one.validation_accuracy[0]);
}

#[test]
fn prompt_set_file_round_trips() {
    let (enc, ds) = encoder_and_data();
    let config = SearchConfig { template: "[T][T][C]".parse().unwrap(), ..SearchConfig::default() };
    let tok = enc.tokenizer();
    let e = select_prompt_ensemble(&enc, &config.template, &[vec![tok.id("photo"), tok.id("of")]], &ds, 1, 1).unwrap();
    let file = PromptSetFile::new(&enc, &config, &e);
    assert_eq!(file.rendered, vec!["photo of {}"]);
    let back: PromptSetFile = serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap();
    assert_eq!(back, file);
    let c = back.classifier(&enc, &ds.class_names).unwrap();
    assert_eq!(c.class_embeddings(), e.classifier.class_embeddings());
}

#[test]
fn holdout_split_partitions() {
    let (_, ds) = encoder_and_data();
    let (a, b) = holdout_split(&ds, 7, 1).unwrap();
    assert_eq!((a.len(), b.len()), (23, 7));
    assert!(holdout_split(&ds, 30, 1).is_err());
}
