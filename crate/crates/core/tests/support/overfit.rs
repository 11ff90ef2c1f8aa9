//! Memorization runs: a desk acoustic model on five utterances and a desk
//! transcoder on twenty sentences.

use xling::config::{Preset, RunConfig};
use xling::pipeline::{evaluate_per, finetune, text_examples, train_transcoder, MetricsLog};
use xling::synth::{generate_corpus, RoleSizes};
use xling::transcoder::AlignedExample;
use xling::unidata2vec::{OutputUnits, UniData2vecModel};

fn config() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.corpus.sizes = RoleSizes {
        source: 0,
        unlabeled: 0,
        finetune: 5,
        text: 20,
        test: 0,
    };
    cfg
}

/// PER on the five fine-tuning utterances after fine-tuning a freshly
/// initialized desk model on exactly those utterances.
pub fn acoustic(seed: u64, steps: usize) -> f64 {
    let mut cfg = config();
    let corpus = generate_corpus(&cfg.corpus, seed, 1).unwrap();
    let mut model = UniData2vecModel::new(cfg.encoder.clone(), seed).unwrap();
    cfg.finetune.steps = steps;
    cfg.finetune.batch_size = 5;
    cfg.finetune.lr = 1e-3;
    let units = OutputUnits::Phoneme {
        size: corpus.target.inventory.len(),
    };
    let mut log = MetricsLog::new("overfit", &cfg);
    finetune(&mut model, &units, &corpus.finetune, &cfg.finetune, seed, &mut log).unwrap();
    evaluate_per(&model, &corpus.finetune).unwrap().rate()
}

/// Mean cross-entropy over the twenty training sentences and whether every
/// sentence decodes back exactly.
pub fn transcoder(seed: u64, steps: usize) -> (f64, bool) {
    let mut cfg = config();
    let corpus = generate_corpus(&cfg.corpus, seed, 1).unwrap();
    cfg.transcoder_train.steps = steps;
    cfg.transcoder_train.batch_size = 20;
    cfg.transcoder_train.lr = 1e-3;
    let lexicon = corpus.target.lexicon_map();
    let mut log = MetricsLog::new("overfit", &cfg);
    let model = train_transcoder(&cfg, &corpus.text, &lexicon, seed, &mut log).unwrap();
    let examples = text_examples(&corpus.text, &lexicon, &model.vocab, cfg.transcoder.phoneme_size).unwrap();
    let batch: Vec<&AlignedExample> = examples.iter().collect();
    let ce = model.evaluate(&batch).unwrap().loss;
    let exact = corpus
        .text
        .iter()
        .zip(&examples)
        .all(|(s, ex)| model.p2w_decode(&ex.phoneme_posteriors).unwrap() == s.words);
    (ce, exact)
}
