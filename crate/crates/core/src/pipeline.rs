//! Training and evaluation loops over in-memory corpora, with metrics
//! recorded as `(step, metric, value)` records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HypothesisInputs, RunConfig, StageConfig};
use crate::error::{Error, Result};
use crate::eval::{edit_distance, EditCounts};
use crate::losses::{LabelSequence, Vocabulary};
use crate::optim::Adam;
use crate::synth::{derive_seed, Sentence, Utterance};
use crate::transcoder::{align_hypothesis, align_word_ids, align_words, AlignedExample, Transcoder, WordVocab};
use crate::unidata2vec::{OutputUnits, UniData2vecModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// A metrics file: one header line (command, seed, full config) followed by
/// one record per line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub header: serde_json::Value,
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        MetricsLog {
            header: serde_json::json!({
                "command": command,
                "seed": config.seed,
                "config": config.echo(),
            }),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            step,
            metric: metric.to_string(),
            value,
        });
    }

    /// Last recorded value of `metric`.
    pub fn last(&self, metric: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn series(&self, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&serde_json::json!({ "header": self.header }))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Manifest(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Head {
            header: serde_json::Value,
        }
        let head: Head = serde_json::from_str(&first)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(MetricsLog {
            header: head.header,
            records,
        })
    }
}

/// Draws batches by walking seeded random permutations of `0..n`.
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("cannot sample batches from an empty set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(EpochSampler { order, pos: 0, rng })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn should_log(stage: &StageConfig, step: usize) -> bool {
    step % stage.log_every == 0 || step == stage.steps
}

/// Pre-training on labeled audio, optionally with an unlabeled batch drawn
/// alongside every labeled one.
pub fn pretrain(
    model: &mut UniData2vecModel,
    labeled: &[Utterance],
    unlabeled: Option<&[Utterance]>,
    stage: &StageConfig,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<()> {
    if labeled.iter().any(|u| u.phonemes.is_none()) {
        return Err(Error::MissingTranscript(
            "pre-training needs phoneme transcripts on the labeled set".into(),
        ));
    }
    let mut opt = Adam::new(stage.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11));
    let mut lab = EpochSampler::new(labeled.len(), derive_seed(seed, 12))?;
    let mut unl = match unlabeled {
        Some(u) => Some((u, EpochSampler::new(u.len(), derive_seed(seed, 13))?)),
        None => None,
    };
    for step in 1..=stage.steps {
        let batch: Vec<&Utterance> = lab.next_batch(stage.batch_size).into_iter().map(|i| &labeled[i]).collect();
        let ub: Option<Vec<&Utterance>> = unl
            .as_mut()
            .map(|(u, s)| s.next_batch(stage.batch_size).into_iter().map(|i| &u[i]).collect());
        let m = model.pretrain_step(&batch, ub.as_deref(), &mut opt, &mut rng)?;
        if should_log(stage, step) {
            log.push(step, "ctc_loss", m.ctc_loss);
            log.push(step, "sl1_labeled", m.sl1_labeled);
            if unlabeled.is_some() {
                log.push(step, "sl1_unlabeled", m.sl1_unlabeled);
            }
            log.push(step, "total", m.total);
            log.push(step, "grad_norm", m.grad_norm);
            log.push(step, "skipped", m.skipped as f64);
        }
    }
    Ok(())
}

/// CTC fine-tuning. The head is replaced when `units` differ from the
/// model's current output units.
pub fn finetune(
    model: &mut UniData2vecModel,
    units: &OutputUnits,
    data: &[Utterance],
    stage: &StageConfig,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<()> {
    if &model.units != units {
        model.reinit_head(units.clone(), derive_seed(seed, 21));
    }
    let mut opt = Adam::new(stage.adam());
    let mut sampler = EpochSampler::new(data.len(), derive_seed(seed, 22))?;
    for step in 1..=stage.steps {
        let batch: Vec<&Utterance> = sampler.next_batch(stage.batch_size).into_iter().map(|i| &data[i]).collect();
        let m = model.finetune_step(&batch, units, &mut opt)?;
        if should_log(stage, step) {
            log.push(step, "ctc_loss", m.ctc_loss);
            log.push(step, "grad_norm", m.grad_norm);
            log.push(step, "skipped", m.skipped as f64);
        }
    }
    Ok(())
}

/// Star-aligned one-hot examples for text sentences.
pub fn text_examples(
    sentences: &[Sentence],
    lexicon: &BTreeMap<String, Vec<usize>>,
    vocab: &WordVocab,
    phoneme_size: usize,
) -> Result<Vec<AlignedExample>> {
    sentences
        .iter()
        .filter(|s| !s.words.is_empty())
        .map(|s| align_words(&s.words, lexicon, vocab, phoneme_size))
        .collect()
}

/// Builds the word vocabulary from text and trains a transcoder on it.
pub fn train_transcoder(
    config: &RunConfig,
    sentences: &[Sentence],
    lexicon: &BTreeMap<String, Vec<usize>>,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<Transcoder> {
    let vocab = WordVocab::from_sentences(sentences.iter().map(|s| s.words.as_slice()), config.transcoder.vocab_cap)?;
    let examples = text_examples(sentences, lexicon, &vocab, config.transcoder.phoneme_size)?;
    let mut model = Transcoder::new(config.transcoder.clone(), vocab, derive_seed(seed, 31))?;
    fit_transcoder(&mut model, &examples, &config.transcoder_train, derive_seed(seed, 32), log, false)?;
    Ok(model)
}

/// Aligned examples from the acoustic model's collapsed hypotheses on
/// transcribed audio.
pub fn hypothesis_examples(
    acoustic: &UniData2vecModel,
    utterances: &[Utterance],
    lexicon: &BTreeMap<String, Vec<usize>>,
    vocab: &WordVocab,
    inputs: HypothesisInputs,
) -> Result<Vec<AlignedExample>> {
    let mut out = Vec::with_capacity(utterances.len());
    for u in utterances {
        let words = u
            .words
            .as_ref()
            .ok_or_else(|| Error::MissingTranscript(format!("utterance {} has no word transcript", u.id)))?;
        if words.is_empty() {
            continue;
        }
        let (_, _, post) = acoustic.phoneme_posteriors(&u.features)?;
        if post.is_empty() {
            continue;
        }
        let post = match inputs {
            HypothesisInputs::Soft => post,
            HypothesisInputs::Hard => post.hardened(),
        };
        let (phonemes, targets) = align_word_ids(words, lexicon, vocab)?;
        out.push(align_hypothesis(
            &post,
            &LabelSequence::new(phonemes, Vocabulary::Phoneme),
            &LabelSequence::new(targets, Vocabulary::Word),
        )?);
    }
    Ok(out)
}

fn fit_transcoder(
    model: &mut Transcoder,
    examples: &[AlignedExample],
    stage: &StageConfig,
    seed: u64,
    log: &mut MetricsLog,
    hypotheses: bool,
) -> Result<()> {
    let mut opt = Adam::new(stage.adam());
    let mut sampler = EpochSampler::new(examples.len(), seed)?;
    for step in 1..=stage.steps {
        let batch: Vec<&AlignedExample> = sampler
            .next_batch(stage.batch_size)
            .into_iter()
            .map(|i| &examples[i])
            .collect();
        let m = if hypotheses {
            model.hypothesis_finetune_step(&batch, &mut opt)?
        } else {
            model.text_train_step(&batch, &mut opt)?
        };
        if should_log(stage, step) {
            log.push(step, "ce_loss", m.loss);
            log.push(step, "accuracy", m.accuracy);
            log.push(step, "grad_norm", m.grad_norm);
        }
    }
    Ok(())
}

/// Fine-tunes a text-trained transcoder on hypothesis examples.
pub fn finetune_transcoder(
    model: &mut Transcoder,
    examples: &[AlignedExample],
    stage: &StageConfig,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<()> {
    fit_transcoder(model, examples, stage, derive_seed(seed, 41), log, true)
}

/// Words for one utterance: through the transcoder when given, otherwise
/// from a grapheme head's separator-delimited output.
pub fn transcribe(acoustic: &UniData2vecModel, transcoder: Option<&Transcoder>, features: &crate::Tensor) -> Result<Vec<String>> {
    let (_, labels, post) = acoustic.phoneme_posteriors(features)?;
    match (transcoder, &acoustic.units) {
        (Some(t), OutputUnits::Phoneme { .. }) => t.p2w_decode(&post),
        (None, OutputUnits::Grapheme { .. }) => Ok(acoustic.units.grapheme_words(&labels.ids)),
        (Some(_), OutputUnits::Grapheme { .. }) => Err(Error::VocabularyMismatch {
            head: acoustic.head_classes(),
            vocab: transcoder.map_or(0, |t| t.config.phoneme_size + 1),
        }),
        (None, OutputUnits::Phoneme { .. }) => Err(Error::InvalidArgument(
            "a phoneme model needs a transcoder to produce words".into(),
        )),
    }
}

/// Corpus-level phoneme error counts.
pub fn evaluate_per(model: &UniData2vecModel, utterances: &[Utterance]) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for u in utterances {
        let reference = u
            .phonemes
            .as_ref()
            .ok_or_else(|| Error::MissingTranscript(format!("utterance {} has no phoneme transcript", u.id)))?;
        let hyp = model.decode_units(&u.features)?;
        total.accumulate(&edit_distance(reference, &hyp)?);
    }
    Ok(total)
}

/// Corpus-level word error counts.
pub fn evaluate_wer(
    acoustic: &UniData2vecModel,
    transcoder: Option<&Transcoder>,
    utterances: &[Utterance],
) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for u in utterances {
        let reference = u
            .words
            .as_ref()
            .ok_or_else(|| Error::MissingTranscript(format!("utterance {} has no word transcript", u.id)))?;
        let hyp = transcribe(acoustic, transcoder, &u.features)?;
        total.accumulate(&edit_distance(reference, &hyp)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(5, 3).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(9).len(), 5);
        assert!(EpochSampler::new(0, 0).is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::new("test", &RunConfig::preset(Preset::Desk));
        log.push(1, "loss", 0.5);
        log.push(2, "loss", 0.25);
        let p = dir.path().join("m.jsonl");
        log.write(&p).unwrap();
        let back = MetricsLog::read(&p).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.last("loss"), Some(0.25));
        assert_eq!(back.series("loss").len(), 2);
    }
}
