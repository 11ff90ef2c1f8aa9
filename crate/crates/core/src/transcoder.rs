//! Phoneme-to-word transduction.
//!
//! The transcoder reads a sequence of phoneme posterior vectors and labels
//! every position with either a word or the `*` filler: a word of `n`
//! phonemes is written as `n-1` stars followed by the word itself, so input
//! and output lengths always agree and training is plain per-position
//! cross-entropy.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{cross_entropy, LabelSequence, PosteriorSequence, Vocabulary};
use crate::nn::{self, sinusoidal_positions, Init, ParamStore, Scope};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const COMPONENT: &str = "transcoder";

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const STAR: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "*"];

/// Output word inventory. Indices 0..3 are `<pad>`, `<unk>` and `*`; the
/// remaining entries are words in descending corpus frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    /// Builds a vocabulary from regular words, already ranked.
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("word {w:?} appears twice in the vocabulary")));
            }
        }
        Ok(WordVocab { words: all, index })
    }

    /// Ranks words by frequency (ties alphabetical) and keeps at most `cap`.
    pub fn from_sentences<'a, I>(sentences: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for w in s {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap);
        WordVocab::new(ranked.into_iter().map(|(w, _)| w.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Regular words without the specials.
    pub fn regular_words(&self) -> &[String] {
        &self.words[SPECIALS.len()..]
    }
}

impl Serialize for WordVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.regular_words().serialize(s)
    }
}

impl<'de> Deserialize<'de> for WordVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        WordVocab::new(words).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvTopology {
    /// Both convolutions read the normalized input; outputs are summed.
    Parallel,
    /// The second convolution reads the output of the first.
    Serial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscoderConfig {
    pub blocks: usize,
    pub dim: usize,
    pub inner_dim: usize,
    pub heads: usize,
    pub kernels: [usize; 2],
    pub phoneme_size: usize,
    pub vocab_size: usize,
    pub vocab_cap: usize,
    pub conv_topology: ConvTopology,
}

impl TranscoderConfig {
    pub fn desk() -> Self {
        TranscoderConfig {
            blocks: 2,
            dim: 64,
            inner_dim: 256,
            heads: 2,
            kernels: [3, 5],
            phoneme_size: 20,
            vocab_size: 0,
            vocab_cap: 2000,
            conv_topology: ConvTopology::Parallel,
        }
    }

    pub fn paper() -> Self {
        TranscoderConfig {
            blocks: 3,
            dim: 256,
            inner_dim: 1024,
            heads: 4,
            kernels: [3, 5],
            phoneme_size: 20,
            vocab_size: 0,
            vocab_cap: 50_000,
            conv_topology: ConvTopology::Parallel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [k1, k2] = self.kernels;
        if k1 == k2 {
            return bad(format!("transcoder kernels must differ, both are {k1}"));
        }
        if k1 % 2 == 0 || k2 % 2 == 0 {
            return bad(format!("transcoder kernels must be odd, got {k1} and {k2}"));
        }
        if self.blocks == 0 || self.dim == 0 || self.inner_dim == 0 || self.phoneme_size == 0 {
            return bad("transcoder blocks and dimensions must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("{} heads do not divide dimension {}", self.heads, self.dim));
        }
        if self.vocab_size <= STAR {
            return bad(format!("word vocabulary of size {} has no regular words", self.vocab_size));
        }
        Ok(())
    }
}

/// One training example: a posterior sequence and its per-position word
/// targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedExample {
    pub phoneme_posteriors: PosteriorSequence,
    pub word_targets: LabelSequence,
}

impl AlignedExample {
    /// Word ids with fillers removed.
    pub fn words(&self) -> Vec<usize> {
        strip_fillers(&self.word_targets.ids)
    }
}

fn strip_fillers(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&t| t != STAR && t != PAD).collect()
}

/// Phoneme ids and star-prefixed targets for a word sequence.
pub fn align_word_ids(
    words: &[String],
    lexicon: &BTreeMap<String, Vec<usize>>,
    vocab: &WordVocab,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if words.is_empty() {
        return Err(Error::InvalidArgument("cannot align an empty word list".into()));
    }
    let mut phonemes = Vec::new();
    let mut targets = Vec::new();
    for w in words {
        let p = lexicon
            .get(w)
            .ok_or_else(|| Error::InvalidArgument(format!("word {w:?} has no pronunciation")))?;
        if p.is_empty() {
            return Err(Error::InvalidArgument(format!("word {w:?} has an empty pronunciation")));
        }
        phonemes.extend_from_slice(p);
        targets.extend(std::iter::repeat_n(STAR, p.len() - 1));
        targets.push(vocab.id(w));
    }
    Ok((phonemes, targets))
}

/// Aligned example for text: one-hot phoneme posteriors.
pub fn align_words(
    words: &[String],
    lexicon: &BTreeMap<String, Vec<usize>>,
    vocab: &WordVocab,
    phoneme_size: usize,
) -> Result<AlignedExample> {
    let (phonemes, targets) = align_word_ids(words, lexicon, vocab)?;
    Ok(AlignedExample {
        phoneme_posteriors: PosteriorSequence::one_hot(&phonemes, phoneme_size)?,
        word_targets: LabelSequence::new(targets, Vocabulary::Word),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Match,
    Insert,
    Delete,
}

/// Alignment of `hyp` against `reference` as a list of operations,
/// preferring match/substitution, then insertion, then deletion on ties.
fn levenshtein_path(reference: &[usize], hyp: &[usize]) -> Vec<Step> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d.iter_mut().enumerate().take(m + 1) {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut path = Vec::with_capacity(n + m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            path.push(Step::Match);
            i -= 1;
            j -= 1;
        } else if j > 0 && here == d[i * w + j - 1] + 1 {
            path.push(Step::Insert);
            j -= 1;
        } else {
            path.push(Step::Delete);
            i -= 1;
        }
    }
    path.reverse();
    path
}

/// Transfers reference word targets onto an errorful hypothesis.
///
/// Hypothesis positions aligned to a reference position take its target,
/// inserted positions become `*`. A word whose final reference position was
/// deleted moves to the last surviving position of its span, or disappears
/// with the span.
pub fn align_hypothesis(
    hyp: &PosteriorSequence,
    ref_phonemes: &LabelSequence,
    ref_targets: &LabelSequence,
) -> Result<AlignedExample> {
    if hyp.is_empty() || ref_phonemes.is_empty() {
        return Err(Error::InvalidArgument("hypothesis and reference must be non-empty".into()));
    }
    if ref_phonemes.len() != ref_targets.len() {
        return Err(Error::shape(
            "align_hypothesis",
            &[ref_phonemes.len()],
            &[ref_targets.len()],
        ));
    }
    let hyp_ids = hyp.argmax();
    let path = levenshtein_path(&ref_phonemes.ids, &hyp_ids);
    let mut targets = vec![STAR; hyp_ids.len()];
    let mut ref_to_hyp: Vec<Option<usize>> = vec![None; ref_phonemes.len()];
    let (mut i, mut j) = (0, 0);
    for step in path {
        match step {
            Step::Match => {
                ref_to_hyp[i] = Some(j);
                targets[j] = ref_targets.ids[i];
                i += 1;
                j += 1;
            }
            Step::Insert => j += 1,
            Step::Delete => i += 1,
        }
    }
    let mut span_start = 0;
    for (end, &t) in ref_targets.ids.iter().enumerate() {
        if t == STAR {
            continue;
        }
        if ref_to_hyp[end].is_none() {
            if let Some(h) = (span_start..end).rev().find_map(|r| ref_to_hyp[r]) {
                targets[h] = t;
            }
        }
        span_start = end + 1;
    }
    Ok(AlignedExample {
        phoneme_posteriors: hyp.clone(),
        word_targets: LabelSequence::new(targets, Vocabulary::Word),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscoderMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcoder {
    pub config: TranscoderConfig,
    pub vocab: WordVocab,
    pub params: ParamStore,
}

impl Transcoder {
    pub fn new(mut config: TranscoderConfig, vocab: WordVocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let (d, [k1, k2]) = (config.dim, config.kernels);
        init.linear("embed", config.phoneme_size, d, false);
        for b in 0..config.blocks {
            let p = format!("block{b}");
            init.layer_norm(&format!("{p}.ln_conv"), d);
            init.conv(&format!("{p}.conv1"), k1, d, d);
            init.conv(&format!("{p}.conv2"), k2, d, d);
            for a in ["attn1", "attn2"] {
                init.layer_norm(&format!("{p}.ln_{a}"), d);
                init.attention(&format!("{p}.{a}"), d);
            }
            init.layer_norm(&format!("{p}.ln_ffn"), d);
            init.feed_forward(&format!("{p}.ffn"), d, config.inner_dim);
        }
        init.layer_norm("final_ln", d);
        init.linear("out", d, config.vocab_size, true);
        Ok(Transcoder { config, vocab, params })
    }

    fn scope(&self, trainable: bool) -> Scope<'_> {
        if trainable {
            Scope::trainable(&self.params, "")
        } else {
            Scope::frozen(&self.params, "")
        }
    }

    fn check_input(&self, x: &PosteriorSequence) -> Result<()> {
        let t = x.tensor();
        if t.cols() != self.config.phoneme_size {
            return Err(Error::shape("transcoder input", t.shape(), &[t.rows(), self.config.phoneme_size]));
        }
        for r in 0..t.rows() {
            let s: f64 = t.row(r).iter().sum();
            if (s - 1.0).abs() > PosteriorSequence::ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("posterior row {r} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Word logits `[L×|W|]` as a graph node.
    pub fn forward(&self, g: &mut Graph, x: &PosteriorSequence, trainable: bool) -> Result<Var> {
        self.check_input(x)?;
        if x.is_empty() {
            return Err(Error::InvalidArgument("empty posterior sequence".into()));
        }
        let cfg = &self.config;
        let s = self.scope(trainable);
        let input = g.input(x.tensor().clone())?;
        let h = nn::linear(g, &s.sub("embed"), input)?;
        let pos = sinusoidal_positions(x.len(), cfg.dim);
        let mut h = g.add_const(h, &pos)?;
        let [k1, k2] = cfg.kernels;
        for b in 0..cfg.blocks {
            let p = s.sub(&format!("block{b}"));
            let n = nn::layer_norm(g, &p.sub("ln_conv"), h)?;
            let c = match cfg.conv_topology {
                ConvTopology::Parallel => {
                    let a = nn::conv1d(g, &p.sub("conv1"), n, k1, 1, (k1 - 1) / 2)?;
                    let b = nn::conv1d(g, &p.sub("conv2"), n, k2, 1, (k2 - 1) / 2)?;
                    g.add(a, b)?
                }
                ConvTopology::Serial => {
                    let a = nn::conv1d(g, &p.sub("conv1"), n, k1, 1, (k1 - 1) / 2)?;
                    nn::conv1d(g, &p.sub("conv2"), a, k2, 1, (k2 - 1) / 2)?
                }
            };
            h = g.add(h, c)?;
            for a in ["attn1", "attn2"] {
                let n = nn::layer_norm(g, &p.sub(&format!("ln_{a}")), h)?;
                let y = nn::multi_head_attention(g, &p.sub(a), n, cfg.heads, None)?;
                h = g.add(h, y)?;
            }
            let n = nn::layer_norm(g, &p.sub("ln_ffn"), h)?;
            let y = nn::feed_forward(g, &p.sub("ffn"), n)?;
            h = g.add(h, y)?;
        }
        let h = nn::layer_norm(g, &s.sub("final_ln"), h)?;
        nn::linear(g, &s.sub("out"), h)
    }

    pub fn logits(&self, x: &PosteriorSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, x, false)?;
        Ok(g.value(v).clone())
    }

    /// Batch loss (mean of per-example cross-entropy) plus the number of
    /// correctly predicted and scored positions.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[&AlignedExample],
        trainable: bool,
    ) -> Result<(Var, usize, usize)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty transcoder batch".into()));
        }
        let mut total: Option<Var> = None;
        let (mut correct, mut scored) = (0, 0);
        for ex in batch {
            if ex.phoneme_posteriors.len() != ex.word_targets.len() {
                return Err(Error::shape(
                    "aligned example",
                    &[ex.phoneme_posteriors.len()],
                    &[ex.word_targets.len()],
                ));
            }
            let logits = self.forward(g, &ex.phoneme_posteriors, trainable)?;
            for (pred, &t) in g.value(logits).argmax_rows().into_iter().zip(&ex.word_targets.ids) {
                if t != PAD {
                    scored += 1;
                    correct += usize::from(pred == t);
                }
            }
            let ce = cross_entropy(g, logits, &ex.word_targets, Some(PAD))?;
            total = Some(match total {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        Ok((loss, correct, scored))
    }

    /// Loss and accuracy without updating anything.
    pub fn evaluate(&self, batch: &[&AlignedExample]) -> Result<TranscoderMetrics> {
        let mut g = Graph::new();
        let (loss, correct, scored) = self.batch_loss(&mut g, batch, false)?;
        Ok(TranscoderMetrics {
            loss: g.value(loss).item(),
            accuracy: correct as f64 / scored.max(1) as f64,
            grad_norm: 0.0,
        })
    }

    fn train_step(&mut self, batch: &[&AlignedExample], optimizer: &mut Adam) -> Result<TranscoderMetrics> {
        let mut g = Graph::new();
        let (loss, correct, scored) = self.batch_loss(&mut g, batch, true)?;
        let grads = g.backward(loss)?.params();
        let grad_norm = optimizer.step(&mut self.params, &grads);
        Ok(TranscoderMetrics {
            loss: g.value(loss).item(),
            accuracy: correct as f64 / scored.max(1) as f64,
            grad_norm,
        })
    }

    /// Update on text-derived examples (one-hot posteriors).
    pub fn text_train_step(&mut self, batch: &[&AlignedExample], optimizer: &mut Adam) -> Result<TranscoderMetrics> {
        self.train_step(batch, optimizer)
    }

    /// Update on examples built by [`align_hypothesis`].
    pub fn hypothesis_finetune_step(
        &mut self,
        batch: &[&AlignedExample],
        optimizer: &mut Adam,
    ) -> Result<TranscoderMetrics> {
        self.train_step(batch, optimizer)
    }

    /// Per-position argmax with fillers removed; out-of-vocabulary
    /// predictions come back as the literal `<unk>`.
    pub fn p2w_decode(&self, x: &PosteriorSequence) -> Result<Vec<String>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let ids = self.logits(x)?.argmax_rows();
        Ok(strip_fillers(&ids)
            .into_iter()
            .map(|i| self.vocab.word(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect())
    }

    pub fn to_checkpoint(&self, echo: &serde_json::Value) -> Result<Checkpoint> {
        let header = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
            "echo": echo,
        });
        Ok(Checkpoint {
            component: COMPONENT.to_string(),
            header: serde_json::to_string(&header)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: Default::default(),
            reason,
        };
        if ckpt.component != COMPONENT {
            return Err(bad(format!("expected component {COMPONENT}, found {}", ckpt.component)));
        }
        #[derive(Deserialize)]
        struct Header {
            config: TranscoderConfig,
            vocab: WordVocab,
        }
        let h: Header = serde_json::from_str(&ckpt.header)?;
        if h.config.vocab_size != h.vocab.len() {
            return Err(bad(format!(
                "config says {} words, stored vocabulary has {}",
                h.config.vocab_size,
                h.vocab.len()
            )));
        }
        let model = Transcoder::new(h.config, h.vocab, 0)?;
        model
            .params
            .check_same_layout(&ckpt.params)
            .map_err(|e| bad(format!("parameters do not match the config: {e}")))?;
        Ok(Transcoder {
            params: ckpt.params.clone(),
            ..model
        })
    }
}
