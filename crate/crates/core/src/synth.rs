//! Synthetic languages and corpora with known ground truth.
//!
//! All languages share one phoneme inventory and one set of emission
//! prototypes; they differ in lexicon, word frequencies, spelling and a
//! per-language channel offset added to every frame. Utterances are
//! piecewise-constant prototype frames plus Gaussian noise, so phone labels
//! are known for every frame.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BASE_SYMBOLS: [&str; 24] = [
    "a", "e", "i", "o", "u", "p", "t", "k", "b", "d", "g", "m", "n", "s", "z", "f", "v", "l", "r",
    "j", "w", "h", "S", "N",
];

/// Mixes a seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub symbols: Vec<String>,
}

impl PhonemeInventory {
    pub fn standard(size: usize) -> Self {
        let symbols = (0..size)
            .map(|i| match BASE_SYMBOLS.get(i) {
                Some(s) => s.to_string(),
                None => format!("x{i}"),
            })
            .collect();
        PhonemeInventory { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbols[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|s| {
                self.index_of(s)
                    .ok_or_else(|| Error::Manifest(format!("unknown phoneme symbol {s:?}")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub phonemes: Vec<usize>,
}

/// Parameters for [`generate_language`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageParams {
    pub vocab_size: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub zipf_exponent: f64,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    /// Probability that a word's spelling gets an unpredictable extra letter.
    pub irregular_spelling: f64,
    /// Standard deviation of the language's per-feature channel offset.
    pub channel_scale: f64,
}

impl Default for LanguageParams {
    fn default() -> Self {
        LanguageParams {
            vocab_size: 200,
            min_word_len: 1,
            max_word_len: 5,
            zipf_exponent: 1.0,
            min_sentence_words: 2,
            max_sentence_words: 5,
            irregular_spelling: 0.3,
            channel_scale: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub id: String,
    pub inventory: PhonemeInventory,
    /// Ordered by frequency rank.
    pub lexicon: Vec<LexiconEntry>,
    pub frequencies: Vec<f64>,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    /// Letter used for each phoneme in regular spellings.
    pub orthography: Vec<char>,
    pub channel: Vec<f64>,
}

impl SyntheticLanguageSpec {
    pub fn lookup(&self, word: &str) -> Option<&[usize]> {
        self.lexicon
            .iter()
            .find(|e| e.word == word)
            .map(|e| e.phonemes.as_slice())
    }

    pub fn lexicon_map(&self) -> BTreeMap<String, Vec<usize>> {
        self.lexicon
            .iter()
            .map(|e| (e.word.clone(), e.phonemes.clone()))
            .collect()
    }

    /// Every letter that can appear in a spelling, sorted.
    pub fn graphemes(&self) -> Vec<char> {
        let mut set: Vec<char> = self.lexicon.iter().flat_map(|e| e.word.chars()).collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn sample_sentence<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let n = rng.random_range(self.min_sentence_words..=self.max_sentence_words);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (e, f) in self.lexicon.iter().zip(&self.frequencies) {
                    acc += f;
                    if u < acc {
                        return e.word.clone();
                    }
                }
                self.lexicon.last().expect("non-empty lexicon").word.clone()
            })
            .collect()
    }

    pub fn phonemes_of(&self, words: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in words {
            let p = self
                .lookup(w)
                .ok_or_else(|| Error::InvalidArgument(format!("word {w:?} is not in the {} lexicon", self.id)))?;
            out.extend_from_slice(p);
        }
        Ok(out)
    }
}

fn count_sequences(inventory: usize, min_len: usize, max_len: usize) -> u128 {
    // adjacent phonemes within a word differ
    (min_len..=max_len)
        .map(|l| {
            let mut c = inventory as u128;
            for _ in 1..l {
                c = c.saturating_mul(inventory.saturating_sub(1) as u128);
            }
            c
        })
        .fold(0u128, |a, b| a.saturating_add(b))
}

/// Draws a random lexicon with Zipf-like word frequencies.
pub fn generate_language(
    id: &str,
    seed: u64,
    inventory: &PhonemeInventory,
    feature_dim: usize,
    params: &LanguageParams,
) -> Result<SyntheticLanguageSpec> {
    if params.vocab_size == 0 {
        return Err(Error::InvalidArgument("vocab_size must be at least 1".into()));
    }
    if params.min_word_len == 0 || params.min_word_len > params.max_word_len {
        return Err(Error::InvalidArgument("word length range is empty".into()));
    }
    if params.min_sentence_words == 0 || params.min_sentence_words > params.max_sentence_words {
        return Err(Error::InvalidArgument("sentence length range is empty".into()));
    }
    let possible = count_sequences(inventory.len(), params.min_word_len, params.max_word_len);
    if (params.vocab_size as u128) > possible / 2 {
        return Err(Error::InvalidArgument(format!(
            "inventory of {} phonemes is too small for {} distinct words",
            inventory.len(),
            params.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut letters: Vec<char> = ('a'..='z').collect();
    letters.shuffle(&mut rng);
    let orthography: Vec<char> = (0..inventory.len()).map(|i| letters[i % letters.len()]).collect();

    let mut seen_phon = HashSet::new();
    let mut seen_word = HashSet::new();
    let mut lexicon = Vec::with_capacity(params.vocab_size);
    while lexicon.len() < params.vocab_size {
        let len = rng.random_range(params.min_word_len..=params.max_word_len);
        let mut phonemes: Vec<usize> = Vec::with_capacity(len);
        while phonemes.len() < len {
            let p = rng.random_range(0..inventory.len());
            if phonemes.last() != Some(&p) {
                phonemes.push(p);
            }
        }
        if !seen_phon.insert(phonemes.clone()) {
            continue;
        }
        let mut word: Vec<char> = phonemes.iter().map(|&p| orthography[p]).collect();
        if rng.random::<f64>() < params.irregular_spelling {
            let pos = rng.random_range(0..=word.len());
            let extra = letters[rng.random_range(0..letters.len())];
            word.insert(pos, extra);
        }
        let mut word: String = word.into_iter().collect();
        while !seen_word.insert(word.clone()) {
            word.push(letters[rng.random_range(0..letters.len())]);
        }
        lexicon.push(LexiconEntry { word, phonemes });
    }

    let weights: Vec<f64> = (0..params.vocab_size)
        .map(|r| 1.0 / ((r + 1) as f64).powf(params.zipf_exponent))
        .collect();
    let z: f64 = weights.iter().sum();
    let frequencies = weights.iter().map(|w| w / z).collect();

    let channel = (0..feature_dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * params.channel_scale
        })
        .collect();

    Ok(SyntheticLanguageSpec {
        id: id.to_string(),
        inventory: inventory.clone(),
        lexicon,
        frequencies,
        min_sentence_words: params.min_sentence_words,
        max_sentence_words: params.max_sentence_words,
        orthography,
        channel,
    })
}

/// How phonemes become feature frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    /// One `feature_dim` prototype per phoneme.
    pub prototypes: Vec<Vec<f64>>,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise: f64,
}

impl EmissionModel {
    pub fn generate(
        seed: u64,
        inventory_size: usize,
        feature_dim: usize,
        min_distance: f64,
        durations: (usize, usize),
        noise: f64,
    ) -> Result<Self> {
        if noise < 0.0 {
            return Err(Error::InvalidArgument("noise scale must be non-negative".into()));
        }
        if durations.0 == 0 || durations.0 > durations.1 {
            return Err(Error::InvalidArgument("duration range is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(inventory_size);
        let mut attempts = 0;
        while prototypes.len() < inventory_size {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {inventory_size} prototypes {min_distance} apart in {feature_dim} dims"
                )));
            }
            let cand: Vec<f64> = (0..feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if prototypes.iter().all(|p| euclidean(p, &cand) >= min_distance) {
                prototypes.push(cand);
            }
        }
        Ok(EmissionModel {
            prototypes,
            min_duration: durations.0,
            max_duration: durations.1,
            noise,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in i + 1..self.prototypes.len() {
                best = best.min(euclidean(&self.prototypes[i], &self.prototypes[j]));
            }
        }
        best
    }

    /// Index of the closest prototype to a frame.
    pub fn nearest(&self, frame: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.prototypes.iter().enumerate() {
            let d = euclidean(p, frame);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Labeled audio in the high-resource source language.
    Source,
    /// Unlabeled target-language audio.
    Unlabeled,
    /// Small labeled target-language set for fine-tuning.
    Finetune,
    /// Target-language text.
    Text,
    /// Held-out labeled target-language audio.
    Test,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Source, Role::Unlabeled, Role::Finetune, Role::Text, Role::Test];

    pub fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Unlabeled => "unlabeled",
            Role::Finetune => "finetune",
            Role::Text => "text",
            Role::Test => "test",
        }
    }

    fn has_audio(self) -> bool {
        self != Role::Text
    }

    fn has_transcript(self) -> bool {
        self != Role::Unlabeled
    }
}

/// One synthesized utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    pub features: Tensor,
    pub phonemes: Option<Vec<usize>>,
    pub words: Option<Vec<String>>,
    /// Ground-truth phoneme of every input frame.
    pub frame_labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn without_transcripts(mut self) -> Self {
        self.phonemes = None;
        self.words = None;
        self
    }
}

/// Renders a sentence as frames: per phoneme a random duration of
/// `prototype + channel + noise` rows.
pub fn synthesize_utterance(
    id: &str,
    sentence: &[String],
    spec: &SyntheticLanguageSpec,
    emission: &EmissionModel,
    seed: u64,
) -> Result<Utterance> {
    let phonemes = spec.phonemes_of(sentence)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = emission.feature_dim();
    let noise = Normal::new(0.0, emission.noise.max(0.0)).expect("valid sigma");
    let mut data = Vec::new();
    let mut frame_labels = Vec::new();
    for &p in &phonemes {
        let dur = rng.random_range(emission.min_duration..=emission.max_duration);
        for _ in 0..dur {
            for k in 0..dim {
                let n = if emission.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(emission.prototypes[p][k] + spec.channel.get(k).copied().unwrap_or(0.0) + n);
            }
            frame_labels.push(p);
        }
    }
    let frames = frame_labels.len();
    Ok(Utterance {
        id: id.to_string(),
        language: spec.id.clone(),
        features: Tensor::matrix(frames, dim, data)?,
        phonemes: Some(phonemes),
        words: Some(sentence.to_vec()),
        frame_labels,
    })
}

/// Requested number of items per role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSizes {
    pub source: usize,
    pub unlabeled: usize,
    pub finetune: usize,
    pub text: usize,
    pub test: usize,
}

impl RoleSizes {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Source => self.source,
            Role::Unlabeled => self.unlabeled,
            Role::Finetune => self.finetune,
            Role::Text => self.text,
            Role::Test => self.test,
        }
    }
}

impl Default for RoleSizes {
    fn default() -> Self {
        RoleSizes {
            source: 2000,
            unlabeled: 1000,
            finetune: 50,
            text: 5000,
            test: 200,
        }
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub inventory_size: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub min_prototype_distance: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub source: LanguageParams,
    pub target: LanguageParams,
    pub sizes: RoleSizes,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            inventory_size: 20,
            feature_dim: 16,
            noise: 0.3,
            min_prototype_distance: 2.0,
            min_duration: 5,
            max_duration: 9,
            source: LanguageParams {
                vocab_size: 400,
                ..LanguageParams::default()
            },
            target: LanguageParams {
                vocab_size: 300,
                channel_scale: 0.3,
                ..LanguageParams::default()
            },
            sizes: RoleSizes::default(),
        }
    }
}

/// A text-only item.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub id: String,
    pub words: Vec<String>,
}

/// An in-memory corpus: both languages, the emission model and all splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub source: SyntheticLanguageSpec,
    pub target: SyntheticLanguageSpec,
    pub emission: EmissionModel,
    pub source_set: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
    pub finetune: Vec<Utterance>,
    pub text: Vec<Sentence>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn audio(&self, role: Role) -> &[Utterance] {
        match role {
            Role::Source => &self.source_set,
            Role::Unlabeled => &self.unlabeled,
            Role::Finetune => &self.finetune,
            Role::Test => &self.test,
            Role::Text => &[],
        }
    }

    pub fn language(&self, role: Role) -> &SyntheticLanguageSpec {
        if role == Role::Source {
            &self.source
        } else {
            &self.target
        }
    }
}

const LANG_STREAM: u64 = 1;
const EMISSION_STREAM: u64 = 2;

fn role_stream(role: Role) -> u64 {
    100 + role as u64
}

/// Generates a full corpus in memory. Each item draws from its own seed
/// derived from `(seed, role, index)`, so `workers` changes only speed.
pub fn generate_corpus(config: &CorpusConfig, seed: u64, workers: usize) -> Result<Corpus> {
    let inventory = PhonemeInventory::standard(config.inventory_size);
    let source = generate_language(
        "src",
        derive_seed(seed, LANG_STREAM),
        &inventory,
        config.feature_dim,
        &config.source,
    )?;
    let target = generate_language(
        "tgt",
        derive_seed(seed, LANG_STREAM + 1),
        &inventory,
        config.feature_dim,
        &config.target,
    )?;
    let emission = EmissionModel::generate(
        derive_seed(seed, EMISSION_STREAM),
        config.inventory_size,
        config.feature_dim,
        config.min_prototype_distance,
        (config.min_duration, config.max_duration),
        config.noise,
    )?;

    let make_audio = |role: Role| -> Result<Vec<Utterance>> {
        let spec = if role == Role::Source { &source } else { &target };
        let n = config.sizes.get(role);
        let one = |i: usize| -> Result<Utterance> {
            let s = derive_seed(derive_seed(seed, role_stream(role)), i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let sentence = spec.sample_sentence(&mut rng);
            let id = format!("{}-{}-{i:05}", spec.id, role.name());
            let u = synthesize_utterance(&id, &sentence, spec, &emission, derive_seed(s, 1))?;
            Ok(if role.has_transcript() { u } else { u.without_transcripts() })
        };
        parallel_map(n, workers, one)
    };

    let text_seed = derive_seed(seed, role_stream(Role::Text));
    let text = (0..config.sizes.text)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(text_seed, i as u64));
            Sentence {
                id: format!("tgt-text-{i:05}"),
                words: target.sample_sentence(&mut rng),
            }
        })
        .collect();

    Ok(Corpus {
        seed,
        config: config.clone(),
        source_set: make_audio(Role::Source)?,
        unlabeled: make_audio(Role::Unlabeled)?,
        finetune: make_audio(Role::Finetune)?,
        test: make_audio(Role::Test)?,
        text,
        source,
        target,
        emission,
    })
}

fn parallel_map<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk formats

const FEATURE_MAGIC: &[u8; 4] = b"XLFT";
const FEATURE_VERSION: u32 = 1;

/// Writes `[T×F]` features: magic, version, T, F, then row-major `f64` LE.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + features.len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Manifest(format!("{}: {why}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(bad(&format!("unsupported feature version {version}")));
    }
    let t = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let f = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 24 + t * f * 8 {
        return Err(bad("truncated or oversized payload"));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::matrix(t, f, data)
}

/// One manifest record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phonemes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<String>,
    pub language: String,
    pub role: Role,
    /// Ground-truth phone per frame, used only by the probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<Vec<usize>>,
}

/// A JSON-lines manifest: an optional header record, then one row per item.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub header: Option<serde_json::Value>,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
        if let Some(h) = &self.header {
            emit(serde_json::to_string(&serde_json::json!({ "header": h }))?)?;
        }
        for r in &self.rows {
            emit(serde_json::to_string(r)?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Manifest::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if let Some(h) = v.get("header") {
                out.header = Some(h.clone());
                continue;
            }
            let row: ManifestRow = serde_json::from_value(v)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            out.rows.push(row);
        }
        Ok(out)
    }
}

/// File name of the manifest for a role.
pub fn manifest_name(role: Role) -> String {
    format!("{}.jsonl", role.name())
}

/// Metadata written next to the manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: u64,
    pub config: CorpusConfig,
    pub source: SyntheticLanguageSpec,
    pub target: SyntheticLanguageSpec,
    pub emission: EmissionModel,
}

pub const CORPUS_META: &str = "corpus.json";

/// Writes feature files, one manifest per role, lexicons and metadata.
/// Returns the manifest paths keyed by role.
pub fn build_corpus(corpus: &Corpus, out: &Path, header: &serde_json::Value) -> Result<BTreeMap<Role, PathBuf>> {
    let feat_dir = out.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let meta = CorpusMeta {
        seed: corpus.seed,
        config: corpus.config.clone(),
        source: corpus.source.clone(),
        target: corpus.target.clone(),
        emission: corpus.emission.clone(),
    };
    let meta_path = out.join(CORPUS_META);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    for spec in [&corpus.source, &corpus.target] {
        let path = out.join(format!("lexicon_{}.tsv", spec.id));
        let mut text = String::new();
        for e in &spec.lexicon {
            text.push_str(&format!("{}\t{}\n", e.word, spec.inventory.render(&e.phonemes)));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }

    let mut paths = BTreeMap::new();
    for role in Role::ALL {
        let mut manifest = Manifest {
            header: Some(header.clone()),
            rows: Vec::new(),
        };
        if role.has_audio() {
            for u in corpus.audio(role) {
                let rel = format!("features/{}.feat", u.id);
                write_features(&out.join(&rel), &u.features)?;
                let inv = &corpus.language(role).inventory;
                manifest.rows.push(ManifestRow {
                    id: u.id.clone(),
                    features: Some(rel),
                    duration: Some(u.frames()),
                    phonemes: u.phonemes.as_ref().map(|p| inv.render(p)),
                    words: u.words.as_ref().map(|w| w.join(" ")),
                    language: u.language.clone(),
                    role,
                    frame_labels: Some(u.frame_labels.clone()),
                });
            }
        } else {
            for s in &corpus.text {
                manifest.rows.push(ManifestRow {
                    id: s.id.clone(),
                    features: None,
                    duration: None,
                    phonemes: None,
                    words: Some(s.words.join(" ")),
                    language: corpus.target.id.clone(),
                    role,
                    frame_labels: None,
                });
            }
        }
        let path = out.join(manifest_name(role));
        manifest.write(&path)?;
        paths.insert(role, path);
    }
    Ok(paths)
}

/// Reads a corpus directory written by [`build_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join(CORPUS_META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_str(&text)?;
    let mut corpus = Corpus {
        seed: meta.seed,
        config: meta.config,
        source: meta.source,
        target: meta.target,
        emission: meta.emission,
        source_set: Vec::new(),
        unlabeled: Vec::new(),
        finetune: Vec::new(),
        text: Vec::new(),
        test: Vec::new(),
    };
    for role in Role::ALL {
        let manifest = Manifest::read(&dir.join(manifest_name(role)))?;
        if role == Role::Text {
            corpus.text = manifest
                .rows
                .into_iter()
                .map(|r| Sentence {
                    id: r.id,
                    words: r.words.unwrap_or_default().split_whitespace().map(str::to_string).collect(),
                })
                .collect();
            continue;
        }
        let utts = load_utterances(dir, &manifest, &corpus.language(role).inventory)?;
        match role {
            Role::Source => corpus.source_set = utts,
            Role::Unlabeled => corpus.unlabeled = utts,
            Role::Finetune => corpus.finetune = utts,
            Role::Test => corpus.test = utts,
            Role::Text => unreachable!(),
        }
    }
    Ok(corpus)
}

/// Loads the audio rows of a manifest, checking each feature file against
/// its recorded duration.
pub fn load_utterances(dir: &Path, manifest: &Manifest, inventory: &PhonemeInventory) -> Result<Vec<Utterance>> {
    manifest
        .rows
        .iter()
        .map(|r| {
            let rel = r
                .features
                .as_ref()
                .ok_or_else(|| Error::Manifest(format!("row {} has no feature path", r.id)))?;
            let features = read_features(&dir.join(rel))?;
            if let Some(d) = r.duration {
                if d != features.rows() {
                    return Err(Error::Manifest(format!(
                        "row {}: manifest says {d} frames, feature file has {}",
                        r.id,
                        features.rows()
                    )));
                }
            }
            let frame_labels = r.frame_labels.clone().unwrap_or_default();
            if !frame_labels.is_empty() && frame_labels.len() != features.rows() {
                return Err(Error::Manifest(format!("row {}: frame label count mismatch", r.id)));
            }
            Ok(Utterance {
                id: r.id.clone(),
                language: r.language.clone(),
                features,
                phonemes: r.phonemes.as_deref().map(|p| inventory.parse(p)).transpose()?,
                words: r
                    .words
                    .as_ref()
                    .map(|w| w.split_whitespace().map(str::to_string).collect()),
                frame_labels,
            })
        })
        .collect()
}
