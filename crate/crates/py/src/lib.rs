//! Python bindings: configs, corpora, the acoustic model, the transcoder
//! and the standalone losses and metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use xling::checkpoint::Checkpoint;
use xling::config::{HypothesisInputs, Preset, RunConfig};
use xling::losses::{self, LabelSequence, PosteriorSequence, Vocabulary};
use xling::pipeline::{self, MetricsLog};
use xling::synth::{self, Corpus, Role};
use xling::transcoder::{self, Transcoder, WordVocab};
use xling::unidata2vec::{OutputUnits, UniData2vecModel};
use xling::{eval, Tensor};

fn py_err(e: xling::Error) -> PyErr {
    match e {
        xling::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn role(name: &str) -> PyResult<Role> {
    Role::ALL
        .into_iter()
        .find(|r| r.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?}")))
}

type Records = Vec<(usize, String, f64)>;

fn records(log: MetricsLog) -> Records {
    log.records.into_iter().map(|r| (r.step, r.metric, r.value)).collect()
}

#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Preset `desk` or `paper`, optionally overridden by a TOML document.
    #[new]
    #[pyo3(signature = (toml = None, preset = "desk"))]
    fn new(toml: Option<&str>, preset: &str) -> PyResult<Self> {
        let preset: Preset = preset.parse().map_err(py_err)?;
        let inner = match toml {
            Some(text) => RunConfig::from_toml(text, preset).map_err(py_err)?,
            None => RunConfig::preset(preset),
        };
        Ok(PyRunConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }
}

#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn generate(config: &PyRunConfig) -> PyResult<Self> {
        let c = &config.inner;
        let inner = synth::generate_corpus(&c.corpus, c.seed, c.workers.max(1)).map_err(py_err)?;
        Ok(PyCorpus { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: synth::load_corpus(&dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        synth::build_corpus(&self.inner, &dir, &serde_json::Value::Null).map_err(py_err)?;
        Ok(())
    }

    /// Number of items in a split (`source`, `unlabeled`, `finetune`,
    /// `text`, `test`).
    fn size(&self, split: &str) -> PyResult<usize> {
        let r = role(split)?;
        Ok(if r == Role::Text {
            self.inner.text.len()
        } else {
            self.inner.audio(r).len()
        })
    }

    /// One utterance as a dict with `id`, `features`, `phonemes`, `words`
    /// and `frame_labels`.
    fn utterance<'py>(&self, py: Python<'py>, split: &str, index: usize) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let u = self
            .inner
            .audio(role(split)?)
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no utterance {index} in {split}")))?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("id", &u.id)?;
        d.set_item("features", rows(&u.features))?;
        d.set_item("phonemes", u.phonemes.clone())?;
        d.set_item("words", u.words.clone())?;
        d.set_item("frame_labels", u.frame_labels.clone())?;
        Ok(d)
    }

    fn sentences(&self) -> Vec<Vec<String>> {
        self.inner.text.iter().map(|s| s.words.clone()).collect()
    }

    /// Target-language lexicon: word to phoneme ids.
    fn lexicon(&self) -> BTreeMap<String, Vec<usize>> {
        self.inner.target.lexicon_map()
    }
}

#[pyclass(name = "AcousticModel")]
struct PyAcousticModel {
    inner: UniData2vecModel,
}

#[pymethods]
impl PyAcousticModel {
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        let c = &config.inner;
        Ok(PyAcousticModel {
            inner: UniData2vecModel::new(c.encoder.clone(), c.seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyAcousticModel {
            inner: UniData2vecModel::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = self.inner.to_checkpoint(&serde_json::Value::Null).map_err(py_err)?;
        ck.save(&path).map_err(py_err)
    }

    /// Pre-trains on the source split; with `plus`, unlabeled target audio
    /// joins every step. Returns `(step, metric, value)` records.
    #[pyo3(signature = (corpus, config, plus = false))]
    fn pretrain(&mut self, corpus: &PyCorpus, config: &PyRunConfig, plus: bool) -> PyResult<Records> {
        let c = &config.inner;
        let mut log = MetricsLog::new("pretrain", c);
        let (stage, unl) = if plus {
            (&c.pretrain_plus, Some(corpus.inner.unlabeled.as_slice()))
        } else {
            (&c.pretrain, None)
        };
        pipeline::pretrain(&mut self.inner, &corpus.inner.source_set, unl, stage, c.seed, &mut log).map_err(py_err)?;
        Ok(records(log))
    }

    /// CTC fine-tuning on the finetune split with `phoneme` or `grapheme`
    /// output units.
    #[pyo3(signature = (corpus, config, units = "phoneme"))]
    fn finetune(&mut self, corpus: &PyCorpus, config: &PyRunConfig, units: &str) -> PyResult<Records> {
        let c = &config.inner;
        let units = match units {
            "phoneme" => OutputUnits::Phoneme {
                size: corpus.inner.target.inventory.len(),
            },
            "grapheme" => OutputUnits::graphemes(&corpus.inner.target.graphemes()),
            other => return Err(PyValueError::new_err(format!("unknown units {other:?}"))),
        };
        let mut log = MetricsLog::new("finetune", c);
        pipeline::finetune(&mut self.inner, &units, &corpus.inner.finetune, &c.finetune, c.seed, &mut log)
            .map_err(py_err)?;
        Ok(records(log))
    }

    /// Corpus-level phoneme error rate on a split.
    #[pyo3(signature = (corpus, split = "test"))]
    fn per(&self, corpus: &PyCorpus, split: &str) -> PyResult<f64> {
        let c = pipeline::evaluate_per(&self.inner, corpus.inner.audio(role(split)?)).map_err(py_err)?;
        Ok(c.rate())
    }

    fn decode(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.decode_units(&tensor(features)?).map_err(py_err)
    }

    /// Collapsed segment posteriors (one row per decoded unit).
    fn posteriors(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (_, _, post) = self.inner.phoneme_posteriors(&tensor(features)?).map_err(py_err)?;
        Ok(rows(post.tensor()))
    }

    /// Teacher representation at `layer` (0 is the encoder input).
    fn layer_output(&self, features: Vec<Vec<f64>>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        let t = self.inner.teacher_layer_output(&tensor(features)?, layer).map_err(py_err)?;
        Ok(rows(&t))
    }
}

#[pyclass(name = "Transcoder")]
struct PyTranscoder {
    inner: Transcoder,
}

#[pymethods]
impl PyTranscoder {
    /// Builds a vocabulary from the text split and trains on it.
    #[staticmethod]
    fn train(corpus: &PyCorpus, config: &PyRunConfig) -> PyResult<(Self, Records)> {
        let c = &config.inner;
        let mut log = MetricsLog::new("train-transcoder", c);
        let inner = pipeline::train_transcoder(c, &corpus.inner.text, &corpus.inner.target.lexicon_map(), c.seed, &mut log)
            .map_err(py_err)?;
        Ok((PyTranscoder { inner }, records(log)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyTranscoder {
            inner: Transcoder::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = self.inner.to_checkpoint(&serde_json::Value::Null).map_err(py_err)?;
        ck.save(&path).map_err(py_err)
    }

    /// Fine-tunes on the acoustic model's hypotheses over the finetune
    /// split, with soft posteriors or (`hard=True`) their argmax.
    #[pyo3(signature = (acoustic, corpus, config, hard = false))]
    fn finetune(
        &mut self,
        acoustic: &PyAcousticModel,
        corpus: &PyCorpus,
        config: &PyRunConfig,
        hard: bool,
    ) -> PyResult<Records> {
        let c = &config.inner;
        let inputs = if hard { HypothesisInputs::Hard } else { HypothesisInputs::Soft };
        let examples = pipeline::hypothesis_examples(
            &acoustic.inner,
            &corpus.inner.finetune,
            &corpus.inner.target.lexicon_map(),
            &self.inner.vocab,
            inputs,
        )
        .map_err(py_err)?;
        let mut log = MetricsLog::new("finetune-transcoder", c);
        pipeline::finetune_transcoder(&mut self.inner, &examples, &c.transcoder_finetune, c.seed, &mut log)
            .map_err(py_err)?;
        Ok(records(log))
    }

    /// Words for a posterior sequence (rows must sum to 1).
    fn decode(&self, posteriors: Vec<Vec<f64>>) -> PyResult<Vec<String>> {
        let p = if posteriors.is_empty() {
            PosteriorSequence::empty(self.inner.config.phoneme_size)
        } else {
            PosteriorSequence::new(tensor(posteriors)?).map_err(py_err)?
        };
        self.inner.p2w_decode(&p).map_err(py_err)
    }

    /// Corpus-level word error rate of acoustic model + transcoder.
    #[pyo3(signature = (acoustic, corpus, split = "test"))]
    fn wer(&self, acoustic: &PyAcousticModel, corpus: &PyCorpus, split: &str) -> PyResult<f64> {
        let c = pipeline::evaluate_wer(&acoustic.inner, Some(&self.inner), corpus.inner.audio(role(split)?))
            .map_err(py_err)?;
        Ok(c.rate())
    }
}

/// CTC negative log-likelihood of `labels` (0-based units) under frame
/// log-probabilities whose column 0 is the blank, and its gradient.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<f64>)> {
    let lp = tensor(log_probs)?;
    let labels = LabelSequence::ctc_from_units(&labels, Vocabulary::Phoneme);
    losses::ctc_forward_backward(&lp, &labels).map_err(py_err)
}

/// Mean Smooth-L1 between two equally long vectors.
#[pyfunction]
#[pyo3(signature = (targets, predictions, beta = 0.25))]
fn smooth_l1(targets: Vec<f64>, predictions: Vec<f64>, beta: f64) -> PyResult<f64> {
    if targets.len() != predictions.len() || targets.is_empty() {
        return Err(PyValueError::new_err("targets and predictions must be equally long and non-empty"));
    }
    let s: f64 = targets
        .iter()
        .zip(&predictions)
        .map(|(&t, &p)| losses::smooth_l1_elem(t, p, beta))
        .sum();
    Ok(s / targets.len() as f64)
}

/// `(distance, substitutions, deletions, insertions)`.
#[pyfunction]
fn edit_distance(reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<(usize, usize, usize, usize)> {
    let c = eval::edit_distance(&reference, &hypothesis).map_err(py_err)?;
    Ok((c.distance, c.substitutions, c.deletions, c.insertions))
}

/// Phoneme ids and star-prefixed targets (as strings) for a sentence.
#[pyfunction]
fn align_words(words: Vec<String>, lexicon: BTreeMap<String, Vec<usize>>) -> PyResult<(Vec<usize>, Vec<String>)> {
    let vocab = WordVocab::new(lexicon.keys().cloned().collect()).map_err(py_err)?;
    let (phonemes, targets) = transcoder::align_word_ids(&words, &lexicon, &vocab).map_err(py_err)?;
    let targets = targets
        .into_iter()
        .map(|t| vocab.word(t).unwrap_or("<unk>").to_string())
        .collect();
    Ok((phonemes, targets))
}

#[pyfunction]
#[pyo3(signature = (points, k, seed = 0, iters = 50))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, iters: usize) -> PyResult<Vec<usize>> {
    Ok(eval::kmeans(&tensor(points)?, k, seed, iters).map_err(py_err)?.assignments)
}

#[pyfunction]
fn cluster_purity(assignments: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    eval::cluster_purity(&assignments, &labels).map_err(py_err)
}

#[pyfunction]
fn pnmi(assignments: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    eval::pnmi(&assignments, &labels).map_err(py_err)
}

#[pymodule]
fn xling_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyAcousticModel>()?;
    m.add_class::<PyTranscoder>()?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(align_words, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_purity, m)?)?;
    m.add_function(wrap_pyfunction!(pnmi, m)?)?;
    Ok(())
}
