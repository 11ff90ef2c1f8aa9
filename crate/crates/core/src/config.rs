//! Run configuration: a preset plus field-by-field TOML overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::synth::CorpusConfig;
use crate::transcoder::TranscoderConfig;
use crate::unidata2vec::EncoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

/// Optimization schedule of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Metrics are recorded every `log_every` steps and at the last step.
    pub log_every: usize,
}

impl StageConfig {
    fn new(steps: usize, batch_size: usize, lr: f64) -> Self {
        StageConfig {
            steps,
            batch_size,
            lr,
            warmup_fraction: 0.05,
            clip_norm: 5.0,
            log_every: 10,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
        .with_warmup_fraction(self.steps, self.warmup_fraction)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}.batch_size must be positive")));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) || self.clip_norm < 0.0 {
            return Err(Error::Config(format!(
                "{name}: lr must be positive, warmup_fraction in [0, 1], clip_norm non-negative"
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config(format!("{name}.log_every must be positive")));
        }
        Ok(())
    }
}

/// Which hypothesis representation the transcoder is fine-tuned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HypothesisInputs {
    /// Collapsed segment posteriors.
    Soft,
    /// One-hot argmax of the same segments.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Teacher layers to probe; 0 is the input to the first layer. Empty
    /// means every layer.
    pub layers: Vec<usize>,
    /// Number of clusters; 0 means the phoneme inventory size.
    pub k: usize,
    pub iters: usize,
    /// Independent k-means runs; the lowest objective wins.
    pub restarts: usize,
    /// Number of utterances drawn from the probe manifest (0 = all).
    pub utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub workers: usize,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub transcoder: TranscoderConfig,
    pub pretrain: StageConfig,
    pub pretrain_plus: StageConfig,
    pub finetune: StageConfig,
    pub transcoder_train: StageConfig,
    pub transcoder_finetune: StageConfig,
    pub hypothesis_inputs: HypothesisInputs,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig {
                preset,
                seed: 0,
                workers: 1,
                corpus: CorpusConfig::default(),
                encoder: EncoderConfig::desk(),
                transcoder: TranscoderConfig::desk(),
                pretrain: StageConfig::new(1500, 8, 1e-3),
                pretrain_plus: StageConfig::new(1500, 8, 1e-3),
                finetune: StageConfig::new(300, 8, 1e-4),
                transcoder_train: StageConfig::new(2000, 16, 1e-3),
                transcoder_finetune: StageConfig::new(200, 8, 1e-4),
                hypothesis_inputs: HypothesisInputs::Soft,
                probe: ProbeConfig {
                    layers: Vec::new(),
                    k: 0,
                    iters: 50,
                    restarts: 5,
                    utterances: 100,
                },
            },
            Preset::Paper => RunConfig {
                preset,
                seed: 0,
                workers: 1,
                corpus: CorpusConfig::default(),
                encoder: EncoderConfig::paper(),
                transcoder: TranscoderConfig::paper(),
                pretrain: StageConfig::new(400_000, 8, 5e-4),
                pretrain_plus: StageConfig::new(400_000, 8, 5e-4),
                finetune: StageConfig::new(20_000, 8, 5e-5),
                transcoder_train: StageConfig::new(100_000, 64, 5e-4),
                transcoder_finetune: StageConfig::new(10_000, 64, 5e-5),
                hypothesis_inputs: HypothesisInputs::Soft,
                probe: ProbeConfig {
                    layers: Vec::new(),
                    k: 0,
                    iters: 100,
                    restarts: 10,
                    utterances: 500,
                },
            },
        }
    }

    /// Applies a TOML override document on top of a preset. The document
    /// may name its own `preset`, which then takes precedence over
    /// `default_preset`. Unknown keys are rejected.
    pub fn from_toml(text: &str, default_preset: Preset) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match overrides.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => default_preset,
        };
        let base = toml::Table::try_from(RunConfig::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overrides, "")?;
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text, default_preset)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.vocab_size != self.corpus.inventory_size {
            return Err(Error::Config(format!(
                "encoder.vocab_size {} differs from corpus.inventory_size {}",
                self.encoder.vocab_size, self.corpus.inventory_size
            )));
        }
        if self.transcoder.phoneme_size != self.corpus.inventory_size {
            return Err(Error::Config(format!(
                "transcoder.phoneme_size {} differs from corpus.inventory_size {}",
                self.transcoder.phoneme_size, self.corpus.inventory_size
            )));
        }
        // the word count is only known once a vocabulary is built
        let mut t = self.transcoder.clone();
        t.vocab_size = t.vocab_size.max(crate::transcoder::STAR + 1);
        t.validate()?;
        for (name, s) in [
            ("pretrain", &self.pretrain),
            ("pretrain_plus", &self.pretrain_plus),
            ("finetune", &self.finetune),
            ("transcoder_train", &self.transcoder_train),
            ("transcoder_finetune", &self.transcoder_finetune),
        ] {
            s.validate(name)?;
        }
        if self.probe.layers.iter().any(|&l| l > self.encoder.layers) {
            return Err(Error::Config(format!("probe layers must lie in 0..={}", self.encoder.layers)));
        }
        Ok(())
    }

    /// JSON echo embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn probe_layers(&self) -> Vec<usize> {
        if self.probe.layers.is_empty() {
            (0..=self.encoder.layers).collect()
        } else {
            self.probe.layers.clone()
        }
    }

    pub fn probe_k(&self) -> usize {
        if self.probe.k == 0 {
            self.corpus.inventory_size
        } else {
            self.probe.k
        }
    }
}

fn merge(mut base: toml::Table, overrides: toml::Table, path: &str) -> Result<toml::Table> {
    for (key, value) in overrides {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(key, toml::Value::Table(merge(b, o, &full)?));
            }
            (Some(toml::Value::Table(_)), _) => {
                return Err(Error::Config(format!("{full} must be a table")));
            }
            (Some(_), toml::Value::Table(_)) => {
                return Err(Error::Config(format!("{full} is not a table")));
            }
            (Some(_), v) => {
                base.insert(key, v);
            }
            (None, _) => return Err(Error::Config(format!("unknown key {full}"))),
        }
    }
    Ok(base)
}
