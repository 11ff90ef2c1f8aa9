//! The acoustic model: convolutional feature encoder, masked student
//! transformer, EMA teacher, and a CTC projection head.
//!
//! Pre-training optimizes `CTC + α·SL1` on labeled audio and `SL1` on
//! unlabeled audio, where SL1 regresses the student's outputs at masked
//! frames onto the average of the teacher's instance-normalized top-K
//! layer outputs. After each update the teacher moves towards the student
//! by exponential moving average. Fine-tuning is CTC only.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{conv_out_len, Graph, Var};
use crate::losses::{
    ctc_greedy_decode, ctc_loss, ctc_min_frames, multitask_total, smooth_l1, LabelSequence, LossWeights,
    MultiTaskTerms, PosteriorSequence, Vocabulary,
};
use crate::nn::{self, instance_norm, sinusoidal_positions, Init, ParamStore, Scope};
use crate::optim::Adam;
use crate::synth::Utterance;
use crate::tensor::Tensor;

pub const COMPONENT: &str = "unidata2vec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub layers: usize,
    pub dim: usize,
    pub inner_dim: usize,
    pub heads: usize,
    /// Phoneme inventory size; the head adds one blank class.
    pub vocab_size: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub ema_decay: f64,
    pub loss: LossWeights,
    /// Whether the CTC branch reads the masked student pass (single forward)
    /// or a separate unmasked pass.
    pub ctc_on_masked: bool,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            input_dim: 16,
            conv_channels: vec![32, 32],
            conv_kernels: vec![3, 3],
            conv_strides: vec![2, 2],
            layers: 4,
            dim: 64,
            inner_dim: 256,
            heads: 4,
            vocab_size: 20,
            mask_prob: 0.15,
            mask_span: 3,
            ema_decay: 0.999,
            loss: LossWeights {
                target_depth: 2,
                ..LossWeights::default()
            },
            ctc_on_masked: true,
        }
    }

    /// Full-size model over raw waveform input.
    pub fn paper() -> Self {
        EncoderConfig {
            input_dim: 1,
            conv_channels: vec![512; 7],
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            conv_strides: vec![5, 2, 2, 2, 2, 2, 2],
            layers: 12,
            dim: 768,
            inner_dim: 3072,
            heads: 8,
            vocab_size: 20,
            mask_prob: 0.15,
            mask_span: 3,
            ema_decay: 0.999,
            loss: LossWeights::default(),
            ctc_on_masked: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.conv_kernels.len() != n || self.conv_strides.len() != n {
            return Err(Error::Config(
                "conv_channels, conv_kernels and conv_strides must be non-empty and equally long".into(),
            ));
        }
        if self.conv_kernels.contains(&0) || self.conv_strides.contains(&0) {
            return Err(Error::Config("conv kernels and strides must be positive".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.inner_dim == 0 || self.input_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config("layer counts and dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return Err(Error::Config("mask_prob must lie in [0, 1] and mask_span be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        self.loss.validate(self.layers)
    }

    fn padding(kernel: usize) -> usize {
        (kernel - 1) / 2
    }

    /// Encoder frames produced from `frames` input frames, if any.
    pub fn output_frames(&self, frames: usize) -> Option<usize> {
        let mut t = frames;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            t = conv_out_len(t, k, s, Self::padding(k))?;
            if t == 0 {
                return None;
            }
        }
        Some(t)
    }

    /// Smallest input length that yields at least one encoder frame.
    pub fn min_input_frames(&self) -> usize {
        (1..).find(|&t| self.output_frames(t).is_some()).expect("some length works")
    }

    /// Input frame at the centre of each encoder frame's receptive field.
    pub fn frame_centers(&self, frames: usize) -> Vec<usize> {
        let Some(out) = self.output_frames(frames) else {
            return Vec::new();
        };
        (0..out)
            .map(|i| {
                let mut c = i as isize;
                for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides).rev() {
                    c = c * s as isize + (k as isize - 1) / 2 - Self::padding(k) as isize;
                }
                c.clamp(0, frames as isize - 1) as usize
            })
            .collect()
    }
}

/// Time steps hidden from the student.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub starts: Vec<usize>,
}

impl MaskSpec {
    pub fn none(len: usize) -> Self {
        MaskSpec {
            mask: vec![false; len],
            starts: Vec::new(),
        }
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn fraction(&self) -> f64 {
        self.masked_indices().len() as f64 / self.mask.len().max(1) as f64
    }
}

/// Span masking: `ceil(prob·len)` distinct start positions, each masking
/// `span` steps clipped at the end of the sequence.
pub fn sample_mask<R: Rng>(len: usize, prob: f64, span: usize, rng: &mut R) -> MaskSpec {
    let n_starts = ((prob * len as f64).ceil() as usize).min(len);
    let mut starts: Vec<usize> = sample(rng, len, n_starts).into_vec();
    starts.sort_unstable();
    let mut mask = vec![false; len];
    for &s in &starts {
        for m in mask.iter_mut().skip(s).take(span) {
            *m = true;
        }
    }
    MaskSpec { mask, starts }
}

/// `teacher ← τ·teacher + (1−τ)·student` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, tau: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    for (name, t) in teacher.iter_mut() {
        let s = student.require(name)?;
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = tau * *tv + (1.0 - tau) * sv;
        }
    }
    Ok(())
}

/// What the CTC head is trained to emit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutputUnits {
    Phoneme { size: usize },
    /// Letters plus a word separator at index 0.
    Grapheme { symbols: Vec<char> },
}

pub const WORD_SEPARATOR: char = '|';

impl OutputUnits {
    pub fn graphemes(letters: &[char]) -> Self {
        let mut symbols = vec![WORD_SEPARATOR];
        symbols.extend(letters.iter().filter(|&&c| c != WORD_SEPARATOR));
        OutputUnits::Grapheme { symbols }
    }

    pub fn size(&self) -> usize {
        match self {
            OutputUnits::Phoneme { size } => *size,
            OutputUnits::Grapheme { symbols } => symbols.len(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        match self {
            OutputUnits::Phoneme { .. } => Vocabulary::Phoneme,
            OutputUnits::Grapheme { .. } => Vocabulary::Grapheme,
        }
    }

    /// CTC targets for an utterance.
    pub fn targets(&self, utt: &Utterance) -> Result<LabelSequence> {
        match self {
            OutputUnits::Phoneme { .. } => {
                let p = utt
                    .phonemes
                    .as_ref()
                    .ok_or_else(|| Error::MissingTranscript(utt.id.clone()))?;
                Ok(LabelSequence::ctc_from_units(p, Vocabulary::Phoneme))
            }
            OutputUnits::Grapheme { symbols } => {
                let words = utt.words.as_ref().ok_or_else(|| Error::MissingTranscript(utt.id.clone()))?;
                let text = words.join(&WORD_SEPARATOR.to_string());
                let ids = text
                    .chars()
                    .map(|c| {
                        symbols
                            .iter()
                            .position(|&s| s == c)
                            .map(|i| i + 1)
                            .ok_or_else(|| Error::InvalidArgument(format!("letter {c:?} not in grapheme set")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabelSequence::new(ids, Vocabulary::Grapheme))
            }
        }
    }

    /// Words from decoded grapheme CTC ids.
    pub fn grapheme_words(&self, ids: &[usize]) -> Vec<String> {
        let OutputUnits::Grapheme { symbols } = self else {
            return Vec::new();
        };
        let text: String = ids.iter().map(|&i| symbols[i - 1]).collect();
        text.split(WORD_SEPARATOR)
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// Losses of one pre-training update (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub ctc_loss: f64,
    pub sl1_labeled: f64,
    pub sl1_unlabeled: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub ctc_loss: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniData2vecModel {
    pub config: EncoderConfig,
    /// Trainable parameters: `feature.*`, `mask_emb`, `student.*`, `head.*`.
    pub params: ParamStore,
    /// EMA copy of the student encoder, with the `student.` prefix stripped.
    pub teacher: ParamStore,
    pub units: OutputUnits,
}

const STUDENT: &str = "student.";

impl UniData2vecModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        {
            let mut init = Init {
                store: &mut params,
                rng: &mut rng,
            };
            let mut in_ch = config.input_dim;
            for (i, (&ch, &k)) in config.conv_channels.iter().zip(&config.conv_kernels).enumerate() {
                init.conv(&format!("feature.conv{i}"), k, in_ch, ch);
                in_ch = ch;
            }
            init.layer_norm("feature.ln", in_ch);
            init.linear("feature.proj", in_ch, config.dim, true);
            init.vector("mask_emb", config.dim, 0.1);
            for l in 0..config.layers {
                init.transformer_layer(&format!("student.layer{l}"), config.dim, config.inner_dim);
            }
        }
        let units = OutputUnits::Phoneme {
            size: config.vocab_size,
        };
        let mut model = UniData2vecModel {
            teacher: params.subset(STUDENT),
            params,
            config,
            units: units.clone(),
        };
        model.reinit_head(units, derive(seed, 7));
        Ok(model)
    }

    /// Replaces the projection head with a freshly initialized one for `units`.
    pub fn reinit_head(&mut self, units: OutputUnits, seed: u64) {
        self.params.remove_prefix("head.");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut self.params,
            rng: &mut rng,
        };
        init.layer_norm("head.ln", self.config.dim);
        init.linear("head.out", self.config.dim, units.size() + 1, true);
        self.units = units;
    }

    pub fn head_classes(&self) -> usize {
        self.params.get("head.out.b").map_or(0, Tensor::len)
    }

    /// Student encoder parameters under the teacher's naming.
    pub fn student(&self) -> ParamStore {
        self.params.subset(STUDENT)
    }

    /// Convolutional feature encoder: `[T₀×F]` → `[T×d]`.
    pub fn feature_encode(&self, g: &mut Graph, x: &Tensor, trainable: bool) -> Result<Var> {
        let cfg = &self.config;
        if x.shape().len() != 2 || x.cols() != cfg.input_dim {
            return Err(Error::shape("feature_encode", x.shape(), &[x.rows(), cfg.input_dim]));
        }
        if cfg.output_frames(x.rows()).is_none() {
            return Err(Error::InputTooShort {
                got: x.rows(),
                min: cfg.min_input_frames(),
            });
        }
        let scope = self.scope("feature", trainable);
        let mut h = g.input(x.clone())?;
        for (i, (&k, &s)) in cfg.conv_kernels.iter().zip(&cfg.conv_strides).enumerate() {
            h = nn::conv1d(g, &scope.sub(&format!("conv{i}")), h, k, s, EncoderConfig::padding(k))?;
            h = g.gelu(h)?;
        }
        let h = nn::layer_norm(g, &scope.sub("ln"), h)?;
        nn::linear(g, &scope.sub("proj"), h)
    }

    fn scope(&self, prefix: &str, trainable: bool) -> Scope<'_> {
        let p = format!("{prefix}.");
        if trainable {
            Scope::trainable(&self.params, &p)
        } else {
            Scope::frozen(&self.params, &p)
        }
    }

    fn encoder_forward(&self, g: &mut Graph, scope: &Scope, z: Var) -> Result<Vec<Var>> {
        let pos = sinusoidal_positions(g.value(z).rows(), self.config.dim);
        let mut h = g.add_const(z, &pos)?;
        let mut outs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            h = nn::transformer_layer(g, &scope.sub(&format!("layer{l}")), h, self.config.heads, None)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Student pass over `z` with masked steps replaced by the mask
    /// embedding. Returns the top output `C` and every layer's output.
    pub fn student_forward(
        &self,
        g: &mut Graph,
        z: Var,
        mask: &MaskSpec,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let input = if mask.mask.iter().any(|&m| m) {
            let emb = if trainable {
                Scope::trainable(&self.params, "").var(g, "mask_emb")?
            } else {
                Scope::frozen(&self.params, "").var(g, "mask_emb")?
            };
            g.mask_rows(z, &mask.mask, emb)?
        } else {
            z
        };
        let scope = self.scope("student", trainable);
        let outs = self.encoder_forward(g, &scope, input)?;
        Ok((*outs.last().expect("at least one layer"), outs))
    }

    /// Every teacher layer output for latent frames `z` (no gradient).
    pub fn teacher_layers(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let zv = g.input(z.clone())?;
        let outs = self.encoder_forward(&mut g, &Scope::frozen(&self.teacher, ""), zv)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Regression targets: mean of the instance-normalized top `k` teacher layers.
    pub fn teacher_targets(&self, z: &Tensor, k: usize) -> Result<Tensor> {
        if k == 0 || k > self.config.layers {
            return Err(Error::InvalidArgument(format!(
                "target depth {k} outside 1..={}",
                self.config.layers
            )));
        }
        let layers = self.teacher_layers(z)?;
        let mut acc = Tensor::zeros(z.shape());
        for out in &layers[layers.len() - k..] {
            let n = instance_norm(out);
            for (a, v) in acc.data_mut().iter_mut().zip(n.data()) {
                *a += v / k as f64;
            }
        }
        Ok(acc)
    }

    fn head_log_probs(&self, g: &mut Graph, c: Var, trainable: bool) -> Result<Var> {
        let scope = self.scope("head", trainable);
        let h = nn::layer_norm(g, &scope.sub("ln"), c)?;
        let logits = nn::linear(g, &scope.sub("out"), h)?;
        g.log_softmax(logits)
    }

    /// Records the per-utterance terms for one labeled or unlabeled utterance.
    /// Returns `Ok(false)` when the CTC alignment is infeasible.
    fn utterance_terms<R: Rng>(
        &self,
        g: &mut Graph,
        utt: &Utterance,
        labeled: bool,
        weights: &LossWeights,
        rng: &mut R,
        terms: &mut MultiTaskTerms,
    ) -> Result<bool> {
        let labels = if labeled {
            let l = self.units.targets(utt)?;
            let frames = self.config.output_frames(utt.frames()).unwrap_or(0);
            if ctc_min_frames(&l.ids) > frames {
                return Ok(false);
            }
            Some(l)
        } else {
            None
        };
        let z = self.feature_encode(g, &utt.features, true)?;
        let t = g.value(z).rows();
        let need_sl1 = !labeled || weights.alpha > 0.0;
        let mask = if need_sl1 {
            sample_mask(t, self.config.mask_prob, self.config.mask_span, rng)
        } else {
            MaskSpec::none(t)
        };
        let (c, _) = self.student_forward(g, z, &mask, true)?;
        if need_sl1 {
            let idx = mask.masked_indices();
            if idx.is_empty() {
                return Err(Error::NoMaskedPositions);
            }
            let y = self.teacher_targets(g.value(z), weights.target_depth)?;
            let pred = g.gather_rows(c, &idx)?;
            let l = smooth_l1(g, &y.select_rows(&idx), pred, weights.beta)?;
            if labeled {
                terms.sl1_labeled.push(l);
            } else {
                terms.sl1_unlabeled.push(l);
            }
        }
        if let Some(labels) = labels {
            let ctc_input = if self.config.ctc_on_masked || !need_sl1 {
                c
            } else {
                self.student_forward(g, z, &MaskSpec::none(t), true)?.0
            };
            let lp = self.head_log_probs(g, ctc_input, true)?;
            terms.ctc_labeled.push(ctc_loss(g, lp, &labels)?);
        }
        Ok(true)
    }

    /// Builds the combined pre-training objective for one batch.
    ///
    /// With no unlabeled batch this is `mean(CTC) + α·mean(SL1)` over the
    /// labeled utterances; with one, the unlabeled SL1 mean is added at
    /// weight one.
    pub fn multitask_loss<R: Rng>(
        &self,
        g: &mut Graph,
        labeled: &[&Utterance],
        unlabeled: &[&Utterance],
        weights: &LossWeights,
        rng: &mut R,
    ) -> Result<(Var, PretrainMetrics)> {
        let mut terms = MultiTaskTerms::default();
        let mut skipped = 0;
        for u in labeled {
            if !self.utterance_terms(g, u, true, weights, rng, &mut terms)? {
                skipped += 1;
            }
        }
        for u in unlabeled {
            self.utterance_terms(g, u, false, weights, rng, &mut terms)?;
        }
        let (total, parts) = multitask_total(g, &terms, weights.alpha)?;
        Ok((
            total,
            PretrainMetrics {
                ctc_loss: parts.ctc,
                sl1_labeled: parts.sl1_labeled,
                sl1_unlabeled: parts.sl1_unlabeled,
                total: parts.total,
                grad_norm: 0.0,
                skipped,
            },
        ))
    }

    /// One pre-training update followed by the EMA teacher update.
    pub fn pretrain_step<R: Rng>(
        &mut self,
        labeled: &[&Utterance],
        unlabeled: Option<&[&Utterance]>,
        optimizer: &mut Adam,
        rng: &mut R,
    ) -> Result<PretrainMetrics> {
        let weights = self.config.loss;
        let mut g = Graph::new();
        let (total, mut metrics) = self.multitask_loss(&mut g, labeled, unlabeled.unwrap_or(&[]), &weights, rng)?;
        let grads = g.backward(total)?.params();
        metrics.grad_norm = optimizer.step(&mut self.params, &grads);
        let student = self.student();
        ema_update(&mut self.teacher, &student, self.config.ema_decay)?;
        Ok(metrics)
    }

    /// Frame log-probabilities of the head over an unmasked student pass.
    pub fn frame_log_probs(&self, g: &mut Graph, x: &Tensor, trainable: bool) -> Result<Var> {
        let z = self.feature_encode(g, x, trainable)?;
        let t = g.value(z).rows();
        let (c, _) = self.student_forward(g, z, &MaskSpec::none(t), trainable)?;
        self.head_log_probs(g, c, trainable)
    }

    /// CTC-only update on labeled target data: no masking, no EMA.
    pub fn finetune_step(
        &mut self,
        batch: &[&Utterance],
        units: &OutputUnits,
        optimizer: &mut Adam,
    ) -> Result<FinetuneMetrics> {
        if units.size() + 1 != self.head_classes() || units != &self.units {
            return Err(Error::VocabularyMismatch {
                head: self.head_classes(),
                vocab: units.size() + 1,
            });
        }
        let mut g = Graph::new();
        let mut losses = Vec::new();
        let mut skipped = 0;
        for u in batch {
            let labels = units.targets(u)?;
            let frames = self.config.output_frames(u.frames()).unwrap_or(0);
            if ctc_min_frames(&labels.ids) > frames {
                skipped += 1;
                continue;
            }
            let lp = self.frame_log_probs(&mut g, &u.features, true)?;
            losses.push(ctc_loss(&mut g, lp, &labels)?);
        }
        let Some((&first, rest)) = losses.split_first() else {
            return Err(Error::InvalidArgument("no utterance in the batch has a feasible alignment".into()));
        };
        let mut acc = first;
        for &l in rest {
            acc = g.add(acc, l)?;
        }
        let loss = g.scale(acc, 1.0 / losses.len() as f64)?;
        let grads = g.backward(loss)?.params();
        let grad_norm = optimizer.step(&mut self.params, &grads);
        Ok(FinetuneMetrics {
            ctc_loss: g.value(loss).item(),
            grad_norm,
            skipped,
        })
    }

    /// Head log-probabilities `[T×(units+1)]` and the greedy-collapsed
    /// posterior sequence over the units (blank removed).
    pub fn phoneme_posteriors(&self, x: &Tensor) -> Result<(Tensor, LabelSequence, PosteriorSequence)> {
        let mut g = Graph::new();
        let lp = self.frame_log_probs(&mut g, x, false)?;
        let lp = g.value(lp).clone();
        let (labels, post, _) = ctc_greedy_decode(&lp, self.units.vocabulary())?;
        Ok((lp, labels, post))
    }

    /// Greedy-decoded units (0-based inventory ids).
    pub fn decode_units(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.phoneme_posteriors(x)?.1.ctc_units())
    }

    /// Output of teacher layer `layer` (1-based; 0 is the encoder input).
    pub fn teacher_layer_output(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        if layer > self.config.layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} outside 0..={}",
                self.config.layers
            )));
        }
        let mut g = Graph::new();
        let z = self.feature_encode(&mut g, x, false)?;
        let z = g.value(z).clone();
        if layer == 0 {
            let pos = sinusoidal_positions(z.rows(), self.config.dim);
            return Ok(Tensor::new(
                z.shape().to_vec(),
                z.data().iter().zip(pos.data()).map(|(a, b)| a + b).collect(),
            )?);
        }
        Ok(self.teacher_layers(&z)?.swap_remove(layer - 1))
    }

    pub fn to_checkpoint(&self, echo: &serde_json::Value) -> Result<Checkpoint> {
        let header = serde_json::json!({
            "config": self.config,
            "units": self.units,
            "echo": echo,
        });
        let mut params = self.params.clone();
        params.merge_prefixed("teacher.", &self.teacher);
        Ok(Checkpoint {
            component: COMPONENT.to_string(),
            header: serde_json::to_string(&header)?,
            params,
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
            config: EncoderConfig,
            units: OutputUnits,
        }
        let h: Header = serde_json::from_str(&ckpt.header)?;
        let mut model = UniData2vecModel::new(h.config, 0)?;
        model.reinit_head(h.units, 0);
        let mut expected = model.params.clone();
        expected.merge_prefixed("teacher.", &model.teacher);
        expected
            .check_same_layout(&ckpt.params)
            .map_err(|e| bad(format!("parameters do not match the config: {e}")))?;
        model.teacher = ckpt.params.subset("teacher.");
        let mut params = ckpt.params.clone();
        params.remove_prefix("teacher.");
        model.params = params;
        Ok(model)
    }

    /// Echo block stored in a checkpoint header, if any.
    pub fn checkpoint_echo(ckpt: &Checkpoint) -> Result<serde_json::Value> {
        let v: BTreeMap<String, serde_json::Value> = serde_json::from_str(&ckpt.header)?;
        Ok(v.get("echo").cloned().unwrap_or(serde_json::Value::Null))
    }
}

fn derive(seed: u64, stream: u64) -> u64 {
    crate::synth::derive_seed(seed, stream)
}
