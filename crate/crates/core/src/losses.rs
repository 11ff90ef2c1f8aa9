//! Training objectives: Smooth-L1 regression, CTC (with an exhaustive
//! reference), greedy CTC decoding into segment posteriors, cross-entropy,
//! and the weighted multi-task combination used in pre-training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{argmax, log_sum_exp, Tensor};

/// Weights of the pre-training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the self-supervised term on labeled data. Zero turns the
    /// objective into plain CTC.
    pub alpha: f64,
    /// Smooth-L1 transition point between the quadratic and linear branch.
    pub beta: f64,
    /// Number of top teacher layers averaged into the regression target.
    pub target_depth: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.15,
            beta: 0.25,
            target_depth: 8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 0.5), got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.target_depth == 0 || self.target_depth > encoder_layers {
            return Err(Error::Config(format!(
                "target depth {} outside 1..={encoder_layers}",
                self.target_depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vocabulary {
    Phoneme,
    Grapheme,
    Word,
}

/// Indices into one inventory. For CTC, ids are class ids with the blank at
/// 0, so unit `u` of the inventory appears as `u + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence {
    pub ids: Vec<usize>,
    pub vocabulary: Vocabulary,
}

impl LabelSequence {
    pub fn new(ids: Vec<usize>, vocabulary: Vocabulary) -> Self {
        LabelSequence { ids, vocabulary }
    }

    /// CTC class ids for 0-based inventory units.
    pub fn ctc_from_units(units: &[usize], vocabulary: Vocabulary) -> Self {
        LabelSequence {
            ids: units.iter().map(|u| u + 1).collect(),
            vocabulary,
        }
    }

    /// Inventory units of CTC class ids.
    pub fn ctc_units(&self) -> Vec<usize> {
        self.ids.iter().map(|i| i - 1).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A sequence of probability vectors over an inventory (one row per position).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSequence {
    rows: Tensor,
}

impl PosteriorSequence {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "posterior sequence must be 2-D, got {:?}",
                rows.shape()
            )));
        }
        for r in 0..rows.rows() {
            let row = rows.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "posterior row {r} is not a distribution (sums to {s})"
                )));
            }
        }
        Ok(PosteriorSequence { rows })
    }

    pub fn one_hot(ids: &[usize], size: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[ids.len(), size]);
        for (r, &i) in ids.iter().enumerate() {
            if i >= size {
                return Err(Error::InvalidArgument(format!("id {i} outside inventory of {size}")));
            }
            t.row_mut(r)[i] = 1.0;
        }
        Ok(PosteriorSequence { rows: t })
    }

    pub fn empty(size: usize) -> Self {
        PosteriorSequence {
            rows: Tensor::zeros(&[0, size]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inventory_size(&self) -> usize {
        self.rows.cols()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows.argmax_rows()
    }

    /// The same sequence with each row replaced by the one-hot of its argmax.
    pub fn hardened(&self) -> Self {
        PosteriorSequence::one_hot(&self.argmax(), self.inventory_size()).expect("in range")
    }
}

/// Element-wise Smooth-L1 between a target and a prediction.
pub fn smooth_l1_elem(target: f64, prediction: f64, beta: f64) -> f64 {
    let d = (target - prediction).abs();
    if d <= beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// Mean Smooth-L1 over all elements of the selected rows.
///
/// `targets` is a constant; the gradient flows only into `predictions`.
pub fn smooth_l1(g: &mut Graph, targets: &Tensor, predictions: Var, beta: f64) -> Result<Var> {
    let pred = g.value(predictions);
    if pred.shape() != targets.shape() {
        return Err(Error::shape("smooth_l1", targets.shape(), pred.shape()));
    }
    if pred.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&y, &c) in targets.data().iter().zip(pred.data()) {
        value += smooth_l1_elem(y, c, beta);
        let d = c - y;
        let dg = if d.abs() <= beta { d / beta } else { d.signum() };
        grad.push(dg / n);
    }
    g.fused_scalar(predictions, value / n, grad)
}

fn ctc_extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(0);
    for &l in labels {
        ext.push(l);
        ext.push(0);
    }
    ext
}

/// Minimum number of frames that can emit `labels` under CTC.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_ctc_labels(labels: &LabelSequence, frames: usize, classes: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::InvalidArgument("CTC over an empty frame sequence".into()));
    }
    if let Some(&bad) = labels.ids.iter().find(|&&l| l == 0 || l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "CTC label {bad} outside 1..{classes} (0 is the blank)"
        )));
    }
    let needed = ctc_min_frames(&labels.ids);
    if needed > frames {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            needed,
            frames,
        });
    }
    Ok(())
}

/// Forward–backward in log space. Returns `(−log p, ∂(−log p)/∂log_probs)`.
pub fn ctc_forward_backward(log_probs: &Tensor, labels: &LabelSequence) -> Result<(f64, Vec<f64>)> {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    check_ctc_labels(labels, t_len, v)?;
    let ext = ctc_extended(&labels.ids);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| log_probs.data()[t * v + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], neg, neg];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip_ok(s) {
                terms[2] = prev[s - 2];
            }
            let a = log_sum_exp(&terms);
            alpha[t * s_len + s] = if a == neg { neg } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = [next[s], neg, neg];
            if s + 1 < s_len {
                terms[1] = next[s + 1];
            }
            if s + 2 < s_len && ext[s + 2] != 0 && ext[s + 2] != ext[s] {
                terms[2] = next[s + 2];
            }
            let b = log_sum_exp(&terms);
            beta[t * s_len + s] = if b == neg { neg } else { b + lp(t, s) };
        }
    }

    let tail = &alpha[last..];
    let log_p = if s_len > 1 {
        log_sum_exp(&[tail[s_len - 1], tail[s_len - 2]])
    } else {
        tail[0]
    };
    if !log_p.is_finite() {
        return Err(Error::Unreachable);
    }

    let mut grad = vec![0.0; t_len * v];
    let mut per_class = vec![neg; v];
    for t in 0..t_len {
        per_class.iter_mut().for_each(|x| *x = neg);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            let k = ext[s];
            per_class[k] = log_sum_exp(&[per_class[k], ab]);
        }
        for k in 0..v {
            if per_class[k] != neg {
                let y = log_probs.data()[t * v + k];
                grad[t * v + k] = -(per_class[k] - y - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `labels` given `[T×V]` log-probabilities.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, labels: &LabelSequence) -> Result<Var> {
    let (loss, grad) = ctc_forward_backward(g.value(log_probs), labels)?;
    g.fused_scalar(log_probs, loss, grad)
}

/// Merges repeats, then drops blanks.
pub fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive CTC: sums the probability of every frame-label path whose
/// collapse equals `labels`. Only for tiny problems.
pub fn ctc_brute_force(probs: &Tensor, labels: &LabelSequence) -> Result<f64> {
    const GUARD: u128 = 1_000_000;
    let (t_len, v) = (probs.rows(), probs.cols());
    let count = (v as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if count > GUARD {
        return Err(Error::GuardExceeded(count));
    }
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    for _ in 0..count {
        if ctc_collapse(&path) == labels.ids {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs.get(t, k))
                .product::<f64>();
        }
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < v {
                break;
            }
            *slot = 0;
        }
    }
    if total <= 0.0 {
        return Err(Error::Unreachable);
    }
    Ok(-total.ln())
}

/// One emitted label of a greedy decode and the frames that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

/// Best-path decode. Each emitted label gets the average posterior of its
/// frame run, with the blank column removed and the rest renormalized.
pub fn ctc_greedy_decode(
    log_probs: &Tensor,
    vocabulary: Vocabulary,
) -> Result<(LabelSequence, PosteriorSequence, Vec<Segment>)> {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if v < 2 {
        return Err(Error::InvalidArgument("CTC needs at least one non-blank class".into()));
    }
    let best: Vec<usize> = (0..t_len).map(|t| argmax(log_probs.row(t))).collect();
    let mut segments: Vec<Segment> = Vec::new();
    let mut t = 0;
    while t < t_len {
        let k = best[t];
        let mut end = t + 1;
        while end < t_len && best[end] == k {
            end += 1;
        }
        if k != 0 {
            segments.push(Segment {
                label: k,
                start: t,
                end,
            });
        }
        t = end;
    }
    let mut rows = Tensor::zeros(&[segments.len(), v - 1]);
    for (i, seg) in segments.iter().enumerate() {
        let mut avg = vec![0.0; v];
        for t in seg.start..seg.end {
            for (a, &lp) in avg.iter_mut().zip(log_probs.row(t)) {
                *a += lp.exp();
            }
        }
        let z: f64 = avg[1..].iter().sum();
        for (dst, &a) in rows.row_mut(i).iter_mut().zip(&avg[1..]) {
            *dst = a / z;
        }
    }
    let labels = LabelSequence::new(segments.iter().map(|s| s.label).collect(), vocabulary);
    Ok((labels, PosteriorSequence { rows }, segments))
}

/// Mean token negative log-likelihood over positions whose target is not
/// `ignore_index`.
pub fn cross_entropy(
    g: &mut Graph,
    logits: Var,
    targets: &LabelSequence,
    ignore_index: Option<usize>,
) -> Result<Var> {
    let x = g.value(logits);
    let (l, w) = (x.rows(), x.cols());
    if targets.len() != l {
        return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
    }
    let keep: Vec<bool> = targets.ids.iter().map(|&t| Some(t) != ignore_index).collect();
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Err(Error::InvalidArgument("every target position is ignored".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; l * w];
    for (r, (&t, &k)) in targets.ids.iter().zip(&keep).enumerate() {
        if !k {
            continue;
        }
        if t >= w {
            return Err(Error::InvalidArgument(format!("target {t} outside {w} classes")));
        }
        let row = x.row(r);
        let lse = log_sum_exp(row);
        value -= row[t] - lse;
        for (j, gv) in grad[r * w..(r + 1) * w].iter_mut().enumerate() {
            *gv = (row[j] - lse).exp() / n as f64;
        }
        grad[r * w + t] -= 1.0 / n as f64;
    }
    g.fused_scalar(logits, value / n as f64, grad)
}

/// Per-utterance loss terms of one pre-training batch.
#[derive(Default)]
pub struct MultiTaskTerms {
    pub ctc_labeled: Vec<Var>,
    pub sl1_labeled: Vec<Var>,
    pub sl1_unlabeled: Vec<Var>,
}

/// Scalar parts of a combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskParts {
    pub ctc: f64,
    pub sl1_labeled: f64,
    pub sl1_unlabeled: f64,
    pub total: f64,
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)?))
}

/// `mean(ctc) + α·mean(sl1 on labeled) + mean(sl1 on unlabeled)`.
///
/// Each utterance contributes its own sum-form term; the batch average keeps
/// the scale independent of batch size. The unlabeled term has weight one.
pub fn multitask_total(g: &mut Graph, terms: &MultiTaskTerms, alpha: f64) -> Result<(Var, MultiTaskParts)> {
    let ctc = batch_mean(g, &terms.ctc_labeled)?
        .ok_or_else(|| Error::InvalidArgument("labeled batch is empty".into()))?;
    let mut parts = MultiTaskParts {
        ctc: g.value(ctc).item(),
        ..Default::default()
    };
    let mut total = ctc;
    if let Some(s) = batch_mean(g, &terms.sl1_labeled)? {
        parts.sl1_labeled = g.value(s).item();
        let w = g.scale(s, alpha)?;
        total = g.add(total, w)?;
    }
    if let Some(s) = batch_mean(g, &terms.sl1_unlabeled)? {
        parts.sl1_unlabeled = g.value(s).item();
        total = g.add(total, s)?;
    }
    parts.total = g.value(total).item();
    Ok((total, parts))
}
