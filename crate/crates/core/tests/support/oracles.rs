//! Random instances checked against independent references: exhaustive CTC,
//! closed-form EMA, Smooth-L1 branch values and alignment invariants.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xling::losses::{
    ctc_brute_force, ctc_forward_backward, ctc_min_frames, smooth_l1, smooth_l1_elem, LabelSequence,
    PosteriorSequence, Vocabulary,
};
use xling::nn::{ParamStore, Scope};
use xling::transcoder::{align_hypothesis, align_words, WordVocab, STAR};
use xling::unidata2vec::ema_update;
use xling::{Graph, Tensor};

/// `|forward–backward − exhaustive|` of `−log p` for one random instance
/// with `T ≤ 6`, `|labels| ≤ 3`, `V ≤ 4` (blank included).
pub fn ctc_oracle_gap(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let v = r.random_range(2..=4);
    let (labels, t) = loop {
        let n = r.random_range(1..=3);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(1..v)).collect();
        let min = ctc_min_frames(&labels);
        if min <= 6 {
            break (labels, r.random_range(min..=6));
        }
    };
    let mut logits = Tensor::zeros(&[t, v]);
    for x in logits.data_mut() {
        *x = 2.0 * r.sample::<f64, _>(StandardNormal);
    }
    let mut probs = logits.clone();
    let mut log_probs = logits;
    for i in 0..t {
        let lse = xling::tensor::log_sum_exp(log_probs.row(i));
        for (lp, p) in log_probs.row_mut(i).iter_mut().zip(probs.row_mut(i)) {
            *lp -= lse;
            *p = lp.exp();
        }
    }
    let labels = LabelSequence::new(labels, Vocabulary::Phoneme);
    let (fast, _) = ctc_forward_backward(&log_probs, &labels).unwrap();
    let slow = ctc_brute_force(&probs, &labels).unwrap();
    (fast - slow).abs()
}

/// Value error at `|Y−C| = β` and the largest gradient magnitude seen on a
/// sweep of residuals spanning both branches.
pub fn sl1_branch(beta: f64) -> (f64, f64) {
    let at_branch = [
        (smooth_l1_elem(0.0, beta, beta) - beta / 2.0).abs(),
        (smooth_l1_elem(beta, 0.0, beta) - beta / 2.0).abs(),
        (smooth_l1_elem(1.5, 1.5 + beta, beta) - beta / 2.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let residuals: Vec<f64> = (-400..=400).map(|i| i as f64 * beta / 100.0).collect();
    let pred = Tensor::vector(residuals.clone());
    let target = Tensor::zeros(&[residuals.len()]);
    let mut store = ParamStore::new();
    store.insert("c", pred);
    let mut g = Graph::new();
    let c = Scope::trainable(&store, "").var(&mut g, "c").unwrap();
    let loss = smooth_l1(&mut g, &target, c, beta).unwrap();
    // the mean divides by n; undo it to recover per-element slopes
    let n = residuals.len() as f64;
    let grad = g.backward(loss).unwrap().wrt(c).unwrap();
    let max_grad = grad.data().iter().map(|d| (d * n).abs()).fold(0.0, f64::max);
    (at_branch, max_grad)
}

fn random_store(r: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in [("a.w", vec![3, 2]), ("a.b", vec![2]), ("ln.gamma", vec![4])] {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        s.insert(name, Tensor::new(shape, data).unwrap());
    }
    s
}

/// Largest gap between `updates` sequential EMA steps and the closed form
/// `τⁿ·θ₀ + Σᵢ (1−τ)·τⁿ⁻ⁱ·sᵢ`.
pub fn ema_closed_form_gap(seed: u64, tau: f64, updates: usize) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let initial = random_store(&mut r);
    let students: Vec<ParamStore> = (0..updates).map(|_| random_store(&mut r)).collect();
    let mut teacher = initial.clone();
    for s in &students {
        ema_update(&mut teacher, s, tau).unwrap();
    }
    let n = updates as i32;
    let mut gap: f64 = 0.0;
    for (name, t) in teacher.iter() {
        for (k, &got) in t.data().iter().enumerate() {
            let mut want = tau.powi(n) * initial.get(name).unwrap().data()[k];
            for (i, s) in students.iter().enumerate() {
                want += (1.0 - tau) * tau.powi(n - 1 - i as i32) * s.get(name).unwrap().data()[k];
            }
            gap = gap.max((got - want).abs());
        }
    }
    gap
}

/// τ = 1 keeps the teacher, τ = 0 copies the student; both bit-exact.
pub fn ema_fixed_points(seed: u64) -> bool {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let initial = random_store(&mut r);
    let student = random_store(&mut r);
    let mut keep = initial.clone();
    ema_update(&mut keep, &student, 1.0).unwrap();
    let mut copy = initial.clone();
    ema_update(&mut copy, &student, 0.0).unwrap();
    keep == initial && copy == student
}

/// Random lexicon of 3–12 words over an inventory of `size` phonemes.
fn random_lexicon(r: &mut ChaCha8Rng, size: usize) -> BTreeMap<String, Vec<usize>> {
    let n = r.random_range(3..=12);
    (0..n)
        .map(|i| {
            let len = r.random_range(1..=5);
            (format!("w{i}"), (0..len).map(|_| r.random_range(0..size)).collect())
        })
        .collect()
}

fn corrupt(r: &mut ChaCha8Rng, ids: &[usize], size: usize, rates: (f64, f64, f64)) -> Vec<usize> {
    let (sub, ins, del) = rates;
    let mut out = Vec::new();
    for &p in ids {
        if r.random_bool(ins) {
            out.push(r.random_range(0..size));
        }
        if r.random_bool(del) {
            continue;
        }
        out.push(if r.random_bool(sub) { r.random_range(0..size) } else { p });
    }
    if out.is_empty() {
        out.push(r.random_range(0..size));
    }
    out
}

/// Checks every alignment invariant on one random lexicon and sentence.
/// `Err` names the first violated property.
pub fn alignment_case(seed: u64) -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let size = r.random_range(2..=8);
    let lexicon = random_lexicon(&mut r, size);
    let names: Vec<String> = lexicon.keys().cloned().collect();
    // leave some words out of the vocabulary to exercise the unknown id
    let vocab = WordVocab::new(names.iter().filter(|_| r.random_bool(0.8)).cloned().collect())
        .map_err(|e| e.to_string())?;
    let sentence: Vec<String> = (0..r.random_range(1..=6))
        .map(|_| names[r.random_range(0..names.len())].clone())
        .collect();
    let ex = align_words(&sentence, &lexicon, &vocab, size).map_err(|e| e.to_string())?;
    let targets = &ex.word_targets.ids;
    if ex.phoneme_posteriors.len() != targets.len() {
        return Err("length equality".into());
    }
    let mut pos = 0;
    for w in &sentence {
        let n = lexicon[w].len();
        let span = &targets[pos..pos + n];
        if span[..n - 1].iter().any(|&t| t != STAR) || span[n - 1] == STAR {
            return Err(format!("star count for {w}"));
        }
        if ex.phoneme_posteriors.argmax()[pos..pos + n] != lexicon[w][..] {
            return Err(format!("phonemes for {w}"));
        }
        pos += n;
    }
    let stripped: Vec<usize> = targets.iter().copied().filter(|&t| t != STAR).collect();
    let ids: Vec<usize> = sentence.iter().map(|w| vocab.id(w)).collect();
    if stripped != ids {
        return Err("strip-* round trip".into());
    }

    let ref_phonemes = LabelSequence::new(ex.phoneme_posteriors.argmax(), Vocabulary::Phoneme);
    let same = align_hypothesis(&ex.phoneme_posteriors, &ref_phonemes, &ex.word_targets).map_err(|e| e.to_string())?;
    if same.word_targets != ex.word_targets {
        return Err("identity hypothesis must keep the reference targets".into());
    }
    for _ in 0..4 {
        let rates = (r.random_range(0.0..=0.3), r.random_range(0.0..=0.3), r.random_range(0.0..=0.3));
        let hyp_ids = corrupt(&mut r, &ref_phonemes.ids, size, rates);
        let hyp = PosteriorSequence::one_hot(&hyp_ids, size).map_err(|e| e.to_string())?;
        let a = align_hypothesis(&hyp, &ref_phonemes, &ex.word_targets).map_err(|e| e.to_string())?;
        if a.word_targets.len() != hyp_ids.len() || a.phoneme_posteriors.len() != hyp_ids.len() {
            return Err(format!("hypothesis length equality at rates {rates:?}"));
        }
        // surviving words keep their order
        let kept: Vec<usize> = a.word_targets.ids.iter().copied().filter(|&t| t != STAR).collect();
        let mut it = ids.iter();
        if !kept.iter().all(|k| it.any(|i| i == k)) {
            return Err("hypothesis words out of reference order".into());
        }
    }
    Ok(())
}
