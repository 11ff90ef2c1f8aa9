//! Finite-difference cases for every differentiable loss and layer.
//!
//! Each case builds a small random instance from a seed and returns the
//! worst relative error between reverse-mode and central-difference
//! gradients over its parameters (inputs are registered as parameters too).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xling::gradcheck::{check_param_gradients, GradCheck};
use xling::losses::{
    ctc_loss, cross_entropy, multitask_total, smooth_l1, LabelSequence, MultiTaskTerms, PosteriorSequence,
    Vocabulary,
};
use xling::nn::{self, Init, ParamStore, Scope};
use xling::synth::Utterance;
use xling::transcoder::{AlignedExample, ConvTopology, Transcoder, TranscoderConfig, WordVocab, STAR};
use xling::unidata2vec::{EncoderConfig, UniData2vecModel};
use xling::{Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 (key biases, for instance) are judged on absolute error
/// against the ~ε·|f|/h roundoff of the difference quotient.
pub const FLOOR: f64 = 1e-5;

pub type Case = fn(u64) -> Result<GradCheck>;

pub const CASES: &[(&str, Case)] = &[
    ("smooth_l1", smooth_l1_case),
    ("ctc", ctc_case),
    ("cross_entropy", cross_entropy_case),
    ("multitask_total", multitask_total_case),
    ("activations", activations_case),
    ("linear", linear_case),
    ("layer_norm", layer_norm_case),
    ("conv1d", conv1d_case),
    ("attention", attention_case),
    ("feed_forward", feed_forward_case),
    ("transformer_layer", transformer_layer_case),
    ("row_ops", row_ops_case),
    ("feature_encoder", feature_encoder_case),
    ("unidata2vec_loss", unidata2vec_loss_case),
    ("transcoder_forward", transcoder_forward_case),
    ("transcoder_loss", transcoder_loss_case),
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any tensor output into a
/// scalar with a generic gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = randn(&mut rng(seed ^ 0xabcd), g.value(out).shape());
    let w = g.input(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check<F>(params: &ParamStore, seed: u64, coords: usize, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_param_gradients(params, build, STEP, FLOOR, coords, seed)
}

fn smooth_l1_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let beta = [0.25, 0.1, 1.0][seed as usize % 3];
    let pred = randn(&mut r, &[4, 3]);
    // keep every residual clear of the branch point so the difference
    // quotient never straddles it
    let mut target = pred.clone();
    for t in target.data_mut() {
        let mut d: f64 = r.sample::<f64, _>(StandardNormal) * 2.0 * beta;
        while (d.abs() - beta).abs() < 1e-3 {
            d += 0.01;
        }
        *t += d;
    }
    let mut store = ParamStore::new();
    store.insert("c", pred);
    check(&store, seed, 0, |g, s| {
        let c = Scope::trainable(s, "").var(g, "c")?;
        smooth_l1(g, &target, c, beta)
    })
}

fn ctc_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let v = r.random_range(2..=5);
    let n = r.random_range(1..=3);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(1..v)).collect();
    let min = xling::losses::ctc_min_frames(&labels);
    let t = r.random_range(min..=min + 4);
    let labels = LabelSequence::new(labels, Vocabulary::Phoneme);
    let mut store = ParamStore::new();
    store.insert("x", randn(&mut r, &[t, v]));
    check(&store, seed, 0, |g, s| {
        let x = Scope::trainable(s, "").var(g, "x")?;
        let lp = g.log_softmax(x)?;
        ctc_loss(g, lp, &labels)
    })
}

fn cross_entropy_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let (l, w) = (r.random_range(2..=6), r.random_range(3..=6));
    let ids: Vec<usize> = (0..l).map(|_| r.random_range(0..w)).collect();
    let ignore = if seed % 2 == 0 { Some(ids[0]) } else { None };
    let targets = LabelSequence::new(ids.clone(), Vocabulary::Word);
    if ignore.is_some() && ids.iter().all(|&i| Some(i) == ignore) {
        return cross_entropy_case(seed + 1000);
    }
    let mut store = ParamStore::new();
    store.insert("x", randn(&mut r, &[l, w]));
    check(&store, seed, 0, |g, s| {
        let x = Scope::trainable(s, "").var(g, "x")?;
        cross_entropy(g, x, &targets, ignore)
    })
}

fn multitask_total_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let alpha = r.random_range(0.0..0.5);
    let mut store = ParamStore::new();
    for name in ["a0", "a1", "b0", "b1", "c0"] {
        store.insert(name, randn(&mut r, &[3]));
    }
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let sq = |g: &mut Graph, name: &str| -> Result<Var> {
            let v = sc.var(g, name)?;
            let p = g.mul(v, v)?;
            g.sum(p)
        };
        let terms = MultiTaskTerms {
            ctc_labeled: vec![sq(g, "a0")?, sq(g, "a1")?],
            sl1_labeled: vec![sq(g, "b0")?, sq(g, "b1")?],
            sl1_unlabeled: vec![sq(g, "c0")?],
        };
        Ok(multitask_total(g, &terms, alpha)?.0)
    })
}

fn activations_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    store.insert("x", randn(&mut r, &[3, 4]));
    check(&store, seed, 0, |g, s| {
        let x = Scope::trainable(s, "").var(g, "x")?;
        let a = g.gelu(x)?;
        let b = g.softmax(x)?;
        let c = g.log_softmax(x)?;
        let t = g.transpose(x)?;
        let d = g.matmul(x, t)?;
        let (pa, pb, pc, pd) = (project(g, a, 1)?, project(g, b, 2)?, project(g, c, 3)?, project(g, d, 4)?);
        let ab = g.add(pa, pb)?;
        let cd = g.sub(pc, pd)?;
        let y = g.add(ab, cd)?;
        let m = g.mean(x)?;
        let m = g.scale(m, 0.5)?;
        g.add(y, m)
    })
}

fn layer_store(seed: u64, f: impl FnOnce(&mut Init<ChaCha8Rng>)) -> (ParamStore, ChaCha8Rng) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    {
        let mut init = Init {
            store: &mut store,
            rng: &mut r,
        };
        f(&mut init);
    }
    // non-trivial affine parameters
    for (name, t) in store.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v += 0.3 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    (store, r)
}

fn linear_case(seed: u64) -> Result<GradCheck> {
    let (mut store, mut r) = layer_store(seed, |i| i.linear("lin", 4, 3, true));
    store.insert("x", randn(&mut r, &[5, 4]));
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let x = sc.var(g, "x")?;
        let y = nn::linear(g, &sc.sub("lin"), x)?;
        project(g, y, seed)
    })
}

fn layer_norm_case(seed: u64) -> Result<GradCheck> {
    let (mut store, mut r) = layer_store(seed, |i| i.layer_norm("ln", 5));
    store.insert("x", randn(&mut r, &[4, 5]));
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let x = sc.var(g, "x")?;
        let y = nn::layer_norm(g, &sc.sub("ln"), x)?;
        project(g, y, seed)
    })
}

fn conv1d_case(seed: u64) -> Result<GradCheck> {
    let (k, stride) = [(3, 1), (3, 2), (5, 1), (2, 2)][seed as usize % 4];
    let (mut store, mut r) = layer_store(seed, |i| i.conv("conv", k, 3, 4));
    store.insert("x", randn(&mut r, &[9, 3]));
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let x = sc.var(g, "x")?;
        let y = nn::conv1d(g, &sc.sub("conv"), x, k, stride, (k - 1) / 2)?;
        project(g, y, seed)
    })
}

fn attention_case(seed: u64) -> Result<GradCheck> {
    let heads = [1, 2][seed as usize % 2];
    let (mut store, mut r) = layer_store(seed, |i| i.attention("attn", 4));
    store.insert("x", randn(&mut r, &[5, 4]));
    let mask: Vec<bool> = (0..5).map(|i| seed % 3 == 0 && i % 2 == 1).collect();
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let x = sc.var(g, "x")?;
        let y = nn::multi_head_attention(g, &sc.sub("attn"), x, heads, Some(&mask))?;
        project(g, y, seed)
    })
}

fn feed_forward_case(seed: u64) -> Result<GradCheck> {
    let (mut store, mut r) = layer_store(seed, |i| i.feed_forward("ffn", 4, 6));
    store.insert("x", randn(&mut r, &[3, 4]));
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let x = sc.var(g, "x")?;
        let y = nn::feed_forward(g, &sc.sub("ffn"), x)?;
        project(g, y, seed)
    })
}

fn transformer_layer_case(seed: u64) -> Result<GradCheck> {
    let (mut store, mut r) = layer_store(seed, |i| i.transformer_layer("layer", 4, 6));
    store.insert("x", randn(&mut r, &[4, 4]));
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let x = sc.var(g, "x")?;
        let y = nn::transformer_layer(g, &sc.sub("layer"), x, 2, None)?;
        project(g, y, seed)
    })
}

fn row_ops_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    store.insert("x", randn(&mut r, &[6, 4]));
    store.insert("emb", randn(&mut r, &[4]));
    store.insert("row", randn(&mut r, &[4]));
    let mask: Vec<bool> = (0..6).map(|_| r.random_bool(0.4)).collect();
    let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
    check(&store, seed, 0, |g, s| {
        let sc = Scope::trainable(s, "");
        let (x, emb, row) = (sc.var(g, "x")?, sc.var(g, "emb")?, sc.var(g, "row")?);
        let m = g.mask_rows(x, &mask, emb)?;
        let m = g.add_row(m, row)?;
        let picked = g.gather_rows(m, &idx)?;
        let left = g.col_slice(picked, 0, 2)?;
        let right = g.col_slice(picked, 2, 2)?;
        let cat = g.concat_cols(&[right, left, right])?;
        let u = g.unfold(x, 3, 2, 1)?;
        let (a, b) = (project(g, cat, 1)?, project(g, u, 2)?);
        g.add(a, b)
    })
}

pub fn tiny_encoder() -> EncoderConfig {
    let mut c = EncoderConfig::desk();
    c.input_dim = 4;
    c.conv_channels = vec![5, 6];
    c.layers = 2;
    c.dim = 4;
    c.inner_dim = 6;
    c.heads = 2;
    c.vocab_size = 4;
    c.mask_prob = 0.3;
    c.mask_span = 2;
    c
}

fn tiny_model(seed: u64) -> UniData2vecModel {
    let mut m = UniData2vecModel::new(tiny_encoder(), seed).unwrap();
    let mut r = rng(seed ^ 0x77);
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v += 0.2 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    // a teacher that differs from the student
    for t in m.teacher.iter_mut().map(|(_, t)| t) {
        for v in t.data_mut() {
            *v *= 0.9;
        }
    }
    m
}

fn with_params(model: &UniData2vecModel, store: &ParamStore) -> UniData2vecModel {
    let mut m = model.clone();
    for (name, t) in store.iter() {
        if let Some(p) = m.params.get_mut(name) {
            *p = t.clone();
        }
    }
    m
}

fn feature_encoder_case(seed: u64) -> Result<GradCheck> {
    let model = tiny_model(seed);
    let x = randn(&mut rng(seed + 1), &[11, 4]);
    let store = model.params.subset("");
    let store = {
        let mut s = ParamStore::new();
        for (n, t) in store.iter().filter(|(n, _)| n.starts_with("feature.")) {
            s.insert(n.clone(), t.clone());
        }
        s
    };
    check(&store, seed, 6, |g, s| {
        let m = with_params(&model, s);
        let z = m.feature_encode(g, &x, true)?;
        project(g, z, seed)
    })
}

fn random_utterance(r: &mut ChaCha8Rng, frames: usize, labeled: bool) -> Utterance {
    let phonemes: Vec<usize> = (0..2).map(|_| r.random_range(0..4)).collect();
    Utterance {
        id: "u".into(),
        language: "x".into(),
        features: randn(r, &[frames, 4]),
        phonemes: labeled.then_some(phonemes),
        words: None,
        frame_labels: vec![0; frames],
    }
}

/// Combined pre-training loss with respect to the student, head and mask
/// embedding. The feature encoder is left out: regression targets are read
/// from its output but deliberately carry no gradient.
fn unidata2vec_loss_case(seed: u64) -> Result<GradCheck> {
    let mut model = tiny_model(seed);
    model.config.loss.alpha = 0.15;
    let mut r = rng(seed + 2);
    let labeled = [random_utterance(&mut r, 16, true), random_utterance(&mut r, 20, true)];
    let unlabeled = [random_utterance(&mut r, 18, false)];
    let mut store = ParamStore::new();
    for (n, t) in model.params.iter().filter(|(n, _)| !n.starts_with("feature.")) {
        store.insert(n.clone(), t.clone());
    }
    check(&store, seed, 4, |g, s| {
        let m = with_params(&model, s);
        let weights = m.config.loss;
        let lab: Vec<&Utterance> = labeled.iter().collect();
        let unl: Vec<&Utterance> = unlabeled.iter().collect();
        Ok(m.multitask_loss(g, &lab, &unl, &weights, &mut rng(seed + 3))?.0)
    })
}

fn tiny_transcoder(seed: u64, topology: ConvTopology) -> Transcoder {
    let vocab = WordVocab::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let cfg = TranscoderConfig {
        blocks: 1,
        dim: 4,
        inner_dim: 6,
        heads: 2,
        phoneme_size: 3,
        conv_topology: topology,
        ..TranscoderConfig::desk()
    };
    let mut t = Transcoder::new(cfg, vocab, seed).unwrap();
    let mut r = rng(seed ^ 0x99);
    for (name, p) in t.params.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".gamma") {
            for v in p.data_mut() {
                *v += 0.2 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    t
}

fn random_posteriors(r: &mut ChaCha8Rng, len: usize, size: usize) -> PosteriorSequence {
    let mut t = randn(r, &[len, size]);
    for i in 0..len {
        let row = t.row_mut(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for v in row.iter_mut() {
            *v = v.exp() / z;
        }
    }
    PosteriorSequence::new(t).unwrap()
}

fn transcoder_forward_case(seed: u64) -> Result<GradCheck> {
    let topology = if seed % 2 == 0 { ConvTopology::Parallel } else { ConvTopology::Serial };
    let t = tiny_transcoder(seed, topology);
    let x = random_posteriors(&mut rng(seed + 5), 5, 3);
    check(&t.params, seed, 6, |g, s| {
        let mut m = t.clone();
        m.params = s.clone();
        let y = m.forward(g, &x, true)?;
        project(g, y, seed)
    })
}

fn transcoder_loss_case(seed: u64) -> Result<GradCheck> {
    let t = tiny_transcoder(seed, ConvTopology::Parallel);
    let mut r = rng(seed + 6);
    let examples: Vec<AlignedExample> = (0..2)
        .map(|_| {
            let len = r.random_range(2..=5);
            let targets: Vec<usize> = (0..len).map(|_| r.random_range(STAR..t.vocab.len())).collect();
            AlignedExample {
                phoneme_posteriors: random_posteriors(&mut r, len, 3),
                word_targets: LabelSequence::new(targets, Vocabulary::Word),
            }
        })
        .collect();
    check(&t.params, seed, 6, |g, s| {
        let mut m = t.clone();
        m.params = s.clone();
        let batch: Vec<&AlignedExample> = examples.iter().collect();
        Ok(m.batch_loss(g, &batch, true)?.0)
    })
}
