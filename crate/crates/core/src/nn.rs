//! Parameter storage and the layers both models are built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Named parameters, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    /// Parameters under `prefix`, with the prefix stripped from their names.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every parameter of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.params.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Checks that both stores have identical names and shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        let only_left: Vec<String> = self
            .params
            .keys()
            .filter(|k| !other.params.contains_key(*k))
            .cloned()
            .collect();
        let only_right: Vec<String> = other
            .params
            .keys()
            .filter(|k| !self.params.contains_key(*k))
            .cloned()
            .collect();
        if !only_left.is_empty() || !only_right.is_empty() {
            return Err(Error::ParameterMismatch {
                only_left,
                only_right,
            });
        }
        for (k, v) in &self.params {
            let o = &other.params[k];
            if v.shape() != o.shape() {
                return Err(Error::shape("parameter layout", v.shape(), o.shape()));
            }
        }
        Ok(())
    }
}

/// Where a forward pass reads its parameters from.
///
/// Trainable scopes register named graph parameters; frozen scopes feed the
/// same tensors in as plain inputs, so nothing is reported for them by
/// [`Graph::backward`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
    trainable: bool,
}

impl<'a> Scope<'a> {
    pub fn trainable(store: &'a ParamStore, prefix: &str) -> Self {
        Scope {
            store,
            prefix: prefix.to_string(),
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore, prefix: &str) -> Self {
        Scope {
            store,
            prefix: prefix.to_string(),
            trainable: false,
        }
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: format!("{}{name}.", self.prefix),
            trainable: self.trainable,
        }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let key = format!("{}{name}", self.prefix);
        let t = self.store.require(&key)?;
        if self.trainable {
            g.param(&key, t)
        } else {
            g.input(t.clone())
        }
    }
}

/// Writes freshly initialized parameters into a store.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let w = self.normal(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        self.store.insert(format!("{name}.w"), w);
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }

    pub fn conv(&mut self, name: &str, kernel: usize, in_ch: usize, out_ch: usize) {
        self.linear(name, kernel * in_ch, out_ch, true);
    }

    pub fn vector(&mut self, name: &str, dim: usize, std: f64) {
        let v = self.normal(&[dim], std);
        self.store.insert(name, v);
    }

    pub fn attention(&mut self, name: &str, dim: usize) {
        for p in ["wq", "wk", "wv", "wo"] {
            self.linear(&format!("{name}.{p}"), dim, dim, true);
        }
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, inner: usize) {
        self.linear(&format!("{name}.fc1"), dim, inner, true);
        self.linear(&format!("{name}.fc2"), inner, dim, true);
    }

    /// Pre-norm transformer layer: attention and feed-forward sublayers.
    pub fn transformer_layer(&mut self, name: &str, dim: usize, inner: usize) {
        self.layer_norm(&format!("{name}.ln1"), dim);
        self.attention(&format!("{name}.attn"), dim);
        self.layer_norm(&format!("{name}.ln2"), dim);
        self.feed_forward(&format!("{name}.ffn"), dim, inner);
    }
}

pub fn linear(g: &mut Graph, p: &Scope, x: Var) -> Result<Var> {
    let w = p.var(g, "w")?;
    let y = g.matmul(x, w)?;
    match p.store.get(&format!("{}b", p.prefix)) {
        Some(_) => {
            let b = p.var(g, "b")?;
            g.add_row(y, b)
        }
        None => Ok(y),
    }
}

pub fn layer_norm(g: &mut Graph, p: &Scope, x: Var) -> Result<Var> {
    let gamma = p.var(g, "gamma")?;
    let beta = p.var(g, "beta")?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// 1-D convolution over time of a `[T×C_in]` sequence, via im2col.
pub fn conv1d(
    g: &mut Graph,
    p: &Scope,
    x: Var,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let cols = g.unfold(x, kernel, stride, padding)?;
    linear(g, p, cols)
}

pub fn feed_forward(g: &mut Graph, p: &Scope, x: Var) -> Result<Var> {
    let h = linear(g, &p.sub("fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, &p.sub("fc2"), h)
}

/// Scaled dot-product attention weights `softmax(q·kᵀ/√d)` with keys
/// hidden wherever `key_mask` is true.
pub fn attention_probs(g: &mut Graph, q: Var, k: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    let d = g.value(q).cols();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    if let Some(mask) = key_mask {
        if mask.iter().any(|&m| m) {
            let (rows, cols) = (g.value(scores).rows(), g.value(scores).cols());
            if mask.len() != cols {
                return Err(Error::shape("attention mask", &[cols], &[mask.len()]));
            }
            if mask.iter().all(|&m| m) {
                return Err(Error::InvalidArgument("attention mask hides every key".into()));
            }
            let mut bias = Tensor::zeros(&[rows, cols]);
            for r in 0..rows {
                for (c, &m) in mask.iter().enumerate() {
                    if m {
                        bias.row_mut(r)[c] = -1e9;
                    }
                }
            }
            scores = g.add_const(scores, &bias)?;
        }
    }
    g.softmax(scores)
}

/// Multi-head self-attention over an `[L×D]` sequence.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Scope,
    x: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let dim = g.value(x).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads do not divide model dimension {dim}"
        )));
    }
    let q = linear(g, &p.sub("wq"), x)?;
    let k = linear(g, &p.sub("wk"), x)?;
    let v = linear(g, &p.sub("wv"), x)?;
    let hd = dim / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.col_slice(q, h * hd, hd)?,
                g.col_slice(k, h * hd, hd)?,
                g.col_slice(v, h * hd, hd)?,
            )
        };
        let probs = attention_probs(g, qh, kh, key_mask)?;
        outs.push(g.matmul(probs, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, &p.sub("wo"), cat)
}

pub fn transformer_layer(
    g: &mut Graph,
    p: &Scope,
    x: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let h = layer_norm(g, &p.sub("ln1"), x)?;
    let h = multi_head_attention(g, &p.sub("attn"), h, heads, key_mask)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, &p.sub("ln2"), x)?;
    let h = feed_forward(g, &p.sub("ffn"), h)?;
    g.add(x, h)
}

/// Sinusoidal position table `[len×dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

/// Normalizes every column of `[T×D]` over time to zero mean, unit variance.
pub fn instance_norm(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for c in 0..d {
        let mean = (0..t).map(|r| x.get(r, c)).sum::<f64>() / t as f64;
        let var = (0..t).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / t as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for r in 0..t {
            out.data_mut()[r * d + c] = (x.get(r, c) - mean) * is;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store_with_attention(dim: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Init {
            store: &mut store,
            rng: &mut rng,
        }
        .attention("attn", dim);
        store
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn all_false_mask_equals_unmasked() {
        let store = store_with_attention(8);
        let x = random_input(5, 8, 1);
        let run = |mask: Option<&[bool]>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone()).unwrap();
            let y = multi_head_attention(&mut g, &Scope::frozen(&store, "attn."), xv, 2, mask).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(None), run(Some(&[false; 5])));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::new();
        let q = g.input(random_input(4, 3, 2)).unwrap();
        let k = g.input(random_input(4, 3, 5)).unwrap();
        let p = attention_probs(&mut g, q, k, Some(&[false, true, false, true])).unwrap();
        let w = g.value(p);
        for r in 0..4 {
            assert_eq!(w.get(r, 1), 0.0);
            assert_eq!(w.get(r, 3), 0.0);
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let store = store_with_attention(6);
        let mut g = Graph::new();
        let x = g.input(random_input(3, 6, 1)).unwrap();
        assert!(multi_head_attention(&mut g, &Scope::frozen(&store, "attn."), x, 4, None).is_err());
    }

    #[test]
    fn instance_norm_columns_are_standardized() {
        let x = random_input(7, 3, 9);
        let y = instance_norm(&x);
        for c in 0..3 {
            let col: Vec<f64> = (0..7).map(|r| y.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_scope_reports_no_gradients() {
        let store = store_with_attention(4);
        let mut g = Graph::new();
        let x = g.input(random_input(3, 4, 1)).unwrap();
        let y = multi_head_attention(&mut g, &Scope::frozen(&store, "attn."), x, 2, None).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.params().is_empty());
        assert!(grads.wrt(x).is_some());
    }
}
