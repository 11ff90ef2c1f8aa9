//! Central finite differences, the independent oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest element-wise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of [`check_param_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar objective with central
/// differences, parameter by parameter.
///
/// `build` must register every tensor of the store it receives as a
/// trainable graph parameter (for instance through
/// [`Scope::trainable`](crate::nn::Scope::trainable)) and return the scalar
/// objective. At most `coords` coordinates per tensor are probed, chosen
/// with `seed`; zero probes all of them. A parameter the objective never
/// reaches counts as having a zero gradient.
pub fn check_param_gradients<F>(
    params: &ParamStore,
    build: F,
    h: f64,
    floor: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    if g.value(loss).len() != 1 {
        return Err(Error::InvalidArgument("objective must be a scalar".into()));
    }
    let analytic = g.backward(loss)?.params();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = build(&mut g, store)?;
        let value = g.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        Ok(value)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.require(&name)?.len();
        let picked: Vec<usize> = if coords == 0 || coords >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords).into_vec()
        };
        for i in picked {
            let orig = params.require(&name)?.data()[i];
            let slot = |store: &mut ParamStore, v: f64| {
                store.get_mut(&name).expect("present").data_mut()[i] = v;
            };
            slot(&mut probe, orig + h);
            let plus = eval(&probe)?;
            slot(&mut probe, orig - h);
            let minus = eval(&probe)?;
            slot(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let err = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(floor);
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = name.clone();
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
