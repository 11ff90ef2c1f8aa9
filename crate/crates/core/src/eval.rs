//! Error rates and the clustering probe for learned representations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Utterance;
use crate::tensor::Tensor;
use crate::unidata2vec::UniData2vecModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn rate(&self) -> f64 {
        self.distance as f64 / self.reference_len as f64
    }

    pub fn accumulate(&mut self, other: &EditCounts) {
        self.distance += other.distance;
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Unit-cost Levenshtein distance with an operation breakdown. When several
/// alignments are optimal the backtrace takes substitutions first, then
/// insertions, then deletions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("reference sequence is empty".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d.iter_mut().enumerate().take(w) {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let mut c = EditCounts {
        distance: d[n * w + m],
        reference_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(differ) {
                c.substitutions += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == d[i * w + j - 1] + 1 {
            c.insertions += 1;
            j -= 1;
        } else {
            c.deletions += 1;
            i -= 1;
        }
    }
    Ok(c)
}

/// Phoneme error rate of one utterance.
pub fn per(reference: &[usize], hyp: &[usize]) -> Result<f64> {
    Ok(edit_distance(reference, hyp)?.rate())
}

/// Word error rate of one sentence.
pub fn wer<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> Result<f64> {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&r, &h)?.rate())
}

/// Corpus-level error rate: total edits over total reference length.
pub fn corpus_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for (r, h) in pairs {
        total.accumulate(&edit_distance(r, h)?);
    }
    if total.reference_len == 0 {
        return Err(Error::InvalidArgument("no references to score".into()));
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    /// Objective (sum of squared distances) after every assignment pass.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from a seeded k-means++ start.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, iters: usize) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let dim = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                if v > 0.0 && u < v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a centre: take any unused index
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centroids = points.select_rows(&chosen);
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut obj = 0.0;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, d) = nearest(points.row(i), &centroids);
            obj += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        objective,
    })
}

/// Best of `restarts` seeded runs by final objective (at least one run).
pub fn kmeans_restarts(points: &Tensor, k: usize, seed: u64, iters: usize, restarts: usize) -> Result<KMeans> {
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let km = kmeans(points, k, crate::synth::derive_seed(seed, r as u64), iters)?;
        let better = match &best {
            Some(b) => km.objective.last() < b.objective.last(),
            None => true,
        };
        if better {
            best = Some(km);
        }
    }
    Ok(best.expect("at least one run"))
}

/// `table[c][p]` = number of items in cluster `c` with label `p`.
pub fn contingency(assignments: &[usize], labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if assignments.len() != labels.len() {
        return Err(Error::shape("contingency", &[assignments.len()], &[labels.len()]));
    }
    let nc = assignments.iter().max().map_or(0, |m| m + 1);
    let nl = labels.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0usize; nl]; nc];
    for (&a, &l) in assignments.iter().zip(labels) {
        t[a][l] += 1;
    }
    Ok(t)
}

fn purity_of(table: &[Vec<usize>]) -> f64 {
    let n: usize = table.iter().flatten().sum();
    let hit: usize = table.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

fn pnmi_of(table: &[Vec<usize>]) -> f64 {
    let n: usize = table.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let nl = table.first().map_or(0, Vec::len);
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col: Vec<f64> = (0..nl).map(|p| table.iter().map(|r| r[p]).sum::<usize>() as f64).collect();
    let h_label: f64 = col.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum();
    if h_label <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (c, r) in table.iter().enumerate() {
        for (p, &v) in r.iter().enumerate() {
            if v > 0 {
                let pj = v as f64 / n;
                mi += pj * (pj * n * n / (row[c] * col[p])).ln();
            }
        }
    }
    (mi / h_label).clamp(0.0, 1.0)
}

/// Fraction of items whose label is the majority label of their cluster.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(purity_of(&contingency(assignments, labels)?))
}

/// Mutual information between clusters and labels divided by the label
/// entropy. Defined as 0 when the labels carry no entropy.
pub fn pnmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(pnmi_of(&contingency(assignments, labels)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub k: usize,
    pub purity: f64,
    pub nmi: f64,
    /// Purity of the same clustering scored against a random permutation
    /// of the frame labels.
    pub shuffled_purity: f64,
    pub frames: usize,
    pub contingency: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub k: usize,
    pub seed: u64,
    pub iters: usize,
    pub restarts: usize,
}

/// Encoder-frame representations of teacher `layer` (0 = input to the first
/// layer) and the ground-truth phoneme at each frame's receptive-field
/// centre.
pub fn layer_frames(model: &UniData2vecModel, utterances: &[Utterance], layer: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for u in utterances {
        if u.frame_labels.len() != u.frames() {
            return Err(Error::Manifest(format!("utterance {} has no frame labels", u.id)));
        }
        let h = model.teacher_layer_output(&u.features, layer)?;
        let centers = model.config.frame_centers(u.frames());
        for (t, &c) in centers.iter().enumerate() {
            rows.extend_from_slice(h.row(t));
            labels.push(u.frame_labels[c]);
        }
    }
    let n = labels.len();
    Ok((Tensor::matrix(n, model.config.dim, rows)?, labels))
}

/// Clusters each requested layer's frames and scores them against phone
/// labels.
pub fn probe_layers(
    model: &UniData2vecModel,
    utterances: &[Utterance],
    layers: &[usize],
    opts: ProbeOptions,
) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        if layer > model.config.layers {
            return Err(Error::InvalidArgument(format!(
                "probe layer {layer} outside 0..={}",
                model.config.layers
            )));
        }
        let (x, labels) = layer_frames(model, utterances, layer)?;
        let km = kmeans_restarts(&x, opts.k, opts.seed, opts.iters, opts.restarts)?;
        let table = contingency(&km.assignments, &labels)?;
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed));
        out.push(ProbeReport {
            layer,
            k: opts.k,
            purity: purity_of(&table),
            nmi: pnmi_of(&table),
            shuffled_purity: cluster_purity(&km.assignments, &shuffled)?,
            frames: labels.len(),
            contingency: table,
        });
    }
    Ok(out)
}

/// Tab-separated `layer k purity nmi shuffled_purity` table with a header.
pub fn probe_table(reports: &[ProbeReport]) -> String {
    let mut s = String::from("layer\tk\tpurity\tnmi\tshuffled_purity\n");
    for r in reports {
        s.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.layer, r.k, r.purity, r.nmi, r.shuffled_purity
        ));
    }
    s
}
