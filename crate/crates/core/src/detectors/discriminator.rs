//! LSTM encoder, mean-pooled over time, with a logistic head.

use rand::distributions::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ItemId;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::neuralnet::cell::{self, dot, sigmoid, CellDims, CellParams};
use crate::neuralnet::Gradients;
use crate::rng;

const GRAD_CHUNK: usize = 16;

/// Flat layout: cell weights, cell bias, head weights (`h`), head bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    dims: CellDims,
    values: Vec<f64>,
}

impl DiscriminatorParams {
    pub fn param_len(dims: CellDims) -> usize {
        dims.param_len() + dims.hidden + 1
    }

    pub fn init(dims: CellDims, seed: u64) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.checked_param_len().is_none() {
            return Err(Error::Shape(format!(
                "degenerate discriminator dimensions {dims:?}"
            )));
        }
        let mut values = vec![0.0; Self::param_len(dims)];
        let k = 1.0 / (dims.hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-k, k);
        let mut rng = rng::seeded(seed);
        let wl = dims.weight_len();
        for v in &mut values[..wl] {
            *v = dist.sample(&mut rng);
        }
        values[wl + dims.hidden..wl + 2 * dims.hidden].fill(1.0);
        let head = dims.param_len();
        for v in &mut values[head..head + dims.hidden] {
            *v = dist.sample(&mut rng);
        }
        Ok(DiscriminatorParams { dims, values })
    }

    pub fn from_values(dims: CellDims, values: Vec<f64>) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.checked_param_len() != Some(values.len()) {
            return Err(Error::Shape(format!(
                "discriminator {dims:?} needs {:?} parameters, got {}",
                dims.checked_param_len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("discriminator parameters".into()));
        }
        Ok(DiscriminatorParams { dims, values })
    }

    pub fn dims(&self) -> CellDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn cell(&self) -> CellParams<'_> {
        let wl = self.dims.weight_len();
        CellParams {
            dims: self.dims,
            w: &self.values[..wl],
            b: &self.values[wl..self.dims.param_len()],
        }
    }

    fn head(&self) -> (&[f64], f64) {
        let s = self.dims.param_len();
        (
            &self.values[s..s + self.dims.hidden],
            self.values[s + self.dims.hidden],
        )
    }

    fn check(&self, emb: &EmbeddingTable, items: &[ItemId]) -> Result<()> {
        if emb.dim() != self.dims.input {
            return Err(Error::Shape(format!(
                "embedding dim {} does not match discriminator input {}",
                emb.dim(),
                self.dims.input
            )));
        }
        if items.is_empty() {
            return Err(Error::invalid("cannot score an empty session"));
        }
        if let Some(&bad) = items.iter().find(|&&v| v as usize >= emb.num_items()) {
            return Err(Error::invalid(format!("item {bad} has no embedding")));
        }
        Ok(())
    }

    fn pooled(&self, trace: &cell::Trace) -> Vec<f64> {
        let mut pooled = vec![0.0; self.dims.hidden];
        for h in &trace.hidden {
            pooled.iter_mut().zip(h).for_each(|(p, v)| *p += v);
        }
        let k = trace.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= k);
        pooled
    }
}

fn logit(params: &DiscriminatorParams, emb: &EmbeddingTable, items: &[ItemId]) -> f64 {
    let trace = cell::forward(params.cell(), items.iter().map(|&v| emb.row(v)));
    let (w, b) = params.head();
    b + dot(w, &params.pooled(&trace))
}

/// Probability that `items` is a real session, kept strictly inside (0, 1).
pub fn discriminator_score(
    params: &DiscriminatorParams,
    emb: &EmbeddingTable,
    items: &[ItemId],
) -> Result<f64> {
    params.check(emb, items)?;
    let z = logit(params, emb, items);
    if !z.is_finite() {
        return Err(Error::NonFinite("discriminator score".into()));
    }
    Ok(sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

/// Mean binary cross-entropy of `batch` against `labels` (1 = real) and its
/// exact gradient. Embeddings receive no gradient.
pub fn discriminator_backward<S: AsRef<[ItemId]> + Sync>(
    params: &DiscriminatorParams,
    emb: &EmbeddingTable,
    batch: &[S],
    labels: &[f64],
) -> Result<Gradients> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} sequences with {} labels",
            batch.len(),
            labels.len()
        )));
    }
    for s in batch {
        params.check(emb, s.as_ref())?;
    }
    let n = params.values.len();
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(GRAD_CHUNK)
        .zip(labels.par_chunks(GRAD_CHUNK))
        .map(|(seqs, ys)| {
            let mut grads = vec![0.0; n];
            let mut loss = 0.0;
            for (s, &y) in seqs.iter().zip(ys) {
                loss += sequence_grad(params, emb, s.as_ref(), y, scale, &mut grads);
            }
            (loss, grads)
        })
        .collect();
    let mut grads = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("discriminator backward pass".into()));
    }
    Ok(Gradients { loss, grads })
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sequence_grad(
    params: &DiscriminatorParams,
    emb: &EmbeddingTable,
    items: &[ItemId],
    y: f64,
    scale: f64,
    grads: &mut [f64],
) -> f64 {
    let dims = params.dims;
    let h = dims.hidden;
    let trace = cell::forward(params.cell(), items.iter().map(|&v| emb.row(v)));
    let pooled = params.pooled(&trace);
    let (w, b) = params.head();
    let z = b + dot(w, &pooled);
    // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
    let loss = scale * (softplus(z) - y * z);
    let dz = scale * (sigmoid(z) - y);

    let (gcell, ghead) = grads.split_at_mut(dims.param_len());
    for q in 0..h {
        ghead[q] += dz * pooled[q];
    }
    ghead[h] += dz;
    let k = trace.len() as f64;
    let dh_t: Vec<f64> = w.iter().map(|&wq| dz * wq / k).collect();
    let dh = vec![dh_t; trace.len()];
    let (gw, gb) = gcell.split_at_mut(dims.weight_len());
    cell::backward(params.cell(), &trace, &dh, gw, gb);
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::test_support::{random_embeddings, random_sessions};
    use rand::Rng;

    fn dims() -> CellDims {
        CellDims {
            input: 8,
            hidden: 8,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1u64, 2] {
            let p = DiscriminatorParams::init(dims(), seed).unwrap();
            let emb = random_embeddings(20, 8, seed + 10);
            let batch = random_sessions(4, 5, 20, seed + 20);
            let mut rng = rng::seeded(seed);
            let labels: Vec<f64> = (0..4)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let g = discriminator_backward(&p, &emb, &batch, &labels).unwrap();
            let eps = 1e-3;
            let loss_at = |idx: usize, delta: f64| {
                let mut q = p.clone();
                q.values[idx] += delta;
                discriminator_backward(&q, &emb, &batch, &labels)
                    .unwrap()
                    .loss
            };
            for idx in 0..p.values.len() {
                let numeric = (loss_at(idx, -2.0 * eps) - 8.0 * loss_at(idx, -eps)
                    + 8.0 * loss_at(idx, eps)
                    - loss_at(idx, 2.0 * eps))
                    / (12.0 * eps);
                let a = g.grads[idx];
                let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
                assert!(rel <= 1e-4, "param {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn loss_is_bce_of_scores() {
        let p = DiscriminatorParams::init(dims(), 3).unwrap();
        let emb = random_embeddings(20, 8, 4);
        let batch = random_sessions(6, 5, 20, 5);
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let g = discriminator_backward(&p, &emb, &batch, &labels).unwrap();
        let mut expected = 0.0;
        for (s, y) in batch.iter().zip(labels) {
            let d = discriminator_score(&p, &emb, s).unwrap();
            expected -= y * d.ln() + (1.0 - y) * (1.0 - d).ln();
        }
        assert!((g.loss - expected / 6.0).abs() < 1e-12);
    }

    #[test]
    fn score_stays_inside_unit_interval() {
        let mut p = DiscriminatorParams::init(dims(), 3).unwrap();
        let emb = random_embeddings(20, 8, 4);
        for scale in [1.0, 1e3, -1e3] {
            let head = p.dims.param_len();
            for v in &mut p.values[head..] {
                *v = scale;
            }
            let d = discriminator_score(&p, &emb, &[1, 2, 3]).unwrap();
            assert!(d > 0.0 && d < 1.0);
        }
        assert!(discriminator_score(&p, &emb, &[]).is_err());
        assert!(discriminator_score(&p, &emb, &[20]).is_err());
    }

    #[test]
    fn flipping_labels_matches_negating_the_head() {
        // BCE(z, 1 - y) = BCE(-z, y), and negating the head negates z
        let p = DiscriminatorParams::init(dims(), 5).unwrap();
        let emb = random_embeddings(20, 8, 6);
        let batch = random_sessions(5, 5, 20, 7);
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0];
        let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
        let mut q = p.clone();
        let head = q.dims.param_len();
        q.values[head..].iter_mut().for_each(|v| *v = -*v);
        let a = discriminator_backward(&p, &emb, &batch, &flipped).unwrap();
        let b = discriminator_backward(&q, &emb, &batch, &labels).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for s in &batch {
            let d = discriminator_score(&p, &emb, s).unwrap();
            assert!((d + discriminator_score(&q, &emb, s).unwrap() - 1.0).abs() < 1e-12);
        }
        // head gradients flip sign, cell gradients agree
        for (k, (ga, gb)) in a.grads.iter().zip(&b.grads).enumerate() {
            let want = if k >= head { -gb } else { *gb };
            assert!((ga - want).abs() < 1e-12, "param {k}");
        }
    }

    #[test]
    fn oversized_dimensions_are_rejected() {
        let huge = CellDims {
            input: usize::MAX / 2,
            hidden: usize::MAX / 4,
        };
        assert!(DiscriminatorParams::from_values(huge, vec![0.0; 3]).is_err());
        assert!(DiscriminatorParams::init(huge, 1).is_err());
    }

    #[test]
    fn label_count_must_match() {
        let p = DiscriminatorParams::init(dims(), 3).unwrap();
        let emb = random_embeddings(20, 8, 4);
        assert!(discriminator_backward(&p, &emb, &[vec![1, 2]], &[1.0, 0.0]).is_err());
    }
}
