//! Single-layer LSTM cell over flat parameter slices.
//!
//! Weights are one `4h × (d + h)` row-major matrix acting on `[x; h_prev]`,
//! gate blocks stacked input, forget, output, candidate; bias is `4h`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub input: usize,
    pub hidden: usize,
}

impl CellDims {
    pub fn weight_len(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden)
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + 4 * self.hidden
    }

    /// `param_len` plus room for a `hidden + 1` head, or `None` when that
    /// does not fit in `usize`.
    pub fn checked_param_len(&self) -> Option<usize> {
        let four_h = self.hidden.checked_mul(4)?;
        four_h
            .checked_mul(self.input.checked_add(self.hidden)?)?
            .checked_add(four_h)?
            .checked_add(self.hidden)?
            .checked_add(1)
    }
}

#[derive(Clone, Copy)]
pub struct CellParams<'a> {
    pub dims: CellDims,
    pub w: &'a [f64],
    pub b: &'a [f64],
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub struct StepCache {
    xh: Vec<f64>,
    /// Activated gates `[i, f, o, g]`.
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One step from `(h_prev, c_prev)` on input `x`. Returns `(h, c, cache)`.
pub fn step(
    p: CellParams<'_>,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>, StepCache) {
    let CellDims {
        input: d,
        hidden: h,
    } = p.dims;
    debug_assert_eq!(x.len(), d);
    let cols = d + h;
    let mut xh = Vec::with_capacity(cols);
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_prev);

    let mut gates: Vec<f64> =
        p.w.chunks_exact(cols)
            .zip(p.b)
            .map(|(row, &bias)| bias + dot(row, &xh))
            .collect();
    for (k, a) in gates.iter_mut().enumerate() {
        *a = if k < 3 * h { sigmoid(*a) } else { a.tanh() };
    }
    let (ifo, g) = gates.split_at(3 * h);
    let (i, fo) = ifo.split_at(h);
    let (f, o) = fo.split_at(h);

    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut h_new = vec![0.0; h];
    for k in 0..h {
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = c[k].tanh();
        h_new[k] = o[k] * tanh_c[k];
    }
    let cache = StepCache {
        xh,
        gates,
        c_prev: c_prev.to_vec(),
        tanh_c,
    };
    (h_new, c, cache)
}

/// Forward pass from the zero state.
#[derive(Clone, Debug)]
pub struct Trace {
    pub hidden: Vec<Vec<f64>>,
    caches: Vec<StepCache>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

pub fn forward<'x>(p: CellParams<'_>, inputs: impl IntoIterator<Item = &'x [f64]>) -> Trace {
    let h = p.dims.hidden;
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut hidden = Vec::new();
    let mut caches = Vec::new();
    for x in inputs {
        let (h_new, c_new, cache) = step(p, x, &h_prev, &c_prev);
        hidden.push(h_new.clone());
        caches.push(cache);
        h_prev = h_new;
        c_prev = c_new;
    }
    Trace { hidden, caches }
}

/// Backpropagation through time. `dh[t]` is the loss gradient flowing into
/// `hidden[t]` from outside the recurrence. Accumulates into `gw`/`gb` and
/// returns the gradient with respect to the first input.
pub fn backward(
    p: CellParams<'_>,
    trace: &Trace,
    dh: &[Vec<f64>],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let CellDims {
        input: d,
        hidden: h,
    } = p.dims;
    let cols = d + h;
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    let mut dx_first = vec![0.0; d];
    for t in (0..trace.len()).rev() {
        let cache = &trace.caches[t];
        let g = &cache.gates;
        for k in 0..h {
            let (i, f, o, gg) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tc = cache.tanh_c[k];
            let dhk = dh[t][k] + dh_next[k];
            let dc = dc_next[k] + dhk * o * (1.0 - tc * tc);
            da[k] = dc * gg * i * (1.0 - i);
            da[h + k] = dc * cache.c_prev[k] * f * (1.0 - f);
            da[2 * h + k] = dhk * tc * o * (1.0 - o);
            da[3 * h + k] = dc * i * (1.0 - gg * gg);
            dc_next[k] = dc * f;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        let want_dx = t == 0;
        for (r, &dar) in da.iter().enumerate() {
            gb[r] += dar;
            let row = &p.w[r * cols..(r + 1) * cols];
            let grow = &mut gw[r * cols..(r + 1) * cols];
            for (gv, &xv) in grow.iter_mut().zip(&cache.xh) {
                *gv += dar * xv;
            }
            for (dn, &wv) in dh_next.iter_mut().zip(&row[d..]) {
                *dn += dar * wv;
            }
            if want_dx {
                for (dx, &wv) in dx_first.iter_mut().zip(&row[..d]) {
                    *dx += dar * wv;
                }
            }
        }
    }
    dx_first
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
