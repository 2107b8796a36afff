//! Slow `f64` reference implementations used as independent oracles by the
//! test suites.
//!
//! Everything here is written as plain nested loops over `f64` slices and
//! shares no code with the `f32` tape path it is used to check. Gradient
//! checks perturb parameters of these functions with central finite
//! differences; value checks compare the tape output against the loop
//! evaluation of the same equations.

use alloc::vec;
use alloc::vec::Vec;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax along `axis` of a tensor with the given shape.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f64; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = libm::exp(x[at(j)] - max);
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + libm::exp(-v))).collect()
}

/// y[:, n] = w x[:, n] + b.
pub fn conv1x1(x: &[f64], w: &[f64], b: &[f64], c_in: usize, c_out: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; c_out * n];
    for o in 0..c_out {
        for p in 0..n {
            let mut acc = b[o];
            for c in 0..c_in {
                acc += w[o * c_in + c] * x[c * n + p];
            }
            out[o * n + p] = acc;
        }
    }
    out
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        acc += (p - t) * (p - t);
    }
    acc / pred.len() as f64
}

pub fn bce_with_logits(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &t) in pred.iter().zip(target) {
        acc += x.max(0.0) - x * t + libm::log1p(libm::exp(-libm::fabs(x)));
    }
    acc / pred.len() as f64
}

/// Logits are classes x positions; one class index per position.
pub fn softmax_cross_entropy(logits: &[f64], classes: &[usize], c: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for p in 0..n {
        let mut max = f64::NEG_INFINITY;
        for ci in 0..c {
            max = max.max(logits[ci * n + p]);
        }
        let mut sum = 0.0;
        for ci in 0..c {
            sum += libm::exp(logits[ci * n + p] - max);
        }
        total += libm::log(sum) - (logits[classes[p] * n + p] - max);
    }
    total / n as f64
}

/// Weights of one Lambda layer, widened to `f64`.
#[derive(Clone, Debug, Default)]
pub struct LayerWeights {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub a: Vec<f64>,
    /// Per-pair positional gains, one row per output channel.
    pub pos_gain: Vec<f64>,
    /// Optional projection of the encoding into the input width.
    pub pe_proj: Option<Vec<f64>>,
    pub k2: Vec<f64>,
    pub v2: Vec<f64>,
}

/// Which inputs the key / query / value projections see and whether the
/// positional output path is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    ContentOnly,
    SumQkv,
    SumQv,
    Decor,
}

/// Dimensions of one layer evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub c_in: usize,
    pub c_out: usize,
    pub m: usize,
    pub c_pe: usize,
    pub n: usize,
    /// Extra coordinate rows already appended to the input by the caller.
    pub coord_rows: usize,
}

impl LayerDims {
    /// Width seen by the projections (input plus coordinate rows).
    pub fn c_key(&self) -> usize {
        self.c_in + self.coord_rows
    }
}

fn add_encoding(x: &[f64], p_in: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for r in 0..rows {
        for i in 0..n {
            out[r * n + i] += p_in[r * n + i];
        }
    }
    out
}

/// Encoding summed into the feature map for the sum paths, projected to the
/// input width when the widths differ.
fn summed_encoding(w: &LayerWeights, p: &[f64], dims: LayerDims) -> Vec<f64> {
    let ck = dims.c_key();
    match &w.pe_proj {
        Some(proj) => matmul(proj, p, ck, dims.c_pe, dims.n),
        None => p.to_vec(),
    }
}

/// Input the key projection sees.
pub fn key_input(x: &[f64], w: &LayerWeights, p: Option<&[f64]>, dims: LayerDims, path: PathKind) -> Vec<f64> {
    match path {
        PathKind::SumQkv => {
            let pi = summed_encoding(w, p.expect("sum path needs an encoding"), dims);
            add_encoding(x, &pi, dims.c_key(), dims.n)
        }
        _ => x.to_vec(),
    }
}

/// Input the query and value projections see.
pub fn qv_input(x: &[f64], w: &LayerWeights, p: Option<&[f64]>, dims: LayerDims, path: PathKind) -> Vec<f64> {
    match path {
        PathKind::SumQkv | PathKind::SumQv => {
            let pi = summed_encoding(w, p.expect("sum path needs an encoding"), dims);
            add_encoding(x, &pi, dims.c_key(), dims.n)
        }
        _ => x.to_vec(),
    }
}

/// The layer equations evaluated step by step in `f64`.
///
/// `x` already carries coordinate rows when `dims.coord_rows > 0`; `p` is the
/// encoding (required unless `path` is `ContentOnly`). `khat` optionally
/// replaces the learned key matrix (two-pass variant).
pub fn lambda_layer(
    x: &[f64],
    w: &LayerWeights,
    p: Option<&[f64]>,
    dims: LayerDims,
    path: PathKind,
    khat: Option<&[f64]>,
) -> Vec<f64> {
    let ck = dims.c_key();
    let (m, n, c_out, c_pe) = (dims.m, dims.n, dims.c_out, dims.c_pe);

    let xk = key_input(x, w, p, dims, path);
    let xqv = qv_input(x, w, p, dims, path);

    let key = khat.unwrap_or(&w.k);
    let kx = matmul(key, &xk, m, ck, n);
    let kbar = softmax_axis(&kx, &[m, n], 1);

    let vx = matmul(&w.v, &xqv, c_out, ck, n);
    // lambda_content[m, o] = sum_n kbar[m, n] vx[o, n]
    let mut lam_c = vec![0.0f64; m * c_out];
    for mi in 0..m {
        for o in 0..c_out {
            let mut acc = 0.0;
            for i in 0..n {
                acc += kbar[mi * n + i] * vx[o * n + i];
            }
            lam_c[mi * c_out + o] = acc;
        }
    }

    let qx = matmul(&w.q, &xqv, m, ck, n);
    // y_content[o, n] = sum_m lam_c[m, o] qx[m, n]
    let mut y = vec![0.0f64; c_out * n];
    for o in 0..c_out {
        for i in 0..n {
            let mut acc = 0.0;
            for mi in 0..m {
                acc += lam_c[mi * c_out + o] * qx[mi * n + i];
            }
            y[o * n + i] = acc;
        }
    }

    if path == PathKind::Decor {
        let p = p.expect("decor path needs an encoding");
        // lam_pos[o, c] = sum_m sum_n a[o, m] kbar[m, n] p[c, n]
        let mut lam_pos = vec![0.0f64; c_out * c_pe];
        for o in 0..c_out {
            for c in 0..c_pe {
                let mut acc = 0.0;
                for mi in 0..m {
                    let mut inner = 0.0;
                    for i in 0..n {
                        inner += kbar[mi * n + i] * p[c * n + i];
                    }
                    acc += w.a[o * m + mi] * inner;
                }
                lam_pos[o * c_pe + c] = acc;
            }
        }
        // paired spectral gains, then y_pos = lam_pos P
        for o in 0..c_out {
            for c in 0..c_pe {
                lam_pos[o * c_pe + c] *= w.pos_gain[o * (c_pe / 2) + c / 2];
            }
        }
        for o in 0..c_out {
            for i in 0..n {
                let mut acc = 0.0;
                for c in 0..c_pe {
                    acc += lam_pos[o * c_pe + c] * p[c * n + i];
                }
                y[o * n + i] += acc;
            }
        }
    }
    y
}

/// First pass of the two-pass variant: synthesize the key matrix from the
/// same input the key path sees.
pub fn tt_context_keys(
    x: &[f64],
    w: &LayerWeights,
    p: Option<&[f64]>,
    dims: LayerDims,
    path: PathKind,
) -> Vec<f64> {
    let ck = dims.c_key();
    let (m, n) = (dims.m, dims.n);
    let xk = key_input(x, w, p, dims, path);
    let k2x = matmul(&w.k2, &xk, m, ck, n);
    let kbar2 = softmax_axis(&k2x, &[m, n], 1);
    let v2x = matmul(&w.v2, &xk, m * ck, ck, n);
    let mut khat = vec![0.0f64; m * ck];
    for mi in 0..m {
        for c in 0..ck {
            let mut acc = 0.0;
            for i in 0..n {
                acc += kbar2[mi * n + i] * v2x[(mi * ck + c) * n + i];
            }
            khat[mi * ck + c] = acc;
        }
    }
    khat
}
