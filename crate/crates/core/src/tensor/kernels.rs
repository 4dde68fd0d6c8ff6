//! Slice-level numeric kernels shared by the tape and the cached inference path.
//!
//! All matrices are row-major. Loops are ordered so the innermost loop is a
//! contiguous axpy or dot, which the compiler vectorizes.

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `[m×k]` and `b` is `[n×k]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, m, k, n, out);
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise layer normalization over the last dimension `d`.
/// Returns `(y, mean, rstd)`; `mean` and `rstd` have one entry per row.
pub fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let yr = &mut y[r * d..(r + 1) * d];
        for c in 0..d {
            yr[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Smooth (tanh) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place softmax over contiguous rows of length `n`.
pub fn softmax_rows(x: &mut [f64], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Layout and masking of one fused attention call over `[groups, seq, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub groups: usize,
    pub seq: usize,
    pub d: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Whether query `i` may attend to key `j` in group `g`.
    #[inline]
    pub fn allowed(&self, key_valid: Option<&[bool]>, g: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        j == i || key_valid.map_or(true, |kv| kv[g * self.seq + j])
    }
}

/// Multi-head scaled dot-product attention with optional causal and key masks.
///
/// Returns `(out, probs)` where `probs` is `[groups, heads, seq, seq]` (zero at
/// disallowed pairs). `keep`, when given, is an inverted-dropout multiplier per
/// probability entry applied after the softmax.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: AttnDims,
    key_valid: Option<&[bool]>,
    keep: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        groups, seq, d, heads, ..
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; groups * seq * d];
    let mut probs = vec![0.0; groups * heads * seq * seq];
    let mut scores = vec![0.0; seq];
    for g in 0..groups {
        let base = g * seq * d;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let qi = &q[base + i * d + off..base + i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..seq {
                    if dims.allowed(key_valid, g, i, j) {
                        let kj = &k[base + j * d + off..base + j * d + off + dh];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let prow_off = ((g * heads + h) * seq + i) * seq;
                let mut sum = 0.0;
                for j in 0..seq {
                    if dims.allowed(key_valid, g, i, j) {
                        let e = (scores[j] - max).exp();
                        probs[prow_off + j] = e;
                        sum += e;
                    }
                }
                let inv = 1.0 / sum;
                let orow = &mut out[base + i * d + off..base + i * d + off + dh];
                for j in 0..seq {
                    let p = probs[prow_off + j] * inv;
                    probs[prow_off + j] = p;
                    if p == 0.0 {
                        continue;
                    }
                    let pe = match keep {
                        Some(kp) => p * kp[prow_off + j],
                        None => p,
                    };
                    if pe == 0.0 {
                        continue;
                    }
                    let vj = &v[base + j * d + off..base + j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pe * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] w.r.t. `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    keep: Option<&[f64]>,
    dout: &[f64],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims {
        groups, seq, d, heads, ..
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for g in 0..groups {
        let base = g * seq * d;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let prow_off = ((g * heads + h) * seq + i) * seq;
                let prow = &probs[prow_off..prow_off + seq];
                let doi = &dout[base + i * d + off..base + i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..seq {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let mult = keep.map_or(1.0, |kp| kp[prow_off + j]);
                    let vj = &v[base + j * d + off..base + j * d + off + dh];
                    let g_p = dot(doi, vj) * mult;
                    dp[j] = g_p;
                    weighted += prow[j] * g_p;
                    if mult != 0.0 {
                        let pe = prow[j] * mult;
                        let dvj = &mut dv[base + j * d + off..base + j * d + off + dh];
                        for (o, &gv) in dvj.iter_mut().zip(doi) {
                            *o += pe * gv;
                        }
                    }
                }
                let qi_start = base + i * d + off;
                for j in 0..seq {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_start = base + j * d + off;
                    for c in 0..dh {
                        dq[qi_start + c] += ds * k[kj_start + c];
                        dk[kj_start + c] += ds * q[qi_start + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
