use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, AttnDims};
use super::{counter_uniform, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Options for the fused attention primitive.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    /// `[groups * seq]` validity of each key position; invalid keys are only
    /// visible to themselves.
    pub key_valid: Option<Rc<Vec<bool>>>,
    pub dropout: f64,
    /// Dropout stream id, unique per call site.
    pub site: u64,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, din: usize, dout: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    Sum { a: usize },
    AddRows { x: usize, table: usize, idx: Rc<Vec<usize>>, d: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64>, d: usize },
    Gelu { x: usize },
    Softmax { x: usize, outer: usize, axis: usize, inner: usize },
    Dropout { x: usize, keep: Vec<f64> },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttnDims,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    SwapAxes12 { x: usize, dims: [usize; 4] },
    Reshape { x: usize },
    SliceCols { x: usize, rows: usize, cols: usize, start: usize, len: usize },
    SoftmaxCrossEntropy { logits: usize, target: Tensor, weights: Vec<f64>, probs: Vec<f64>, classes: usize },
    GaussianNll { mean: usize, logvar: usize, target: Tensor, weights: Vec<f64>, dim: usize },
    SoftClamp { x: usize, lo: f64, hi: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], one per `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Moves the gradient of `v` out of the set.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

/// Ordered record of primitive operations.
///
/// Dropout masks are drawn from a counter-based stream addressed by
/// `(seed, site, step, element)`, so a replay with the same settings is
/// bit-identical.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    dropout_seed: u64,
    dropout_step: u64,
    training: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            dropout_seed: 0,
            dropout_step: 0,
            training: false,
        }
    }

    /// A tape with dropout enabled, drawing masks from `(seed, site, step)`.
    pub fn training(seed: u64, step: u64) -> Self {
        let mut t = Tape::new();
        t.dropout_seed = seed;
        t.dropout_step = step;
        t.training = true;
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.idx].value
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records an input tensor. Gradients are produced for it when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if let Some(index) = t.first_non_finite() {
            return Err(TensorError::NonFinite { op: "leaf", index });
        }
        let rg = t.requires_grad();
        Ok(self.push(t, Op::Leaf, rg))
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.shape(ai), self.shape(bi));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(ai), self.data(bi), m, k, n);
        let rg = self.any_grad(&[ai, bi]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a: ai, b: bi, m, k, n },
            rg,
        ))
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let sx = self.shape(xi).to_vec();
        let sw = self.shape(wi).to_vec();
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(bi) = bi {
            if self.shape(bi) != [dout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear(bias)",
                    lhs: vec![dout],
                    rhs: self.shape(bi).to_vec(),
                });
            }
        }
        let rows = self.nodes[xi].value.len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(bi) = bi {
            let bias = self.data(bi);
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(self.data(xi), self.data(wi), rows, din, dout, &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor, bool)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(op, ai, bi)?;
        let data = self
            .data(ai)
            .iter()
            .zip(self.data(bi))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(ai).to_vec(), data)?;
        Ok((ai, bi, t, self.any_grad(&[ai, bi])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t, rg) = self.zip_map(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t, rg) = self.zip_map(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a: ai, b: bi }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t, rg) = self.zip_map(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let data = self.data(ai).iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.any_grad(&[ai]);
        Ok(self.push(t, Op::Scale { a: ai, s }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.data(ai).iter().sum();
        let rg = self.any_grad(&[ai]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ai }, rg))
    }

    /// `out[r] = x[r] + table[idx[r]]` for rows of width `d`.
    pub fn add_rows(&mut self, x: Var, table: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (xi, ti) = (self.check(x)?, self.check(table)?);
        let st = self.shape(ti).to_vec();
        if st.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "add_rows",
                reason: format!("table must be rank 2, got {st:?}"),
            });
        }
        let d = st[1];
        let sx = self.shape(xi).to_vec();
        if sx.last() != Some(&d) || self.nodes[xi].value.len() / d != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows",
                lhs: sx,
                rhs: vec![idx.len(), d],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= st[0]) {
            return Err(TensorError::InvalidArgument {
                op: "add_rows",
                reason: format!("row index {bad} out of range for table of {} rows", st[0]),
            });
        }
        let mut out = self.data(xi).to_vec();
        let tab = self.data(ti);
        for (r, &k) in idx.iter().enumerate() {
            for (o, &t) in out[r * d..(r + 1) * d].iter_mut().zip(&tab[k * d..(k + 1) * d]) {
                *o += t;
            }
        }
        let rg = self.any_grad(&[xi, ti]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::AddRows {
                x: xi,
                table: ti,
                idx,
                d,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let sx = self.shape(xi).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gi) != [d] || self.shape(bi) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gi).to_vec(),
            });
        }
        let (y, mean, rstd) = kernels::layer_norm(self.data(xi), self.data(gi), self.data(bi), d);
        let rg = self.any_grad(&[xi, gi, bi]);
        Ok(self.push(
            Tensor::new(sx, y)?,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean,
                rstd,
                d,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let data = self.data(xi).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(xi).to_vec(), data)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(t, Op::Gelu { x: xi }, rg))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let sx = self.shape(xi).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for rank {}", sx.len()),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let n = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let src = self.data(xi);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for c in 0..inner {
                for a in 0..n {
                    buf[a] = src[(o * n + a) * inner + c];
                }
                kernels::softmax_rows(&mut buf, n);
                for a in 0..n {
                    out[(o * n + a) * inner + c] = buf[a];
                }
            }
        }
        let rg = self.any_grad(&[xi]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::Softmax {
                x: xi,
                outer,
                axis: n,
                inner,
            },
            rg,
        ))
    }

    fn keep_mask(&self, rate: f64, site: u64, n: usize) -> Vec<f64> {
        let scale = 1.0 / (1.0 - rate);
        (0..n)
            .map(|i| {
                if counter_uniform(self.dropout_seed, site, self.dropout_step, i as u64) < rate {
                    0.0
                } else {
                    scale
                }
            })
            .collect()
    }

    /// Inverted dropout. Identity when the tape is not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, site: u64) -> Result<Var> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !self.training || rate == 0.0 {
            return Ok(Var {
                idx: xi,
                tape: self.id,
            });
        }
        let keep = self.keep_mask(rate, site, self.nodes[xi].value.len());
        let data = self.data(xi).iter().zip(&keep).map(|(v, k)| v * k).collect();
        let t = Tensor::new(self.shape(xi).to_vec(), data)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(t, Op::Dropout { x: xi, keep }, rg))
    }

    /// Fused multi-head attention over `[groups, seq, d]` inputs: scaled
    /// scores, masking, softmax, optional dropout on the weights, value mix.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        self.same_shape("attention(q,k)", qi, ki)?;
        self.same_shape("attention(q,v)", qi, vi)?;
        let s = self.shape(qi).to_vec();
        if s.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("expected [groups, seq, d], got {s:?}"),
            });
        }
        if spec.heads == 0 || s[2] % spec.heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("d={} not divisible by heads={}", s[2], spec.heads),
            });
        }
        let dims = AttnDims {
            groups: s[0],
            seq: s[1],
            d: s[2],
            heads: spec.heads,
            causal: spec.causal,
        };
        if let Some(kv) = &spec.key_valid {
            if kv.len() != s[0] * s[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention(key_valid)",
                    lhs: vec![s[0], s[1]],
                    rhs: vec![kv.len()],
                });
            }
        }
        let keep = if self.training && spec.dropout > 0.0 {
            Some(self.keep_mask(spec.dropout, spec.site, dims.groups * dims.heads * dims.seq * dims.seq))
        } else {
            None
        };
        let (out, probs) = kernels::attention_forward(
            self.data(qi),
            self.data(ki),
            self.data(vi),
            dims,
            spec.key_valid.as_deref().map(|v| v.as_slice()),
            keep.as_deref(),
        );
        let rg = self.any_grad(&[qi, ki, vi]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                dims,
                probs,
                keep,
            },
            rg,
        ))
    }

    /// Attention weights `[groups, heads, seq, seq]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.idx)?.op {
            Op::Attention { probs, .. } if v.tape == self.id => Some(probs),
            _ => None,
        }
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.shape(xi).to_vec();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "swap_axes12",
                reason: format!("expected rank 4, got {s:?}"),
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.data(xi), dims);
        let rg = self.any_grad(&[xi]);
        Ok(self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?,
            Op::SwapAxes12 { x: xi, dims },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(t, Op::Reshape { x: xi }, rg))
    }

    /// Columns `start..start+len` of a `[rows, cols]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.shape(xi).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} out of range for {s:?}", start + len),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(xi);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.any_grad(&[xi]);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols {
                x: xi,
                rows,
                cols,
                start,
                len,
            },
            rg,
        ))
    }

    /// `Σ_r w_r · (−Σ_k target[r,k] · log softmax(logits[r])_k)` over rows of
    /// the last axis. Rows with zero weight contribute exactly nothing.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Tensor, weights: Vec<f64>) -> Result<Var> {
        let li = self.check(logits)?;
        let sl = self.shape(li).to_vec();
        if sl.as_slice() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: sl,
                rhs: target.shape().to_vec(),
            });
        }
        let classes = *sl.last().unwrap_or(&1);
        let rows = target.len() / classes.max(1);
        if weights.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy(weights)",
                lhs: vec![rows],
                rhs: vec![weights.len()],
            });
        }
        let z = self.data(li);
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let zr = &z[r * classes..(r + 1) * classes];
            let lse = kernels::log_sum_exp(zr);
            let tr = &target.data()[r * classes..(r + 1) * classes];
            let mut row_loss = 0.0;
            for c in 0..classes {
                probs[r * classes + c] = (zr[c] - lse).exp();
                if tr[c] != 0.0 {
                    row_loss -= tr[c] * (zr[c] - lse);
                }
            }
            loss += weights[r] * row_loss;
        }
        let rg = self.any_grad(&[li]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                target,
                weights,
                probs,
                classes,
            },
            rg,
        ))
    }

    /// Diagonal Gaussian negative log-likelihood summed over rows of `[rows, dim]`:
    /// `Σ_r w_r Σ_c ½[(y−μ)² e^{−lv} + lv + ln 2π]`.
    pub fn gaussian_nll(&mut self, mean: Var, logvar: Var, target: Tensor, weights: Vec<f64>) -> Result<Var> {
        let (mi, li) = (self.check(mean)?, self.check(logvar)?);
        self.same_shape("gaussian_nll", mi, li)?;
        let s = self.shape(mi).to_vec();
        if s.as_slice() != target.shape() || s.len() != 2 || weights.len() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_nll",
                lhs: s,
                rhs: target.shape().to_vec(),
            });
        }
        let dim = s[1];
        let (mu, lv, y) = (self.data(mi), self.data(li), target.data());
        let mut loss = 0.0;
        for r in 0..s[0] {
            if weights[r] == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for c in r * dim..(r + 1) * dim {
                let e = y[c] - mu[c];
                acc += 0.5 * (e * e * (-lv[c]).exp() + lv[c] + kernels::LN_2PI);
            }
            loss += weights[r] * acc;
        }
        let rg = self.any_grad(&[mi, li]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::GaussianNll {
                mean: mi,
                logvar: li,
                target,
                weights,
                dim,
            },
            rg,
        ))
    }

    /// Smooth clamp into `(lo, hi)`: `lo + softplus(hi − softplus(hi − x) − lo)`.
    pub fn soft_clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xi = self.check(x)?;
        if lo >= hi {
            return Err(TensorError::InvalidArgument {
                op: "soft_clamp",
                reason: format!("lo {lo} >= hi {hi}"),
            });
        }
        let data = self
            .data(xi)
            .iter()
            .map(|&v| soft_clamp_value(v, lo, hi))
            .collect();
        let t = Tensor::new(self.shape(xi).to_vec(), data)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(t, Op::SoftClamp { x: xi, lo, hi }, rg))
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let ri = self.check(root)?;
        if self.nodes[ri].value.len() != 1 {
            return Err(TensorError::NotScalar(self.shape(ri).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[ri] = Some(vec![1.0]);
        for i in (0..=ri).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let grads = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match (node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                (Op::Leaf, None) if node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, self.data(b), m, n, k, &mut da);
                    accumulate(grads, a, &da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.data(a), g, m, k, n, &mut db);
                    accumulate(grads, b, &db);
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if needs(x) {
                    let mut dx = vec![0.0; rows * din];
                    kernels::matmul_nt_acc(g, self.data(w), rows, dout, din, &mut dx);
                    accumulate(grads, x, &dx);
                }
                if needs(w) {
                    let mut dw = vec![0.0; din * dout];
                    kernels::matmul_tn_acc(self.data(x), g, rows, din, dout, &mut dw);
                    accumulate(grads, w, &dw);
                }
                if let Some(b) = b {
                    if needs(b) {
                        let mut db = vec![0.0; dout];
                        for r in g.chunks(dout) {
                            for (o, v) in db.iter_mut().zip(r) {
                                *o += v;
                            }
                        }
                        accumulate(grads, b, &db);
                    }
                }
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    accumulate(grads, a, g);
                }
                if needs(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Sub { a, b } => {
                if needs(a) {
                    accumulate(grads, a, g);
                }
                if needs(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, &da);
                }
                if needs(b) {
                    let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, &db);
                }
            }
            &Op::Scale { a, s } => {
                let da: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(grads, a, &da);
            }
            &Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[a].value.len()];
                accumulate(grads, a, &da);
            }
            Op::AddRows { x, table, idx, d } => {
                let (x, table, d) = (*x, *table, *d);
                if needs(x) {
                    accumulate(grads, x, g);
                }
                if needs(table) {
                    let mut dt = vec![0.0; self.nodes[table].value.len()];
                    for (r, &k) in idx.iter().enumerate() {
                        for (o, v) in dt[k * d..(k + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    accumulate(grads, table, &dt);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                d,
            } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let xs = self.data(x);
                let gm = self.data(gamma);
                let mut dx = vec![0.0; xs.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gy = vec![0.0; d];
                for r in 0..xs.len() / d {
                    let xr = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xhat = 0.0;
                    for c in 0..d {
                        xhat[c] = (xr[c] - mean[r]) * rstd[r];
                        gy[c] = gr[c] * gm[c];
                        mean_gy += gy[c];
                        mean_gy_xhat += gy[c] * xhat[c];
                        dg[c] += gr[c] * xhat[c];
                        db[c] += gr[c];
                    }
                    mean_gy /= d as f64;
                    mean_gy_xhat /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rstd[r] * (gy[c] - mean_gy - xhat[c] * mean_gy_xhat);
                    }
                }
                if needs(x) {
                    accumulate(grads, x, &dx);
                }
                if needs(gamma) {
                    accumulate(grads, gamma, &dg);
                }
                if needs(beta) {
                    accumulate(grads, beta, &db);
                }
            }
            &Op::Gelu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                accumulate(grads, x, &dx);
            }
            &Op::Softmax { x, outer, axis, inner } => {
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |a: usize| (o * axis + a) * inner + c;
                        let dot: f64 = (0..axis).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..axis {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                accumulate(grads, x, &dx);
            }
            Op::Dropout { x, keep } => {
                let dx: Vec<f64> = g.iter().zip(keep).map(|(a, b)| a * b).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
                keep,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    keep.as_deref(),
                    g,
                    *dims,
                );
                if needs(*q) {
                    accumulate(grads, *q, &dq);
                }
                if needs(*k) {
                    accumulate(grads, *k, &dk);
                }
                if needs(*v) {
                    accumulate(grads, *v, &dv);
                }
            }
            &Op::SwapAxes12 { x, dims } => {
                let dx = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                accumulate(grads, x, &dx);
            }
            &Op::Reshape { x } => accumulate(grads, x, g),
            &Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(grads, x, &dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                weights,
                probs,
                classes,
            } => {
                let classes = *classes;
                let t = target.data();
                let mut dz = vec![0.0; probs.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let range = r * classes..(r + 1) * classes;
                    let tsum: f64 = t[range.clone()].iter().sum();
                    for c in range {
                        dz[c] = g[0] * w * (probs[c] * tsum - t[c]);
                    }
                }
                accumulate(grads, *logits, &dz);
            }
            Op::GaussianNll {
                mean,
                logvar,
                target,
                weights,
                dim,
            } => {
                let (mu, lv, y) = (self.data(*mean), self.data(*logvar), target.data());
                let mut dmu = vec![0.0; mu.len()];
                let mut dlv = vec![0.0; lv.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for c in r * dim..(r + 1) * dim {
                        let e = y[c] - mu[c];
                        let inv = (-lv[c]).exp();
                        dmu[c] = -g[0] * w * e * inv;
                        dlv[c] = g[0] * w * 0.5 * (1.0 - e * e * inv);
                    }
                }
                if needs(*mean) {
                    accumulate(grads, *mean, &dmu);
                }
                if needs(*logvar) {
                    accumulate(grads, *logvar, &dlv);
                }
            }
            &Op::SoftClamp { x, lo, hi } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| {
                        let y1 = hi - kernels::softplus(hi - xv);
                        gv * kernels::sigmoid(hi - xv) * kernels::sigmoid(y1 - lo)
                    })
                    .collect();
                accumulate(grads, x, &dx);
            }
        }
    }
}

pub(crate) fn soft_clamp_value(v: f64, lo: f64, hi: f64) -> f64 {
    let y1 = hi - kernels::softplus(hi - v);
    lo + kernels::softplus(y1 - lo)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn swap12(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i0 in 0..a {
        for i1 in 0..b {
            for i2 in 0..c {
                let from = ((i0 * b + i1) * c + i2) * d;
                let to = ((i0 * c + i2) * b + i1) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}
