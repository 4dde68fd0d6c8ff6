//! The two-axis Transformer world model.
//!
//! Every grid cell `(t, j)` becomes a token
//! `z = W_in q + TE(t) + VE(j) + PE(j ≤ m)`, where `q` is the cell's bin
//! distribution and `PE` separates state/reward columns from action columns.
//! Each block runs, with pre-norm residuals:
//!
//! 1. causal attention along time, independently per variate column;
//! 2. a feed-forward network;
//! 3. unmasked attention across the variates of one timestep;
//! 4. a second feed-forward network.
//!
//! A final layer norm and a linear head give per-token bin logits. The logits
//! at `(t, j)` predict the bin of variate `j` at `t + 1` for state and reward
//! columns.

use std::io::{Read, Write};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::BinStats;
use crate::encoding::{encode_onehot_into, Encoder, DEFAULT_SIGMA_FRAC};
use crate::tensor::{kernels, read_checkpoint, write_checkpoint, AttentionSpec, CheckpointPrecision, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_hidden: Vec<usize>,
    /// Context length `T_max`.
    pub max_steps: usize,
    pub bins: usize,
    /// Size of the variate embedding table.
    pub max_variates: usize,
    pub dropout: f64,
    /// Input Gaussian-histogram width in bin widths.
    pub input_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            ffn_hidden: vec![64, 32],
            max_steps: 20,
            bins: 128,
            max_variates: 110,
            dropout: 0.05,
            input_sigma: DEFAULT_SIGMA_FRAC,
        }
    }
}

impl ModelConfig {
    /// The full-size architecture: 6 blocks, 4 heads, width 256, FFN [1024, 256].
    pub fn full_scale() -> Self {
        ModelConfig {
            layers: 6,
            heads: 4,
            d_model: 256,
            ffn_hidden: vec![1024, 256],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_steps < 2 {
            return bad("max_steps must be >= 2".into());
        }
        if self.bins < 2 || self.max_variates < 3 {
            return bad("bins must be >= 2 and max_variates >= 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || self.input_sigma <= 0.0 {
            return bad("dropout must be in [0, 1) and input_sigma > 0".into());
        }
        Ok(())
    }

    pub fn input_encoder(&self) -> Encoder {
        Encoder::GaussHist {
            sigma_frac: self.input_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnIdx {
    /// `(weight, bias)` per layer.
    pub layers: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIdx {
    /// `(gamma, beta)` for the four pre-norms.
    pub norms: [(usize, usize); 4],
    pub temporal: AttnIdx,
    pub ffn1: FfnIdx,
    pub variate: AttnIdx,
    pub ffn2: FfnIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamIndex {
    pub w_in: usize,
    pub te: usize,
    pub ve: usize,
    pub pe: usize,
    pub blocks: Vec<BlockIdx>,
    pub final_norm: (usize, usize),
    pub w_out: usize,
    pub b_out: usize,
}

/// Named parameter tensors in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub index: ParamIndex,
}

/// Collects named, randomly initialized parameter tensors.
pub(crate) struct Builder {
    pub(crate) names: Vec<String>,
    pub(crate) tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    pub(crate) fn new(seed: u64) -> Self {
        Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub(crate) fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub(crate) fn linear(&mut self, name: &str, din: usize, dout: usize) -> usize {
        self.normal(format!("{name}.w"), &[din, dout], (1.0 / din as f64).sqrt())
    }

    pub(crate) fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    pub(crate) fn norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let b = self.zeros(format!("{name}.beta"), &[d]);
        (g, b)
    }

    pub(crate) fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.linear(&format!("{name}.q"), d, d),
            wk: self.linear(&format!("{name}.k"), d, d),
            wv: self.linear(&format!("{name}.v"), d, d),
            wo: self.linear(&format!("{name}.o"), d, d),
            bo: self.zeros(format!("{name}.o.b"), &[d]),
        }
    }

    pub(crate) fn ffn(&mut self, name: &str, d: usize, hidden: &[usize]) -> FfnIdx {
        let mut dims = vec![d];
        dims.extend_from_slice(hidden);
        dims.push(d);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lw = self.linear(&format!("{name}.{i}"), w[0], w[1]);
                let lb = self.zeros(format!("{name}.{i}.b"), &[w[1]]);
                (lw, lb)
            })
            .collect();
        FfnIdx { layers }
    }
}

pub(crate) const EMBED_STD: f64 = 0.02;

impl ModelParams {
    /// Random initialization: scaled normal weights, zero biases, unit norms.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder::new(seed);
        let w_in = b.linear("embed.in", config.bins, d);
        let te = b.normal("embed.time".into(), &[config.max_steps, d], EMBED_STD);
        let ve = b.normal("embed.variate".into(), &[config.max_variates, d], EMBED_STD);
        let pe = b.normal("embed.kind".into(), &[2, d], EMBED_STD);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("block{l}");
                let n0 = b.norm(&format!("{p}.norm0"), d);
                let temporal = b.attn(&format!("{p}.temporal"), d);
                let n1 = b.norm(&format!("{p}.norm1"), d);
                let ffn1 = b.ffn(&format!("{p}.ffn1"), d, &config.ffn_hidden);
                let n2 = b.norm(&format!("{p}.norm2"), d);
                let variate = b.attn(&format!("{p}.variate"), d);
                let n3 = b.norm(&format!("{p}.norm3"), d);
                let ffn2 = b.ffn(&format!("{p}.ffn2"), d, &config.ffn_hidden);
                BlockIdx {
                    norms: [n0, n1, n2, n3],
                    temporal,
                    ffn1,
                    variate,
                    ffn2,
                }
            })
            .collect();
        let final_norm = b.norm("head.norm", d);
        let w_out = b.linear("head.out", d, config.bins);
        let b_out = b.zeros("head.out.b".into(), &[config.bins]);
        Ok(ModelParams {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            index: ParamIndex {
                w_in,
                te,
                ve,
                pe,
                blocks,
                final_norm,
                w_out,
                b_out,
            },
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.tensors[i].data()
    }

    /// Registers every parameter as a gradient leaf; `vars[i]` is tensor `i`.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| Ok(tape.leaf(t.clone().with_grad())?))
            .collect()
    }

    pub fn save<W: Write>(&self, w: W, precision: CheckpointPrecision) -> Result<()> {
        let recs: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        Ok(write_checkpoint(w, &recs, precision)?)
    }

    /// Loads tensors saved by [`ModelParams::save`] for the given config.
    pub fn load<R: Read>(config: &ModelConfig, r: R) -> Result<Self> {
        let mut p = ModelParams::init(config, 0)?;
        load_named(r, &p.names, &mut p.tensors, "model checkpoint")?;
        Ok(p)
    }
}

/// Replaces `tensors` with checkpoint records whose names and shapes match.
pub(crate) fn load_named<R: Read>(r: R, names: &[String], tensors: &mut [Tensor], what: &'static str) -> Result<()> {
    let (recs, _) = read_checkpoint(r)?;
    if recs.len() != tensors.len() {
        return Err(Error::Format {
            what,
            reason: format!("{} tensors, config expects {}", recs.len(), tensors.len()),
        });
    }
    for (i, (name, t)) in recs.into_iter().enumerate() {
        if name != names[i] || t.shape() != tensors[i].shape() {
            return Err(Error::Format {
                what,
                reason: format!("record {i} is {name}{:?}, expected {}{:?}", t.shape(), names[i], tensors[i].shape()),
            });
        }
        tensors[i] = t;
    }
    Ok(())
}

/// A batch of scalar-grid windows `[batch, steps, M]` with row validity.
#[derive(Clone, Copy, Debug)]
pub struct GridInput<'a> {
    pub values: &'a [f64],
    pub valid: &'a [bool],
    pub batch: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl GridInput<'_> {
    pub fn width(&self) -> usize {
        self.state_dim + 1 + self.action_dim
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.steps * self.width()
    }

    fn check(&self, cfg: &ModelConfig, stats: &BinStats) -> Result<()> {
        let w = self.width();
        if self.values.len() != self.tokens() || self.valid.len() != self.batch * self.steps {
            return Err(Error::DimMismatch(format!(
                "grid input has {} values / {} flags for [{}, {}, {}]",
                self.values.len(),
                self.valid.len(),
                self.batch,
                self.steps,
                w
            )));
        }
        if self.steps > cfg.max_steps || w > cfg.max_variates {
            return Err(Error::InvalidArgument(format!(
                "grid {}x{} exceeds model maxima {}x{}",
                self.steps, w, cfg.max_steps, cfg.max_variates
            )));
        }
        if stats.variates() != w || stats.bins != cfg.bins {
            return Err(Error::DimMismatch(format!(
                "bin stats ({} variates, {} bins) vs grid ({w} variates) and model ({} bins)",
                stats.variates(),
                stats.bins,
                cfg.bins
            )));
        }
        Ok(())
    }
}

/// Time-embedding index of every row: position counted from the first valid
/// row of its window (padding rows get 0).
pub(crate) fn time_indices(valid: &[bool], batch: usize, steps: usize) -> Vec<usize> {
    let mut out = vec![0; batch * steps];
    for b in 0..batch {
        let row = &valid[b * steps..(b + 1) * steps];
        let first = row.iter().position(|&v| v).unwrap_or(steps);
        for t in first..steps {
            out[b * steps + t] = t - first;
        }
    }
    out
}

/// Token indices into the TE, VE and PE tables.
pub(crate) fn embedding_indices(input: &GridInput) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let w = input.width();
    let rows = time_indices(input.valid, input.batch, input.steps);
    let n = input.tokens();
    let mut te = Vec::with_capacity(n);
    let mut ve = Vec::with_capacity(n);
    let mut pe = Vec::with_capacity(n);
    for &t in &rows {
        for j in 0..w {
            te.push(t);
            ve.push(j);
            pe.push(usize::from(j <= input.state_dim));
        }
    }
    (te, ve, pe)
}

/// `[tokens, B]` input bin distributions.
pub fn encode_inputs(input: &GridInput, stats: &BinStats, enc: Encoder) -> Tensor {
    let b = stats.bins;
    let w = input.width();
    let mut q = vec![0.0; input.tokens() * b];
    for (i, &x) in input.values.iter().enumerate() {
        enc.encode_into(x, &stats.variate(i % w), &mut q[i * b..(i + 1) * b]);
    }
    Tensor::new(vec![input.tokens(), b], q).unwrap()
}

/// Output of a taped forward pass.
pub struct TapedForward {
    /// `[tokens, B]` logits.
    pub logits: Var,
    /// Variate-attention outputs per block (weights via [`Tape::attention_weights`]).
    pub variate_attention: Vec<Var>,
}

fn dropout_site(block: usize, slot: u64) -> u64 {
    block as u64 * 16 + slot
}

impl ModelParams {
    /// Returns the projected output and the raw attention node.
    fn attention(&self, tape: &mut Tape, vars: &[Var], x: Var, idx: &AttnIdx, spec: &AttentionSpec, shape: [usize; 4], temporal: bool) -> Result<(Var, Var)> {
        // x: [tokens, d] in (batch, step, variate) order
        let [bt, t, m, d] = shape;
        let q = tape.linear(x, vars[idx.wq], None)?;
        let k = tape.linear(x, vars[idx.wk], None)?;
        let v = tape.linear(x, vars[idx.wv], None)?;
        let (out, node) = if temporal {
            let to_groups = |tape: &mut Tape, y: Var| -> Result<Var> {
                let y = tape.reshape(y, vec![bt, t, m, d])?;
                let y = tape.swap_axes12(y)?;
                Ok(tape.reshape(y, vec![bt * m, t, d])?)
            };
            let (q, k, v) = (to_groups(tape, q)?, to_groups(tape, k)?, to_groups(tape, v)?);
            let node = tape.attention(q, k, v, spec)?;
            let o = tape.reshape(node, vec![bt, m, t, d])?;
            let o = tape.swap_axes12(o)?;
            (tape.reshape(o, vec![bt * t * m, d])?, node)
        } else {
            let r = |tape: &mut Tape, y: Var| tape.reshape(y, vec![bt * t, m, d]);
            let (q, k, v) = (r(tape, q)?, r(tape, k)?, r(tape, v)?);
            let node = tape.attention(q, k, v, spec)?;
            (tape.reshape(node, vec![bt * t * m, d])?, node)
        };
        Ok((tape.linear(out, vars[idx.wo], Some(vars[idx.bo]))?, node))
    }

    fn ffn(&self, tape: &mut Tape, vars: &[Var], x: Var, idx: &FfnIdx, site: u64) -> Result<Var> {
        let mut h = x;
        let last = idx.layers.len() - 1;
        for (i, &(w, b)) in idx.layers.iter().enumerate() {
            h = tape.linear(h, vars[w], Some(vars[b]))?;
            if i < last {
                h = tape.gelu(h)?;
            }
        }
        Ok(tape.dropout(h, self.config.dropout, site)?)
    }

    /// Records the forward pass. `vars` come from [`ModelParams::register`]
    /// (or are constants of the same shapes). Dropout is active only on a
    /// training tape.
    pub fn forward_taped(&self, tape: &mut Tape, vars: &[Var], input: &GridInput, stats: &BinStats) -> Result<TapedForward> {
        input.check(&self.config, stats)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let (bt, t, m) = (input.batch, input.steps, input.width());
        let n = input.tokens();
        let ix = &self.index;

        let q = tape.constant(encode_inputs(input, stats, cfg.input_encoder()))?;
        let (te, ve, pe) = embedding_indices(input);
        let mut x = tape.linear(q, vars[ix.w_in], None)?;
        x = tape.add_rows(x, vars[ix.te], Rc::new(te))?;
        x = tape.add_rows(x, vars[ix.ve], Rc::new(ve))?;
        x = tape.add_rows(x, vars[ix.pe], Rc::new(pe))?;

        // temporal keys: one flag per (batch, variate, step) group row
        let mut key_valid = vec![false; bt * m * t];
        for b in 0..bt {
            for j in 0..m {
                for s in 0..t {
                    key_valid[(b * m + j) * t + s] = input.valid[b * t + s];
                }
            }
        }
        let key_valid = Rc::new(key_valid);
        let shape = [bt, t, m, d];
        let mut variate_attention = Vec::with_capacity(cfg.layers);
        for (l, blk) in ix.blocks.iter().enumerate() {
            let norm = |tape: &mut Tape, x: Var, k: usize| tape.layer_norm(x, vars[blk.norms[k].0], vars[blk.norms[k].1]);
            let temporal_spec = AttentionSpec {
                heads: cfg.heads,
                causal: true,
                key_valid: Some(key_valid.clone()),
                dropout: cfg.dropout,
                site: dropout_site(l, 0),
            };
            let h = norm(tape, x, 0)?;
            let (h, _) = self.attention(tape, vars, h, &blk.temporal, &temporal_spec, shape, true)?;
            x = tape.add(x, h)?;
            let h = norm(tape, x, 1)?;
            let h = self.ffn(tape, vars, h, &blk.ffn1, dropout_site(l, 1))?;
            x = tape.add(x, h)?;
            let variate_spec = AttentionSpec {
                heads: cfg.heads,
                causal: false,
                key_valid: None,
                dropout: cfg.dropout,
                site: dropout_site(l, 2),
            };
            let h = norm(tape, x, 2)?;
            let (h, node) = self.attention(tape, vars, h, &blk.variate, &variate_spec, shape, false)?;
            variate_attention.push(node);
            x = tape.add(x, h)?;
            let h = norm(tape, x, 3)?;
            let h = self.ffn(tape, vars, h, &blk.ffn2, dropout_site(l, 3))?;
            x = tape.add(x, h)?;
            if tape.value(x).first_non_finite().is_some() {
                return Err(Error::NonFiniteActivation { block: l });
            }
        }
        let x = tape.layer_norm(x, vars[ix.final_norm.0], vars[ix.final_norm.1])?;
        let logits = tape.linear(x, vars[ix.w_out], Some(vars[ix.b_out]))?;
        debug_assert_eq!(tape.value(logits).shape(), &[n, cfg.bins]);
        Ok(TapedForward {
            logits,
            variate_attention,
        })
    }

    /// Evaluation-mode logits `[tokens, B]`.
    pub fn logits(&self, input: &GridInput, stats: &BinStats) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape)?;
        let out = self.forward_taped(&mut tape, &vars, input, stats)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Parameters as non-differentiable tape inputs.
    pub fn constants(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| Ok(tape.constant(t.clone())?)).collect()
    }

    /// Evaluation-mode predictions (softmax over bins).
    pub fn forward(&self, input: &GridInput, stats: &BinStats) -> Result<PredictionGrid> {
        let logits = self.logits(input, stats)?;
        Ok(PredictionGrid::from_logits(logits.into_data(), input.batch * input.steps, input.width(), self.config.bins))
    }

    /// Variate-attention weights per block, averaged over heads:
    /// `[layers][steps × M × M]` for a single window.
    pub fn variate_attention_weights(&self, input: &GridInput, stats: &BinStats) -> Result<Vec<Vec<f64>>> {
        if input.batch != 1 {
            return Err(Error::InvalidArgument("attention export expects one window".into()));
        }
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape)?;
        let out = self.forward_taped(&mut tape, &vars, input, stats)?;
        let (t, m, h) = (input.steps, input.width(), self.config.heads);
        out.variate_attention
            .iter()
            .map(|&v| {
                let probs = tape
                    .attention_weights(v)
                    .ok_or_else(|| Error::InvalidArgument("attention record missing".into()))?;
                let mut avg = vec![0.0; t * m * m];
                for s in 0..t {
                    for head in 0..h {
                        let src = &probs[(s * h + head) * m * m..(s * h + head + 1) * m * m];
                        for (a, &p) in avg[s * m * m..(s + 1) * m * m].iter_mut().zip(src) {
                            *a += p / h as f64;
                        }
                    }
                }
                Ok(avg)
            })
            .collect()
    }
}

/// Bin probabilities `[rows, M, B]`, softmax-normalized over `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrid {
    pub probs: Vec<f64>,
    pub rows: usize,
    pub variates: usize,
    pub bins: usize,
}

impl PredictionGrid {
    pub fn from_logits(mut logits: Vec<f64>, rows: usize, variates: usize, bins: usize) -> Self {
        kernels::softmax_rows(&mut logits, bins);
        PredictionGrid {
            probs: logits,
            rows,
            variates,
            bins,
        }
    }

    pub fn slice(&self, row: usize, j: usize) -> &[f64] {
        let off = (row * self.variates + j) * self.bins;
        &self.probs[off..off + self.bins]
    }
}

/// Guard added inside the logarithm of the summed objective.
pub const LOG_EPS: f64 = 1e-12;

/// Next-step cross-entropy summed over valid rows `i < T−1` and state/reward
/// columns `j ≤ m`:
/// `−Σ_i Σ_j Σ_k Q[i+1, j, k] · log(P[i, j, k] + ε)`.
///
/// `p` and `q` are `[T, M, B]` for one window; `mask[i]` flags valid rows and
/// both `i` and `i + 1` must be valid.
pub fn grid_loss(p: &[f64], q: &[f64], steps: usize, variates: usize, bins: usize, state_dim: usize, mask: &[bool]) -> Result<f64> {
    let n = steps * variates * bins;
    if p.len() != n || q.len() != n || mask.len() != steps || state_dim + 1 > variates {
        return Err(Error::DimMismatch(format!(
            "loss inputs: p {} q {} mask {} for [{steps}, {variates}, {bins}]",
            p.len(),
            q.len(),
            mask.len()
        )));
    }
    let mut loss = 0.0;
    for i in 0..steps.saturating_sub(1) {
        if !(mask[i] && mask[i + 1]) {
            continue;
        }
        for j in 0..=state_dim {
            let po = (i * variates + j) * bins;
            let qo = ((i + 1) * variates + j) * bins;
            for k in 0..bins {
                let qk = q[qo + k];
                if qk != 0.0 {
                    loss -= qk * (p[po + k] + LOG_EPS).ln();
                }
            }
        }
    }
    Ok(loss)
}

/// One-hot next-step targets `[tokens, B]` and per-token weights. Weights are
/// `1 / count` on supervised tokens so the weighted sum is a mean.
pub fn next_step_targets(input: &GridInput, stats: &BinStats) -> (Tensor, Vec<f64>, usize) {
    let (b, t, w) = (input.batch, input.steps, input.width());
    let bins = stats.bins;
    let mut target = vec![0.0; input.tokens() * bins];
    let mut weights = vec![0.0; input.tokens()];
    let mut count = 0;
    for bi in 0..b {
        for i in 0..t.saturating_sub(1) {
            if !(input.valid[bi * t + i] && input.valid[bi * t + i + 1]) {
                continue;
            }
            for j in 0..=input.state_dim {
                let tok = (bi * t + i) * w + j;
                let x = input.values[(bi * t + i + 1) * w + j];
                encode_onehot_into(x, &stats.variate(j), &mut target[tok * bins..(tok + 1) * bins]);
                weights[tok] = 1.0;
                count += 1;
            }
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        weights.iter_mut().for_each(|v| *v *= inv);
    }
    (Tensor::new(vec![input.tokens(), bins], target).unwrap(), weights, count)
}

/// Mean next-step cross-entropy of a batch, recorded on `tape`.
pub fn batch_loss(params: &ModelParams, tape: &mut Tape, vars: &[Var], input: &GridInput, stats: &BinStats) -> Result<(Var, usize)> {
    let out = params.forward_taped(tape, vars, input, stats)?;
    let (target, weights, count) = next_step_targets(input, stats);
    let loss = tape.softmax_cross_entropy(out.logits, target, weights)?;
    Ok((loss, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradient;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            ffn_hidden: vec![12, 8],
            max_steps: 4,
            bins: 5,
            max_variates: 6,
            dropout: 0.0,
            input_sigma: 0.75,
        }
    }

    fn stats(m: usize, bins: usize) -> BinStats {
        BinStats {
            bins,
            lo: vec![-1.0; m],
            hi: vec![1.0; m],
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, b: usize, t: usize, w: usize) -> Vec<f64> {
        (0..b * t * w).map(|_| rng.random_range(-1.2..1.2)).collect()
    }

    #[test]
    fn output_slices_are_distributions() {
        let cfg = tiny_config();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals = random_grid(&mut rng, 2, 4, 4);
        let valid = vec![true; 8];
        let input = GridInput { values: &vals, valid: &valid, batch: 2, steps: 4, state_dim: 2, action_dim: 1 };
        let pred = p.forward(&input, &stats(4, 5)).unwrap();
        for r in 0..8 {
            for j in 0..4 {
                assert!((pred.slice(r, j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(p.forward(&input, &stats(4, 5)).unwrap(), pred);
    }

    #[test]
    fn rejects_grids_beyond_maxima() {
        let cfg = tiny_config();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let vals = vec![0.0; 5 * 4];
        let valid = vec![true; 5];
        let input = GridInput { values: &vals, valid: &valid, batch: 1, steps: 5, state_dim: 2, action_dim: 1 };
        assert!(p.forward(&input, &stats(4, 5)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf, CheckpointPrecision::F64).unwrap();
        assert_eq!(ModelParams::load(&cfg, buf.as_slice()).unwrap(), p);
        let other = ModelConfig { layers: 1, ..cfg };
        assert!(ModelParams::load(&other, buf.as_slice()).is_err());
    }

    #[test]
    fn zero_weights_except_time_embedding() {
        let cfg = ModelConfig { layers: 0, ..tiny_config() };
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        for t in &mut p.tensors {
            t.data_mut().fill(0.0);
        }
        let te = p.index.te;
        for (i, v) in p.tensors[te].data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals = random_grid(&mut rng, 1, 3, 4);
        let valid = vec![true; 3];
        let input = GridInput { values: &vals, valid: &valid, batch: 1, steps: 3, state_dim: 2, action_dim: 1 };
        let (te_idx, _, _) = embedding_indices(&input);
        let mut tape = Tape::new();
        let vars = p.constants(&mut tape).unwrap();
        let q = tape.constant(encode_inputs(&input, &stats(4, 5), cfg.input_encoder())).unwrap();
        let x = tape.linear(q, vars[p.index.w_in], None).unwrap();
        let x = tape.add_rows(x, vars[p.index.te], Rc::new(te_idx.clone())).unwrap();
        let z = tape.value(x).data();
        for tok in 0..12 {
            let t = tok / 4;
            assert_eq!(&z[tok * 8..(tok + 1) * 8], &p.tensors[te].data()[t * 8..(t + 1) * 8]);
        }
    }

    #[test]
    fn kind_embedding_flags_state_and_reward_columns() {
        let input = GridInput { values: &[0.0; 6], valid: &[true], batch: 1, steps: 1, state_dim: 3, action_dim: 2 };
        let (_, ve, pe) = embedding_indices(&input);
        assert_eq!(ve, vec![0, 1, 2, 3, 4, 5]);
        // indicator 1[j ≤ m+1] with 1-based j
        let oracle: Vec<usize> = (1..=6).map(|j| usize::from(j <= 3 + 1)).collect();
        assert_eq!(pe, oracle);
    }

    #[test]
    fn time_indices_restart_after_padding() {
        let valid = [false, false, true, true, true, true, true, true];
        assert_eq!(time_indices(&valid, 2, 4), vec![0, 0, 0, 1, 0, 1, 2, 3]);
    }

    #[test]
    fn zero_layer_model_matches_hand_computation() {
        let cfg = ModelConfig { layers: 0, ..tiny_config() };
        let p = ModelParams::init(&cfg, 5).unwrap();
        let st = stats(4, 5);
        let vals = [0.3, -0.2, 0.9, 0.0];
        let input = GridInput { values: &vals, valid: &[true], batch: 1, steps: 1, state_dim: 2, action_dim: 1 };
        let pred = p.forward(&input, &st).unwrap();
        let ix = &p.index;
        for j in 0..4 {
            let q = crate::encoding::encode_gauss_hist(vals[j], &st.variate(j), 0.75 * st.variate(j).width());
            let mut z = vec![0.0; 8];
            for c in 0..8 {
                for (k, &qk) in q.iter().enumerate() {
                    z[c] += qk * p.get(ix.w_in)[k * 8 + c];
                }
                z[c] += p.get(ix.te)[c] + p.get(ix.ve)[j * 8 + c] + p.get(ix.pe)[usize::from(j <= 2) * 8 + c];
            }
            let mean = z.iter().sum::<f64>() / 8.0;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let zn: Vec<f64> = z.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
            let mut logits: Vec<f64> = (0..5)
                .map(|k| (0..8).map(|c| zn[c] * p.get(ix.w_out)[c * 5 + k]).sum::<f64>() + p.get(ix.b_out)[k])
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            logits.iter_mut().for_each(|l| *l = (*l - mx).exp() / s);
            for k in 0..5 {
                assert!((logits[k] - pred.slice(0, j)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn future_inputs_do_not_affect_past_predictions() {
        let cfg = ModelConfig { max_steps: 6, ..tiny_config() };
        let p = ModelParams::init(&cfg, 2).unwrap();
        let st = stats(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let vals = random_grid(&mut rng, 1, 6, 4);
            let valid = vec![true; 6];
            let base = p.logits(&GridInput { values: &vals, valid: &valid, batch: 1, steps: 6, state_dim: 2, action_dim: 1 }, &st).unwrap();
            let t = rng.random_range(0..5);
            let mut pert = vals.clone();
            for v in &mut pert[(t + 1) * 4..] {
                *v += rng.random_range(-1.0..1.0);
            }
            let got = p.logits(&GridInput { values: &pert, valid: &valid, batch: 1, steps: 6, state_dim: 2, action_dim: 1 }, &st).unwrap();
            let n = (t + 1) * 4 * 5;
            assert_eq!(&base.data()[..n], &got.data()[..n]);
            assert_ne!(&base.data()[n..], &got.data()[n..]);
        }
    }

    #[test]
    fn padded_rows_do_not_affect_valid_rows() {
        let cfg = tiny_config();
        let p = ModelParams::init(&cfg, 4).unwrap();
        let st = stats(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut vals = random_grid(&mut rng, 1, 4, 4);
        let valid = [false, true, true, true];
        let input = GridInput { values: &vals, valid: &valid, batch: 1, steps: 4, state_dim: 2, action_dim: 1 };
        let a = p.logits(&input, &st).unwrap();
        vals[..4].iter_mut().for_each(|v| *v = 0.77);
        let b = p.logits(&GridInput { values: &vals, valid: &valid, batch: 1, steps: 4, state_dim: 2, action_dim: 1 }, &st).unwrap();
        assert_eq!(&a.data()[20..], &b.data()[20..]);
        // and the valid rows equal an unpadded 3-step window
        let c = p.logits(&GridInput { values: &vals[4..], valid: &[true; 3], batch: 1, steps: 3, state_dim: 2, action_dim: 1 }, &st).unwrap();
        for (x, y) in a.data()[20..].iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_loss_analytic_values() {
        let (t, m, n, b) = (4, 2, 1, 5);
        let w = m + 1 + n;
        let p = vec![1.0 / b as f64; t * w * b];
        let mut q = vec![0.0; t * w * b];
        for cell in 0..t * w {
            q[cell * b + cell % b] = 1.0;
        }
        let loss = grid_loss(&p, &q, t, w, b, m, &[true; 4]).unwrap();
        let expect = (t - 1) as f64 * (m + 1) as f64 * (b as f64).ln();
        assert!((loss - expect).abs() < 1e-9);
        // P equal to next-step one-hot targets gives zero
        let mut p2 = vec![0.0; t * w * b];
        for i in 0..t - 1 {
            p2[i * w * b..(i + 1) * w * b].copy_from_slice(&q[(i + 1) * w * b..(i + 2) * w * b]);
        }
        assert!(grid_loss(&p2, &q, t, w, b, m, &[true; 4]).unwrap().abs() < 1e-11);
    }

    #[test]
    fn grid_loss_matches_triple_loop_and_ignores_masked_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t, w, b, m) = (5, 4, 6, 2);
        let mut p: Vec<f64> = (0..t * w * b).map(|_| rng.random_range(0.0..1.0)).collect();
        for row in p.chunks_mut(b) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let q: Vec<f64> = (0..t * w * b).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask = [true, true, false, true, true];
        let mut oracle = 0.0;
        for i in 0..t - 1 {
            for j in 0..=m {
                for k in 0..b {
                    if mask[i] && mask[i + 1] {
                        oracle -= q[((i + 1) * w + j) * b + k] * (p[(i * w + j) * b + k] + 1e-12).ln();
                    }
                }
            }
        }
        let got = grid_loss(&p, &q, t, w, b, m, &mask).unwrap();
        assert!((got - oracle).abs() < 1e-10);
        // perturbing action-column and masked-row targets changes nothing
        let mut q2 = q.clone();
        for i in 0..t {
            for k in 0..b {
                q2[(i * w + 3) * b + k] += 1.0;
            }
        }
        for k in 0..w * b {
            q2[2 * w * b + k] += 1.0;
        }
        assert_eq!(grid_loss(&p, &q2, t, w, b, m, &mask).unwrap(), got);
    }

    #[test]
    fn training_objective_is_mean_of_summed_loss() {
        let cfg = tiny_config();
        let p = ModelParams::init(&cfg, 6).unwrap();
        let st = stats(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vals = random_grid(&mut rng, 1, 4, 4);
        let valid = [true; 4];
        let input = GridInput { values: &vals, valid: &valid, batch: 1, steps: 4, state_dim: 2, action_dim: 1 };
        let mut tape = Tape::new();
        let vars = p.constants(&mut tape).unwrap();
        let (loss, count) = batch_loss(&p, &mut tape, &vars, &input, &st).unwrap();
        let pred = p.forward(&input, &st).unwrap();
        let grid = crate::encoding::ScalarGrid { values: vals.clone(), steps: 4, state_dim: 2, action_dim: 1 };
        let q = crate::encoding::encode_grid(&grid, &st, Encoder::OneHot).unwrap();
        let sum = grid_loss(&pred.probs, &q.probs, 4, 4, 5, 2, &valid).unwrap();
        assert_eq!(count, 9);
        assert!((tape.value(loss).item() - sum / 9.0).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = ModelConfig { dropout: 0.05, ..tiny_config() };
        let p = ModelParams::init(&cfg, 7).unwrap();
        let st = stats(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals = random_grid(&mut rng, 2, 4, 4);
        let valid = [true, true, true, true, false, true, true, true];
        let input = GridInput { values: &vals, valid: &valid, batch: 2, steps: 4, state_dim: 2, action_dim: 1 };
        let loss_of = |params: &ModelParams| {
            let mut tape = Tape::training(5, 1);
            let vars = params.constants(&mut tape).unwrap();
            let (l, _) = batch_loss(params, &mut tape, &vars, &input, &st).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::training(5, 1);
        let vars = p.register(&mut tape).unwrap();
        let (l, _) = batch_loss(&p, &mut tape, &vars, &input, &st).unwrap();
        let grads = tape.backward(l).unwrap();
        for i in 0..p.tensors.len() {
            let fd = finite_diff_gradient(
                |x| {
                    let mut q = p.clone();
                    q.tensors[i] = x.clone();
                    loss_of(&q)
                },
                &p.tensors[i],
                1e-4,
            );
            let g = grads.get(vars[i]).unwrap();
            for (a, b) in g.data().iter().zip(fd.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel < 1e-3, "{}: {a} vs {b}", p.names[i]);
            }
        }
    }

    #[test]
    fn attention_export_rows_are_distributions() {
        let cfg = tiny_config();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals = random_grid(&mut rng, 1, 3, 4);
        let w = p
            .variate_attention_weights(&GridInput { values: &vals, valid: &[true; 3], batch: 1, steps: 3, state_dim: 2, action_dim: 1 }, &stats(4, 5))
            .unwrap();
        assert_eq!(w.len(), 2);
        for layer in &w {
            assert_eq!(layer.len(), 3 * 16);
            for row in layer.chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
