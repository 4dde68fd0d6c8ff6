//! Autoregressive prediction with the trained model.
//!
//! [`CachedForward`] runs the network one grid row at a time, keeping the
//! temporal-attention keys and values of earlier rows so each new row costs a
//! single-row forward pass. When the window is full the oldest row is dropped
//! and the cache is rebuilt with time embeddings restarting at 0.

use log::warn;
use rand::RngCore;

use crate::dataset::{BinStats, TrajectoryRecord};
use crate::encoding::{expectation_unchecked, sample_unchecked, Encoder, VariateBins};
use crate::envs::Policy;
use crate::model::{GridInput, ModelParams};
use crate::tensor::kernels::{self, AttnDims};
use crate::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    #[default]
    Expectation,
    Sample,
}

/// Past rows `(s_t, r_t, a_t)` plus the current state and reward awaiting an
/// action. `rewards[0]` is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
}

impl History {
    pub fn new(s0: Vec<f64>, action_dim: usize) -> Self {
        History {
            state_dim: s0.len(),
            action_dim,
            states: vec![s0],
            rewards: vec![0.0],
            actions: Vec::new(),
        }
    }

    /// The first `t + 1` states of a recorded episode with the actions between them.
    pub fn from_record(rec: &TrajectoryRecord, t: usize) -> Result<Self> {
        if t >= rec.len() {
            return Err(invalid(format!("step {t} beyond episode of {} states", rec.len())));
        }
        let mut h = History::new(rec.state(0).to_vec(), rec.action_dim);
        for i in 0..t {
            h.push(rec.action(i).to_vec(), rec.state(i + 1).to_vec(), rec.rewards[i]);
        }
        Ok(h)
    }

    pub fn push(&mut self, action: Vec<f64>, next_state: Vec<f64>, reward: f64) {
        self.actions.push(action);
        self.states.push(next_state);
        self.rewards.push(reward);
    }

    /// Completed rows (those with an action).
    pub fn rows(&self) -> usize {
        self.actions.len()
    }

    pub fn width(&self) -> usize {
        self.state_dim + 1 + self.action_dim
    }

    pub fn current_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// The last `rows` completed rows and the current state.
    pub fn tail(&self, rows: usize) -> History {
        let skip = self.rows().saturating_sub(rows);
        History {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: self.states[skip..].to_vec(),
            rewards: self.rewards[skip..].to_vec(),
            actions: self.actions[skip..].to_vec(),
        }
    }

    /// Grid row `t`; for `t == rows()` the action slot takes `action`.
    pub fn row(&self, t: usize, action: Option<&[f64]>, out: &mut [f64]) {
        let m = self.state_dim;
        out[..m].copy_from_slice(&self.states[t]);
        out[m] = self.rewards[t];
        let a = if t < self.actions.len() { &self.actions[t][..] } else { action.unwrap() };
        out[m + 1..].copy_from_slice(a);
    }
}

/// Per-layer temporal keys and values for `seqs` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub seqs: usize,
    pub width: usize,
    pub cap: usize,
    /// Rows currently cached.
    pub len: usize,
    d: usize,
    /// Per layer `[seqs · width, cap, d]`.
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `[seqs, cap, width]` raw values for rebuilding after a slide.
    rows: Vec<f64>,
    /// Rows dropped from the front so far.
    pub evicted: usize,
}

impl KvCache {
    /// Copies every sequence `k` times; sequence `s` becomes `s·k .. s·k+k`.
    pub fn repeat(&self, k: usize) -> KvCache {
        let tok = self.cap * self.d;
        let rep = |buf: &[f64], chunk: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(buf.len() * k);
            for c in buf.chunks(chunk) {
                for _ in 0..k {
                    out.extend_from_slice(c);
                }
            }
            out
        };
        KvCache {
            seqs: self.seqs * k,
            k: self.k.iter().map(|l| rep(l, self.width * tok)).collect(),
            v: self.v.iter().map(|l| rep(l, self.width * tok)).collect(),
            rows: rep(&self.rows, self.cap * self.width),
            ..self.clone()
        }
    }

    /// Values of cached row `t` of sequence `s`.
    pub fn row(&self, s: usize, t: usize) -> &[f64] {
        let off = (s * self.cap + t) * self.width;
        &self.rows[off..off + self.width]
    }
}

/// Incremental inference over frozen parameters for one environment layout.
#[derive(Clone, Debug)]
pub struct CachedForward<'a> {
    pub params: &'a ModelParams,
    pub stats: BinStats,
    pub state_dim: usize,
    pub action_dim: usize,
    bins: Vec<VariateBins>,
    encoder: Encoder,
}

impl<'a> CachedForward<'a> {
    pub fn new(params: &'a ModelParams, stats: BinStats, state_dim: usize, action_dim: usize) -> Result<Self> {
        let width = state_dim + 1 + action_dim;
        let cfg = &params.config;
        if stats.variates() != width || stats.bins != cfg.bins || width > cfg.max_variates {
            return Err(Error::DimMismatch(format!(
                "bin stats ({} variates, {} bins) vs layout width {width} and model ({} bins, {} variates)",
                stats.variates(),
                stats.bins,
                cfg.bins,
                cfg.max_variates
            )));
        }
        Ok(CachedForward {
            bins: (0..width).map(|j| stats.variate(j)).collect(),
            encoder: cfg.input_encoder(),
            params,
            stats,
            state_dim,
            action_dim,
        })
    }

    pub fn width(&self) -> usize {
        self.state_dim + 1 + self.action_dim
    }

    pub fn empty_cache(&self, seqs: usize) -> KvCache {
        let cfg = &self.params.config;
        let (w, cap, d) = (self.width(), cfg.max_steps, cfg.d_model);
        KvCache {
            seqs,
            width: w,
            cap,
            len: 0,
            d,
            k: vec![vec![0.0; seqs * w * cap * d]; cfg.layers],
            v: vec![vec![0.0; seqs * w * cap * d]; cfg.layers],
            rows: vec![0.0; seqs * cap * w],
            evicted: 0,
        }
    }

    /// Appends one row per sequence (`rows` is `[seqs, width]`) and returns
    /// that row's logits `[seqs, width, B]`. A full cache first slides by one.
    pub fn append(&self, cache: &mut KvCache, rows: &[f64]) -> Result<Vec<f64>> {
        let w = self.width();
        if cache.width != w || rows.len() != cache.seqs * w || cache.d != self.params.config.d_model {
            return Err(Error::DimMismatch(format!(
                "cache for {} sequences of width {} given {} values",
                cache.seqs,
                cache.width,
                rows.len()
            )));
        }
        if cache.len == cache.cap {
            self.slide(cache)?;
        }
        Ok(self.append_unchecked(cache, rows))
    }

    fn slide(&self, cache: &mut KvCache) -> Result<()> {
        let (w, cap, s) = (cache.width, cache.cap, cache.seqs);
        let keep = cap - 1;
        let old = cache.rows.clone();
        let evicted = cache.evicted + 1;
        *cache = self.empty_cache(s);
        cache.evicted = evicted;
        let mut buf = vec![0.0; s * w];
        for t in 0..keep {
            for q in 0..s {
                let src = (q * cap + t + 1) * w;
                buf[q * w..(q + 1) * w].copy_from_slice(&old[src..src + w]);
            }
            self.append_unchecked(cache, &buf);
        }
        Ok(())
    }

    fn append_unchecked(&self, cache: &mut KvCache, rows: &[f64]) -> Vec<f64> {
        let p = self.params;
        let cfg = &p.config;
        let ix = &p.index;
        let (w, d, nb) = (self.width(), cfg.d_model, cfg.bins);
        let s = cache.seqs;
        let n = s * w;
        let pos = cache.len;
        for q in 0..s {
            let dst = (q * cache.cap + pos) * w;
            cache.rows[dst..dst + w].copy_from_slice(&rows[q * w..(q + 1) * w]);
        }

        let mut enc = vec![0.0; n * nb];
        for (i, &x) in rows.iter().enumerate() {
            self.encoder.encode_into(x, &self.bins[i % w], &mut enc[i * nb..(i + 1) * nb]);
        }
        let mut x = kernels::matmul(&enc, p.get(ix.w_in), n, nb, d);
        let te = &p.get(ix.te)[pos * d..(pos + 1) * d];
        for (tok, xr) in x.chunks_mut(d).enumerate() {
            let j = tok % w;
            let ve = &p.get(ix.ve)[j * d..(j + 1) * d];
            let kind = usize::from(j <= self.state_dim);
            let pe = &p.get(ix.pe)[kind * d..(kind + 1) * d];
            for c in 0..d {
                xr[c] += te[c] + ve[c] + pe[c];
            }
        }

        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; cache.cap];
        for (l, blk) in ix.blocks.iter().enumerate() {
            // temporal attention against cached rows
            let h = norm(&x, p, blk.norms[0], d);
            let qv = kernels::matmul(&h, p.get(blk.temporal.wq), n, d, d);
            let kv = kernels::matmul(&h, p.get(blk.temporal.wk), n, d, d);
            let vv = kernels::matmul(&h, p.get(blk.temporal.wv), n, d, d);
            let (kc, vc) = (&mut cache.k[l], &mut cache.v[l]);
            for g in 0..n {
                let dst = (g * cache.cap + pos) * d;
                kc[dst..dst + d].copy_from_slice(&kv[g * d..(g + 1) * d]);
                vc[dst..dst + d].copy_from_slice(&vv[g * d..(g + 1) * d]);
            }
            let mut att = vec![0.0; n * d];
            for g in 0..n {
                let base = g * cache.cap * d;
                for head in 0..cfg.heads {
                    let off = head * dh;
                    let qi = &qv[g * d + off..g * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for t in 0..=pos {
                        let kt = &kc[base + t * d + off..base + t * d + off + dh];
                        scores[t] = kernels::dot(qi, kt) * scale;
                        max = max.max(scores[t]);
                    }
                    let mut sum = 0.0;
                    for sc in &mut scores[..=pos] {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let out = &mut att[g * d + off..g * d + off + dh];
                    for t in 0..=pos {
                        let pr = scores[t] / sum;
                        let vt = &vc[base + t * d + off..base + t * d + off + dh];
                        for (o, &vv) in out.iter_mut().zip(vt) {
                            *o += pr * vv;
                        }
                    }
                }
            }
            add_linear(&mut x, &att, p.get(blk.temporal.wo), Some(p.get(blk.temporal.bo)), n, d, d);
            let h = norm(&x, p, blk.norms[1], d);
            add_ffn(&mut x, &h, p, &blk.ffn1.layers, n, d);

            // variate attention within the new row
            let h = norm(&x, p, blk.norms[2], d);
            let qv = kernels::matmul(&h, p.get(blk.variate.wq), n, d, d);
            let kv = kernels::matmul(&h, p.get(blk.variate.wk), n, d, d);
            let vv = kernels::matmul(&h, p.get(blk.variate.wv), n, d, d);
            let dims = AttnDims {
                groups: s,
                seq: w,
                d,
                heads: cfg.heads,
                causal: false,
            };
            let (att, _) = kernels::attention_forward(&qv, &kv, &vv, dims, None, None);
            add_linear(&mut x, &att, p.get(blk.variate.wo), Some(p.get(blk.variate.bo)), n, d, d);
            let h = norm(&x, p, blk.norms[3], d);
            add_ffn(&mut x, &h, p, &blk.ffn2.layers, n, d);
        }
        cache.len += 1;
        let h = norm(&x, p, ix.final_norm, d);
        let mut logits = vec![0.0; n * nb];
        add_linear(&mut logits, &h, p.get(ix.w_out), Some(p.get(ix.b_out)), n, d, nb);
        logits
    }
}

fn norm(x: &[f64], p: &ModelParams, (g, b): (usize, usize), d: usize) -> Vec<f64> {
    kernels::layer_norm(x, p.get(g), p.get(b), d).0
}

/// `out += x·w + b`.
fn add_linear(out: &mut [f64], x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, din: usize, dout: usize) {
    let mut y = vec![0.0; n * dout];
    if let Some(b) = b {
        for r in y.chunks_mut(dout) {
            r.copy_from_slice(b);
        }
    }
    kernels::matmul_acc(x, w, n, din, dout, &mut y);
    for (o, v) in out.iter_mut().zip(y) {
        *o += v;
    }
}

fn add_ffn(x: &mut [f64], h: &[f64], p: &ModelParams, layers: &[(usize, usize)], n: usize, d: usize) {
    let mut cur = h.to_vec();
    let mut din = d;
    for (i, &(wi, bi)) in layers.iter().enumerate() {
        let dout = p.tensors[wi].shape()[1];
        let mut y = vec![0.0; n * dout];
        add_linear(&mut y, &cur, p.get(wi), Some(p.get(bi)), n, din, dout);
        if i + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        }
        cur = y;
        din = dout;
    }
    for (o, v) in x.iter_mut().zip(cur) {
        *o += v;
    }
}

/// One predicted transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub state: Vec<f64>,
    pub reward: f64,
}

/// A batched, stateful one-step dynamics model.
pub trait WorldModel {
    type State: Clone;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Starts one sequence per history; all histories must have equal length.
    fn begin(&mut self, histories: &[History]) -> Result<Self::State>;
    /// Replicates each sequence `k` times (sequence `s` → `s·k .. s·k+k`).
    fn repeat(&self, state: &Self::State, k: usize) -> Self::State;
    /// Applies one action per sequence and returns the predicted transitions.
    fn step(&mut self, state: &mut Self::State, actions: &[Vec<f64>], mode: Decode, rng: &mut dyn RngCore) -> Result<Vec<Prediction>>;
}

pub(crate) fn check_actions(actions: &[Vec<f64>], seqs: usize, n: usize) -> Result<()> {
    if actions.len() != seqs || actions.iter().any(|a| a.len() != n) {
        return Err(Error::DimMismatch(format!(
            "expected {seqs} actions of width {n}, got {} (widths {:?})",
            actions.len(),
            actions.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

pub(crate) fn check_histories(histories: &[History], m: usize, n: usize) -> Result<usize> {
    let first = histories.first().ok_or_else(|| invalid("no histories"))?;
    for h in histories {
        if h.state_dim != m || h.action_dim != n || h.states.iter().any(|s| s.len() != m) {
            return Err(Error::DimMismatch(format!("history dims ({}, {}) vs model ({m}, {n})", h.state_dim, h.action_dim)));
        }
        if h.rows() != first.rows() {
            return Err(invalid("histories in one batch must have equal length"));
        }
    }
    Ok(first.rows())
}

/// Cached model state for a batch of sequences.
#[derive(Clone, Debug)]
pub struct TrajState {
    pub cache: KvCache,
    /// `[seqs, m + 1]` current state and reward.
    pub pending: Vec<f64>,
}

/// The trained model as a [`WorldModel`].
#[derive(Clone, Debug)]
pub struct TrajWorld<'a> {
    pub engine: CachedForward<'a>,
    /// Model invocations made by `step`.
    pub forward_passes: u64,
    clamp_warned: bool,
}

impl<'a> TrajWorld<'a> {
    pub fn new(params: &'a ModelParams, stats: BinStats, state_dim: usize, action_dim: usize) -> Result<Self> {
        Ok(TrajWorld {
            engine: CachedForward::new(params, stats, state_dim, action_dim)?,
            forward_passes: 0,
            clamp_warned: false,
        })
    }

    fn note_clamping(&mut self, rows: &[f64]) {
        if self.clamp_warned {
            return;
        }
        let w = self.engine.width();
        if let Some(i) = rows.iter().enumerate().position(|(i, &x)| {
            let vb = &self.engine.bins[i % w];
            x < vb.lo || x > vb.hi
        }) {
            warn!("variate {} value {} outside its bin range; clamped", i % w, rows[i]);
            self.clamp_warned = true;
        }
    }

    /// Decodes state and reward from one row's logits `[seqs, width, B]`.
    fn decode(&self, logits: &mut [f64], mode: Decode, rng: &mut dyn RngCore) -> Vec<Prediction> {
        let (w, m, nb) = (self.engine.width(), self.engine.state_dim, self.engine.params.config.bins);
        kernels::softmax_rows(logits, nb);
        logits
            .chunks(w * nb)
            .map(|seq| {
                let mut vals = (0..=m).map(|j| {
                    let p = &seq[j * nb..(j + 1) * nb];
                    match mode {
                        Decode::Expectation => expectation_unchecked(p, &self.engine.bins[j]),
                        Decode::Sample => sample_unchecked(p, &self.engine.bins[j], rng),
                    }
                });
                let state: Vec<f64> = vals.by_ref().take(m).collect();
                Prediction {
                    state,
                    reward: vals.next().unwrap(),
                }
            })
            .collect()
    }
}

impl WorldModel for TrajWorld<'_> {
    type State = TrajState;

    fn state_dim(&self) -> usize {
        self.engine.state_dim
    }

    fn action_dim(&self) -> usize {
        self.engine.action_dim
    }

    fn begin(&mut self, histories: &[History]) -> Result<TrajState> {
        let (m, n) = (self.engine.state_dim, self.engine.action_dim);
        let rows = check_histories(histories, m, n)?;
        let w = self.engine.width();
        let mut cache = self.engine.empty_cache(histories.len());
        // leave room for the row that carries the next action
        let start = rows.saturating_sub(cache.cap - 1);
        let mut buf = vec![0.0; histories.len() * w];
        for t in start..rows {
            for (q, h) in histories.iter().enumerate() {
                h.row(t, None, &mut buf[q * w..(q + 1) * w]);
            }
            self.note_clamping(&buf);
            self.engine.append(&mut cache, &buf)?;
        }
        cache.evicted = start;
        let mut pending = Vec::with_capacity(histories.len() * (m + 1));
        for h in histories {
            pending.extend_from_slice(h.current_state());
            pending.push(*h.rewards.last().unwrap());
        }
        Ok(TrajState { cache, pending })
    }

    fn repeat(&self, state: &TrajState, k: usize) -> TrajState {
        let m1 = self.engine.state_dim + 1;
        TrajState {
            cache: state.cache.repeat(k),
            pending: state.pending.chunks(m1).flat_map(|c| std::iter::repeat_n(c, k).flatten().copied()).collect(),
        }
    }

    fn step(&mut self, state: &mut TrajState, actions: &[Vec<f64>], mode: Decode, rng: &mut dyn RngCore) -> Result<Vec<Prediction>> {
        let (m, n, w) = (self.engine.state_dim, self.engine.action_dim, self.engine.width());
        let seqs = state.cache.seqs;
        check_actions(actions, seqs, n)?;
        let mut rows = vec![0.0; seqs * w];
        for q in 0..seqs {
            rows[q * w..q * w + m + 1].copy_from_slice(&state.pending[q * (m + 1)..(q + 1) * (m + 1)]);
            rows[q * w + m + 1..(q + 1) * w].copy_from_slice(&actions[q]);
        }
        self.note_clamping(&rows);
        let mut logits = self.engine.append(&mut state.cache, &rows)?;
        self.forward_passes += 1;
        let preds = self.decode(&mut logits, mode, rng);
        for (q, p) in preds.iter().enumerate() {
            state.pending[q * (m + 1)..q * (m + 1) + m].copy_from_slice(&p.state);
            state.pending[q * (m + 1) + m] = p.reward;
        }
        Ok(preds)
    }
}

/// Logits of the last row from a full (uncached) forward over the most
/// recent `max_steps` rows of `history` with `action` appended.
pub fn last_row_logits(params: &ModelParams, stats: &BinStats, history: &History, action: &[f64]) -> Result<Vec<f64>> {
    let w = history.width();
    if action.len() != history.action_dim {
        return Err(Error::DimMismatch(format!("action width {} vs {}", action.len(), history.action_dim)));
    }
    let total = history.rows() + 1;
    let len = total.min(params.config.max_steps);
    let start = total - len;
    let mut values = vec![0.0; len * w];
    for (i, t) in (start..total).enumerate() {
        history.row(t, Some(action), &mut values[i * w..(i + 1) * w]);
    }
    let valid = vec![true; len];
    let input = GridInput {
        values: &values,
        valid: &valid,
        batch: 1,
        steps: len,
        state_dim: history.state_dim,
        action_dim: history.action_dim,
    };
    let logits = params.logits(&input, stats)?;
    let nb = params.config.bins;
    Ok(logits.data()[(len - 1) * w * nb..].to_vec())
}

/// Uncached next-step prediction; appends the transition to `history`.
pub fn predict_next(
    params: &ModelParams,
    stats: &BinStats,
    history: &mut History,
    action: &[f64],
    mode: Decode,
    rng: &mut dyn RngCore,
) -> Result<Prediction> {
    let mut logits = last_row_logits(params, stats, history, action)?;
    let world = TrajWorld::new(params, stats.clone(), history.state_dim, history.action_dim)?;
    let pred = world.decode(&mut logits, mode, rng).remove(0);
    history.push(action.to_vec(), pred.state.clone(), pred.reward);
    Ok(pred)
}

/// Cached next-step prediction for a single sequence; appends the
/// transition to `history`.
pub fn predict_next_cached(
    world: &mut TrajWorld,
    state: &mut TrajState,
    history: &mut History,
    action: &[f64],
    mode: Decode,
    rng: &mut dyn RngCore,
) -> Result<Prediction> {
    if state.cache.seqs != 1 {
        return Err(invalid("cached single-step prediction expects one sequence"));
    }
    let pred = world.step(state, &[action.to_vec()], mode, rng)?.remove(0);
    history.push(action.to_vec(), pred.state.clone(), pred.reward);
    Ok(pred)
}

/// Closed-loop imagined rollout of `horizon` steps from `start`.
pub fn rollout<W: WorldModel, P: Policy + ?Sized>(
    model: &mut W,
    policy: &mut P,
    start: &History,
    horizon: usize,
    mode: Decode,
    rng: &mut dyn RngCore,
) -> Result<TrajectoryRecord> {
    if horizon == 0 {
        return Err(invalid("rollout horizon must be >= 1"));
    }
    let (m, n) = (model.state_dim(), model.action_dim());
    let mut state = model.begin(std::slice::from_ref(start))?;
    let mut obs = start.current_state().to_vec();
    let mut states = obs.clone();
    let mut actions = Vec::with_capacity(horizon * n);
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.act(&obs, rng);
        check_actions(std::slice::from_ref(&a), 1, n)?;
        let pred = model.step(&mut state, std::slice::from_ref(&a), mode, rng)?.remove(0);
        actions.extend_from_slice(&a);
        rewards.push(pred.reward);
        states.extend_from_slice(&pred.state);
        obs = pred.state;
    }
    TrajectoryRecord::new("imagined", m, n, states, actions, rewards)
}
