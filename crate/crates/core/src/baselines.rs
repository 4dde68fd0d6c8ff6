//! Comparison models.
//!
//! * [`TdmParams`]: the scalar grid flattened row-major into one token
//!   sequence with causal one-dimensional attention. Token `p` predicts token
//!   `p + 1`, so decoding a transition takes one forward pass per state and
//!   reward scalar.
//! * [`MlpEnsemble`]: bootstrapped diagonal-Gaussian MLPs over zero-padded
//!   state/action vectors, with elite selection by validation likelihood.

use std::io::{Read, Write};
use std::rc::Rc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_batch, BinStats, DatasetManifest, EnvData, SamplingWeights};
use crate::encoding::{encode_onehot_into, expectation_unchecked, sample_unchecked, Encoder, VariateBins};
use crate::model::{load_named, AttnIdx, Builder, FfnIdx, GridInput, ModelConfig, EMBED_STD};
use crate::rollout::{check_actions, check_histories, Decode, History, Prediction, WorldModel};
use crate::tensor::{write_checkpoint, AttentionSpec, CheckpointPrecision, Tape, Tensor, Var};
use crate::training::{clip_global_norm, lr_schedule, AdamW, BoundBatch, MetricRow, TrainConfig, STREAM_BATCH, STREAM_DROPOUT};
use crate::{derive_seed, invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_hidden: Vec<usize>,
    /// Size of the flat positional table; bounds `T · M`.
    pub max_tokens: usize,
    pub bins: usize,
    pub max_variates: usize,
    pub dropout: f64,
    pub input_sigma: f64,
}

impl Default for TdmConfig {
    fn default() -> Self {
        TdmConfig::from_model(&ModelConfig::default(), 200)
    }
}

impl TdmConfig {
    /// Same transformer sizes as a grid model.
    pub fn from_model(cfg: &ModelConfig, max_tokens: usize) -> Self {
        TdmConfig {
            layers: cfg.layers,
            heads: cfg.heads,
            d_model: cfg.d_model,
            ffn_hidden: cfg.ffn_hidden.clone(),
            max_tokens,
            bins: cfg.bins,
            max_variates: cfg.max_variates,
            dropout: cfg.dropout,
            input_sigma: cfg.input_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.max_tokens < 2 || self.bins < 2 || self.max_variates < 3 {
            return Err(invalid("max_tokens and bins must be >= 2, max_variates >= 3"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.input_sigma <= 0.0 {
            return Err(invalid("dropout must be in [0, 1) and input_sigma > 0"));
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
pub struct TdmBlockIdx {
    pub norms: [(usize, usize); 2],
    pub attn: AttnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdmIndex {
    pub w_in: usize,
    pub pos: usize,
    pub ve: usize,
    pub blocks: Vec<TdmBlockIdx>,
    pub final_norm: (usize, usize),
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdmParams {
    pub config: TdmConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub index: TdmIndex,
}

/// Flat token sequences `[batch, len]`. Every sequence starts at column 0 of
/// a grid row, so token `p` holds variate `p mod M`.
#[derive(Clone, Copy, Debug)]
pub struct FlatInput<'a> {
    pub values: &'a [f64],
    /// Per-token validity; padding precedes the data.
    pub valid: &'a [bool],
    pub batch: usize,
    pub len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl FlatInput<'_> {
    pub fn width(&self) -> usize {
        self.state_dim + 1 + self.action_dim
    }

    fn check(&self, cfg: &TdmConfig, stats: &BinStats) -> Result<()> {
        let n = self.batch * self.len;
        if self.values.len() != n || self.valid.len() != n {
            return Err(Error::DimMismatch(format!(
                "flat input has {} values / {} flags for [{}, {}]",
                self.values.len(),
                self.valid.len(),
                self.batch,
                self.len
            )));
        }
        if self.len > cfg.max_tokens {
            return Err(invalid(format!("sequence of {} tokens exceeds positional table {}", self.len, cfg.max_tokens)));
        }
        if self.width() > cfg.max_variates || stats.variates() != self.width() || stats.bins != cfg.bins {
            return Err(Error::DimMismatch(format!(
                "bin stats ({} variates, {} bins) vs width {} and model ({} bins, {} variates)",
                stats.variates(),
                stats.bins,
                self.width(),
                cfg.bins,
                cfg.max_variates
            )));
        }
        Ok(())
    }
}

/// Per-token validity of a grid batch.
pub fn token_validity(input: &GridInput) -> Vec<bool> {
    input.valid.iter().flat_map(|&v| std::iter::repeat_n(v, input.width())).collect()
}

impl TdmParams {
    pub fn init(config: &TdmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder::new(seed);
        let w_in = b.linear("embed.in", config.bins, d);
        let pos = b.normal("embed.position".into(), &[config.max_tokens, d], EMBED_STD);
        let ve = b.normal("embed.variate".into(), &[config.max_variates, d], EMBED_STD);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("block{l}");
                let n0 = b.norm(&format!("{p}.norm0"), d);
                let attn = b.attn(&format!("{p}.attn"), d);
                let n1 = b.norm(&format!("{p}.norm1"), d);
                let ffn = b.ffn(&format!("{p}.ffn"), d, &config.ffn_hidden);
                TdmBlockIdx { norms: [n0, n1], attn, ffn }
            })
            .collect();
        let final_norm = b.norm("head.norm", d);
        let w_out = b.linear("head.out", d, config.bins);
        let b_out = b.zeros("head.out.b".into(), &[config.bins]);
        Ok(TdmParams {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            index: TdmIndex {
                w_in,
                pos,
                ve,
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

    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| Ok(tape.leaf(t.clone().with_grad())?)).collect()
    }

    pub fn constants(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| Ok(tape.constant(t.clone())?)).collect()
    }

    pub fn save<W: Write>(&self, w: W, precision: CheckpointPrecision) -> Result<()> {
        let recs: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        Ok(write_checkpoint(w, &recs, precision)?)
    }

    pub fn load<R: Read>(config: &TdmConfig, r: R) -> Result<Self> {
        let mut p = TdmParams::init(config, 0)?;
        load_named(r, &p.names, &mut p.tensors, "TDM checkpoint")?;
        Ok(p)
    }

    /// Logits `[batch · len, B]`; row `p` is the distribution of token `p + 1`.
    pub fn forward_taped(&self, tape: &mut Tape, vars: &[Var], input: &FlatInput, stats: &BinStats) -> Result<Var> {
        input.check(&self.config, stats)?;
        let cfg = &self.config;
        let (d, nb, w) = (cfg.d_model, cfg.bins, input.width());
        let (bt, len) = (input.batch, input.len);
        let n = bt * len;
        let ix = &self.index;

        let enc = cfg.input_encoder();
        let mut q = vec![0.0; n * nb];
        let mut pos = vec![0; n];
        let mut col = vec![0; n];
        for b in 0..bt {
            let first = input.valid[b * len..(b + 1) * len].iter().position(|&v| v).unwrap_or(len);
            for p in 0..len {
                let i = b * len + p;
                col[i] = p % w;
                pos[i] = p.saturating_sub(first);
                enc.encode_into(input.values[i], &stats.variate(col[i]), &mut q[i * nb..(i + 1) * nb]);
            }
        }
        let q = tape.constant(Tensor::new(vec![n, nb], q)?)?;
        let mut x = tape.linear(q, vars[ix.w_in], None)?;
        x = tape.add_rows(x, vars[ix.pos], Rc::new(pos))?;
        x = tape.add_rows(x, vars[ix.ve], Rc::new(col))?;

        let key_valid = Rc::new(input.valid.to_vec());
        for (l, blk) in ix.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, vars[blk.norms[0].0], vars[blk.norms[0].1])?;
            let spec = AttentionSpec {
                heads: cfg.heads,
                causal: true,
                key_valid: Some(key_valid.clone()),
                dropout: cfg.dropout,
                site: l as u64 * 16,
            };
            let a = &blk.attn;
            let proj = |tape: &mut Tape, w: usize| -> Result<Var> {
                let y = tape.linear(h, vars[w], None)?;
                Ok(tape.reshape(y, vec![bt, len, d])?)
            };
            let (qv, kv, vv) = (proj(tape, a.wq)?, proj(tape, a.wk)?, proj(tape, a.wv)?);
            let att = tape.attention(qv, kv, vv, &spec)?;
            let att = tape.reshape(att, vec![n, d])?;
            let att = tape.linear(att, vars[a.wo], Some(vars[a.bo]))?;
            x = tape.add(x, att)?;

            let mut h = tape.layer_norm(x, vars[blk.norms[1].0], vars[blk.norms[1].1])?;
            let last = blk.ffn.layers.len() - 1;
            for (i, &(fw, fb)) in blk.ffn.layers.iter().enumerate() {
                h = tape.linear(h, vars[fw], Some(vars[fb]))?;
                if i < last {
                    h = tape.gelu(h)?;
                }
            }
            let h = tape.dropout(h, cfg.dropout, l as u64 * 16 + 1)?;
            x = tape.add(x, h)?;
            if tape.value(x).first_non_finite().is_some() {
                return Err(Error::NonFiniteActivation { block: l });
            }
        }
        let x = tape.layer_norm(x, vars[ix.final_norm.0], vars[ix.final_norm.1])?;
        Ok(tape.linear(x, vars[ix.w_out], Some(vars[ix.b_out]))?)
    }

    /// Evaluation-mode logits `[batch · len, B]`.
    pub fn logits(&self, input: &FlatInput, stats: &BinStats) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape)?;
        let out = self.forward_taped(&mut tape, &vars, input, stats)?;
        Ok(tape.value(out).clone())
    }
}

/// One-hot targets for the next token and `1 / count` weights. Only tokens
/// followed by a valid state or reward token are supervised.
pub fn tdm_targets(input: &FlatInput, stats: &BinStats) -> (Tensor, Vec<f64>, usize) {
    let (bt, len, w, nb) = (input.batch, input.len, input.width(), stats.bins);
    let n = bt * len;
    let mut target = vec![0.0; n * nb];
    let mut weights = vec![0.0; n];
    let mut count = 0;
    for b in 0..bt {
        for p in 0..len.saturating_sub(1) {
            let (i, j) = (b * len + p, (p + 1) % w);
            if j > input.state_dim || !(input.valid[i] && input.valid[i + 1]) {
                continue;
            }
            encode_onehot_into(input.values[i + 1], &stats.variate(j), &mut target[i * nb..(i + 1) * nb]);
            weights[i] = 1.0;
            count += 1;
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        weights.iter_mut().for_each(|v| *v *= inv);
    }
    (Tensor::new(vec![n, nb], target).unwrap(), weights, count)
}

/// Mean next-token cross-entropy over state and reward targets.
pub fn tdm_batch_loss(params: &TdmParams, tape: &mut Tape, vars: &[Var], input: &FlatInput, stats: &BinStats) -> Result<(Var, usize)> {
    let logits = params.forward_taped(tape, vars, input, stats)?;
    let (target, weights, count) = tdm_targets(input, stats);
    Ok((tape.softmax_cross_entropy(logits, target, weights)?, count))
}

fn tdm_loss_and_grads(params: &TdmParams, batch: &BoundBatch, dropout_seed: u64, step: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let grid = batch.input();
    let valid = token_validity(&grid);
    let flat = FlatInput {
        values: grid.values,
        valid: &valid,
        batch: grid.batch,
        len: grid.steps * grid.width(),
        state_dim: grid.state_dim,
        action_dim: grid.action_dim,
    };
    let mut tape = Tape::training(dropout_seed, step);
    let vars = params.register(&mut tape)?;
    let (loss, _) = tdm_batch_loss(params, &mut tape, &vars, &flat, &batch.stats)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.take(v).map(Tensor::into_data).unwrap_or_default()).collect()))
}

/// Trains a TDM with the same batch stream, schedule, clipping and optimizer
/// as the grid model.
pub fn train_tdm(
    mut params: TdmParams,
    sources: &[&DatasetManifest],
    weights: &SamplingWeights,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&MetricRow),
) -> Result<(TdmParams, Vec<MetricRow>)> {
    cfg.validate()?;
    let sizes: Vec<usize> = params.tensors.iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(&sizes, cfg);
    let mut rows = Vec::new();
    for step in 1..=cfg.total_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_BATCH, step]));
        let batch = BoundBatch::bind(sample_batch(sources, weights, cfg.batch_size, cfg.context, &mut rng)?, sources)?;
        let (loss, mut grads) = tdm_loss_and_grads(&params, &batch, derive_seed(cfg.seed, &[STREAM_DROPOUT]), step)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let lr = lr_schedule(step, cfg);
        let mut slices: Vec<&mut [f64]> = params.tensors.iter_mut().map(|t| t.data_mut()).collect();
        opt.update(&mut slices, &grads, lr);
        let row = MetricRow {
            step,
            loss,
            val_loss: None,
            lr,
            grad_norm,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok((params, rows))
}

/// Flat token streams, one per sequence, ending with the current state and
/// reward.
#[derive(Clone, Debug)]
pub struct TdmState {
    pub streams: Vec<Vec<f64>>,
}

/// A TDM as a [`WorldModel`] with sequential scalar decoding.
#[derive(Clone, Debug)]
pub struct TdmWorld<'a> {
    pub params: &'a TdmParams,
    pub stats: BinStats,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Batched forward passes made by `step`.
    pub forward_passes: u64,
    bins: Vec<VariateBins>,
}

impl<'a> TdmWorld<'a> {
    pub fn new(params: &'a TdmParams, stats: BinStats, state_dim: usize, action_dim: usize) -> Result<Self> {
        let w = state_dim + 1 + action_dim;
        let cfg = &params.config;
        if stats.variates() != w || stats.bins != cfg.bins || w > cfg.max_variates {
            return Err(Error::DimMismatch(format!(
                "bin stats ({} variates, {} bins) vs width {w} and model ({} bins)",
                stats.variates(),
                stats.bins,
                cfg.bins
            )));
        }
        if cfg.max_tokens < w + state_dim + 1 {
            return Err(invalid(format!("positional table {} cannot hold one row of width {w}", cfg.max_tokens)));
        }
        Ok(TdmWorld {
            params,
            bins: (0..w).map(|j| stats.variate(j)).collect(),
            stats,
            state_dim,
            action_dim,
            forward_passes: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.state_dim + 1 + self.action_dim
    }

    /// Logits for the token after each stream's end (streams of equal length).
    fn next_token_logits(&mut self, streams: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let len = streams[0].len();
        let values: Vec<f64> = streams.iter().flatten().copied().collect();
        let valid = vec![true; values.len()];
        let input = FlatInput {
            values: &values,
            valid: &valid,
            batch: streams.len(),
            len,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        };
        let logits = self.params.logits(&input, &self.stats)?;
        self.forward_passes += 1;
        let nb = self.params.config.bins;
        Ok((0..streams.len())
            .map(|b| {
                let row = b * len + len - 1;
                logits.data()[row * nb..(row + 1) * nb].to_vec()
            })
            .collect())
    }
}

impl WorldModel for TdmWorld<'_> {
    type State = TdmState;

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn begin(&mut self, histories: &[History]) -> Result<TdmState> {
        let rows = check_histories(histories, self.state_dim, self.action_dim)?;
        let w = self.width();
        let streams = histories
            .iter()
            .map(|h| {
                let mut s = vec![0.0; rows * w];
                for t in 0..rows {
                    h.row(t, None, &mut s[t * w..(t + 1) * w]);
                }
                s.extend_from_slice(h.current_state());
                s.push(*h.rewards.last().unwrap());
                s
            })
            .collect();
        Ok(TdmState { streams })
    }

    fn repeat(&self, state: &TdmState, k: usize) -> TdmState {
        TdmState {
            streams: state.streams.iter().flat_map(|s| std::iter::repeat_n(s.clone(), k)).collect(),
        }
    }

    /// Appends the actions, then decodes the `m` state scalars in index order
    /// followed by the reward, one forward pass each.
    fn step(&mut self, state: &mut TdmState, actions: &[Vec<f64>], mode: Decode, rng: &mut dyn RngCore) -> Result<Vec<Prediction>> {
        let (m, w) = (self.state_dim, self.width());
        check_actions(actions, state.streams.len(), self.action_dim)?;
        let max_rows = (self.params.config.max_tokens - m) / w;
        for (s, a) in state.streams.iter_mut().zip(actions) {
            s.extend_from_slice(a);
            let rows = s.len() / w;
            if rows > max_rows {
                s.drain(..(rows - max_rows) * w);
            }
        }
        let mut vals = vec![Vec::with_capacity(m + 1); state.streams.len()];
        let nb = self.params.config.bins;
        for j in 0..=m {
            let mut logits = self.next_token_logits(&state.streams)?;
            for (b, l) in logits.iter_mut().enumerate() {
                crate::tensor::kernels::softmax_rows(l, nb);
                let x = match mode {
                    Decode::Expectation => expectation_unchecked(l, &self.bins[j]),
                    Decode::Sample => sample_unchecked(l, &self.bins[j], rng),
                };
                vals[b].push(x);
                state.streams[b].push(x);
            }
        }
        Ok(vals
            .into_iter()
            .map(|mut v| {
                let reward = v.pop().unwrap();
                Prediction { state: v, reward }
            })
            .collect())
    }
}

/// Next state and reward for one history and action.
pub fn tdm_predict_next(
    params: &TdmParams,
    stats: &BinStats,
    history: &History,
    action: &[f64],
    mode: Decode,
    rng: &mut dyn RngCore,
) -> Result<Prediction> {
    let mut world = TdmWorld::new(params, stats.clone(), history.state_dim, history.action_dim)?;
    let mut st = world.begin(std::slice::from_ref(history))?;
    Ok(world.step(&mut st, &[action.to_vec()], mode, rng)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpEnsembleConfig {
    pub hidden: Vec<usize>,
    pub ensemble: usize,
    pub elites: usize,
    pub state_pad: usize,
    pub action_pad: usize,
    /// Gradient steps per member.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Episode-agnostic fraction of transitions held out for elite selection.
    pub val_fraction: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub seed: u64,
}

impl Default for MlpEnsembleConfig {
    fn default() -> Self {
        MlpEnsembleConfig {
            hidden: vec![640; 4],
            ensemble: 7,
            elites: 5,
            state_pad: 90,
            action_pad: 30,
            steps: 6000,
            batch_size: 256,
            lr: 3e-3,
            val_fraction: 0.1,
            logvar_min: -10.0,
            logvar_max: 4.0,
            seed: 0,
        }
    }
}

/// Smallest predicted variance.
pub const VAR_FLOOR: f64 = 1e-6;

impl MlpEnsembleConfig {
    /// Small members for single-CPU runs.
    pub fn desk() -> Self {
        MlpEnsembleConfig {
            hidden: vec![64, 64],
            lr: 1e-3,
            ..Default::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_pad + self.action_pad
    }

    pub fn output_dim(&self) -> usize {
        self.state_pad + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble == 0 || self.elites == 0 || self.elites > self.ensemble {
            return Err(invalid(format!("need 1 <= elites ({}) <= ensemble ({})", self.elites, self.ensemble)));
        }
        if self.batch_size == 0 || !(self.val_fraction > 0.0 && self.val_fraction < 1.0) || self.logvar_min >= self.logvar_max {
            return Err(invalid("batch_size must be positive, val_fraction in (0, 1), logvar_min < logvar_max"));
        }
        Ok(())
    }
}

/// Padded transitions: inputs `[n, S + A]`, targets `[n, S + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.in_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn from_envs(envs: &[&EnvData], cfg: &MlpEnsembleConfig) -> Result<Self> {
        let (sp, ap) = (cfg.state_pad, cfg.action_pad);
        let mut t = Transitions {
            inputs: Vec::new(),
            targets: Vec::new(),
            in_dim: sp + ap,
            out_dim: sp + 1,
        };
        for env in envs {
            let (m, n) = (env.spec.state_dim, env.spec.action_dim);
            if m > sp || n > ap {
                return Err(invalid(format!("{} ({m}, {n}) exceeds padding ({sp}, {ap})", env.spec.env_id)));
            }
            for rec in &env.records {
                for i in 0..rec.len() - 1 {
                    t.inputs.extend(pad(rec.state(i), sp).chain(pad(rec.action(i), ap)));
                    t.targets.extend(pad(rec.state(i + 1), sp));
                    t.targets.push(rec.rewards[i]);
                }
            }
        }
        Ok(t)
    }

    fn subset(&self, idx: &[usize]) -> Transitions {
        let mut t = Transitions {
            inputs: Vec::with_capacity(idx.len() * self.in_dim),
            targets: Vec::with_capacity(idx.len() * self.out_dim),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        };
        for &i in idx {
            t.inputs.extend_from_slice(&self.inputs[i * self.in_dim..(i + 1) * self.in_dim]);
            t.targets.extend_from_slice(&self.targets[i * self.out_dim..(i + 1) * self.out_dim]);
        }
        t
    }
}

fn pad(v: &[f64], to: usize) -> impl Iterator<Item = f64> + '_ {
    v.iter().copied().chain(std::iter::repeat_n(0.0, to - v.len()))
}

/// `n` indices drawn uniformly with replacement from `0..n`.
pub fn bootstrap_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// One member: weights and biases of each layer; the last layer emits
/// means and raw log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpMember {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpMember {
    fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (1.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
                (Tensor::new(vec![w[0], w[1]], data).unwrap(), Tensor::zeros(&[w[1]]))
            })
            .collect();
        MlpMember { layers }
    }

    /// `(mean, log-variance)` vars for `[rows, in]` inputs.
    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, out_dim: usize, lv: (f64, f64)) -> Result<(Var, Var)> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = tape.linear(h, vars[2 * i], Some(vars[2 * i + 1]))?;
            if i < last {
                h = tape.gelu(h)?;
            }
        }
        let mean = tape.slice_cols(h, 0, out_dim)?;
        let raw = tape.slice_cols(h, out_dim, out_dim)?;
        Ok((mean, tape.soft_clamp(raw, lv.0, lv.1)?))
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }
}

/// Trained ensemble with input standardization and elite indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEnsemble {
    pub config: MlpEnsembleConfig,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub members: Vec<MlpMember>,
    pub elites: Vec<usize>,
    /// Validation NLL per member.
    pub val_nll: Vec<f64>,
}

impl MlpEnsemble {
    /// Untrained members with identity standardization and every member elite.
    pub fn init(cfg: &MlpEnsembleConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![cfg.input_dim()];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(2 * cfg.output_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
        Ok(MlpEnsemble {
            input_mean: vec![0.0; cfg.input_dim()],
            input_std: vec![1.0; cfg.input_dim()],
            members: (0..cfg.ensemble).map(|_| MlpMember::init(&dims, &mut rng)).collect(),
            elites: (0..cfg.elites).collect(),
            val_nll: vec![f64::NAN; cfg.ensemble],
            config: cfg.clone(),
        })
    }

    fn standardize(&self, inputs: &[f64]) -> Vec<f64> {
        let d = self.config.input_dim();
        inputs
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.input_mean[i % d]) / self.input_std[i % d])
            .collect()
    }

    fn member_vars(&self, k: usize, tape: &mut Tape, grad: bool) -> Result<Vec<Var>> {
        self.members[k]
            .tensors()
            .map(|t| Ok(if grad { tape.leaf(t.clone().with_grad())? } else { tape.constant(t.clone())? }))
            .collect()
    }

    /// Mean and variance `[rows, S + 1]` of member `k` (variance floored).
    pub fn member_predict(&self, k: usize, inputs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.config.input_dim();
        if inputs.len() % d != 0 {
            return Err(Error::DimMismatch(format!("{} input values for width {d}", inputs.len())));
        }
        let mut tape = Tape::new();
        let vars = self.member_vars(k, &mut tape, false)?;
        let x = tape.constant(Tensor::new(vec![inputs.len() / d, d], self.standardize(inputs))?)?;
        let (mean, lv) = self.members[k].forward(&mut tape, &vars, x, self.config.output_dim(), (self.config.logvar_min, self.config.logvar_max))?;
        let var = tape.value(lv).data().iter().map(|&l| l.exp().max(VAR_FLOOR)).collect();
        Ok((tape.value(mean).data().to_vec(), var))
    }

    /// Mean Gaussian NLL per sample of member `k` on `data`.
    pub fn member_nll(&self, k: usize, data: &Transitions) -> Result<f64> {
        let (mean, var) = self.member_predict(k, &data.inputs)?;
        let mut total = 0.0;
        for ((&y, &mu), &v) in data.targets.iter().zip(&mean).zip(&var) {
            total += gaussian_nll(y, mu, v);
        }
        Ok(total / data.len() as f64)
    }

    /// Uniformly chosen elite.
    pub fn pick_elite<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.elites.is_empty() {
            return Err(Error::Empty("ensemble has no elites".into()));
        }
        Ok(self.elites[rng.random_range(0..self.elites.len())])
    }

    /// Next state and reward from a uniformly drawn elite: its mean, or a
    /// Gaussian sample.
    pub fn predict<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], mode: Decode, rng: &mut R) -> Result<Prediction> {
        let (sp, ap) = (self.config.state_pad, self.config.action_pad);
        if state.len() > sp || action.len() > ap {
            return Err(Error::DimMismatch(format!("({}, {}) exceeds padding ({sp}, {ap})", state.len(), action.len())));
        }
        let k = self.pick_elite(rng)?;
        let input: Vec<f64> = pad(state, sp).chain(pad(action, ap)).collect();
        let (mean, var) = self.member_predict(k, &input)?;
        let out: Vec<f64> = match mode {
            Decode::Expectation => mean,
            Decode::Sample => mean.iter().zip(&var).map(|(&mu, &v)| mu + v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        Ok(Prediction {
            state: out[..state.len()].to_vec(),
            reward: out[sp],
        })
    }

    pub fn save<W: Write>(&self, w: W, precision: CheckpointPrecision) -> Result<()> {
        let mut recs = vec![
            ("norm.mean".to_string(), Tensor::from_vec(self.input_mean.clone())),
            ("norm.std".to_string(), Tensor::from_vec(self.input_std.clone())),
            ("elites".to_string(), Tensor::from_vec(self.elites.iter().map(|&e| e as f64).collect())),
        ];
        for (k, m) in self.members.iter().enumerate() {
            for (i, (wt, b)) in m.layers.iter().enumerate() {
                recs.push((format!("member{k}.{i}.w"), wt.clone()));
                recs.push((format!("member{k}.{i}.b"), b.clone()));
            }
        }
        Ok(write_checkpoint(w, &recs, precision)?)
    }

    pub fn load<R: Read>(cfg: &MlpEnsembleConfig, r: R) -> Result<Self> {
        let mut e = MlpEnsemble::init(cfg)?;
        let mut names = vec!["norm.mean".to_string(), "norm.std".to_string(), "elites".to_string()];
        let mut tensors = vec![
            Tensor::from_vec(e.input_mean.clone()),
            Tensor::from_vec(e.input_std.clone()),
            Tensor::from_vec(vec![0.0; cfg.elites]),
        ];
        for (k, m) in e.members.iter().enumerate() {
            for (i, (wt, b)) in m.layers.iter().enumerate() {
                names.push(format!("member{k}.{i}.w"));
                tensors.push(wt.clone());
                names.push(format!("member{k}.{i}.b"));
                tensors.push(b.clone());
            }
        }
        load_named(r, &names, &mut tensors, "ensemble checkpoint")?;
        let mut it = tensors.into_iter();
        e.input_mean = it.next().unwrap().into_data();
        e.input_std = it.next().unwrap().into_data();
        e.elites = it.next().unwrap().data().iter().map(|&v| v as usize).collect();
        if e.elites.iter().any(|&k| k >= cfg.ensemble) {
            return Err(Error::Format {
                what: "ensemble checkpoint",
                reason: "elite index out of range".into(),
            });
        }
        for m in &mut e.members {
            for (wt, b) in &mut m.layers {
                *wt = it.next().unwrap();
                *b = it.next().unwrap();
            }
        }
        Ok(e)
    }
}

/// `½[(y − μ)²/v + ln v + ln 2π]`.
pub fn gaussian_nll(y: f64, mu: f64, var: f64) -> f64 {
    0.5 * ((y - mu).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Trains every member on its own bootstrap resample of the training split
/// with Adam on the Gaussian NLL, then keeps the members with the lowest
/// validation NLL as elites.
pub fn mlp_ensemble_train(data: &Transitions, cfg: &MlpEnsembleConfig) -> Result<MlpEnsemble> {
    cfg.validate()?;
    if data.in_dim != cfg.input_dim() || data.out_dim != cfg.output_dim() {
        return Err(Error::DimMismatch(format!(
            "transitions ({}, {}) vs ensemble ({}, {})",
            data.in_dim,
            data.out_dim,
            cfg.input_dim(),
            cfg.output_dim()
        )));
    }
    let n = data.len();
    let n_val = ((n as f64) * cfg.val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Empty(format!("{n} transitions cannot be split with fraction {}", cfg.val_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let val = data.subset(&order[..n_val]);
    let train = data.subset(&order[n_val..]);

    let mut ens = MlpEnsemble::init(cfg)?;
    let d = cfg.input_dim();
    for j in 0..d {
        let col = train.inputs.iter().skip(j).step_by(d);
        let mean = col.clone().sum::<f64>() / train.len() as f64;
        let var = col.map(|x| (x - mean).powi(2)).sum::<f64>() / train.len() as f64;
        ens.input_mean[j] = mean;
        ens.input_std[j] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    }
    let inputs = ens.standardize(&train.inputs);
    let train = Transitions { inputs, ..train };

    let lr_cfg = TrainConfig {
        beta1: 0.9,
        beta2: 0.999,
        adam_eps: 1e-8,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    for k in 0..cfg.ensemble {
        let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, k as u64]));
        let boot = bootstrap_indices(train.len(), &mut mrng);
        let sizes: Vec<usize> = ens.members[k].tensors().map(|t| t.len()).collect();
        let mut opt = AdamW::new(&sizes, &lr_cfg);
        let bs = cfg.batch_size.min(boot.len());
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..bs).map(|_| boot[mrng.random_range(0..boot.len())]).collect();
            let batch = train.subset(&idx);
            let mut tape = Tape::new();
            let vars = ens.member_vars(k, &mut tape, true)?;
            let x = tape.constant(Tensor::new(vec![bs, d], batch.inputs)?)?;
            let (mean, lv) = ens.members[k].forward(&mut tape, &vars, x, cfg.output_dim(), (cfg.logvar_min, cfg.logvar_max))?;
            let target = Tensor::new(vec![bs, cfg.output_dim()], batch.targets)?;
            let loss = tape.gaussian_nll(mean, lv, target, vec![1.0 / bs as f64; bs])?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFiniteLoss { step: opt.t + 1 });
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = vars.iter().map(|&v| grads.take(v).map(Tensor::into_data).unwrap_or_default()).collect();
            let mut slices: Vec<&mut [f64]> = ens.members[k].layers.iter_mut().flat_map(|(w, b)| [w.data_mut(), b.data_mut()]).collect();
            opt.update(&mut slices, &g, cfg.lr);
        }
    }
    ens.val_nll = (0..cfg.ensemble).map(|k| ens.member_nll(k, &val)).collect::<Result<_>>()?;
    let mut rank: Vec<usize> = (0..cfg.ensemble).collect();
    rank.sort_by(|&a, &b| ens.val_nll[a].total_cmp(&ens.val_nll[b]).then(a.cmp(&b)));
    ens.elites = rank[..cfg.elites].to_vec();
    ens.elites.sort_unstable();
    Ok(ens)
}

/// The ensemble as a memoryless [`WorldModel`]. Elites are drawn from the
/// stream passed to `step`.
#[derive(Clone, Debug)]
pub struct MlpWorld<'a> {
    pub ensemble: &'a MlpEnsemble,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl WorldModel for MlpWorld<'_> {
    type State = Vec<Vec<f64>>;

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn begin(&mut self, histories: &[History]) -> Result<Vec<Vec<f64>>> {
        check_histories(histories, self.state_dim, self.action_dim)?;
        Ok(histories.iter().map(|h| h.current_state().to_vec()).collect())
    }

    fn repeat(&self, state: &Vec<Vec<f64>>, k: usize) -> Vec<Vec<f64>> {
        state.iter().flat_map(|s| std::iter::repeat_n(s.clone(), k)).collect()
    }

    fn step(&mut self, state: &mut Vec<Vec<f64>>, actions: &[Vec<f64>], mode: Decode, rng: &mut dyn RngCore) -> Result<Vec<Prediction>> {
        check_actions(actions, state.len(), self.action_dim)?;
        let preds: Vec<Prediction> = state
            .iter()
            .zip(actions)
            .map(|(s, a)| self.ensemble.predict(s, a, mode, rng))
            .collect::<Result<_>>()?;
        for (s, p) in state.iter_mut().zip(&preds) {
            s.clone_from(&p.state);
        }
        Ok(preds)
    }
}
