//! Optimization: warmup-cosine schedule, AdamW with global-norm clipping,
//! multi-source pre-training, fine-tuning with early stopping, and
//! resumable checkpoints.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_bin_stats, sample_batch, Batch, BinStats, DatasetManifest, SamplingWeights};
use crate::model::{batch_loss, GridInput, ModelConfig, ModelParams};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointPrecision, Tape, Tensor};
use crate::{derive_seed, invalid, Error, Result};

pub(crate) const STREAM_BATCH: u64 = 1;
pub(crate) const STREAM_DROPOUT: u64 = 2;
const STREAM_VAL: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Window length drawn per sample.
    pub context: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Validation batches drawn once and reused at every evaluation.
    pub val_batches: usize,
    /// Evaluations without improvement before fine-tuning stops.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain_desk()
    }
}

impl TrainConfig {
    pub fn pretrain_desk() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            total_steps: 20_000,
            batch_size: 16,
            context: 20,
            peak_lr: 3e-3,
            warmup_steps: 500,
            weight_decay: 1e-5,
            grad_clip_norm: 0.25,
            seed: 0,
            eval_every: 500,
            val_batches: 8,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn finetune_desk() -> Self {
        TrainConfig {
            mode: TrainMode::Finetune,
            total_steps: 1_000,
            peak_lr: 1e-3,
            warmup_steps: 50,
            eval_every: 100,
            ..TrainConfig::pretrain_desk()
        }
    }

    /// Full-size pre-training hyperparameters.
    pub fn pretrain_full() -> Self {
        TrainConfig {
            total_steps: 1_000_000,
            batch_size: 64,
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            eval_every: 5_000,
            ..TrainConfig::pretrain_desk()
        }
    }

    /// Full-size fine-tuning hyperparameters (300 epochs of 5000 steps).
    pub fn finetune_full() -> Self {
        TrainConfig {
            mode: TrainMode::Finetune,
            total_steps: 1_500_000,
            batch_size: 64,
            peak_lr: 1e-5,
            warmup_steps: 10_000,
            eval_every: 5_000,
            ..TrainConfig::pretrain_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(invalid(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.context < 2 || self.eval_every == 0 || self.val_batches == 0 {
            return Err(invalid("batch_size, eval_every and val_batches must be positive and context >= 2"));
        }
        let positive = [self.peak_lr, self.grad_clip_norm, self.adam_eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.weight_decay < 0.0 {
            return Err(invalid("peak_lr, grad_clip_norm and adam_eps must be positive, weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let step = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps) + self.weight_decay * p[k];
                p[k] -= lr * step;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "step,loss,val_loss,lr,grad_norm")?;
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, val, r.lr, r.grad_norm)?;
    }
    Ok(())
}

/// A batch bound to its environment's dimensions and bin statistics.
#[derive(Clone, Debug)]
pub struct BoundBatch {
    pub batch: Batch,
    pub state_dim: usize,
    pub action_dim: usize,
    pub stats: BinStats,
}

impl BoundBatch {
    pub fn bind(batch: Batch, sources: &[&DatasetManifest]) -> Result<Self> {
        let env = &sources[batch.source].envs[batch.env];
        let stats = env
            .bin_stats
            .clone()
            .ok_or_else(|| invalid(format!("environment {} has no bin statistics", env.spec.env_id)))?;
        Ok(BoundBatch {
            state_dim: env.spec.state_dim,
            action_dim: env.spec.action_dim,
            batch,
            stats,
        })
    }

    pub fn input(&self) -> GridInput<'_> {
        GridInput {
            values: &self.batch.values,
            valid: &self.batch.valid,
            batch: self.batch.size,
            steps: self.batch.steps,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }
}

/// Loss and gradients of one batch; `step` addresses the dropout masks.
pub fn loss_and_grads(params: &ModelParams, batch: &BoundBatch, dropout_seed: u64, step: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::training(dropout_seed, step);
    let vars = params.register(&mut tape)?;
    let (loss, _) = batch_loss(params, &mut tape, &vars, &batch.input(), &batch.stats)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|&v| grads.take(v).map(Tensor::into_data).unwrap_or_default())
        .collect();
    Ok((value, g))
}

/// Mean next-step loss over `batches`, dropout off, weighted by target count.
pub fn eval_loss(params: &ModelParams, batches: &[BoundBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape)?;
        let (loss, n) = batch_loss(params, &mut tape, &vars, &b.input(), &b.stats)?;
        total += tape.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("validation batches have no targets".into()));
    }
    Ok(total / count as f64)
}

/// Fixed validation windows drawn with the configuration's validation stream.
pub fn validation_set(sources: &[&DatasetManifest], cfg: &TrainConfig) -> Result<Vec<BoundBatch>> {
    let weights = SamplingWeights::uniform(sources.iter().map(|s| s.name.as_str()));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_VAL]));
    (0..cfg.val_batches)
        .map(|_| BoundBatch::bind(sample_batch(sources, &weights, cfg.batch_size, cfg.context, &mut rng)?, sources))
        .collect()
}

/// Model, optimizer and step counter of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub step: u64,
    pub metrics: Vec<MetricRow>,
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = params.tensors.iter().map(|t| t.len()).collect();
        Ok(Trainer {
            opt: AdamW::new(&sizes, &cfg),
            params,
            cfg,
            step: 0,
            metrics: Vec::new(),
        })
    }

    /// One clipped AdamW update on `batch`. The learning rate is the schedule
    /// value at the post-update step count.
    pub fn train_step(&mut self, batch: &BoundBatch) -> Result<MetricRow> {
        let step = self.step + 1;
        let (loss, mut grads) = loss_and_grads(&self.params, batch, derive_seed(self.cfg.seed, &[STREAM_DROPOUT]), step)?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = lr_schedule(step, &self.cfg);
        let mut slices: Vec<&mut [f64]> = self.params.tensors.iter_mut().map(|t| t.data_mut()).collect();
        self.opt.update(&mut slices, &grads, lr);
        self.step = step;
        Ok(MetricRow {
            step,
            loss,
            val_loss: None,
            lr,
            grad_norm,
        })
    }

    /// The batch drawn for update `step` (1-based); independent of history.
    pub fn draw_batch(&self, sources: &[&DatasetManifest], weights: &SamplingWeights, step: u64) -> Result<BoundBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[STREAM_BATCH, step]));
        BoundBatch::bind(sample_batch(sources, weights, self.cfg.batch_size, self.cfg.context, &mut rng)?, sources)
    }

    /// Trains until `until` steps (capped at `total_steps`), evaluating every
    /// `eval_every` steps when `val` is non-empty. `on_row` sees every row.
    pub fn run(
        &mut self,
        sources: &[&DatasetManifest],
        weights: &SamplingWeights,
        val: &[BoundBatch],
        until: u64,
        on_row: &mut dyn FnMut(&MetricRow) -> Control,
    ) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        while self.step < until {
            let batch = self.draw_batch(sources, weights, self.step + 1)?;
            let mut row = self.train_step(&batch)?;
            if !val.is_empty() && row.step % self.cfg.eval_every == 0 {
                row.val_loss = Some(eval_loss(&self.params, val)?);
            }
            self.metrics.push(row.clone());
            if on_row(&row) == Control::Stop {
                break;
            }
        }
        Ok(())
    }

    /// Lossless training state: f64 parameters, moments and counters.
    pub fn save_state<W: Write>(&self, w: W, model_cfg_json: &str) -> Result<()> {
        let mut recs: Vec<(String, Tensor)> = Vec::new();
        for (i, name) in self.params.names.iter().enumerate() {
            recs.push((format!("param/{name}"), self.params.tensors[i].clone()));
        }
        for (i, name) in self.params.names.iter().enumerate() {
            let shape = self.params.tensors[i].shape().to_vec();
            recs.push((format!("adam_m/{name}"), Tensor::new(shape.clone(), self.opt.m[i].clone())?));
            recs.push((format!("adam_v/{name}"), Tensor::new(shape, self.opt.v[i].clone())?));
        }
        recs.push(("state/step".into(), Tensor::scalar(self.step as f64)));
        recs.push(("state/adam_t".into(), Tensor::scalar(self.opt.t as f64)));
        recs.push(("state/config_hash".into(), Tensor::scalar(config_hash(model_cfg_json, &self.cfg) as f64)));
        Ok(write_checkpoint(w, &recs, CheckpointPrecision::F64)?)
    }

    /// Restores a state written by [`Trainer::save_state`] under the same configuration.
    pub fn load_state<R: Read>(r: R, model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let model_json = serde_json::to_string(model_cfg)?;
        let mut t = Trainer::new(ModelParams::init(model_cfg, 0)?, cfg)?;
        let (recs, _) = read_checkpoint(r)?;
        let n = t.params.names.len();
        if recs.len() != 3 * n + 3 {
            return Err(Error::Format {
                what: "training state",
                reason: format!("{} records, expected {}", recs.len(), 3 * n + 3),
            });
        }
        let expect = |i: usize, name: String, shape: &[usize]| -> Result<Tensor> {
            let (got, tensor) = &recs[i];
            if *got != name || tensor.shape() != shape {
                return Err(Error::Format {
                    what: "training state",
                    reason: format!("record {i} is {got}, expected {name}"),
                });
            }
            Ok(tensor.clone())
        };
        for i in 0..n {
            let shape = t.params.tensors[i].shape().to_vec();
            let name = t.params.names[i].clone();
            t.params.tensors[i] = expect(i, format!("param/{name}"), &shape)?;
            t.opt.m[i] = expect(n + 2 * i, format!("adam_m/{name}"), &shape)?.into_data();
            t.opt.v[i] = expect(n + 2 * i + 1, format!("adam_v/{name}"), &shape)?.into_data();
        }
        t.step = expect(3 * n, "state/step".into(), &[])?.item() as u64;
        t.opt.t = expect(3 * n + 1, "state/adam_t".into(), &[])?.item() as u64;
        let hash = expect(3 * n + 2, "state/config_hash".into(), &[])?.item();
        if hash != config_hash(&model_json, &t.cfg) as f64 {
            return Err(invalid("training state was written under a different configuration"));
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// FNV-1a over the model and training configuration JSON, truncated to 52
/// bits so it survives storage as an f64.
pub fn config_hash(model_cfg_json: &str, cfg: &TrainConfig) -> u64 {
    let train = serde_json::to_string(cfg).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in model_cfg_json.bytes().chain([0u8]).chain(train.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h & ((1 << 52) - 1)
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricRow>,
    pub best_val_loss: Option<f64>,
    pub best_step: u64,
}

/// Pre-trains on weighted sources, with validation on `val` sources if given.
pub fn pretrain(
    params: ModelParams,
    sources: &[&DatasetManifest],
    weights: &SamplingWeights,
    val: &[&DatasetManifest],
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&MetricRow) -> Control,
) -> Result<TrainOutcome> {
    if sources.is_empty() {
        return Err(Error::Empty("pre-training needs at least one source".into()));
    }
    check_fits(&params.config, sources)?;
    let mut trainer = Trainer::new(params, cfg.clone())?;
    let val_set = if val.is_empty() { Vec::new() } else { validation_set(val, cfg)? };
    trainer.run(sources, weights, &val_set, cfg.total_steps, on_row)?;
    let best = trainer
        .metrics
        .iter()
        .filter_map(|r| r.val_loss.map(|v| (v, r.step)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    Ok(TrainOutcome {
        params: trainer.params,
        metrics: trainer.metrics,
        best_val_loss: best.map(|b| b.0),
        best_step: best.map(|b| b.1).unwrap_or(cfg.total_steps),
    })
}

fn check_fits(cfg: &ModelConfig, sources: &[&DatasetManifest]) -> Result<()> {
    for s in sources {
        for e in &s.envs {
            if e.spec.variates() > cfg.max_variates {
                return Err(invalid(format!(
                    "environment {} has {} variates, model supports {}",
                    e.spec.env_id,
                    e.spec.variates(),
                    cfg.max_variates
                )));
            }
        }
    }
    Ok(())
}

/// Recomputes per-environment bin statistics from the union of `train` and
/// `val` episodes and installs them on both.
pub fn refit_bin_stats(train: &mut DatasetManifest, val: &mut DatasetManifest, bins: usize) -> Result<()> {
    if train.envs.len() != val.envs.len() {
        return Err(Error::DimMismatch(format!(
            "train has {} environments, validation {}",
            train.envs.len(),
            val.envs.len()
        )));
    }
    for (t, v) in train.envs.iter_mut().zip(val.envs.iter_mut()) {
        let all: Vec<_> = t.records.iter().chain(&v.records).cloned().collect();
        let stats = compute_bin_stats(&all, bins)?;
        t.bin_stats = Some(stats.clone());
        v.bin_stats = Some(stats);
    }
    Ok(())
}

/// Fine-tunes on one dataset with early stopping on validation loss. Bin
/// statistics are refit on the fine-tuning data; the returned parameters are
/// those with the best validation loss (the input if no evaluation ran).
pub fn finetune(
    params: ModelParams,
    train: &mut DatasetManifest,
    val: &mut DatasetManifest,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&MetricRow) -> Control,
) -> Result<TrainOutcome> {
    check_fits(&params.config, &[train, val])?;
    refit_bin_stats(train, val, params.config.bins)?;
    let sources = [&*train];
    let weights = SamplingWeights::uniform([train.name.as_str()]);
    let val_set = validation_set(&[&*val], cfg)?;
    let initial = eval_loss(&params, &val_set)?;
    let mut best = (initial, 0u64, params.clone());
    let mut stale = 0usize;
    let mut trainer = Trainer::new(params, cfg.clone())?;
    while trainer.step < cfg.total_steps {
        let batch = trainer.draw_batch(&sources, &weights, trainer.step + 1)?;
        let mut row = trainer.train_step(&batch)?;
        let mut stop = false;
        if row.step % cfg.eval_every == 0 {
            let v = eval_loss(&trainer.params, &val_set)?;
            row.val_loss = Some(v);
            if v < best.0 {
                best = (v, row.step, trainer.params.clone());
                stale = 0;
            } else {
                stale += 1;
                stop = cfg.patience > 0 && stale >= cfg.patience;
            }
        }
        trainer.metrics.push(row.clone());
        if on_row(&row) == Control::Stop || stop {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        metrics: trainer.metrics,
        best_val_loss: Some(best.0),
        best_step: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::pendulum_dataset;
    use proptest::prelude::{prop_assert, proptest};

    fn toy_model() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            ffn_hidden: vec![32, 16],
            max_steps: 8,
            bins: 16,
            max_variates: 8,
            dropout: 0.05,
            input_sigma: 0.75,
        }
    }

    fn toy_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 4,
            context: 8,
            warmup_steps: 5,
            eval_every: 10,
            val_batches: 2,
            seed: 7,
            ..TrainConfig::pretrain_desk()
        }
    }

    fn source(name: &str, g: f64) -> DatasetManifest {
        let mut env = pendulum_dataset(g, 6, 30, 0.5, 3).unwrap();
        env.compute_bin_stats(16).unwrap();
        DatasetManifest::new(name, vec![env])
    }

    #[test]
    fn schedule_values() {
        let pre = TrainConfig::pretrain_full();
        let fine = TrainConfig::finetune_full();
        assert_eq!(lr_schedule(pre.warmup_steps, &pre), 1e-4);
        assert_eq!(lr_schedule(fine.warmup_steps, &fine), 1e-5);
        assert_eq!(lr_schedule(0, &pre), 0.0);
        let mid = (pre.warmup_steps + pre.total_steps) / 2;
        assert!((lr_schedule(mid, &pre) - 0.5e-4).abs() < 1e-15);
        assert!(lr_schedule(pre.total_steps, &pre).abs() < 1e-20);
        assert!((lr_schedule(pre.warmup_steps / 2, &pre) - 0.5e-4).abs() < 1e-15);
    }

    #[test]
    fn full_scale_optimizer_rows() {
        let c = TrainConfig::pretrain_full();
        assert_eq!((c.batch_size, c.warmup_steps, c.total_steps), (64, 10_000, 1_000_000));
        assert_eq!((c.weight_decay, c.grad_clip_norm), (1e-5, 0.25));
    }

    #[test]
    fn clipping_rescales_to_the_threshold() {
        let mut g = vec![vec![6.0, 0.0], vec![8.0]];
        let n = clip_global_norm(&mut g, 0.25);
        assert!((n - 10.0).abs() < 1e-12);
        let after = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 0.25).abs() < 1e-9);
        let mut small = vec![vec![0.1]];
        assert_eq!(clip_global_norm(&mut small, 0.25), 0.1);
        assert_eq!(small[0][0], 0.1);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_threshold(v in proptest::collection::vec(-1e3f64..1e3, 1..40), clip in 1e-3f64..10.0) {
            let mut g = vec![v];
            clip_global_norm(&mut g, clip);
            let n = g[0].iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n <= clip + 1e-9);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let cfg = toy_cfg(10);
        let mut p = vec![vec![0.3, -1.2, 5.0]];
        let before = p.clone();
        let mut opt = AdamW::new(&[3], &cfg);
        let mut slices: Vec<&mut [f64]> = p.iter_mut().map(|v| v.as_mut_slice()).collect();
        opt.update(&mut slices, &[vec![1.0, -2.0, 0.5]], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_converges_to_its_minimum() {
        let cfg = TrainConfig {
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 0.1,
            weight_decay: 0.0,
            ..toy_cfg(2000)
        };
        let mut x = vec![vec![-4.0]];
        let mut opt = AdamW::new(&[1], &cfg);
        for step in 1..=cfg.total_steps {
            let mut g = vec![vec![2.0 * (x[0][0] - 3.0)]];
            clip_global_norm(&mut g, 1e9);
            let mut s: Vec<&mut [f64]> = x.iter_mut().map(|v| v.as_mut_slice()).collect();
            opt.update(&mut s, &g, lr_schedule(step, &cfg));
        }
        assert!((x[0][0] - 3.0).abs() < 1e-6, "x = {}", x[0][0]);
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let a = source("a", 9.0);
        let b = source("b", 11.0);
        let weights = SamplingWeights::uniform(["a", "b"]);
        let cfg = toy_cfg(500);
        let run = || pretrain(ModelParams::init(&toy_model(), 1).unwrap(), &[&a, &b], &weights, &[&a], &cfg, &mut |_| Control::Continue).unwrap();
        let out = run();
        let head: f64 = out.metrics[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let tail: f64 = out.metrics[480..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(tail < head, "{tail} vs {head}");
        assert_eq!(out.metrics.len(), 500);
        assert!(out.metrics.iter().all(|r| r.grad_norm.is_finite()));
        let again = pretrain(ModelParams::init(&toy_model(), 1).unwrap(), &[&a, &b], &weights, &[&a], &toy_cfg(40), &mut |_| Control::Continue).unwrap();
        let twice = pretrain(ModelParams::init(&toy_model(), 1).unwrap(), &[&a, &b], &weights, &[&a], &toy_cfg(40), &mut |_| Control::Continue).unwrap();
        assert_eq!(again.metrics, twice.metrics);
        assert_eq!(again.params, twice.params);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let a = source("a", 10.0);
        let weights = SamplingWeights::uniform(["a"]);
        let cfg = toy_cfg(30);
        let val = validation_set(&[&a], &cfg).unwrap();
        let model = toy_model();
        let mut full = Trainer::new(ModelParams::init(&model, 2).unwrap(), cfg.clone()).unwrap();
        full.run(&[&a], &weights, &val, 30, &mut |_| Control::Continue).unwrap();

        let mut first = Trainer::new(ModelParams::init(&model, 2).unwrap(), cfg.clone()).unwrap();
        first.run(&[&a], &weights, &val, 13, &mut |_| Control::Continue).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let mut buf = Vec::new();
        first.save_state(&mut buf, &json).unwrap();
        let mut resumed = Trainer::load_state(buf.as_slice(), &model, cfg.clone()).unwrap();
        assert_eq!(resumed.params, first.params);
        resumed.run(&[&a], &weights, &val, 30, &mut |_| Control::Continue).unwrap();
        let mut stitched = first.metrics.clone();
        stitched.extend(resumed.metrics.iter().cloned());
        assert_eq!(stitched, full.metrics);
        assert_eq!(resumed.params, full.params);

        let other = TrainConfig { peak_lr: 2e-3, ..cfg };
        assert!(Trainer::load_state(buf.as_slice(), &model, other).is_err());
    }

    #[test]
    fn finetune_without_steps_returns_the_checkpoint() {
        let mut train = source("t", 7.0);
        let mut val = source("v", 7.0);
        let p = ModelParams::init(&toy_model(), 3).unwrap();
        let cfg = TrainConfig { total_steps: 0, ..toy_cfg(0) };
        let out = finetune(p.clone(), &mut train, &mut val, &cfg, &mut |_| Control::Continue).unwrap();
        assert_eq!(out.params, p);
        assert!(out.metrics.is_empty());
        assert_eq!(train.envs[0].bin_stats, val.envs[0].bin_stats);
    }

    #[test]
    fn finetune_keeps_the_best_validation_checkpoint() {
        let mut train = source("t", 7.0);
        let mut val = source("v", 7.2);
        let p = ModelParams::init(&toy_model(), 3).unwrap();
        let cfg = TrainConfig { total_steps: 60, patience: 2, ..toy_cfg(60) };
        let out = finetune(p.clone(), &mut train, &mut val, &cfg, &mut |_| Control::Continue).unwrap();
        let vs: Vec<f64> = out.metrics.iter().filter_map(|r| r.val_loss).collect();
        let best = out.best_val_loss.unwrap();
        assert!(vs.iter().all(|&v| v >= best));
        let val_set = validation_set(&[&val], &cfg).unwrap();
        assert_eq!(eval_loss(&out.params, &val_set).unwrap(), best);
    }

    #[test]
    fn oversized_environment_is_rejected() {
        let a = source("a", 10.0);
        let cfg = ModelConfig { max_variates: 4, ..toy_model() };
        let p = ModelParams::init(&cfg, 0).unwrap();
        let w = SamplingWeights::uniform(["a"]);
        assert!(pretrain(p, &[&a], &w, &[], &toy_cfg(5), &mut |_| Control::Continue).is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![
            MetricRow { step: 1, loss: 2.5, val_loss: None, lr: 0.1, grad_norm: 3.0 },
            MetricRow { step: 2, loss: 2.0, val_loss: Some(1.5), lr: 0.2, grad_norm: 1.0 },
        ];
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,loss,val_loss,lr,grad_norm\n1,2.5,,0.1,3\n2,2,1.5,0.2,1\n");
    }
}
