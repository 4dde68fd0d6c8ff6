//! Model-based off-policy evaluation, ranking metrics, transition-error
//! reports and model-predictive control.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::EnvData;
use crate::envs::{Env, Policy};
use crate::model::{GridInput, ModelParams, PredictionGrid};
use crate::encoding::expectation_unchecked;
use crate::rollout::{check_actions, check_histories, Decode, History, Prediction, WorldModel};
use crate::{derive_seed, invalid, Error, Result};

const STREAM_MODEL: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpeConfig {
    pub gamma: f64,
    pub horizon: usize,
    pub mode: Decode,
    pub seed: u64,
    /// Policy actions are clamped to these limits before reaching the model.
    pub action_bounds: Option<(f64, f64)>,
}

impl Default for OpeConfig {
    fn default() -> Self {
        OpeConfig {
            gamma: 0.99,
            horizon: 200,
            mode: Decode::Expectation,
            seed: 0,
            action_bounds: None,
        }
    }
}

impl OpeConfig {
    pub fn full_scale() -> Self {
        OpeConfig {
            gamma: 0.995,
            horizon: 2000,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueEstimate {
    pub value: f64,
    pub returns: Vec<f64>,
    pub gamma: f64,
    pub horizon: usize,
}

/// Monte Carlo policy evaluation inside `model`: one imagined rollout per
/// start, discounted rewards summed, returns averaged. Rollout `i` draws
/// policy randomness from stream `(seed, i)`.
pub fn ope_estimate<W: WorldModel, P: Policy + ?Sized>(model: &mut W, policy: &mut P, starts: &[History], cfg: &OpeConfig) -> Result<PolicyValueEstimate> {
    if starts.is_empty() {
        return Err(Error::Empty("no initial states".into()));
    }
    if !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) {
        return Err(invalid(format!("gamma must be in (0, 1], got {}", cfg.gamma)));
    }
    let mut state = model.begin(starts)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..starts.len()).map(|i| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[i as u64]))).collect();
    let mut model_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_MODEL]));
    let mut obs: Vec<Vec<f64>> = starts.iter().map(|h| h.current_state().to_vec()).collect();
    let mut returns = vec![0.0; starts.len()];
    let mut disc = 1.0;
    for _ in 0..cfg.horizon {
        let actions: Vec<Vec<f64>> = obs
            .iter()
            .zip(rngs.iter_mut())
            .map(|(o, r)| clamp_action(policy.act(o, r), cfg.action_bounds))
            .collect();
        let preds = model.step(&mut state, &actions, cfg.mode, &mut model_rng)?;
        for (i, p) in preds.into_iter().enumerate() {
            returns[i] += disc * p.reward;
            obs[i] = p.state;
        }
        disc *= cfg.gamma;
    }
    Ok(PolicyValueEstimate {
        value: returns.iter().sum::<f64>() / returns.len() as f64,
        returns,
        gamma: cfg.gamma,
        horizon: cfg.horizon,
    })
}

fn clamp_action(mut a: Vec<f64>, bounds: Option<(f64, f64)>) -> Vec<f64> {
    if let Some((lo, hi)) = bounds {
        a.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
    a
}

/// Start histories of `context` completed rows taken from recorded episodes,
/// `per_episode` per record at staggered offsets.
pub fn ope_starts(env: &EnvData, context: usize, per_episode: usize) -> Result<Vec<History>> {
    if context == 0 || per_episode == 0 {
        return Err(invalid("context and per_episode must be positive"));
    }
    let mut out = Vec::with_capacity(env.records.len() * per_episode);
    for (i, rec) in env.records.iter().enumerate() {
        if rec.len() <= context {
            return Err(invalid(format!("episode {i} has {} states, need more than {context}", rec.len())));
        }
        let span = rec.len() - context;
        for k in 0..per_episode {
            let t = context + (40 * k + 13 * i % 50) % span;
            out.push(History::from_record(rec, t)?.tail(context));
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no episodes for {}", env.spec.env_id)));
    }
    Ok(out)
}

/// The true simulator behind the [`WorldModel`] interface.
#[derive(Clone, Debug)]
pub struct SimWorld<E: Env> {
    pub env: E,
}

impl<E: Env> WorldModel for SimWorld<E> {
    type State = Vec<E>;

    fn state_dim(&self) -> usize {
        self.env.spec().state_dim
    }

    fn action_dim(&self) -> usize {
        self.env.spec().action_dim
    }

    fn begin(&mut self, histories: &[History]) -> Result<Vec<E>> {
        check_histories(histories, self.state_dim(), self.action_dim())?;
        Ok(histories
            .iter()
            .map(|h| {
                let mut e = self.env.clone();
                e.set_observation(h.current_state());
                e
            })
            .collect())
    }

    fn repeat(&self, state: &Vec<E>, k: usize) -> Vec<E> {
        state.iter().flat_map(|e| std::iter::repeat_n(e.clone(), k)).collect()
    }

    fn step(&mut self, state: &mut Vec<E>, actions: &[Vec<f64>], _mode: Decode, _rng: &mut dyn RngCore) -> Result<Vec<Prediction>> {
        check_actions(actions, state.len(), self.action_dim())?;
        Ok(state
            .iter_mut()
            .zip(actions)
            .map(|(e, a)| {
                let (s, r) = e.step(a);
                Prediction { state: s, reward: r }
            })
            .collect())
    }
}

fn normalizer(truth: &[f64]) -> Result<f64> {
    let max = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range > 0.0 && range.is_finite() {
        Ok(range)
    } else {
        Err(invalid("true values need at least two distinct finite entries for normalization"))
    }
}

fn check_pair(truth: &[f64], est: &[f64], min: usize) -> Result<()> {
    if truth.len() != est.len() || truth.len() < min {
        return Err(Error::DimMismatch(format!(
            "need equal-length lists of at least {min}, got {} and {}",
            truth.len(),
            est.len()
        )));
    }
    Ok(())
}

/// Mean absolute error between true and estimated values.
pub fn abs_err(truth: &[f64], est: &[f64]) -> Result<f64> {
    check_pair(truth, est, 1)?;
    Ok(truth.iter().zip(est).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64)
}

/// [`abs_err`] divided by the spread of true values.
pub fn normalized_abs_err(truth: &[f64], est: &[f64]) -> Result<f64> {
    Ok(abs_err(truth, est)? / normalizer(truth)?)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn rank_correlation(truth: &[f64], est: &[f64]) -> Result<f64> {
    check_pair(truth, est, 2)?;
    let (a, b) = (average_ranks(truth), average_ranks(est));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(invalid("rank correlation is undefined for a constant list"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Best true value minus the best true value among the `k` highest estimates
/// (ties in the estimate go to the lower index).
pub fn regret_at_k(truth: &[f64], est: &[f64], k: usize) -> Result<f64> {
    check_pair(truth, est, 1)?;
    if k == 0 || k > truth.len() {
        return Err(invalid(format!("k must be in 1..={}, got {k}", truth.len())));
    }
    let mut idx: Vec<usize> = (0..est.len()).collect();
    idx.sort_by(|&a, &b| est[b].total_cmp(&est[a]).then(a.cmp(&b)));
    let best = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let picked = idx[..k].iter().map(|&i| truth[i]).fold(f64::NEG_INFINITY, f64::max);
    Ok(best - picked)
}

pub fn normalized_regret_at_k(truth: &[f64], est: &[f64], k: usize) -> Result<f64> {
    Ok(regret_at_k(truth, est, k)? / normalizer(truth)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeMetrics {
    pub abs_err: f64,
    pub normalized_abs_err: f64,
    pub rank_corr: f64,
    pub regret_at_1: f64,
    pub normalized_regret_at_1: f64,
    pub value_range: f64,
}

pub fn ope_metrics(truth: &[f64], est: &[f64]) -> Result<OpeMetrics> {
    Ok(OpeMetrics {
        abs_err: abs_err(truth, est)?,
        normalized_abs_err: normalized_abs_err(truth, est)?,
        rank_corr: rank_correlation(truth, est)?,
        regret_at_1: regret_at_k(truth, est, 1)?,
        normalized_regret_at_1: normalized_regret_at_k(truth, est, 1)?,
        value_range: normalizer(truth)?,
    })
}

/// Which transitions a prediction report covers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Rows of history fed to the predictor.
    pub context: usize,
    /// Earliest target row; targets before it are skipped.
    pub first_target: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(context: usize) -> Self {
        WindowSpec {
            context,
            first_target: context,
            stride: 1,
        }
    }
}

/// One prediction target: rows `target − context .. target` of an episode
/// predict the state and reward of row `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub episode: usize,
    pub target: usize,
}

pub fn windows(env: &EnvData, spec: WindowSpec) -> Result<Vec<Window>> {
    if spec.context == 0 || spec.stride == 0 || spec.first_target < spec.context {
        return Err(invalid("context and stride must be positive and first_target >= context"));
    }
    let mut out = Vec::new();
    for (e, rec) in env.records.iter().enumerate() {
        let mut t = spec.first_target;
        while t < rec.len() {
            out.push(Window { episode: e, target: t });
            t += spec.stride;
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no episode of {} is long enough for the requested windows", env.spec.env_id)));
    }
    Ok(out)
}

/// Per-variate error of next-step predictions (state dims, then reward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub count: usize,
    pub mae: Vec<f64>,
    pub mse: Vec<f64>,
    pub mean_mae: f64,
    pub mean_mse: f64,
}

impl ErrorReport {
    pub fn from_pairs(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Self> {
        if preds.is_empty() || preds.len() != truths.len() {
            return Err(Error::Empty("no prediction/target pairs".into()));
        }
        let w = truths[0].len();
        let mut mae = vec![0.0; w];
        let mut mse = vec![0.0; w];
        for (p, t) in preds.iter().zip(truths) {
            if p.len() != w || t.len() != w {
                return Err(Error::DimMismatch("prediction widths differ".into()));
            }
            for j in 0..w {
                let e = p[j] - t[j];
                mae[j] += e.abs();
                mse[j] += e * e;
            }
        }
        let n = preds.len() as f64;
        mae.iter_mut().for_each(|v| *v /= n);
        mse.iter_mut().for_each(|v| *v /= n);
        Ok(ErrorReport {
            count: preds.len(),
            mean_mae: mae.iter().sum::<f64>() / w as f64,
            mean_mse: mse.iter().sum::<f64>() / w as f64,
            mae,
            mse,
        })
    }

    /// Ratios of this report's errors to a reference report's.
    pub fn normalized_by(&self, reference: &ErrorReport) -> ErrorReport {
        let div = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x / y).collect::<Vec<_>>();
        ErrorReport {
            count: self.count,
            mae: div(&self.mae, &reference.mae),
            mse: div(&self.mse, &reference.mse),
            mean_mae: self.mean_mae / reference.mean_mae,
            mean_mse: self.mean_mse / reference.mean_mse,
        }
    }
}

/// Ground-truth `(s_target, r_target)` for each window.
pub fn window_targets(env: &EnvData, wins: &[Window]) -> Vec<Vec<f64>> {
    let m = env.spec.state_dim;
    wins.iter()
        .map(|w| {
            let rec = &env.records[w.episode];
            let mut v = rec.state(w.target).to_vec();
            v.push(rec.rewards[w.target - 1]);
            v
        })
        .inspect(|v| debug_assert_eq!(v.len(), m + 1))
        .collect()
}

/// Error of a generic predictor. `predict` maps a chunk of windows to one
/// `(s, r)` vector per window.
pub fn error_report_with<F>(env: &EnvData, spec: WindowSpec, mut predict: F) -> Result<ErrorReport>
where
    F: FnMut(&[Window]) -> Result<Vec<Vec<f64>>>,
{
    let wins = windows(env, spec)?;
    let truths = window_targets(env, &wins);
    let mut preds = Vec::with_capacity(wins.len());
    for chunk in wins.chunks(64) {
        preds.extend(predict(chunk)?);
    }
    ErrorReport::from_pairs(&preds, &truths)
}

/// Baseline that predicts the next state and reward to equal the current ones.
pub fn mirroring_error_report(env: &EnvData, spec: WindowSpec) -> Result<ErrorReport> {
    error_report_with(env, spec, |chunk| {
        Ok(chunk
            .iter()
            .map(|w| {
                let rec = &env.records[w.episode];
                let t = w.target - 1;
                let mut v = rec.state(t).to_vec();
                v.push(if t > 0 { rec.rewards[t - 1] } else { 0.0 });
                v
            })
            .collect())
    })
}

/// Expectation-decoded model predictions over `context`-row windows.
pub fn prediction_error_report(params: &ModelParams, env: &EnvData, spec: WindowSpec) -> Result<ErrorReport> {
    let stats = env
        .bin_stats
        .as_ref()
        .ok_or_else(|| invalid(format!("environment {} has no bin statistics", env.spec.env_id)))?;
    if spec.context > params.config.max_steps {
        return Err(invalid(format!("context {} exceeds model window {}", spec.context, params.config.max_steps)));
    }
    let (m, n) = (env.spec.state_dim, env.spec.action_dim);
    let w = env.spec.variates();
    let bins: Vec<_> = (0..=m).map(|j| stats.variate(j)).collect();
    error_report_with(env, spec, |chunk| {
        let c = spec.context;
        let mut values = vec![0.0; chunk.len() * c * w];
        for (b, win) in chunk.iter().enumerate() {
            let rec = &env.records[win.episode];
            for (i, t) in (win.target - c..win.target).enumerate() {
                rec.grid_row(t, &mut values[(b * c + i) * w..(b * c + i + 1) * w]);
            }
        }
        let valid = vec![true; chunk.len() * c];
        let input = GridInput {
            values: &values,
            valid: &valid,
            batch: chunk.len(),
            steps: c,
            state_dim: m,
            action_dim: n,
        };
        let pred: PredictionGrid = params.forward(&input, stats)?;
        Ok((0..chunk.len())
            .map(|b| (0..=m).map(|j| expectation_unchecked(pred.slice(b * c + c - 1, j), &bins[j])).collect())
            .collect())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planner {
    Proposal,
    RandomShooting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub candidates: usize,
    pub horizon: usize,
    pub noise_sigma: f64,
    pub planner: Planner,
    pub replan_every: usize,
    /// Most recent history rows handed to the model when planning.
    pub context: usize,
    pub mode: Decode,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            candidates: 128,
            horizon: 10,
            noise_sigma: 0.05,
            planner: Planner::Proposal,
            replan_every: 1,
            context: 10,
            mode: Decode::Expectation,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.horizon == 0 || self.replan_every == 0 {
            return Err(invalid("candidates, horizon and replan_every must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be finite and >= 0"));
        }
        if self.replan_every > self.horizon {
            return Err(invalid("replan_every cannot exceed the planning horizon"));
        }
        Ok(())
    }
}

/// Outcome of one planning call.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcPlan {
    /// Action sequence of the chosen candidate, `[horizon][n]`.
    pub actions: Vec<Vec<f64>>,
    /// Predicted cumulative reward of every candidate.
    pub returns: Vec<f64>,
    pub best: usize,
}

impl MpcPlan {
    pub fn first_action(&self) -> &[f64] {
        &self.actions[0]
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores `candidates` action sequences in the model and returns the best.
/// Candidate `k` draws its noise (and proposal randomness) from stream
/// `(seed, k)`.
pub fn mpc_plan<W: WorldModel, P: Policy + ?Sized>(
    model: &mut W,
    history: &History,
    proposal: Option<&mut P>,
    cfg: &MpcConfig,
    bounds: (f64, f64),
    seed: u64,
) -> Result<MpcPlan> {
    cfg.validate()?;
    let mut proposal = match (cfg.planner, proposal) {
        (Planner::Proposal, None) => return Err(invalid("proposal planner needs a proposal policy")),
        (Planner::Proposal, p) => p,
        (Planner::RandomShooting, _) => None,
    };
    let k = cfg.candidates;
    let n = model.action_dim();
    let start = history.tail(cfg.context);
    let base = model.begin(std::slice::from_ref(&start))?;
    let mut state = model.repeat(&base, k);
    let mut rngs: Vec<ChaCha8Rng> = (0..k as u64).map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i]))).collect();
    let mut model_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_MODEL]));
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut obs = vec![start.current_state().to_vec(); k];
    let mut seqs = vec![Vec::with_capacity(cfg.horizon); k];
    let mut returns = vec![0.0; k];
    for _ in 0..cfg.horizon {
        let mut actions = Vec::with_capacity(k);
        for c in 0..k {
            let rng = &mut rngs[c];
            let mut a = match proposal.as_deref_mut() {
                Some(p) => p.act(&obs[c], rng),
                None => vec![0.0; n],
            };
            if cfg.noise_sigma > 0.0 {
                a.iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            a.iter_mut().for_each(|v| *v = v.clamp(bounds.0, bounds.1));
            actions.push(a);
        }
        let preds = model.step(&mut state, &actions, cfg.mode, &mut model_rng)?;
        for (c, (p, a)) in preds.into_iter().zip(actions).enumerate() {
            returns[c] += p.reward;
            obs[c] = p.state;
            seqs[c].push(a);
        }
    }
    let best = argmax_first(&returns);
    Ok(MpcPlan {
        actions: seqs.swap_remove(best),
        returns,
        best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub total_return: f64,
    pub rewards: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
}

/// Receding-horizon control of `env` for `max_steps` steps, replanning every
/// `replan_every` steps. The environment is reset from stream `(seed, 0)`.
pub fn mpc_episode<W: WorldModel, E: Env, P: Policy + ?Sized>(
    model: &mut W,
    env: &E,
    mut proposal: Option<&mut P>,
    cfg: &MpcConfig,
    max_steps: usize,
    seed: u64,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    let mut log = EpisodeLog {
        total_return: 0.0,
        rewards: Vec::new(),
        actions: Vec::new(),
    };
    if max_steps == 0 {
        return Ok(log);
    }
    let mut env = env.clone();
    let bounds = env.action_bounds();
    let mut reset_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let s0 = env.reset(&mut reset_rng);
    let mut history = History::new(s0, env.spec().action_dim);
    let mut plan: Vec<Vec<f64>> = Vec::new();
    let mut cursor = 0;
    for t in 0..max_steps {
        if t % cfg.replan_every == 0 {
            let step_seed = derive_seed(seed, &[1, t as u64]);
            plan = mpc_plan(model, &history, proposal.as_deref_mut(), cfg, bounds, step_seed)?.actions;
            cursor = 0;
        }
        let a = plan[cursor].clone();
        cursor += 1;
        let (next, r) = env.step(&a);
        history.push(a.clone(), next, r);
        log.total_return += r;
        log.rewards.push(r);
        log.actions.push(a);
    }
    Ok(log)
}

/// The proposal policy alone on the same reset as [`mpc_episode`].
pub fn policy_episode<E: Env, P: Policy + ?Sized>(env: &E, policy: &mut P, max_steps: usize, seed: u64) -> EpisodeLog {
    let mut env = env.clone();
    let (lo, hi) = env.action_bounds();
    let mut reset_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let mut obs = env.reset(&mut reset_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut log = EpisodeLog {
        total_return: 0.0,
        rewards: Vec::new(),
        actions: Vec::new(),
    };
    for _ in 0..max_steps {
        let a: Vec<f64> = policy.act(&obs, &mut rng).iter().map(|v| v.clamp(lo, hi)).collect();
        let (next, r) = env.step(&a);
        log.total_return += r;
        log.rewards.push(r);
        log.actions.push(a);
        obs = next;
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{true_returns, PendulumEnv, PendulumParams, Plant, PolicyKind, ScriptedPolicy, ZeroPolicy};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    /// Toy model: reward is a fixed constant, or the first action coordinate.
    #[derive(Clone)]
    struct ToyWorld {
        reward: Option<f64>,
        steps: usize,
    }

    impl WorldModel for ToyWorld {
        type State = usize;
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn begin(&mut self, h: &[History]) -> Result<usize> {
            Ok(h.len())
        }
        fn repeat(&self, s: &usize, k: usize) -> usize {
            s * k
        }
        fn step(&mut self, s: &mut usize, actions: &[Vec<f64>], _: Decode, _: &mut dyn RngCore) -> Result<Vec<Prediction>> {
            self.steps += 1;
            check_actions(actions, *s, 1)?;
            Ok(actions
                .iter()
                .map(|a| Prediction {
                    state: vec![a[0]],
                    reward: self.reward.unwrap_or(a[0]),
                })
                .collect())
        }
    }

    #[test]
    fn geometric_return() {
        let mut w = ToyWorld { reward: Some(1.0), steps: 0 };
        let starts = vec![History::new(vec![0.0], 1); 4];
        let cfg = OpeConfig { gamma: 0.5, horizon: 3, ..Default::default() };
        let est = ope_estimate(&mut w, &mut ZeroPolicy(1), &starts, &cfg).unwrap();
        assert!((est.value - 1.75).abs() < 1e-12);
        assert!(est.returns.iter().all(|&r| r == est.value));
    }

    #[test]
    fn ope_on_simulator_matches_monte_carlo() {
        let env = PendulumEnv::new(PendulumParams::with_gravity(9.0));
        let plant = Plant::Pendulum(env.params);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let starts: Vec<Vec<f64>> = (0..6).map(|_| env.clone().reset(&mut rng)).collect();
        let cfg = OpeConfig { gamma: 0.97, horizon: 50, seed: 11, action_bounds: Some(env.action_bounds()), ..Default::default() };
        let mut policy = ScriptedPolicy::new(PolicyKind::NoisyExpert, 0.5, plant);
        let truth = true_returns(&env, &mut policy, &starts, cfg.gamma, cfg.horizon, cfg.seed);
        let hist: Vec<History> = starts.iter().map(|s| History::new(s.clone(), 1)).collect();
        let est = ope_estimate(&mut SimWorld { env }, &mut policy, &hist, &cfg).unwrap();
        assert_eq!(est.returns, truth);
    }

    #[test]
    fn abs_err_examples() {
        assert_eq!(abs_err(&[5.0], &[3.0]).unwrap(), 2.0);
        assert_eq!(abs_err(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((abs_err(&[0.0, 10.0], &[1.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((normalized_abs_err(&[0.0, 10.0], &[1.0, 9.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!(normalized_abs_err(&[3.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rank_correlation_examples() {
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[4.0, 5.0, 9.0]).unwrap(), 1.0);
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((rank_correlation(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(rank_correlation(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn regret_examples() {
        assert_eq!(regret_at_k(&[10.0, 20.0, 30.0], &[30.0, 10.0, 20.0], 1).unwrap(), 20.0);
        assert_eq!(normalized_regret_at_k(&[10.0, 20.0, 30.0], &[30.0, 10.0, 20.0], 1).unwrap(), 1.0);
        assert_eq!(regret_at_k(&[10.0, 20.0, 30.0], &[1.0, 2.0, 3.0], 1).unwrap(), 0.0);
        assert_eq!(regret_at_k(&[10.0, 20.0, 30.0], &[30.0, 10.0, 20.0], 3).unwrap(), 0.0);
        assert!(regret_at_k(&[1.0], &[1.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn spearman_invariant_to_monotone_transforms(v in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..12)) {
            let truth: Vec<f64> = v.iter().map(|p| p.0).collect();
            let est: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(a) = rank_correlation(&truth, &est) {
                let t: Vec<f64> = est.iter().map(|x| (x / 50.0).exp() * 3.0 + 7.0).collect();
                let b = rank_correlation(&truth, &t).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn regret_non_increasing_in_k(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..10)) {
            let truth: Vec<f64> = v.iter().map(|p| p.0).collect();
            let est: Vec<f64> = v.iter().map(|p| p.1).collect();
            let mut prev = f64::INFINITY;
            for k in 1..=truth.len() {
                let r = regret_at_k(&truth, &est, k).unwrap();
                prop_assert!(r >= 0.0 && r <= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 0.0);
        }
    }

    fn data_env(seed: u64) -> EnvData {
        let mut e = crate::envs::pendulum_dataset(10.0, 3, 40, 0.5, seed).unwrap();
        e.compute_bin_stats(16).unwrap();
        e
    }

    #[test]
    fn error_report_matches_naive_loop() {
        let env = data_env(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = WindowSpec { context: 3, first_target: 5, stride: 2 };
        let mut preds_seen = Vec::new();
        let rep = error_report_with(&env, spec, |chunk| {
            let p: Vec<Vec<f64>> = chunk.iter().map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            preds_seen.extend(p.clone());
            Ok(p)
        })
        .unwrap();
        let mut i = 0;
        let mut mae = [0.0; 4];
        for rec in &env.records {
            let mut t = 5;
            while t < rec.len() {
                let truth = [rec.state(t)[0], rec.state(t)[1], rec.state(t)[2], rec.rewards[t - 1]];
                for j in 0..4 {
                    mae[j] += (preds_seen[i][j] - truth[j]).abs();
                }
                i += 1;
                t += 2;
            }
        }
        assert_eq!(rep.count, i);
        for j in 0..4 {
            assert!((rep.mae[j] - mae[j] / i as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_predictor_on_constant_data_has_zero_error() {
        let rec = crate::dataset::TrajectoryRecord::new("c", 1, 1, vec![2.0; 6], vec![0.0; 5], vec![-1.0; 5]).unwrap();
        let env = EnvData::new(crate::dataset::EnvSpec::new("c", 1, 1).unwrap(), vec![rec]).unwrap();
        let rep = error_report_with(&env, WindowSpec::new(2), |c| Ok(vec![vec![2.0, -1.0]; c.len()])).unwrap();
        assert_eq!(rep.mean_mae, 0.0);
        assert!(error_report_with(&env, WindowSpec::new(9), |c| Ok(vec![vec![0.0, 0.0]; c.len()])).is_err());
    }

    #[test]
    fn model_report_runs_on_every_context() {
        let env = data_env(3);
        let cfg = crate::model::ModelConfig { layers: 1, d_model: 8, heads: 2, ffn_hidden: vec![8], bins: 16, max_variates: 8, ..Default::default() };
        let p = ModelParams::init(&cfg, 0).unwrap();
        for c in [1, 5, 19] {
            let spec = WindowSpec { context: c, first_target: 19, stride: 3 };
            let rep = prediction_error_report(&p, &env, spec).unwrap();
            let base = mirroring_error_report(&env, spec).unwrap();
            assert_eq!(rep.count, base.count);
            assert_eq!(rep.mae.len(), 4);
        }
    }

    #[test]
    fn mpc_without_noise_returns_the_proposal_action() {
        let env = PendulumEnv::new(PendulumParams::default());
        let plant = Plant::Pendulum(env.params);
        let h = History::new(vec![-1.0, 0.1, 0.3], 1);
        let expert = ScriptedPolicy::new(PolicyKind::EnergySwingup, 0.0, plant);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let direct = expert.clone().act(&h.states[0], &mut rng);
        for k in [1, 5] {
            let cfg = MpcConfig { candidates: k, horizon: 4, noise_sigma: 0.0, context: 4, ..Default::default() };
            let mut p = expert.clone();
            let plan = mpc_plan(&mut SimWorld { env: env.clone() }, &h, Some(&mut p), &cfg, env.action_bounds(), 3).unwrap();
            assert_eq!(plan.first_action(), &direct[..]);
            assert!(plan.returns.iter().all(|&r| r == plan.returns[0]));
        }
    }

    #[test]
    fn mpc_picks_the_best_candidate() {
        // reward = action, so the best candidate has the largest action sum
        let mut w = ToyWorld { reward: None, steps: 0 };
        let cfg = MpcConfig { candidates: 3, horizon: 2, noise_sigma: 1.0, planner: Planner::RandomShooting, context: 2, ..Default::default() };
        let h = History::new(vec![0.0], 1);
        for seed in 0..20 {
            let plan = mpc_plan(&mut w, &h, None::<&mut ZeroPolicy>, &cfg, (-5.0, 5.0), seed).unwrap();
            let brute = (0..3).max_by(|&a, &b| plan.returns[a].total_cmp(&plan.returns[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(plan.best, brute);
            let sum: f64 = plan.actions.iter().map(|a| a[0]).sum();
            assert!((sum - plan.returns[plan.best]).abs() < 1e-12);
        }
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn mpc_requires_a_proposal_and_valid_config() {
        let mut w = ToyWorld { reward: None, steps: 0 };
        let h = History::new(vec![0.0], 1);
        assert!(mpc_plan(&mut w, &h, None::<&mut ZeroPolicy>, &MpcConfig::default(), (-1.0, 1.0), 0).is_err());
        let bad = MpcConfig { candidates: 0, ..Default::default() };
        assert!(mpc_plan(&mut w, &h, Some(&mut ZeroPolicy(1)), &bad, (-1.0, 1.0), 0).is_err());
    }

    #[test]
    fn zero_step_episode_touches_nothing() {
        let mut w = ToyWorld { reward: None, steps: 0 };
        let env = PendulumEnv::new(PendulumParams::default());
        let log = mpc_episode(&mut w, &env, Some(&mut ZeroPolicy(1)), &MpcConfig::default(), 0, 1).unwrap();
        assert_eq!(log.total_return, 0.0);
        assert_eq!(w.steps, 0);
    }

    #[test]
    fn mpc_on_the_true_simulator_beats_its_proposal() {
        let env = PendulumEnv::new(PendulumParams::default());
        let plant = Plant::Pendulum(env.params);
        let cfg = MpcConfig { candidates: 32, horizon: 10, noise_sigma: 0.1, context: 8, ..Default::default() };
        let mut wins = 0;
        for seed in 0..5 {
            let mut p = ScriptedPolicy::new(PolicyKind::NoisyExpert, crate::envs::MEDIUM_NOISE, plant);
            let mpc = mpc_episode(&mut SimWorld { env: env.clone() }, &env, Some(&mut p), &cfg, 60, seed).unwrap();
            let base = policy_episode(&env, &mut p, 60, seed);
            if mpc.total_return > base.total_return {
                wins += 1;
            }
        }
        assert!(wins >= 4, "{wins}/5");
    }
}
