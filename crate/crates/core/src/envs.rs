//! Classic-control environments, scripted policies and replay collection.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{EnvData, EnvSpec, TrajectoryRecord};
use crate::{derive_seed, invalid, Result};

/// A simulator with a fixed observation layout.
pub trait Env: Clone {
    fn spec(&self) -> EnvSpec;
    /// Per-dimension action limits `(lo, hi)`.
    fn action_bounds(&self) -> (f64, f64);
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn observe(&self) -> Vec<f64>;
    /// Sets the internal state from an observation.
    fn set_observation(&mut self, obs: &[f64]);
    /// Applies an action (clipped to the bounds). Returns the next observation
    /// and the reward.
    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64);
    fn params(&self) -> BTreeMap<String, f64>;
}

/// Wraps an angle into `(−π, π]`.
pub fn angle_normalize(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
        }
    }
}

impl PendulumParams {
    pub fn with_gravity(gravity: f64) -> Self {
        PendulumParams {
            gravity,
            ..Default::default()
        }
    }
}

/// Pendulum state: angle from upright and angular velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

/// One semi-implicit Euler step of the rod pendulum. The reward is computed
/// on the pre-step state.
pub fn pendulum_step(s: PendulumState, action: f64, p: &PendulumParams) -> (PendulumState, f64) {
    let u = action.clamp(-p.max_torque, p.max_torque);
    let th = angle_normalize(s.theta);
    let reward = -(th * th + 0.1 * s.theta_dot * s.theta_dot + 0.001 * u * u);
    let acc = 3.0 * p.gravity / (2.0 * p.length) * s.theta.sin() + 3.0 * u / (p.mass * p.length * p.length);
    let theta_dot = (s.theta_dot + acc * p.dt).clamp(-p.max_speed, p.max_speed);
    let theta = s.theta + theta_dot * p.dt;
    (PendulumState { theta, theta_dot }, reward)
}

/// Observation `(cos θ, sin θ, θ̇)`, θ = 0 upright.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumEnv {
    pub params: PendulumParams,
    pub state: PendulumState,
}

impl PendulumEnv {
    pub fn new(params: PendulumParams) -> Self {
        PendulumEnv {
            params,
            state: PendulumState {
                theta: PI,
                theta_dot: 0.0,
            },
        }
    }

    /// `½θ̇² + (3g/2l)(cos θ − 1)`: zero at upright rest.
    pub fn energy(&self) -> f64 {
        let c = 3.0 * self.params.gravity / (2.0 * self.params.length);
        0.5 * self.state.theta_dot * self.state.theta_dot + c * (self.state.theta.cos() - 1.0)
    }
}

impl Env for PendulumEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec::new("pendulum", 3, 1).unwrap()
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-self.params.max_torque, self.params.max_torque)
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = PendulumState {
            theta: rng.random_range(-PI..PI),
            theta_dot: rng.random_range(-1.0..1.0),
        };
        self.observe()
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.state.theta.cos(), self.state.theta.sin(), self.state.theta_dot]
    }

    fn set_observation(&mut self, obs: &[f64]) {
        self.state = PendulumState {
            theta: obs[1].atan2(obs[0]),
            theta_dot: obs[2],
        };
    }

    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64) {
        let (s, r) = pendulum_step(self.state, action[0], &self.params);
        self.state = s;
        (self.observe(), r)
    }

    fn params(&self) -> BTreeMap<String, f64> {
        let p = &self.params;
        [
            ("gravity", p.gravity),
            ("mass", p.mass),
            ("length", p.length),
            ("dt", p.dt),
            ("max_torque", p.max_torque),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub pole_half_length: f64,
    pub force_scale: f64,
    pub dt: f64,
    pub track_limit: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_scale: 10.0,
            dt: 0.02,
            track_limit: 2.4,
        }
    }
}

/// Cart-pole swing-up. Observation `(x, ẋ, cos θ, sin θ, θ̇)`, action in
/// `[−1, 1]` scaled by `force_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct CartPoleSwingEnv {
    pub params: CartPoleParams,
    /// `[x, ẋ, θ, θ̇]`
    pub state: [f64; 4],
}

impl CartPoleSwingEnv {
    pub fn new(params: CartPoleParams) -> Self {
        CartPoleSwingEnv {
            params,
            state: [0.0, 0.0, PI, 0.0],
        }
    }
}

impl Env for CartPoleSwingEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec::new("cartpole_swing", 5, 1).unwrap()
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.2..0.2),
            PI + rng.random_range(-0.3..0.3),
            rng.random_range(-0.2..0.2),
        ];
        self.observe()
    }

    fn observe(&self) -> Vec<f64> {
        let [x, xd, th, thd] = self.state;
        vec![x, xd, th.cos(), th.sin(), thd]
    }

    fn set_observation(&mut self, obs: &[f64]) {
        self.state = [obs[0], obs[1], obs[3].atan2(obs[2]), obs[4]];
    }

    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64) {
        let p = &self.params;
        let a = action[0].clamp(-1.0, 1.0);
        let [x, xd, th, thd] = self.state;
        let reward = th.cos() - 0.01 * x * x - 0.001 * a * a;
        let force = a * p.force_scale;
        let total = p.cart_mass + p.pole_mass;
        let pml = p.pole_mass * p.pole_half_length;
        let (sin, cos) = th.sin_cos();
        let temp = (force + pml * thd * thd * sin) / total;
        let th_acc = (p.gravity * sin - cos * temp) / (p.pole_half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
        let x_acc = temp - pml * th_acc * cos / total;
        let mut xd = xd + x_acc * p.dt;
        let mut x = x + xd * p.dt;
        if x.abs() > p.track_limit {
            x = x.clamp(-p.track_limit, p.track_limit);
            xd = 0.0;
        }
        let thd = thd + th_acc * p.dt;
        let th = th + thd * p.dt;
        self.state = [x, xd, th, thd];
        (self.observe(), reward)
    }

    fn params(&self) -> BTreeMap<String, f64> {
        let p = &self.params;
        [
            ("gravity", p.gravity),
            ("cart_mass", p.cart_mass),
            ("pole_mass", p.pole_mass),
            ("pole_half_length", p.pole_half_length),
            ("force_scale", p.force_scale),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Either supported environment.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyEnv {
    Pendulum(PendulumEnv),
    CartPole(CartPoleSwingEnv),
}

impl Env for AnyEnv {
    fn spec(&self) -> EnvSpec {
        match self {
            AnyEnv::Pendulum(e) => e.spec(),
            AnyEnv::CartPole(e) => e.spec(),
        }
    }
    fn action_bounds(&self) -> (f64, f64) {
        match self {
            AnyEnv::Pendulum(e) => e.action_bounds(),
            AnyEnv::CartPole(e) => e.action_bounds(),
        }
    }
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            AnyEnv::Pendulum(e) => e.reset(rng),
            AnyEnv::CartPole(e) => e.reset(rng),
        }
    }
    fn observe(&self) -> Vec<f64> {
        match self {
            AnyEnv::Pendulum(e) => e.observe(),
            AnyEnv::CartPole(e) => e.observe(),
        }
    }
    fn set_observation(&mut self, obs: &[f64]) {
        match self {
            AnyEnv::Pendulum(e) => e.set_observation(obs),
            AnyEnv::CartPole(e) => e.set_observation(obs),
        }
    }
    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64) {
        match self {
            AnyEnv::Pendulum(e) => e.step(action),
            AnyEnv::CartPole(e) => e.step(action),
        }
    }
    fn params(&self) -> BTreeMap<String, f64> {
        match self {
            AnyEnv::Pendulum(e) => e.params(),
            AnyEnv::CartPole(e) => e.params(),
        }
    }
}

impl AnyEnv {
    /// Rebuilds an environment from its id and recorded parameters. Missing
    /// parameters take their defaults.
    pub fn from_params(env_id: &str, params: &BTreeMap<String, f64>) -> Result<(AnyEnv, Plant)> {
        let get = |k: &str, d: f64| params.get(k).copied().unwrap_or(d);
        match env_id {
            "pendulum" => {
                let d = PendulumParams::default();
                let p = PendulumParams {
                    gravity: get("gravity", d.gravity),
                    mass: get("mass", d.mass),
                    length: get("length", d.length),
                    dt: get("dt", d.dt),
                    max_torque: get("max_torque", d.max_torque),
                    max_speed: d.max_speed,
                };
                Ok((AnyEnv::Pendulum(PendulumEnv::new(p)), Plant::Pendulum(p)))
            }
            "cartpole_swing" => {
                let d = CartPoleParams::default();
                let p = CartPoleParams {
                    gravity: get("gravity", d.gravity),
                    cart_mass: get("cart_mass", d.cart_mass),
                    pole_mass: get("pole_mass", d.pole_mass),
                    pole_half_length: get("pole_half_length", d.pole_half_length),
                    force_scale: get("force_scale", d.force_scale),
                    ..d
                };
                Ok((AnyEnv::CartPole(CartPoleSwingEnv::new(p)), Plant::CartPole(p)))
            }
            other => Err(invalid(format!("unknown environment {other:?}"))),
        }
    }
}

/// Maps an observation to an action.
pub trait Policy {
    fn act(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn act(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (**self).act(obs, rng)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn act(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (**self).act(obs, rng)
    }
}

/// Zero action of width `n`.
#[derive(Clone, Debug)]
pub struct ZeroPolicy(pub usize);

impl Policy for ZeroPolicy {
    fn act(&mut self, _obs: &[f64], _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    EnergySwingup,
    NoisyExpert,
}

/// Which dynamics a scripted controller is tuned for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Plant {
    Pendulum(PendulumParams),
    CartPole(CartPoleParams),
}

/// Hand-written controllers of varying quality.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedPolicy {
    pub kind: PolicyKind,
    /// Gaussian action noise std (used by `NoisyExpert`).
    pub noise: f64,
    pub plant: Plant,
}

impl ScriptedPolicy {
    pub fn new(kind: PolicyKind, noise: f64, plant: Plant) -> Self {
        ScriptedPolicy { kind, noise, plant }
    }

    pub fn max_action(&self) -> f64 {
        match self.plant {
            Plant::Pendulum(p) => p.max_torque,
            Plant::CartPole(_) => 1.0,
        }
    }

    fn expert(&self, obs: &[f64]) -> f64 {
        match self.plant {
            Plant::Pendulum(p) => pendulum_swingup(obs, &p),
            Plant::CartPole(p) => cartpole_swingup(obs, &p),
        }
    }
}

fn pendulum_swingup(obs: &[f64], p: &PendulumParams) -> f64 {
    let th = obs[1].atan2(obs[0]);
    let thd = obs[2];
    let c = 3.0 * p.gravity / (2.0 * p.length);
    let b = 3.0 / (p.mass * p.length * p.length);
    let energy = 0.5 * thd * thd + c * (th.cos() - 1.0);
    if th.abs() < 0.6 && energy.abs() < 0.3 * c {
        // feedback-linearizing PD around upright
        let (w, z) = (4.0, 1.0);
        let u = -(c * th.sin() + w * w * th + 2.0 * z * w * thd) / b;
        return u.clamp(-p.max_torque, p.max_torque);
    }
    if thd.abs() < 1e-3 {
        return p.max_torque;
    }
    (-energy * thd * 5.0).clamp(-p.max_torque, p.max_torque)
}

fn cartpole_swingup(obs: &[f64], p: &CartPoleParams) -> f64 {
    let (x, xd, th, thd) = (obs[0], obs[1], obs[3].atan2(obs[2]), obs[4]);
    let energy = 0.5 * thd * thd * p.pole_half_length + p.gravity * (th.cos() - 1.0);
    let pump = 2.0 * energy * thd * th.cos();
    (pump - 0.3 * x - 0.3 * xd).clamp(-1.0, 1.0)
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let max = self.max_action();
        let u = match self.kind {
            PolicyKind::Random => rng.random_range(-max..=max),
            PolicyKind::EnergySwingup => self.expert(obs),
            PolicyKind::NoisyExpert => {
                let eps = if self.noise > 0.0 {
                    Normal::new(0.0, self.noise).unwrap().sample(rng)
                } else {
                    0.0
                };
                self.expert(obs) + eps
            }
        };
        vec![u.clamp(-max, max)]
    }
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Runs one episode of `steps` states. Values are rounded to `f32` as stored
/// on disk.
pub fn run_episode<E: Env, P: Policy + ?Sized>(env: &mut E, policy: &mut P, steps: usize, rng: &mut dyn RngCore) -> TrajectoryRecord {
    let spec = env.spec();
    let (lo, hi) = env.action_bounds();
    let mut obs = env.reset(rng);
    let mut states = round_f32(&obs);
    let mut actions = Vec::with_capacity((steps - 1) * spec.action_dim);
    let mut rewards = Vec::with_capacity(steps - 1);
    for _ in 1..steps {
        let a: Vec<f64> = policy.act(&obs, rng).iter().map(|v| v.clamp(lo, hi)).collect();
        let (next, r) = env.step(&a);
        actions.extend(round_f32(&a));
        rewards.push(r as f32 as f64);
        states.extend(round_f32(&next));
        obs = next;
    }
    TrajectoryRecord::new(spec.env_id, spec.state_dim, spec.action_dim, states, actions, rewards).expect("episode shape")
}

/// `episodes` rollouts of `steps` states each.
pub fn collect_replay<E: Env, P: Policy + ?Sized>(env: &E, policy: &mut P, episodes: usize, steps: usize, rng: &mut dyn RngCore) -> Result<Vec<TrajectoryRecord>> {
    if episodes == 0 || steps < 2 {
        return Err(invalid("need episodes >= 1 and steps >= 2"));
    }
    let mut env = env.clone();
    Ok((0..episodes).map(|_| run_episode(&mut env, policy, steps, rng)).collect())
}

/// `n` evenly spaced values over `[a, b]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Pendulum swing-up noise std giving a medium-quality controller: its
/// return is roughly half that of the noise-free swing-up.
pub const MEDIUM_NOISE: f64 = 2.0;

/// Settings for a family of pendulums that differ only in gravity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub train_gravities: Vec<f64>,
    pub holdout_gravities: Vec<f64>,
    pub episodes: usize,
    pub steps: usize,
    /// Std of the medium-noise swing-up controller.
    pub medium_noise: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            train_gravities: linspace(8.0, 12.0, 60),
            holdout_gravities: linspace(6.5, 7.5, 5),
            episodes: 50,
            steps: 200,
            medium_noise: MEDIUM_NOISE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParameterGrid {
    pub train: Vec<EnvData>,
    pub holdout: Vec<EnvData>,
}

/// Replay data for one pendulum gravity. Episodes cycle through the
/// random, medium-noise swing-up and swing-up controllers.
pub fn pendulum_dataset(gravity: f64, episodes: usize, steps: usize, medium_noise: f64, seed: u64) -> Result<EnvData> {
    let params = PendulumParams::with_gravity(gravity);
    let mut env = PendulumEnv::new(params);
    let plant = Plant::Pendulum(params);
    let mut policies = [
        ScriptedPolicy::new(PolicyKind::Random, 0.0, plant),
        ScriptedPolicy::new(PolicyKind::NoisyExpert, medium_noise, plant),
        ScriptedPolicy::new(PolicyKind::EnergySwingup, 0.0, plant),
    ];
    if episodes == 0 || steps < 2 {
        return Err(invalid("need episodes >= 1 and steps >= 2"));
    }
    let records = (0..episodes)
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[gravity.to_bits(), e as u64]));
            run_episode(&mut env, &mut policies[e % 3], steps, &mut rng)
        })
        .collect();
    let mut data = EnvData::new(env.spec(), records)?;
    data.params = env.params();
    Ok(data)
}

/// Replay data for any environment, cycling through the random,
/// medium-noise expert and expert controllers like [`pendulum_dataset`].
pub fn replay_dataset(env: &AnyEnv, plant: Plant, episodes: usize, steps: usize, medium_noise: f64, seed: u64) -> Result<EnvData> {
    if let AnyEnv::Pendulum(p) = env {
        if p.params == PendulumParams::with_gravity(p.params.gravity) {
            return pendulum_dataset(p.params.gravity, episodes, steps, medium_noise, seed);
        }
    }
    if episodes == 0 || steps < 2 {
        return Err(invalid("need episodes >= 1 and steps >= 2"));
    }
    let mut policies = [
        ScriptedPolicy::new(PolicyKind::Random, 0.0, plant),
        ScriptedPolicy::new(PolicyKind::NoisyExpert, medium_noise, plant),
        ScriptedPolicy::new(PolicyKind::EnergySwingup, 0.0, plant),
    ];
    let mut env = env.clone();
    let key = env.params().get("gravity").copied().unwrap_or(0.0).to_bits();
    let records = (0..episodes)
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[key, e as u64]));
            run_episode(&mut env, &mut policies[e % 3], steps, &mut rng)
        })
        .collect();
    let mut data = EnvData::new(env.spec(), records)?;
    data.params = env.params();
    Ok(data)
}

/// Training and holdout pendulum datasets. The two gravity ranges must not
/// overlap.
pub fn build_parameter_grid(cfg: &GridConfig) -> Result<ParameterGrid> {
    let range = |v: &[f64]| {
        (
            v.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    if cfg.train_gravities.is_empty() || cfg.holdout_gravities.is_empty() {
        return Err(invalid("gravity lists must be non-empty"));
    }
    let (tl, th) = range(&cfg.train_gravities);
    let (hl, hh) = range(&cfg.holdout_gravities);
    if tl <= hh && hl <= th {
        return Err(invalid(format!("train range [{tl}, {th}] overlaps holdout range [{hl}, {hh}]")));
    }
    let build = |gs: &[f64]| -> Result<Vec<EnvData>> {
        gs.iter()
            .map(|&g| pendulum_dataset(g, cfg.episodes, cfg.steps, cfg.medium_noise, cfg.seed))
            .collect()
    };
    Ok(ParameterGrid {
        train: build(&cfg.train_gravities)?,
        holdout: build(&cfg.holdout_gravities)?,
    })
}

/// Discounted Monte Carlo return of `policy` from each start state, simulated
/// on the true dynamics for `horizon` steps.
pub fn true_returns<E: Env, P: Policy + ?Sized>(env: &E, policy: &mut P, starts: &[Vec<f64>], gamma: f64, horizon: usize, seed: u64) -> Vec<f64> {
    starts
        .iter()
        .enumerate()
        .map(|(i, s0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let mut e = env.clone();
            e.set_observation(s0);
            let (lo, hi) = e.action_bounds();
            let mut obs = s0.clone();
            let mut ret = 0.0;
            let mut disc = 1.0;
            for _ in 0..horizon {
                let a: Vec<f64> = policy.act(&obs, &mut rng).iter().map(|v| v.clamp(lo, hi)).collect();
                let (next, r) = e.step(&a);
                ret += disc * r;
                disc *= gamma;
                obs = next;
            }
            ret
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn upright_rest_is_fixed_point() {
        let p = PendulumParams::default();
        let (s, r) = pendulum_step(PendulumState { theta: 0.0, theta_dot: 0.0 }, 0.0, &p);
        assert_eq!(s, PendulumState { theta: 0.0, theta_dot: 0.0 });
        assert_eq!(r, 0.0);
    }

    #[test]
    fn hanging_rest_has_no_acceleration() {
        let p = PendulumParams::default();
        let (s, _) = pendulum_step(PendulumState { theta: PI, theta_dot: 0.0 }, 0.0, &p);
        // sin(π) in floating point is 1.2e-16, so the velocity is ~1e-15
        assert!(s.theta_dot.abs() < 1e-14);
    }

    #[test]
    fn quarter_turn_velocity_update() {
        let p = PendulumParams::default();
        let (s, _) = pendulum_step(PendulumState { theta: PI / 2.0, theta_dot: 0.0 }, 0.0, &p);
        assert!((s.theta_dot - 0.75).abs() < 1e-15);
        assert!((s.theta - (PI / 2.0 + 0.0375)).abs() < 1e-15);
    }

    #[test]
    fn torque_is_clipped_and_speed_clamped() {
        let p = PendulumParams::default();
        let (a, _) = pendulum_step(PendulumState { theta: 0.0, theta_dot: 0.0 }, 100.0, &p);
        let (b, _) = pendulum_step(PendulumState { theta: 0.0, theta_dot: 0.0 }, 2.0, &p);
        assert_eq!(a, b);
        let (c, _) = pendulum_step(PendulumState { theta: 1.0, theta_dot: 7.9 }, 2.0, &p);
        assert_eq!(c.theta_dot, 8.0);
    }

    #[test]
    fn step_is_pure() {
        let p = PendulumParams::with_gravity(9.3);
        let s = PendulumState { theta: 0.4, theta_dot: -1.2 };
        assert_eq!(pendulum_step(s, 0.7, &p), pendulum_step(s, 0.7, &p));
        let mut e1 = CartPoleSwingEnv::new(CartPoleParams::default());
        let mut e2 = e1.clone();
        assert_eq!(e1.step(&[0.3]), e2.step(&[0.3]));
    }

    #[test]
    fn small_swing_energy_drift_under_one_percent() {
        // amplitude 0.3 rad around the hanging equilibrium
        let mut env = PendulumEnv::new(PendulumParams::default());
        env.state = PendulumState { theta: PI - 0.3, theta_dot: 0.0 };
        let total = |e: &PendulumEnv| {
            let c = 3.0 * e.params.gravity / (2.0 * e.params.length);
            0.5 * e.state.theta_dot.powi(2) + c * e.state.theta.cos()
        };
        let e0 = total(&env);
        for _ in 0..200 {
            env.step(&[0.0]);
            assert!((total(&env) - e0).abs() / e0.abs() < 0.01);
        }
    }

    #[test]
    fn large_swing_energy_error_stays_bounded() {
        // symplectic update: the error oscillates but does not accumulate
        let mut env = PendulumEnv::new(PendulumParams::default());
        env.state = PendulumState { theta: 1.0, theta_dot: 0.0 };
        let e0 = env.energy();
        let mut early: f64 = 0.0;
        let mut late: f64 = 0.0;
        for t in 0..4000 {
            env.step(&[0.0]);
            let d = (env.energy() - e0).abs();
            if t < 200 {
                early = early.max(d);
            } else {
                late = late.max(d);
            }
        }
        assert!(late < 1.5 * early);
    }

    #[test]
    fn observations_are_bounded() {
        let mut env = PendulumEnv::new(PendulumParams::with_gravity(12.0));
        let mut r = rng(0);
        env.reset(&mut r);
        for _ in 0..500 {
            let a = r.random_range(-2.0..2.0);
            let (o, _) = env.step(&[a]);
            assert!(o[0].abs() <= 1.0 && o[1].abs() <= 1.0 && o[2].abs() <= 8.0);
        }
        let mut cp = CartPoleSwingEnv::new(CartPoleParams::default());
        cp.reset(&mut r);
        for _ in 0..500 {
            let (o, _) = cp.step(&[1.0]);
            assert!(o.iter().all(|v| v.is_finite()) && o[0].abs() <= 2.4);
        }
    }

    #[test]
    fn replay_counts_and_determinism() {
        let env = PendulumEnv::new(PendulumParams::default());
        let mut pol = ScriptedPolicy::new(PolicyKind::Random, 0.0, Plant::Pendulum(env.params));
        let recs = collect_replay(&env, &mut pol, 5, 100, &mut rng(3)).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.transitions() == 99));
        let again = collect_replay(&env, &mut pol, 5, 100, &mut rng(3)).unwrap();
        assert_eq!(recs, again);
        let data = EnvData::new(env.spec(), recs).unwrap();
        let (bytes, _) = crate::dataset::encode_traj(&data.spec, &data.records);
        assert_eq!(crate::dataset::decode_traj(&bytes, None).unwrap().records, data.records);
    }

    #[test]
    fn swingup_beats_random() {
        let mut wins = 0;
        for seed in 0..20 {
            let env = PendulumEnv::new(PendulumParams::default());
            let plant = Plant::Pendulum(env.params);
            let mut good = ScriptedPolicy::new(PolicyKind::EnergySwingup, 0.0, plant);
            let mut bad = ScriptedPolicy::new(PolicyKind::Random, 0.0, plant);
            let g: f64 = collect_replay(&env, &mut good, 1, 200, &mut rng(seed)).unwrap()[0].total_reward();
            let b: f64 = collect_replay(&env, &mut bad, 1, 200, &mut rng(seed)).unwrap()[0].total_reward();
            if g > b {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn swingup_reaches_upright_across_gravities() {
        for &g in &[6.5, 8.0, 10.0, 12.0] {
            let mut env = PendulumEnv::new(PendulumParams::with_gravity(g));
            let mut pol = ScriptedPolicy::new(PolicyKind::EnergySwingup, 0.0, Plant::Pendulum(env.params));
            let mut r = rng(1);
            let mut obs = env.reset(&mut r);
            for _ in 0..200 {
                let a = pol.act(&obs, &mut r);
                obs = env.step(&a).0;
            }
            assert!(obs[0] > 0.95, "g={g}: cos θ = {}", obs[0]);
        }
    }

    #[test]
    fn scripted_actions_respect_bounds() {
        let plant = Plant::Pendulum(PendulumParams::default());
        let mut r = rng(2);
        for kind in [PolicyKind::Random, PolicyKind::EnergySwingup, PolicyKind::NoisyExpert] {
            let mut p = ScriptedPolicy::new(kind, 3.0, plant);
            for _ in 0..1000 {
                let obs = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-8.0..8.0)];
                let a = p.act(&obs, &mut r)[0];
                assert!(a.abs() <= 2.0);
            }
        }
    }

    #[test]
    fn parameter_grid_counts_and_disjointness() {
        let cfg = GridConfig {
            episodes: 2,
            steps: 5,
            ..Default::default()
        };
        assert_eq!(cfg.train_gravities.len(), 60);
        assert!(cfg.train_gravities.iter().all(|&g| (8.0..=12.0).contains(&g)));
        assert_eq!(cfg.holdout_gravities.len(), 5);
        assert!(cfg.holdout_gravities.iter().all(|&g| (6.5..=7.5).contains(&g)));
        let grid = build_parameter_grid(&cfg).unwrap();
        assert_eq!((grid.train.len(), grid.holdout.len()), (60, 5));
        for h in &grid.holdout {
            let g = h.params["gravity"];
            assert!(grid.train.iter().all(|t| t.params["gravity"] != g));
        }
        let bad = GridConfig {
            holdout_gravities: vec![7.0, 9.0],
            ..cfg
        };
        assert!(build_parameter_grid(&bad).is_err());
    }

    #[test]
    fn linspace_endpoints() {
        let v = linspace(8.0, 12.0, 60);
        assert_eq!(v[0], 8.0);
        assert_eq!(v[59], 12.0);
        assert_eq!(linspace(1.0, 2.0, 1), vec![1.0]);
    }
}
