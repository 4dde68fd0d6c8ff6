use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use trajworld::dataset::{encode_traj, load_manifest, split_train_val, DatasetManifest, EnvData, SamplingWeights};
use trajworld::derive_seed;
use trajworld::envs::{
    build_parameter_grid, replay_dataset, true_returns, AnyEnv, Env, GridConfig, Plant, Policy, PolicyKind, ScriptedPolicy,
    ZeroPolicy,
};
use trajworld::evaluation::{
    mirroring_error_report, mpc_episode, ope_estimate, ope_metrics, ope_starts, policy_episode, prediction_error_report,
    ErrorReport, MpcConfig, OpeConfig, Planner, WindowSpec,
};
use trajworld::model::{GridInput, ModelConfig, ModelParams};
use trajworld::rollout::TrajWorld;
use trajworld::tensor::CheckpointPrecision;
use trajworld::training::{finetune, pretrain, write_metrics_csv, Control, MetricRow, TrainOutcome};

use crate::config::{resolve, Cli, Command, PolicySpec, Precision, RunConfig};
use crate::error::CliError;

const STREAM_SPLIT: u64 = 11;
const STREAM_MPC: u64 = 7;
pub const ATTENTION_MAGIC: &[u8; 4] = b"TWAT";

/// Files produced by a command, relative to the output directory unless
/// absolute. Nothing touches the disk until the command has finished.
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
    summary: Value,
    table: Option<String>,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli.command)?;
    let outputs = match &cli.command {
        Command::Datagen(_) => datagen(&cfg)?,
        Command::Pretrain(_) | Command::Finetune(_) => train(&mut cfg)?,
        Command::Evalpred(_) => evalpred(&cfg)?,
        Command::Ope(_) => ope(&cfg)?,
        Command::Mpc(_) => mpc(&cfg)?,
    };
    commit(&cfg, outputs)
}

fn commit(cfg: &RunConfig, out: Outputs) -> Result<(), CliError> {
    let dir = cfg.out_dir();
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::new("io", format!("output path {} is not a directory", dir.display())));
    }
    let mut files = out.files;
    files.push(("config.json".into(), cfg.snapshot()));
    files.push(("summary.json".into(), pretty(&out.summary)));
    for (rel, bytes) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(&format!("creating {}", parent.display()), e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&format!("writing {}", path.display()), e))?;
    }
    match out.table {
        Some(t) => print!("{t}"),
        None => println!("{}", out.summary),
    }
    Ok(())
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

fn bad(path: &str, msg: impl Into<String>) -> CliError {
    CliError::schema(path, msg)
}

/// TRAJ files and sidecar for one manifest under `subdir`, as
/// `dataset::save_manifest` would write them.
fn manifest_files(manifest: &DatasetManifest, subdir: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut meta = manifest.clone();
    for (i, env) in meta.envs.iter_mut().enumerate() {
        let file = format!("{}_{i}.traj", manifest.name);
        let (bytes, offsets) = encode_traj(&env.spec, &env.records);
        env.offsets = offsets;
        env.file = Some(file.clone());
        files.push((Path::new(subdir).join(file), bytes));
    }
    let json = serde_json::to_string_pretty(&meta).expect("manifest serializes");
    files.push((Path::new(subdir).join(format!("{}.json", manifest.name)), json.into_bytes()));
    files
}

fn env_name(env_id: &str, gravity: f64) -> String {
    format!("{env_id}_g{gravity:06.3}")
}

fn datagen(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let d = cfg.datagen.as_ref().unwrap();
    if d.episodes == 0 {
        return Err(bad("datagen.episodes", "must be >= 1"));
    }
    if d.steps < 2 {
        return Err(bad("datagen.steps", "must be >= 2"));
    }
    if !(d.medium_noise >= 0.0 && d.medium_noise.is_finite()) {
        return Err(bad("datagen.medium_noise", "must be finite and >= 0"));
    }
    let mut sets: Vec<(&str, DatasetManifest)> = Vec::new();
    match d.grid.as_deref() {
        Some("b21") => {
            if d.env != "pendulum" {
                return Err(bad("datagen.env", "grid b21 is a pendulum grid"));
            }
            let grid = build_parameter_grid(&GridConfig {
                episodes: d.episodes,
                steps: d.steps,
                medium_noise: d.medium_noise,
                seed: cfg.seed,
                ..Default::default()
            })?;
            for (dir, envs) in [("train", grid.train), ("holdout", grid.holdout)] {
                for env in envs {
                    let name = env_name(&env.spec.env_id, env.params["gravity"]);
                    sets.push((dir, DatasetManifest::new(name, vec![env])));
                }
            }
        }
        Some(other) => return Err(bad("datagen.grid", format!("unknown grid {other:?}; known: b21"))),
        None => {
            if !(d.gravity > 0.0 && d.gravity.is_finite()) {
                return Err(bad("datagen.gravity", "must be positive"));
            }
            let params = BTreeMap::from([("gravity".to_string(), d.gravity)]);
            let (env, plant) = AnyEnv::from_params(&d.env, &params).map_err(|e| bad("datagen.env", e.to_string()))?;
            let data = replay_dataset(&env, plant, d.episodes, d.steps, d.medium_noise, cfg.seed)?;
            let name = env_name(&data.spec.env_id, d.gravity);
            sets.push(("data", DatasetManifest::new(name, vec![data])));
        }
    }
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let mut table = format!(
        "{:<28} {:>8} {:>8} {:>6} {:>6}\n",
        "manifest", "episodes", "steps", "state", "action"
    );
    for (dir, m) in &sets {
        files.extend(manifest_files(m, dir));
        let e = &m.envs[0];
        let _ = writeln!(
            table,
            "{:<28} {:>8} {:>8} {:>6} {:>6}",
            format!("{dir}/{}", m.name),
            m.episode_count(),
            m.step_count(),
            e.spec.state_dim,
            e.spec.action_dim
        );
        rows.push(json!({
            "manifest": format!("{dir}/{}.json", m.name),
            "env_id": e.spec.env_id,
            "params": e.params,
            "episodes": m.episode_count(),
            "steps": m.step_count(),
            "state_dim": e.spec.state_dim,
            "action_dim": e.spec.action_dim,
        }));
    }
    let episodes: usize = sets.iter().map(|(_, m)| m.episode_count()).sum();
    let steps: usize = sets.iter().map(|(_, m)| m.step_count()).sum();
    let _ = writeln!(table, "total: {} manifests, {episodes} episodes, {steps} steps", sets.len());
    Ok(Outputs {
        files,
        summary: json!({ "manifests": rows, "episodes": episodes, "steps": steps }),
        table: Some(table),
    })
}

fn load_data(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>, CliError> {
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(CliError::missing("dataset", p));
            }
            load_manifest(p).map_err(|e| CliError::new("bad_input", format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Loads a checkpoint and the model config stored next to it.
fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    let side = path.with_extension("json");
    let bytes = std::fs::read(&side).map_err(|_| CliError::missing("checkpoint config", &side))?;
    let mc: ModelConfig = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::new("bad_input", format!("{}: {e}", side.display())))?;
    let f = std::fs::File::open(path).map_err(|_| CliError::missing("checkpoint", path))?;
    ModelParams::load(&mc, std::io::BufReader::new(f))
        .map_err(|e| CliError::new("bad_input", format!("{}: {e}", path.display())))
}

fn with_bins(manifests: &mut [DatasetManifest], bins: usize) -> Result<(), CliError> {
    for m in manifests.iter_mut() {
        m.compute_bin_stats(bins)?;
    }
    Ok(())
}

fn log_row(row: &MetricRow) -> Control {
    if let Some(v) = row.val_loss {
        log::info!("step {} loss {:.5} val {:.5} lr {:.2e} grad {:.3}", row.step, row.loss, v, row.lr, row.grad_norm);
    }
    Control::Continue
}

fn train(cfg: &mut RunConfig) -> Result<Outputs, CliError> {
    let pre = cfg.command == "pretrain";
    let tc = cfg.train.clone().unwrap();
    tc.validate().map_err(|e| bad("train", e.to_string()))?;
    let frac = cfg.train_fraction.unwrap();
    if !(frac > 0.0 && frac <= 1.0) || (!pre && frac >= 1.0) {
        return Err(bad("train_fraction", "must lie in (0, 1] for pretrain and (0, 1) for finetune"));
    }
    let start = match (&cfg.checkpoint, pre) {
        (Some(p), false) => {
            let params = load_checkpoint(p)?;
            cfg.model = Some(params.config.clone());
            params
        }
        _ => {
            let mc = cfg.model.clone().unwrap();
            mc.validate().map_err(|e| bad("model", e.to_string()))?;
            ModelParams::init(&mc, cfg.seed)?
        }
    };
    let bins = start.config.bins;
    let mut data = load_data(&cfg.data)?;
    with_bins(&mut data, bins)?;
    let outcome: TrainOutcome = if pre {
        let mut names = std::collections::BTreeSet::new();
        for m in &data {
            if !names.insert(m.name.clone()) {
                return Err(bad("data", format!("two datasets are named {:?}", m.name)));
            }
        }
        let (train, val) = if frac < 1.0 {
            let mut t = Vec::new();
            let mut v = Vec::new();
            for (i, m) in data.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SPLIT, i as u64]));
                let (a, mut b) = split_train_val(m, frac, &mut rng).map_err(|e| bad("train_fraction", e.to_string()))?;
                let mut a = a;
                a.name = m.name.clone();
                b.name = m.name.clone();
                t.push(a);
                v.push(b);
            }
            (t, v)
        } else {
            (data, Vec::new())
        };
        let weights = SamplingWeights::uniform(train.iter().map(|m| m.name.as_str()));
        let srcs: Vec<&DatasetManifest> = train.iter().collect();
        let vals: Vec<&DatasetManifest> = val.iter().collect();
        pretrain(start, &srcs, &weights, &vals, &tc, &mut log_row)?
    } else {
        if data.len() != 1 {
            return Err(bad("data", "finetune takes exactly one dataset"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SPLIT, 0]));
        let (mut t, mut v) = split_train_val(&data[0], frac, &mut rng).map_err(|e| bad("train_fraction", e.to_string()))?;
        finetune(start, &mut t, &mut v, &tc, &mut log_row)?
    };
    let precision = match cfg.precision.unwrap() {
        Precision::F32 => CheckpointPrecision::F32,
        Precision::F64 => CheckpointPrecision::F64,
    };
    let mut ckpt = Vec::new();
    outcome.params.save(&mut ckpt, precision)?;
    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &outcome.metrics)?;
    let last = outcome.metrics.last();
    let summary = json!({
        "steps_run": last.map(|r| r.step).unwrap_or(0),
        "final_loss": last.map(|r| r.loss),
        "best_val_loss": outcome.best_val_loss,
        "best_step": outcome.best_step,
        "parameters": outcome.params.num_scalars(),
        "datasets": cfg.data,
    });
    Ok(Outputs {
        files: vec![
            ("model.twck".into(), ckpt),
            ("model.json".into(), pretty(&serde_json::to_value(&outcome.params.config).unwrap())),
            ("metrics.csv".into(), metrics),
        ],
        summary,
        table: None,
    })
}

fn params_label(p: &BTreeMap<String, f64>) -> String {
    p.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn evalpred(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let e = cfg.evalpred.as_ref().unwrap();
    let params = load_checkpoint(cfg.checkpoint.as_ref().unwrap())?;
    if e.context == 0 || e.context > params.config.max_steps {
        return Err(bad("evalpred.context", format!("must lie in 1..={}", params.config.max_steps)));
    }
    if e.stride == 0 {
        return Err(bad("evalpred.stride", "must be >= 1"));
    }
    let mut data = load_data(&cfg.data)?;
    with_bins(&mut data, params.config.bins)?;
    let spec = WindowSpec {
        context: e.context,
        first_target: e.context,
        stride: e.stride,
    };
    let mut csv = String::from("dataset,env_index,env_id,params,predictor,windows,mean_mae,mean_mse\n");
    let mut rows = Vec::new();
    let mut totals: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for m in &data {
        for (i, env) in m.envs.iter().enumerate() {
            let mut reports: Vec<(&str, ErrorReport)> = vec![("trajworld", prediction_error_report(&params, env, spec)?)];
            if e.no_history {
                let one = WindowSpec { context: 1, ..spec };
                reports.push(("trajworld_no_history", prediction_error_report(&params, env, one)?));
            }
            reports.push(("mirroring", mirroring_error_report(env, spec)?));
            for (name, r) in reports {
                let _ = writeln!(
                    csv,
                    "{},{i},{},{},{name},{},{},{}",
                    m.name,
                    env.spec.env_id,
                    params_label(&env.params),
                    r.count,
                    r.mean_mae,
                    r.mean_mse
                );
                let t = totals.entry(name).or_insert((0.0, 0));
                t.0 += r.mean_mse;
                t.1 += 1;
                rows.push(json!({
                    "dataset": m.name, "env_index": i, "env_id": env.spec.env_id, "params": env.params,
                    "predictor": name, "report": r,
                }));
            }
        }
    }
    let mean_mse: BTreeMap<&str, f64> = totals.iter().map(|(k, (s, n))| (*k, s / *n as f64)).collect();
    let mut files = vec![(PathBuf::from("evalpred.csv"), csv.into_bytes())];
    if let Some(path) = &e.attention_dump {
        files.push((path.clone(), attention_dump(&params, &data[0].envs[0], e.context)?));
    }
    Ok(Outputs {
        files,
        summary: json!({ "context": e.context, "mean_mse": mean_mse, "reports": rows }),
        table: None,
    })
}

/// Variate-attention weights for the first `context` rows of the first
/// episode: magic, then `layers`, `T`, `M` as little-endian `u32`, then
/// `layers · T · M · M` little-endian `f64` values (head-averaged, rows
/// are query variates).
fn attention_dump(params: &ModelParams, env: &EnvData, context: usize) -> Result<Vec<u8>, CliError> {
    let rec = &env.records[0];
    let w = env.spec.variates();
    let t = context.min(rec.len());
    let mut values = vec![0.0; t * w];
    for r in 0..t {
        rec.grid_row(r, &mut values[r * w..(r + 1) * w]);
    }
    let valid = vec![true; t];
    let input = GridInput {
        values: &values,
        valid: &valid,
        batch: 1,
        steps: t,
        state_dim: env.spec.state_dim,
        action_dim: env.spec.action_dim,
    };
    let layers = params.variate_attention_weights(&input, env.bin_stats.as_ref().unwrap())?;
    let mut out = ATTENTION_MAGIC.to_vec();
    for v in [layers.len(), t, w] {
        out.extend((v as u32).to_le_bytes());
    }
    for l in &layers {
        for x in l {
            out.extend(x.to_le_bytes());
        }
    }
    Ok(out)
}

enum AnyPolicy {
    Zero(ZeroPolicy),
    Scripted(ScriptedPolicy),
}

impl Policy for AnyPolicy {
    fn act(&mut self, obs: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64> {
        match self {
            AnyPolicy::Zero(p) => p.act(obs, rng),
            AnyPolicy::Scripted(p) => p.act(obs, rng),
        }
    }
}

fn build_policy(spec: &PolicySpec, plant: Plant, action_dim: usize) -> AnyPolicy {
    match *spec {
        PolicySpec::Zero => AnyPolicy::Zero(ZeroPolicy(action_dim)),
        PolicySpec::Random => AnyPolicy::Scripted(ScriptedPolicy::new(PolicyKind::Random, 0.0, plant)),
        PolicySpec::Expert => AnyPolicy::Scripted(ScriptedPolicy::new(PolicyKind::EnergySwingup, 0.0, plant)),
        PolicySpec::NoisyExpert { noise } => AnyPolicy::Scripted(ScriptedPolicy::new(PolicyKind::NoisyExpert, noise, plant)),
    }
}

fn check_policy(spec: &PolicySpec, path: &str) -> Result<(), CliError> {
    if let PolicySpec::NoisyExpert { noise } = spec {
        if !(*noise >= 0.0 && noise.is_finite()) {
            return Err(bad(path, "noise must be finite and >= 0"));
        }
    }
    Ok(())
}

/// The single environment of the given data, with bins fitted.
fn single_env(cfg: &RunConfig, bins: usize) -> Result<(EnvData, AnyEnv, Plant), CliError> {
    let mut data = load_data(&cfg.data)?;
    with_bins(&mut data, bins)?;
    let mut envs: Vec<EnvData> = data.into_iter().flat_map(|m| m.envs).collect();
    if envs.len() != 1 {
        return Err(bad("data", format!("{} needs exactly one environment, got {}", cfg.command, envs.len())));
    }
    let env = envs.pop().unwrap();
    let (sim, plant) = AnyEnv::from_params(&env.spec.env_id, &env.params)?;
    Ok((env, sim, plant))
}

fn ope(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let o = cfg.ope.as_ref().unwrap();
    if !(o.gamma > 0.0 && o.gamma <= 1.0) {
        return Err(bad("ope.gamma", "must lie in (0, 1]"));
    }
    if o.horizon == 0 || o.context == 0 || o.starts_per_episode == 0 {
        return Err(bad("ope", "horizon, context and starts_per_episode must be >= 1"));
    }
    if o.policies.len() < 2 {
        return Err(bad("ope.policies", "at least two policies are needed for ranking"));
    }
    for (i, p) in o.policies.iter().enumerate() {
        check_policy(p, &format!("ope.policies[{i}]"))?;
    }
    let params = load_checkpoint(cfg.checkpoint.as_ref().unwrap())?;
    let (env, sim, plant) = single_env(cfg, params.config.bins)?;
    let starts = ope_starts(&env, o.context, o.starts_per_episode)?;
    let obs0: Vec<Vec<f64>> = starts.iter().map(|h| h.current_state().to_vec()).collect();
    let oc = OpeConfig {
        gamma: o.gamma,
        horizon: o.horizon,
        mode: o.mode,
        seed: cfg.seed,
        action_bounds: Some(sim.action_bounds()),
    };
    let stats = env.bin_stats.clone().unwrap();
    let (m, n) = (env.spec.state_dim, env.spec.action_dim);
    let mut truth = Vec::new();
    let mut est = Vec::new();
    let mut csv = String::from("policy,true_value,est_value");
    for i in 0..starts.len() {
        let _ = write!(csv, ",est_return_{i}");
    }
    csv.push('\n');
    let mut rows = Vec::new();
    for spec in &o.policies {
        let mut p = build_policy(spec, plant, n);
        let tr = true_returns(&sim, &mut p, &obs0, o.gamma, o.horizon, cfg.seed);
        let tv = tr.iter().sum::<f64>() / tr.len() as f64;
        let mut world = TrajWorld::new(&params, stats.clone(), m, n)?;
        let e = ope_estimate(&mut world, &mut p, &starts, &oc)?;
        log::info!("{}: true {:.3} estimated {:.3}", spec.label(), tv, e.value);
        let _ = write!(csv, "{},{tv},{}", spec.label(), e.value);
        for r in &e.returns {
            let _ = write!(csv, ",{r}");
        }
        csv.push('\n');
        rows.push(json!({ "policy": spec.label(), "true_value": tv, "est_value": e.value }));
        truth.push(tv);
        est.push(e.value);
    }
    let metrics = ope_metrics(&truth, &est)?;
    Ok(Outputs {
        files: vec![("ope.csv".into(), csv.into_bytes())],
        summary: json!({ "starts": starts.len(), "metrics": metrics, "policies": rows }),
        table: None,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        (s[k / 2 - 1] + s[k / 2]) / 2.0
    }
}

fn mpc(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let s = cfg.mpc.as_ref().unwrap();
    let mc = MpcConfig {
        candidates: s.candidates,
        horizon: s.horizon,
        noise_sigma: s.noise_sigma,
        planner: s.planner,
        replan_every: s.replan_every,
        context: s.context,
        mode: s.mode,
    };
    mc.validate().map_err(|e| bad("mpc", e.to_string()))?;
    if s.episodes == 0 || s.max_steps == 0 {
        return Err(bad("mpc", "episodes and max_steps must be >= 1"));
    }
    check_policy(&s.proposal, "mpc.proposal")?;
    let params = load_checkpoint(cfg.checkpoint.as_ref().unwrap())?;
    let (env, sim, plant) = single_env(cfg, params.config.bins)?;
    let stats = env.bin_stats.clone().unwrap();
    let (m, n) = (env.spec.state_dim, env.spec.action_dim);
    let mut csv = String::from("episode,mpc_return,proposal_return\n");
    let mut steps = String::from("episode,step,reward");
    for j in 0..n {
        let _ = write!(steps, ",action_{j}");
    }
    steps.push('\n');
    let (mut mp, mut pp) = (Vec::new(), Vec::new());
    for ep in 0..s.episodes {
        let seed = derive_seed(cfg.seed, &[STREAM_MPC, ep as u64]);
        let mut prop = build_policy(&s.proposal, plant, n);
        let mut world = TrajWorld::new(&params, stats.clone(), m, n)?;
        let proposal = (s.planner == Planner::Proposal).then_some(&mut prop);
        let log = mpc_episode(&mut world, &sim, proposal, &mc, s.max_steps, seed)?;
        let base = policy_episode(&sim, &mut prop, s.max_steps, seed);
        log::info!("episode {ep}: mpc {:.2} proposal {:.2}", log.total_return, base.total_return);
        let _ = writeln!(csv, "{ep},{},{}", log.total_return, base.total_return);
        for (t, (r, a)) in log.rewards.iter().zip(&log.actions).enumerate() {
            let _ = write!(steps, "{ep},{t},{r}");
            for x in a {
                let _ = write!(steps, ",{x}");
            }
            steps.push('\n');
        }
        mp.push(log.total_return);
        pp.push(base.total_return);
    }
    let (mm, pm) = (median(&mp), median(&pp));
    Ok(Outputs {
        files: vec![("mpc.csv".into(), csv.into_bytes()), ("mpc_steps.csv".into(), steps.into_bytes())],
        summary: json!({
            "episodes": s.episodes,
            "median_mpc_return": mm,
            "median_proposal_return": pm,
            "mpc_returns": mp,
            "proposal_returns": pp,
        }),
        table: None,
    })
}
