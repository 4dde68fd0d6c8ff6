use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use trajworld::envs::MEDIUM_NOISE;
use trajworld::evaluation::Planner;
use trajworld::model::ModelConfig;
use trajworld::rollout::Decode;
use trajworld::training::TrainConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "TRAJWORLD_SEED";

#[derive(Parser, Debug)]
#[command(name = "trajworld", version, about = "Trajectory world models: data generation, training, evaluation and control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collect replay data from the simulators.
    Datagen(DatagenArgs),
    /// Train a model on one or more datasets.
    Pretrain(TrainArgs),
    /// Adapt a checkpoint (or a fresh model) to one dataset.
    Finetune(TrainArgs),
    /// Next-step prediction error on recorded windows.
    Evalpred(EvalArgs),
    /// Off-policy evaluation of scripted policies with model rollouts.
    Ope(OpeArgs),
    /// Model-predictive control on the true environment.
    Mpc(MpcArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Datagen(_) => "datagen",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evalpred(_) => "evalpred",
            Command::Ope(_) => "ope",
            Command::Mpc(_) => "mpc",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Datagen(a) => &a.common,
            Command::Pretrain(a) | Command::Finetune(a) => &a.common,
            Command::Evalpred(a) => &a.common,
            Command::Ope(a) => &a.common,
            Command::Mpc(a) => &a.common,
        }
    }

    /// Flag values as `(dotted path, value)` patches over the config.
    fn overrides(&self) -> Vec<(&'static str, Value)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, x: Option<Value>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        let c = self.common();
        put("data", (!c.data.is_empty()).then(|| json!(c.data)));
        put("checkpoint", c.checkpoint.as_ref().map(|p| json!(p)));
        match self {
            Command::Datagen(a) => {
                put("datagen.env", a.env.as_ref().map(|x| json!(x)));
                put("datagen.gravity", a.gravity.map(|x| json!(x)));
                put("datagen.episodes", a.episodes.map(|x| json!(x)));
                put("datagen.steps", a.steps.map(|x| json!(x)));
                put("datagen.grid", a.grid.as_ref().map(|x| json!(x)));
            }
            Command::Pretrain(a) | Command::Finetune(a) => {
                put("train.total_steps", a.steps.map(|x| json!(x)));
                put("train.batch_size", a.batch_size.map(|x| json!(x)));
                put("train.peak_lr", a.lr.map(|x| json!(x)));
                put("train.warmup_steps", a.warmup.map(|x| json!(x)));
                put("train.context", a.context.map(|x| json!(x)));
                put("train_fraction", a.train_fraction.map(|x| json!(x)));
            }
            Command::Evalpred(a) => {
                put("evalpred.context", a.context.map(|x| json!(x)));
                put("evalpred.attention_dump", a.attention_dump.as_ref().map(|x| json!(x)));
            }
            Command::Ope(a) => {
                put("ope.gamma", a.gamma.map(|x| json!(x)));
                put("ope.horizon", a.horizon.map(|x| json!(x)));
                put("ope.context", a.context.map(|x| json!(x)));
            }
            Command::Mpc(a) => {
                put("mpc.candidates", a.candidates.map(|x| json!(x)));
                put("mpc.noise_sigma", a.noise.map(|x| json!(x)));
                put("mpc.horizon", a.horizon.map(|x| json!(x)));
                put("mpc.episodes", a.episodes.map(|x| json!(x)));
                put("mpc.max_steps", a.max_steps.map(|x| json!(x)));
            }
        }
        v
    }
}

#[derive(Args, Debug)]
pub struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run seed (falls back to $TRAJWORLD_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset manifests (JSON) or directories of manifests.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Model checkpoint (`.twck`, with its `.json` config alongside).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[command(flatten)]
    pub common: Common,
    /// `pendulum` or `cartpole_swing`.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub gravity: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// States per episode.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Named gravity grid (`b21`: 60 training and 5 holdout pendulums).
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub context: Option<usize>,
    /// Share of episodes per environment used for training; the rest validate.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// History rows per prediction.
    #[arg(long)]
    pub context: Option<usize>,
    /// Write variate-attention weights of the first window here.
    #[arg(long)]
    pub attention_dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OpeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MpcArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Std of the Gaussian perturbation of proposal actions.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Planning horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// A scripted policy by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Zero,
    Random,
    Expert,
    NoisyExpert { noise: f64 },
}

impl PolicySpec {
    pub fn label(&self) -> String {
        match self {
            PolicySpec::Zero => "zero".into(),
            PolicySpec::Random => "random".into(),
            PolicySpec::Expert => "expert".into(),
            PolicySpec::NoisyExpert { noise } => format!("noisy_expert_{noise}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub env: String,
    pub gravity: f64,
    pub episodes: usize,
    pub steps: usize,
    pub medium_noise: f64,
    pub grid: Option<String>,
}

impl Default for DatagenSection {
    fn default() -> Self {
        DatagenSection {
            env: "pendulum".into(),
            gravity: 10.0,
            episodes: 50,
            steps: 200,
            medium_noise: MEDIUM_NOISE,
            grid: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub context: usize,
    pub stride: usize,
    /// Also report predictions from a single history row on the same targets.
    pub no_history: bool,
    pub attention_dump: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            context: 19,
            stride: 1,
            no_history: true,
            attention_dump: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeSection {
    pub gamma: f64,
    pub horizon: usize,
    pub mode: Decode,
    /// History rows before each start state.
    pub context: usize,
    pub starts_per_episode: usize,
    pub policies: Vec<PolicySpec>,
}

impl Default for OpeSection {
    fn default() -> Self {
        let mut policies: Vec<PolicySpec> = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0]
            .into_iter()
            .map(|noise| PolicySpec::NoisyExpert { noise })
            .collect();
        policies.push(PolicySpec::Zero);
        policies.push(PolicySpec::Random);
        OpeSection {
            gamma: 0.99,
            horizon: 200,
            mode: Decode::Expectation,
            context: 10,
            starts_per_episode: 2,
            policies,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub candidates: usize,
    pub horizon: usize,
    pub noise_sigma: f64,
    pub planner: Planner,
    pub replan_every: usize,
    pub context: usize,
    pub mode: Decode,
    pub episodes: usize,
    pub max_steps: usize,
    pub proposal: PolicySpec,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            candidates: 128,
            horizon: 10,
            noise_sigma: 0.05,
            planner: Planner::Proposal,
            replan_every: 1,
            context: 10,
            mode: Decode::Expectation,
            episodes: 10,
            max_steps: 200,
            proposal: PolicySpec::NoisyExpert { noise: MEDIUM_NOISE },
        }
    }
}

/// Fully resolved run settings. Written as `config.json` next to the outputs;
/// the output directory itself is left out so a snapshot can be replayed
/// anywhere.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub datagen: Option<DatagenSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evalpred: Option<EvalSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ope: Option<OpeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcSection>,
}

impl RunConfig {
    fn defaults_for(command: &str) -> RunConfig {
        let mut c = RunConfig {
            command: command.into(),
            ..Default::default()
        };
        match command {
            "datagen" => c.datagen = Some(DatagenSection::default()),
            "pretrain" | "finetune" => {
                c.model = Some(ModelConfig::default());
                c.precision = Some(Precision::F64);
                c.train_fraction = Some(0.8);
                c.train = Some(if command == "pretrain" {
                    TrainConfig::pretrain_desk()
                } else {
                    TrainConfig::finetune_desk()
                });
            }
            "evalpred" => c.evalpred = Some(EvalSection::default()),
            "ope" => c.ope = Some(OpeSection::default()),
            "mpc" => c.mpc = Some(MpcSection::default()),
            _ => unreachable!(),
        }
        c
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("resolved config has an output directory")
    }

    /// Snapshot bytes as written to `config.json`.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s.into_bytes()
    }
}

/// Defaults, then the config file, then flags. The seed falls back to
/// `$TRAJWORLD_SEED` only when neither the file nor a flag sets it.
pub fn resolve(cmd: &Command) -> Result<RunConfig, CliError> {
    let name = cmd.name();
    let common = cmd.common();
    let mut merged = serde_json::to_value(RunConfig::defaults_for(name)).expect("defaults serialize");
    let mut seed_set = false;
    if let Some(path) = &common.config {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::missing("config file", path),
            _ => CliError::io(&format!("reading {}", path.display()), e),
        })?;
        let user: Value = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::new("config_parse", format!("{}: {e}", path.display())))?;
        let Value::Object(map) = user else {
            return Err(CliError::schema("", "config must be a JSON object"));
        };
        if let Some(c) = map.get("command") {
            if c != name {
                return Err(CliError::schema("command", format!("config is for {c}, not {name}")));
            }
        }
        seed_set = map.contains_key("seed");
        merge(&mut merged, Value::Object(map));
    }
    for (k, v) in cmd.overrides() {
        set_path(&mut merged, k, v);
    }
    if let Some(s) = common.seed {
        set_path(&mut merged, "seed", json!(s));
    } else if !seed_set {
        let s = match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| CliError::schema("seed", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            Err(_) => 0,
        };
        set_path(&mut merged, "seed", json!(s));
    }
    if let Some(o) = &common.out {
        set_path(&mut merged, "out", json!(o));
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        CliError::schema(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })?;
    check_sections(&cfg)?;
    if cfg.out.is_none() {
        return Err(CliError::schema("out", "an output directory is required (--out)"));
    }
    if let Some(t) = cfg.train.as_mut() {
        t.seed = cfg.seed;
        t.mode = if name == "pretrain" {
            trajworld::training::TrainMode::Pretrain
        } else {
            trajworld::training::TrainMode::Finetune
        };
    }
    cfg.data = expand_data(&cfg.data)?;
    if let Some(c) = &cfg.checkpoint {
        cfg.checkpoint = Some(absolute(c, "checkpoint")?);
    }
    if let Some(dump) = cfg.evalpred.as_mut().and_then(|e| e.attention_dump.as_mut()) {
        if dump.is_relative() {
            *dump = std::env::current_dir().map_err(|e| CliError::io("current directory", e))?.join(&*dump);
        }
    }
    Ok(cfg)
}

fn check_sections(cfg: &RunConfig) -> Result<(), CliError> {
    let name = cfg.command.as_str();
    let trains = matches!(name, "pretrain" | "finetune");
    let used = [
        ("model", cfg.model.is_some(), trains),
        ("train", cfg.train.is_some(), trains),
        ("precision", cfg.precision.is_some(), trains),
        ("train_fraction", cfg.train_fraction.is_some(), trains),
        ("datagen", cfg.datagen.is_some(), name == "datagen"),
        ("evalpred", cfg.evalpred.is_some(), name == "evalpred"),
        ("ope", cfg.ope.is_some(), name == "ope"),
        ("mpc", cfg.mpc.is_some(), name == "mpc"),
        ("data", !cfg.data.is_empty(), name != "datagen"),
        ("checkpoint", cfg.checkpoint.is_some(), name != "datagen" && name != "pretrain"),
    ];
    for (field, present, allowed) in used {
        if present && !allowed {
            return Err(CliError::schema(field, format!("not used by {name}")));
        }
    }
    if name != "datagen" && cfg.data.is_empty() {
        return Err(CliError::schema("data", "at least one dataset manifest is required (--data)"));
    }
    if matches!(name, "evalpred" | "ope" | "mpc") && cfg.checkpoint.is_none() {
        return Err(CliError::schema("checkpoint", "a model checkpoint is required (--checkpoint)"));
    }
    Ok(())
}

fn absolute(p: &Path, what: &str) -> Result<PathBuf, CliError> {
    std::fs::canonicalize(p).map_err(|_| CliError::missing(what, p))
}

/// Directories expand to the sorted `.json` manifests they contain.
fn expand_data(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        let p = absolute(p, "dataset")?;
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(&p)
                .map_err(|e| CliError::io(&format!("listing {}", p.display()), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            if found.is_empty() {
                return Err(CliError::missing("dataset manifest in directory", &p));
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) {
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(p) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let map = cur.as_object_mut().unwrap();
        if parts.peek().is_none() {
            map.insert(p.to_string(), v);
            return;
        }
        cur = map.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_deep_and_overrides_scalars() {
        let mut a = json!({"x": 1, "s": {"a": 1, "b": 2}});
        merge(&mut a, json!({"s": {"b": 3}, "y": true}));
        assert_eq!(a, json!({"x": 1, "s": {"a": 1, "b": 3}, "y": true}));
    }

    #[test]
    fn set_path_creates_sections() {
        let mut a = json!({});
        set_path(&mut a, "train.peak_lr", json!(0.5));
        assert_eq!(a, json!({"train": {"peak_lr": 0.5}}));
    }

    #[test]
    fn snapshot_roundtrips() {
        for c in ["datagen", "pretrain", "finetune", "evalpred", "ope", "mpc"] {
            let cfg = RunConfig::defaults_for(c);
            let back: RunConfig = serde_json::from_slice(&cfg.snapshot()).unwrap();
            assert_eq!(back, cfg);
        }
    }
}
