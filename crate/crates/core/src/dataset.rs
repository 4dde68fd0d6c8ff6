//! Trajectory storage, validation, bin statistics and batch sampling.
//!
//! TRAJ binary layout, little-endian:
//!
//! ```text
//! magic "TRAJ" | version u32 (=1) | env_id_len u32 | env_id UTF-8
//! m u32 | n u32 | episode_count u32
//! per episode: T u32 | states f32[T·m] | actions f32[(T−1)·n] | rewards f32[T−1]
//! ```
//!
//! A [`DatasetManifest`] groups one or more environments. Its JSON sidecar
//! lists each environment's spec, file name, episode byte offsets, counts,
//! parameters and optional bin statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::VariateBins;
use crate::{invalid, Error, Result};

pub const TRAJ_MAGIC: &[u8; 4] = b"TRAJ";
pub const TRAJ_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl EnvSpec {
    pub fn new(env_id: impl Into<String>, state_dim: usize, action_dim: usize) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(invalid(format!(
                "state and action dims must be positive (m={state_dim}, n={action_dim})"
            )));
        }
        Ok(EnvSpec {
            env_id: env_id.into(),
            state_dim,
            action_dim,
        })
    }

    /// `M = m + 1 + n`.
    pub fn variates(&self) -> usize {
        self.state_dim + 1 + self.action_dim
    }
}

/// One episode: `T` states, `T − 1` actions and rewards. `rewards[t]` follows
/// `actions[t]` taken in `states[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn new(
        env_id: impl Into<String>,
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let r = TrajectoryRecord {
            env_id: env_id.into(),
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
        };
        r.check_shape()?;
        Ok(r)
    }

    fn check_shape(&self) -> Result<()> {
        let t = self.rewards.len() + 1;
        if t < 2 {
            return Err(invalid("episode needs at least 2 states"));
        }
        if self.states.len() != t * self.state_dim || self.actions.len() != (t - 1) * self.action_dim {
            return Err(Error::DimMismatch(format!(
                "episode with {} rewards has {} state and {} action values (m={}, n={})",
                self.rewards.len(),
                self.states.len(),
                self.actions.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        Ok(())
    }

    /// Shape and finiteness check; `episode` is used in the error.
    pub fn validate(&self, episode: usize) -> Result<()> {
        self.check_shape()?;
        for (field, vals) in [("states", &self.states), ("actions", &self.actions), ("rewards", &self.rewards)] {
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { episode, field });
            }
        }
        Ok(())
    }

    /// Number of states `T`.
    pub fn len(&self) -> usize {
        self.rewards.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn transitions(&self) -> usize {
        self.rewards.len()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    /// Writes scalar-grid row `t` (`s_t, r_t, a_t` with the boundary zeros).
    pub fn grid_row(&self, t: usize, out: &mut [f64]) {
        let m = self.state_dim;
        out[..m].copy_from_slice(self.state(t));
        out[m] = if t > 0 { self.rewards[t - 1] } else { 0.0 };
        if t + 1 < self.len() {
            out[m + 1..].copy_from_slice(self.action(t));
        } else {
            out[m + 1..].fill(0.0);
        }
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Per-variate `[b_0, b_B]` ranges with a shared bin count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bins: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BinStats {
    pub fn variates(&self) -> usize {
        self.lo.len()
    }

    pub fn variate(&self, j: usize) -> VariateBins {
        VariateBins {
            lo: self.lo[j],
            hi: self.hi[j],
            bins: self.bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(invalid("bin stats need B >= 2 and matching lo/hi"));
        }
        for j in 0..self.lo.len() {
            let vb = self.variate(j);
            if !(vb.lo < vb.hi) || !vb.lo.is_finite() || !vb.hi.is_finite() {
                return Err(invalid(format!("variate {j}: degenerate range [{}, {}]", vb.lo, vb.hi)));
            }
            if (0..vb.bins).any(|i| vb.boundary(i) >= vb.boundary(i + 1)) {
                return Err(invalid(format!("variate {j}: boundaries not strictly increasing")));
            }
        }
        Ok(())
    }
}

/// Half-width used to widen a constant variate.
pub const DEGENERATE_WIDEN: f64 = 0.5;

/// Min/max of every grid variate over the records. Boundary padding zeros
/// (`r_0`, `a_{T−1}`) are not data and are excluded.
pub fn compute_bin_stats(records: &[TrajectoryRecord], bins: usize) -> Result<BinStats> {
    if bins < 2 {
        return Err(invalid(format!("bin count must be >= 2, got {bins}")));
    }
    let first = records.first().ok_or_else(|| Error::Empty("no records for bin statistics".into()))?;
    let (m, n) = (first.state_dim, first.action_dim);
    let w = m + 1 + n;
    let mut lo = vec![f64::INFINITY; w];
    let mut hi = vec![f64::NEG_INFINITY; w];
    let mut see = |j: usize, v: f64| {
        lo[j] = lo[j].min(v);
        hi[j] = hi[j].max(v);
    };
    for rec in records {
        if rec.state_dim != m || rec.action_dim != n {
            return Err(Error::DimMismatch(format!("record {} has dims ({}, {}), expected ({m}, {n})", rec.env_id, rec.state_dim, rec.action_dim)));
        }
        for (i, &v) in rec.states.iter().enumerate() {
            see(i % m, v);
        }
        for &v in &rec.rewards {
            see(m, v);
        }
        for (i, &v) in rec.actions.iter().enumerate() {
            see(m + 1 + i % n, v);
        }
    }
    for j in 0..w {
        if lo[j] == hi[j] {
            lo[j] -= DEGENERATE_WIDEN;
            hi[j] += DEGENERATE_WIDEN;
        }
    }
    Ok(BinStats { bins, lo, hi })
}

/// One environment's episodes and bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvData {
    pub spec: EnvSpec,
    /// Environment parameters, e.g. `gravity`.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub file: Option<String>,
    /// Byte offset of each episode header in the TRAJ file.
    #[serde(default)]
    pub offsets: Vec<u64>,
    pub episode_count: usize,
    pub step_count: usize,
    #[serde(default)]
    pub bin_stats: Option<BinStats>,
    #[serde(skip)]
    pub records: Vec<TrajectoryRecord>,
}

impl EnvData {
    pub fn new(spec: EnvSpec, records: Vec<TrajectoryRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.state_dim != spec.state_dim || r.action_dim != spec.action_dim {
                return Err(Error::DimMismatch(format!(
                    "episode {i}: dims ({}, {}) vs env {} ({}, {})",
                    r.state_dim, r.action_dim, spec.env_id, spec.state_dim, spec.action_dim
                )));
            }
            r.validate(i)?;
        }
        let (_, offsets) = encode_traj(&spec, &records);
        Ok(EnvData {
            episode_count: records.len(),
            step_count: records.iter().map(|r| r.transitions()).sum(),
            spec,
            params: BTreeMap::new(),
            file: None,
            offsets,
            bin_stats: None,
            records,
        })
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn compute_bin_stats(&mut self, bins: usize) -> Result<&BinStats> {
        self.bin_stats = Some(compute_bin_stats(&self.records, bins)?);
        Ok(self.bin_stats.as_ref().unwrap())
    }

    /// Number of length-`len` windows in episode `e` (at least 1).
    fn windows(&self, e: usize, len: usize) -> usize {
        self.records[e].len().saturating_sub(len) + 1
    }

    fn max_len(&self) -> usize {
        self.records.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// A named collection of environments (one data source).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub envs: Vec<EnvData>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, envs: Vec<EnvData>) -> Self {
        DatasetManifest {
            name: name.into(),
            envs,
        }
    }

    pub fn episode_count(&self) -> usize {
        self.envs.iter().map(|e| e.episode_count).sum()
    }

    pub fn step_count(&self) -> usize {
        self.envs.iter().map(|e| e.step_count).sum()
    }

    pub fn compute_bin_stats(&mut self, bins: usize) -> Result<()> {
        for env in &mut self.envs {
            env.compute_bin_stats(bins)?;
        }
        Ok(())
    }

    /// Checks that the counts agree with the loaded records.
    pub fn validate(&self) -> Result<()> {
        for env in &self.envs {
            let steps: usize = env.records.iter().map(|r| r.transitions()).sum();
            if env.records.len() != env.episode_count || steps != env.step_count {
                return Err(Error::Format {
                    what: "manifest",
                    reason: format!(
                        "env {}: manifest lists {} episodes / {} steps, data has {} / {}",
                        env.spec.env_id,
                        env.episode_count,
                        env.step_count,
                        env.records.len(),
                        steps
                    ),
                });
            }
            if let Some(bs) = &env.bin_stats {
                bs.validate()?;
                if bs.variates() != env.spec.variates() {
                    return Err(Error::DimMismatch(format!(
                        "env {}: bin stats cover {} variates, env has {}",
                        env.spec.env_id,
                        bs.variates(),
                        env.spec.variates()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Serializes records in TRAJ layout; also returns each episode's byte offset.
pub fn encode_traj(spec: &EnvSpec, records: &[TrajectoryRecord]) -> (Vec<u8>, Vec<u64>) {
    let mut b = Vec::new();
    b.extend_from_slice(TRAJ_MAGIC);
    b.extend_from_slice(&TRAJ_VERSION.to_le_bytes());
    b.extend_from_slice(&(spec.env_id.len() as u32).to_le_bytes());
    b.extend_from_slice(spec.env_id.as_bytes());
    b.extend_from_slice(&(spec.state_dim as u32).to_le_bytes());
    b.extend_from_slice(&(spec.action_dim as u32).to_le_bytes());
    b.extend_from_slice(&(records.len() as u32).to_le_bytes());
    let mut offsets = Vec::with_capacity(records.len());
    for r in records {
        offsets.push(b.len() as u64);
        b.extend_from_slice(&(r.len() as u32).to_le_bytes());
        for v in r.states.iter().chain(&r.actions).chain(&r.rewards) {
            b.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    (b, offsets)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                what: "TRAJ file",
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Parses and validates a TRAJ buffer. If `expect` is given the header must
/// agree with it.
pub fn decode_traj(bytes: &[u8], expect: Option<&EnvSpec>) -> Result<EnvData> {
    let header = |reason: String| Error::Format {
        what: "TRAJ header",
        reason,
    };
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| header("missing magic".into()))? != TRAJ_MAGIC {
        return Err(header("bad magic".into()));
    }
    let version = r.u32()?;
    if version != TRAJ_VERSION as usize {
        return Err(header(format!("unsupported version {version}")));
    }
    let id_len = r.u32()?;
    let env_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| header("env id not UTF-8".into()))?;
    let (m, n) = (r.u32()?, r.u32()?);
    let spec = EnvSpec::new(env_id, m, n).map_err(|e| header(e.to_string()))?;
    if let Some(want) = expect {
        if want != &spec {
            return Err(Error::DimMismatch(format!(
                "file declares {}(m={}, n={}), expected {}(m={}, n={})",
                spec.env_id, m, n, want.env_id, want.state_dim, want.action_dim
            )));
        }
    }
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count);
    for e in 0..count {
        let t = r.u32()?;
        if t < 2 {
            return Err(Error::Format {
                what: "TRAJ episode",
                reason: format!("episode {e} has T={t} < 2"),
            });
        }
        let states = r.f32s(t * m)?;
        let actions = r.f32s((t - 1) * n)?;
        let rewards = r.f32s(t - 1)?;
        let rec = TrajectoryRecord {
            env_id: spec.env_id.clone(),
            state_dim: m,
            action_dim: n,
            states,
            actions,
            rewards,
        };
        rec.validate(e)?;
        records.push(rec);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            what: "TRAJ file",
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    EnvData::new(spec, records)
}

/// Reads one TRAJ file as a single-environment manifest named after the file.
pub fn ingest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let mut env = decode_traj(&fs::read(path)?, None)?;
    env.file = path.file_name().map(|f| f.to_string_lossy().into_owned());
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(DatasetManifest::new(name, vec![env]))
}

pub fn write_traj(path: impl AsRef<Path>, env: &EnvData) -> Result<Vec<u64>> {
    let (bytes, offsets) = encode_traj(&env.spec, &env.records);
    fs::write(path, bytes)?;
    Ok(offsets)
}

/// Writes every environment as `<name>_<i>.traj` plus `<name>.json` in `dir`.
/// Returns the JSON path.
pub fn save_manifest(manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = manifest.clone();
    for (i, env) in out.envs.iter_mut().enumerate() {
        let file = format!("{}_{i}.traj", manifest.name);
        env.offsets = write_traj(dir.join(&file), env)?;
        env.file = Some(file);
    }
    let json = dir.join(format!("{}.json", manifest.name));
    fs::write(&json, serde_json::to_string_pretty(&out)?)?;
    Ok(json)
}

/// Loads a JSON sidecar and the TRAJ files it references, checking counts
/// and offsets against the file contents.
pub fn load_manifest(json: impl AsRef<Path>) -> Result<DatasetManifest> {
    let json = json.as_ref();
    let dir = json.parent().unwrap_or(Path::new("."));
    let mut manifest: DatasetManifest = serde_json::from_slice(&fs::read(json)?)?;
    for env in &mut manifest.envs {
        let file = env.file.clone().ok_or_else(|| Error::Format {
            what: "manifest",
            reason: format!("env {} has no data file", env.spec.env_id),
        })?;
        let loaded = decode_traj(&fs::read(dir.join(&file))?, Some(&env.spec))?;
        if !env.offsets.is_empty() && env.offsets != loaded.offsets {
            return Err(Error::Format {
                what: "manifest",
                reason: format!("env {}: episode offsets disagree with {file}", env.spec.env_id),
            });
        }
        env.offsets = loaded.offsets;
        env.records = loaded.records;
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Relative draw weight per source name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights(pub BTreeMap<String, f64>);

impl SamplingWeights {
    pub fn uniform<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        SamplingWeights(names.into_iter().map(|n| (n.to_string(), 1.0)).collect())
    }

    pub fn get(&self, name: &str) -> f64 {
        self.0.get(name).copied().unwrap_or(0.0)
    }
}

/// Windows from a single environment, front-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: usize,
    pub env: usize,
    pub size: usize,
    pub steps: usize,
    pub width: usize,
    /// `[size, steps, width]` scalar-grid values; padded rows are zero.
    pub values: Vec<f64>,
    /// `[size, steps]`, false on padded rows.
    pub valid: Vec<bool>,
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    WeightedIndex::new(weights).ok().map(|d| d.sample(rng))
}

/// Draws a source ∝ weight, an environment uniformly inside it, then
/// `batch_size` windows from that environment. Episodes are chosen ∝ their
/// window count and window starts uniformly.
pub fn sample_batch<R: Rng + ?Sized>(
    sources: &[&DatasetManifest],
    weights: &SamplingWeights,
    batch_size: usize,
    context: usize,
    rng: &mut R,
) -> Result<Batch> {
    if batch_size == 0 || context < 2 {
        return Err(invalid("batch_size must be >= 1 and context >= 2"));
    }
    let w: Vec<f64> = sources.iter().map(|s| weights.get(&s.name).max(0.0)).collect();
    let usable: Vec<f64> = sources
        .iter()
        .zip(&w)
        .map(|(s, &w)| if s.envs.iter().any(|e| !e.records.is_empty()) { w } else { 0.0 })
        .collect();
    if !w.iter().any(|&v| v > 0.0) {
        return Err(invalid("all sampling weights are zero"));
    }
    let si = pick_weighted(&usable, rng).ok_or_else(|| Error::Empty("every weighted source is empty".into()))?;
    let src = sources[si];
    let candidates: Vec<usize> = (0..src.envs.len()).filter(|&e| !src.envs[e].records.is_empty()).collect();
    let ei = candidates[rng.random_range(0..candidates.len())];
    let batch = sample_env_windows(&src.envs[ei], batch_size, context, rng);
    Ok(Batch {
        source: si,
        env: ei,
        ..batch
    })
}

/// `batch_size` windows from one environment.
pub fn sample_env_windows<R: Rng + ?Sized>(env: &EnvData, batch_size: usize, context: usize, rng: &mut R) -> Batch {
    let len = context.min(env.max_len());
    let width = env.spec.variates();
    let counts: Vec<f64> = (0..env.records.len()).map(|e| env.windows(e, len) as f64).collect();
    let dist = WeightedIndex::new(&counts).expect("environment has episodes");
    let mut values = vec![0.0; batch_size * len * width];
    let mut valid = vec![false; batch_size * len];
    for b in 0..batch_size {
        let e = dist.sample(rng);
        let start = rng.random_range(0..env.windows(e, len));
        fill_window(&env.records[e], start, len, width, &mut values[b * len * width..(b + 1) * len * width], &mut valid[b * len..(b + 1) * len]);
    }
    Batch {
        source: 0,
        env: 0,
        size: batch_size,
        steps: len,
        width,
        values,
        valid,
    }
}

/// Copies rows `start..start+len` of the record's grid, right-aligned with
/// zero rows in front when the episode is shorter than `len`.
pub fn fill_window(rec: &TrajectoryRecord, start: usize, len: usize, width: usize, values: &mut [f64], valid: &mut [bool]) {
    let avail = (rec.len() - start).min(len);
    let pad = len - avail;
    values[..pad * width].fill(0.0);
    valid[..pad].fill(false);
    for i in 0..avail {
        rec.grid_row(start + i, &mut values[(pad + i) * width..(pad + i + 1) * width]);
        valid[pad + i] = true;
    }
}

/// Episode-level split per environment; `round(ratio · count)` episodes go to
/// the training side.
pub fn split_train_val<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    ratio: f64,
    rng: &mut R,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for env in &manifest.envs {
        let count = env.records.len();
        let n_train = (ratio * count as f64).round() as usize;
        if n_train == 0 || n_train == count {
            return Err(invalid(format!(
                "ratio {ratio} leaves an empty side for env {} with {count} episodes",
                env.spec.env_id
            )));
        }
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(rng);
        let (a, b) = idx.split_at(n_train);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        let part = |ids: &[usize]| -> Result<EnvData> {
            let mut e = EnvData::new(env.spec.clone(), ids.iter().map(|&i| env.records[i].clone()).collect())?;
            e.params = env.params.clone();
            e.bin_stats = env.bin_stats.clone();
            Ok(e)
        };
        train.push(part(&a)?);
        val.push(part(&b)?);
    }
    Ok((
        DatasetManifest::new(format!("{}_train", manifest.name), train),
        DatasetManifest::new(format!("{}_val", manifest.name), val),
    ))
}
