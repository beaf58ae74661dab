//! Filling the cost database: a deterministic synthetic generator, an
//! external measurement-command protocol, and JSON Lines persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{AlgorithmId, CostDatabase, CostError, CostRecord};
use crate::graph::{signatures, Graph, GraphError, NodeSignature};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("measurement command failed (exit {code:?}): {stderr}")]
    CommandFailed { code: Option<i32>, stderr: String },
    #[error("measurement command output: {0}")]
    BadOutput(String),
    #[error("no applicable algorithm for {0}")]
    NoApplicableAlgorithm(String),
    #[error("invalid profiler spec `{0}`")]
    InvalidSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn io_err(path: &Path, e: impl fmt::Display) -> ProfileError {
    ProfileError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProfilerSpec {
    Synthetic {
        seed: u64,
    },
    /// Shell command template with `{spec}` (node-spec JSON path) and
    /// `{alg}` (algorithm id) placeholders.
    External {
        command: String,
    },
}

impl fmt::Display for ProfilerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfilerSpec::Synthetic { seed } => write!(f, "synthetic:seed={seed}"),
            ProfilerSpec::External { command } => write!(f, "external:cmd={command}"),
        }
    }
}

impl FromStr for ProfilerSpec {
    type Err = ProfileError;

    /// `synthetic:seed=N` or `external:cmd=TEMPLATE`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProfileError::InvalidSpec(s.to_string());
        if let Some(rest) = s.strip_prefix("synthetic:seed=") {
            return rest.parse().map(|seed| ProfilerSpec::Synthetic { seed }).map_err(|_| bad());
        }
        if let Some(command) = s.strip_prefix("external:cmd=") {
            if !command.contains("{spec}") {
                return Err(bad());
            }
            return Ok(ProfilerSpec::External { command: command.to_string() });
        }
        Err(bad())
    }
}

/// Number of candidate algorithms tried for an operator kind.
pub fn candidate_count(kind: &str) -> u32 {
    match kind {
        "conv2d" => 4,
        "matmul" => 3,
        _ => 2,
    }
}

const TIME_SCALE: f64 = 1e-7;
const FLOP_EXPONENT: f64 = 0.9;
const INAPPLICABLE_RATE: f64 = 0.2;

/// Independent pseudo-random stream for a key.
fn stream(seed: u64, tag: &str, key: &str, alg: Option<AlgorithmId>) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [tag, key] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.update(alg.map_or(u64::MAX, |a| a.0 as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn applicable(sig: &str, kind: &str, alg: AlgorithmId, seed: u64) -> bool {
    let n = candidate_count(kind);
    if alg.0 >= n {
        return false;
    }
    let drawn = |a: u32| stream(seed, "applicable", sig, Some(AlgorithmId(a))).random::<f64>() >= INAPPLICABLE_RATE;
    if (0..n).any(drawn) {
        return drawn(alg.0);
    }
    stream(seed, "fallback", sig, None).random_range(0..n) == alg.0
}

/// Deterministic stand-in for a measurement, `None` when inapplicable.
///
/// Time is `c·FLOPs^0.9·m + overhead`. The multiplier `m` is an algorithm
/// trait (keyed by operator kind and algorithm) scaled by a small
/// per-signature jitter, so one algorithm is consistently faster than
/// another for a kind without being uniformly so. Power falls as `m` rises,
/// so fast algorithms tend to draw more power.
pub fn synthetic_profile(sig: &NodeSignature, alg: AlgorithmId, seed: u64) -> Option<CostRecord> {
    let key = sig.to_string();
    if !applicable(&key, &sig.kind, alg, seed) {
        return None;
    }
    let mut trait_rng = stream(seed, "algorithm", &sig.kind, Some(alg));
    let base: f64 = trait_rng.random_range(0.6..1.7);
    let overhead: f64 = trait_rng.random_range(0.001..0.004);
    let mut sig_rng = stream(seed, "signature", &key, Some(alg));
    let jitter: f64 = sig_rng.random_range(0.85..1.15);
    let power_jitter: f64 = sig_rng.random_range(0.85..1.15);

    let mult = base * jitter;
    let time_ms = TIME_SCALE * (sig.flops as f64).powf(FLOP_EXPONENT) * mult + overhead;
    // mult spans roughly [0.51, 1.96]; map it inversely onto the power range
    let lean = ((1.96 - mult) / 1.45).clamp(0.0, 1.0);
    let power_w = ((40.0 + 160.0 * lean) * power_jitter).clamp(40.0, 200.0);
    Some(CostRecord::new(time_ms, power_w).expect("generator yields positive values"))
}

#[derive(Deserialize)]
struct MeasureOutput {
    #[serde(default)]
    not_applicable: bool,
    time_ms: Option<f64>,
    power_w: Option<f64>,
    energy_j: Option<f64>,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Runs the measurement command once for `(sig, alg)`.
pub fn measure_external(
    command: &str,
    sig: &NodeSignature,
    alg: AlgorithmId,
) -> Result<Option<CostRecord>, ProfileError> {
    let mut spec = sig.to_json();
    spec["alg"] = alg.0.into();
    let mut file = tempfile::Builder::new()
        .prefix("node-spec-")
        .suffix(".json")
        .tempfile()
        .map_err(|e| io_err(Path::new("node-spec"), e))?;
    writeln!(file, "{spec}").map_err(|e| io_err(file.path(), e))?;
    let cmd =
        command.replace("{spec}", &shell_quote(&file.path().to_string_lossy())).replace("{alg}", &alg.0.to_string());
    let out = Command::new("sh").arg("-c").arg(&cmd).output().map_err(|e| io_err(Path::new("sh"), e))?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(ProfileError::CommandFailed {
            code: out.status.code(),
            stderr: stderr.trim().chars().take(400).collect(),
        });
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let parsed: MeasureOutput =
        serde_json::from_str(text.trim()).map_err(|e| ProfileError::BadOutput(format!("{e}: {}", text.trim())))?;
    if parsed.not_applicable {
        return Ok(None);
    }
    let (Some(time_ms), Some(power_w)) = (parsed.time_ms, parsed.power_w) else {
        return Err(ProfileError::BadOutput("expected time_ms and power_w".into()));
    };
    let rec = match parsed.energy_j {
        Some(e) => CostRecord::with_energy(time_ms, power_w, e),
        None => CostRecord::new(time_ms, power_w),
    };
    rec.map(Some).map_err(|e| ProfileError::BadOutput(e.to_string()))
}

/// Fills database gaps through a profiler, appending new records to an
/// optional backing file as each signature completes.
#[derive(Debug)]
pub struct Profiler {
    spec: ProfilerSpec,
    store: Option<PathBuf>,
    invocations: usize,
}

impl Profiler {
    pub fn new(spec: ProfilerSpec) -> Self {
        Profiler { spec, store: None, invocations: 0 }
    }

    pub fn with_store(mut self, path: impl Into<PathBuf>) -> Self {
        self.store = Some(path.into());
        self
    }

    pub fn spec(&self) -> &ProfilerSpec {
        &self.spec
    }

    /// Profiler calls made so far, one per (signature, candidate algorithm).
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    fn measure(&mut self, sig: &NodeSignature, alg: AlgorithmId) -> Result<Option<CostRecord>, ProfileError> {
        self.invocations += 1;
        match &self.spec {
            ProfilerSpec::Synthetic { seed } => Ok(synthetic_profile(sig, alg, *seed)),
            ProfilerSpec::External { command } => measure_external(command, sig, alg),
        }
    }

    /// Ensures every operator signature of `graph` is in `db`. Returns the
    /// number of new records. Signatures already present are not touched.
    pub fn ensure_profiled(&mut self, graph: &Graph, db: &mut CostDatabase) -> Result<usize, ProfileError> {
        let mut pending: BTreeMap<String, NodeSignature> = BTreeMap::new();
        for sig in signatures(graph)?.into_values() {
            let key = sig.to_string();
            if !db.contains_signature(&key) {
                pending.entry(key).or_insert(sig);
            }
        }
        let mut added = 0;
        for (key, sig) in pending {
            let mut batch = Vec::new();
            for a in 0..candidate_count(&sig.kind) {
                let alg = AlgorithmId(a);
                if let Some(rec) = self.measure(&sig, alg)? {
                    batch.push((alg, rec));
                }
            }
            if batch.is_empty() {
                return Err(ProfileError::NoApplicableAlgorithm(key));
            }
            if let Some(path) = &self.store {
                append(path, &key, &batch)?;
            }
            added += batch.len();
            for (alg, rec) in batch {
                db.insert(key.clone(), alg, rec).expect("profilers yield valid records");
            }
        }
        Ok(added)
    }
}

/// One-shot [`Profiler::ensure_profiled`] without a backing file.
pub fn ensure_profiled(graph: &Graph, db: &mut CostDatabase, spec: &ProfilerSpec) -> Result<usize, ProfileError> {
    Profiler::new(spec.clone()).ensure_profiled(graph, db)
}

/// Appends records for one signature to a JSON Lines file.
pub fn append(path: &Path, sig: &str, records: &[(AlgorithmId, CostRecord)]) -> Result<(), ProfileError> {
    let mut text = String::new();
    for (alg, rec) in records {
        text.push_str(&CostDatabase::record_line(sig, *alg, rec));
        text.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    f.sync_data().map_err(|e| io_err(path, e))
}

/// Writes the whole database, sorted, replacing the file atomically.
pub fn persist(db: &CostDatabase, path: &Path) -> Result<(), ProfileError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(db.to_jsonl().as_bytes()).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CostDatabase, ProfileError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    CostDatabase::from_jsonl(&text).map_err(|e| match e {
        CostError::Parse { line, reason } => ProfileError::Parse { path: path.to_path_buf(), line, reason },
        other => io_err(path, other),
    })
}

/// Like [`load`], but a missing file is an empty database.
pub fn load_or_empty(path: &Path) -> Result<CostDatabase, ProfileError> {
    if path.exists() {
        load(path)
    } else {
        Ok(CostDatabase::new())
    }
}
