//! Cost database, additive cost model and cost functions.
//!
//! Units: time in milliseconds per inference, power in Watts, energy in
//! Joules per 1000 inferences. With those units `energy = time × power` and
//! `power = energy / time` hold without conversion factors.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{signatures, Graph, GraphError, NodeId, NodeSignature};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("algorithm {alg} is not applicable to {sig}")]
    NotApplicable { sig: String, alg: AlgorithmId },
    /// `alg` is the requested algorithm when one was known.
    #[error("no cost entries for node {node} ({sig}); profile the graph first")]
    MissingEntry { node: NodeId, sig: String, alg: Option<AlgorithmId> },
    #[error("node {0} has no algorithm assigned")]
    Unassigned(NodeId),
    #[error("assignment mentions node {0}, which is not an operator of the graph")]
    UnknownNode(NodeId),
    #[error("assignments cover different node sets")]
    DomainMismatch,
    #[error("invalid cost record: {0}")]
    InvalidRecord(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("modeled time is zero; power is undefined")]
    ZeroTime,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Algorithm index within a signature's candidate list; displayed as a letter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlgorithmId(pub u32);

impl AlgorithmId {
    /// `a`, `b`, ..., `z`, then `a26`, ...
    pub fn label(self) -> String {
        if self.0 < 26 {
            char::from(b'a' + self.0 as u8).to_string()
        } else {
            format!("a{}", self.0)
        }
    }
}

impl fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostRecord {
    pub time_ms: f64,
    pub power_w: f64,
    /// Measured energy, when the source reports it separately. Otherwise
    /// energy is derived as `time_ms × power_w`.
    pub energy_j: Option<f64>,
}

impl CostRecord {
    pub fn new(time_ms: f64, power_w: f64) -> Result<Self, CostError> {
        let r = CostRecord { time_ms, power_w, energy_j: None };
        r.check()?;
        Ok(r)
    }

    pub fn with_energy(time_ms: f64, power_w: f64, energy_j: f64) -> Result<Self, CostError> {
        let r = CostRecord { time_ms, power_w, energy_j: Some(energy_j) };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<(), CostError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.time_ms) {
            return Err(CostError::InvalidRecord(format!("time_ms must be positive, got {}", self.time_ms)));
        }
        if !ok(self.power_w) {
            return Err(CostError::InvalidRecord(format!("power_w must be positive, got {}", self.power_w)));
        }
        if let Some(e) = self.energy_j {
            if !ok(e) {
                return Err(CostError::InvalidRecord(format!("energy_j must be positive, got {e}")));
            }
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.energy_j.unwrap_or(self.time_ms * self.power_w)
    }
}

/// One line of the database file.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    sig: String,
    alg: AlgorithmId,
    alg_label: String,
    time_ms: f64,
    power_w: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy_j: Option<f64>,
}

/// Per-signature measurements. A signature is present once it has been
/// profiled; its applicable algorithms are exactly the recorded ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostDatabase {
    entries: BTreeMap<String, BTreeMap<AlgorithmId, CostRecord>>,
}

impl CostDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    /// The three-convolution sample database shipped with the crate.
    pub fn sample() -> Self {
        Self::from_jsonl(include_str!("../data/table1_costs.jsonl")).expect("bundled database parses")
    }

    /// Inserts or replaces a record.
    pub fn insert(&mut self, sig: impl Into<String>, alg: AlgorithmId, rec: CostRecord) -> Result<(), CostError> {
        rec.check()?;
        self.entries.entry(sig.into()).or_default().insert(alg, rec);
        Ok(())
    }

    pub fn lookup(&self, sig: &str, alg: AlgorithmId) -> Result<&CostRecord, CostError> {
        self.entries
            .get(sig)
            .and_then(|m| m.get(&alg))
            .ok_or_else(|| CostError::NotApplicable { sig: sig.to_string(), alg })
    }

    pub fn contains_signature(&self, sig: &str) -> bool {
        self.entries.contains_key(sig)
    }

    /// Applicable algorithms of `sig` in ascending order, if profiled.
    pub fn algorithms(&self, sig: &str) -> Option<Vec<AlgorithmId>> {
        self.entries.get(sig).map(|m| m.keys().copied().collect())
    }

    /// Records of `sig` in ascending algorithm order.
    pub fn records(&self, sig: &str) -> impl Iterator<Item = (AlgorithmId, &CostRecord)> + '_ {
        self.entries.get(sig).into_iter().flat_map(|m| m.iter().map(|(a, r)| (*a, r)))
    }

    /// All records, sorted by signature then algorithm.
    pub fn iter(&self) -> impl Iterator<Item = (&str, AlgorithmId, &CostRecord)> + '_ {
        self.entries.iter().flat_map(|(s, m)| m.iter().map(move |(a, r)| (s.as_str(), *a, r)))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn signature_count(&self) -> usize {
        self.entries.len()
    }

    /// One JSON object for a record, without trailing newline.
    pub fn record_line(sig: &str, alg: AlgorithmId, rec: &CostRecord) -> String {
        serde_json::to_string(&RecordLine {
            sig: sig.to_string(),
            alg,
            alg_label: alg.label(),
            time_ms: rec.time_ms,
            power_w: rec.power_w,
            energy_j: rec.energy_j,
        })
        .expect("record serializes")
    }

    /// Parses JSON Lines. Blank lines are skipped; later lines win.
    pub fn from_jsonl(text: &str) -> Result<Self, CostError> {
        let mut db = CostDatabase::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |reason: String| CostError::Parse { line: i + 1, reason };
            let r: RecordLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            let rec = CostRecord { time_ms: r.time_ms, power_w: r.power_w, energy_j: r.energy_j };
            db.insert(r.sig, r.alg, rec).map_err(|e| parse(e.to_string()))?;
        }
        Ok(db)
    }

    /// Serializes every record, sorted by signature then algorithm.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (sig, alg, rec) in self.iter() {
            out.push_str(&Self::record_line(sig, alg, rec));
            out.push('\n');
        }
        out
    }
}

/// Total map from operator nodes to algorithms. Input nodes are never mapped.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlgorithmAssignment(BTreeMap<NodeId, AlgorithmId>);

impl AlgorithmAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, node: NodeId) -> Option<AlgorithmId> {
        self.0.get(&node).copied()
    }

    pub fn set(&mut self, node: NodeId, alg: AlgorithmId) {
        self.0.insert(node, alg);
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, AlgorithmId)> + '_ {
        self.0.iter().map(|(n, a)| (*n, *a))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Algorithm ids in node order.
    pub fn ids(&self) -> Vec<AlgorithmId> {
        self.0.values().copied().collect()
    }
}

impl FromIterator<(NodeId, AlgorithmId)> for AlgorithmAssignment {
    fn from_iter<I: IntoIterator<Item = (NodeId, AlgorithmId)>>(iter: I) -> Self {
        AlgorithmAssignment(iter.into_iter().collect())
    }
}

/// Number of nodes mapped to different algorithms.
pub fn distance(a1: &AlgorithmAssignment, a2: &AlgorithmAssignment) -> Result<usize, CostError> {
    if a1.0.len() != a2.0.len() || a1.0.keys().ne(a2.0.keys()) {
        return Err(CostError::DomainMismatch);
    }
    Ok(a1.0.values().zip(a2.0.values()).filter(|(x, y)| x != y).count())
}

/// One applicable algorithm of a node with its modeled contribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice {
    pub alg: AlgorithmId,
    pub time: f64,
    pub energy: f64,
}

/// Per-node candidate costs of a graph, resolved against a database.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    nodes: Vec<NodeId>,
    sigs: Vec<String>,
    options: Vec<Vec<Choice>>,
}

impl CostTable {
    /// Fails with `MissingEntry` if any operator's signature is unprofiled.
    pub fn build(graph: &Graph, db: &CostDatabase) -> Result<Self, CostError> {
        let sigs = signatures(graph)?;
        Self::from_signatures(&sigs, db)
    }

    pub fn from_signatures(sigs: &BTreeMap<NodeId, NodeSignature>, db: &CostDatabase) -> Result<Self, CostError> {
        let mut table = CostTable {
            nodes: Vec::with_capacity(sigs.len()),
            sigs: Vec::with_capacity(sigs.len()),
            options: Vec::with_capacity(sigs.len()),
        };
        for (&id, sig) in sigs {
            let key = sig.to_string();
            let opts: Vec<Choice> =
                db.records(&key).map(|(alg, r)| Choice { alg, time: r.time_ms, energy: r.energy() }).collect();
            if opts.is_empty() {
                return Err(CostError::MissingEntry { node: id, sig: key, alg: None });
            }
            table.nodes.push(id);
            table.sigs.push(key);
            table.options.push(opts);
        }
        Ok(table)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn signature(&self, i: usize) -> &str {
        &self.sigs[i]
    }

    /// Options of the `i`-th node (in node-id order), by ascending algorithm.
    pub fn options(&self, i: usize) -> &[Choice] {
        &self.options[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Size of the assignment space, saturating.
    pub fn space_size(&self) -> u128 {
        self.options.iter().fold(1u128, |acc, o| acc.saturating_mul(o.len() as u128))
    }

    /// Option indices of an assignment, checking totality and applicability.
    pub fn indices(&self, a: &AlgorithmAssignment) -> Result<Vec<usize>, CostError> {
        if let Some(extra) = a.0.keys().find(|n| self.nodes.binary_search(n).is_err()) {
            return Err(CostError::UnknownNode(*extra));
        }
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let alg = a.get(n).ok_or(CostError::Unassigned(n))?;
                self.options[i]
                    .iter()
                    .position(|c| c.alg == alg)
                    .ok_or_else(|| CostError::NotApplicable { sig: self.sigs[i].clone(), alg })
            })
            .collect()
    }

    pub fn assignment(&self, idx: &[usize]) -> AlgorithmAssignment {
        self.nodes.iter().zip(idx).enumerate().map(|(i, (&n, &k))| (n, self.options[i][k].alg)).collect()
    }

    /// Metrics of an index vector, summed in node order.
    pub fn metrics_at(&self, idx: &[usize]) -> Metrics {
        let (mut t, mut e) = (0.0, 0.0);
        for (opts, &k) in self.options.iter().zip(idx) {
            t += opts[k].time;
            e += opts[k].energy;
        }
        Metrics::new(t, e)
    }

    pub fn metrics(&self, a: &AlgorithmAssignment) -> Result<Metrics, CostError> {
        Ok(self.metrics_at(&self.indices(a)?))
    }

    /// Assignment with each node at its lowest applicable algorithm.
    pub fn first_assignment(&self) -> AlgorithmAssignment {
        self.assignment(&vec![0; self.len()])
    }
}

/// Whole-graph time (ms), energy (J/1000 inferences) and power (W).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub time_ms: f64,
    pub energy_j: f64,
    pub power_w: f64,
}

impl Metrics {
    /// Power is `energy / time`, or zero for an empty graph.
    pub fn new(time_ms: f64, energy_j: f64) -> Self {
        let power_w = if time_ms > 0.0 { energy_j / time_ms } else { 0.0 };
        Metrics { time_ms, energy_j, power_w }
    }
}

/// The graph's operator signatures resolved with `db`, and `a`'s metrics.
fn model(graph: &Graph, a: &AlgorithmAssignment, db: &CostDatabase) -> Result<Metrics, CostError> {
    let sigs = signatures(graph)?;
    for (&node, sig) in &sigs {
        let key = sig.to_string();
        if !db.contains_signature(&key) {
            return Err(CostError::MissingEntry { node, sig: key, alg: a.get(node) });
        }
    }
    CostTable::from_signatures(&sigs, db)?.metrics(a)
}

pub fn model_time(graph: &Graph, a: &AlgorithmAssignment, db: &CostDatabase) -> Result<f64, CostError> {
    Ok(model(graph, a, db)?.time_ms)
}

pub fn model_energy(graph: &Graph, a: &AlgorithmAssignment, db: &CostDatabase) -> Result<f64, CostError> {
    Ok(model(graph, a, db)?.energy_j)
}

pub fn model_power(graph: &Graph, a: &AlgorithmAssignment, db: &CostDatabase) -> Result<f64, CostError> {
    let m = model(graph, a, db)?;
    if m.time_ms <= 0.0 {
        return Err(CostError::ZeroTime);
    }
    Ok(m.power_w)
}

pub fn model_metrics(graph: &Graph, a: &AlgorithmAssignment, db: &CostDatabase) -> Result<Metrics, CostError> {
    model(graph, a, db)
}

/// Normalization references for weighted objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Refs {
    pub time_ms: f64,
    pub energy_j: f64,
    pub power_w: f64,
}

impl Default for Refs {
    fn default() -> Self {
        Refs { time_ms: 1.0, energy_j: 1.0, power_w: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    Time,
    Energy,
    /// Energy-to-time ratio.
    Power,
    /// `w·E + (1−w)·T`, normalized.
    Linear {
        w: f64,
    },
    /// `E^w · T^(1−w)`, normalized.
    Product {
        w: f64,
    },
    /// Weighted sum of normalized metrics.
    Mix {
        time: f64,
        energy: f64,
        power: f64,
    },
}

impl Objective {
    /// True when the cost is a non-negative combination of time and energy
    /// alone, so it decomposes into per-node terms.
    pub fn is_separable(&self) -> bool {
        match *self {
            Objective::Time | Objective::Energy | Objective::Linear { .. } => true,
            Objective::Mix { power, .. } => power == 0.0,
            Objective::Power | Objective::Product { .. } => false,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Time => f.write_str("time"),
            Objective::Energy => f.write_str("energy"),
            Objective::Power => f.write_str("power"),
            Objective::Linear { w } => write!(f, "linear:w={w}"),
            Objective::Product { w } => write!(f, "product:w={w}"),
            Objective::Mix { time, energy, power } => {
                write!(f, "mix:time={time},energy={energy},power={power}")
            }
        }
    }
}

/// An objective together with its normalization references.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostFunction {
    pub objective: Objective,
    pub refs: Refs,
}

impl CostFunction {
    pub fn new(objective: Objective) -> Self {
        CostFunction { objective, refs: Refs::default() }
    }

    pub fn with_refs(objective: Objective, refs: Refs) -> Self {
        CostFunction { objective, refs }
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |w: f64| (0.0..=1.0).contains(&w);
        match self.objective {
            Objective::Linear { w } | Objective::Product { w } if !unit(w) => {
                return Err(format!("weight {w} outside [0, 1]"))
            }
            Objective::Mix { time, energy, power } => {
                if [time, energy, power].iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err("mix weights must be non-negative".into());
                }
                if time + energy + power <= 0.0 {
                    return Err("mix weights must not all be zero".into());
                }
            }
            _ => {}
        }
        let r = self.refs;
        if [r.time_ms, r.energy_j, r.power_w].iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err("normalization references must be positive".into());
        }
        Ok(())
    }

    pub fn evaluate(&self, m: &Metrics) -> f64 {
        let r = &self.refs;
        match self.objective {
            Objective::Time => m.time_ms,
            Objective::Energy => m.energy_j,
            Objective::Power => m.power_w,
            Objective::Linear { w } => w * (m.energy_j / r.energy_j) + (1.0 - w) * (m.time_ms / r.time_ms),
            Objective::Product { w } => (m.energy_j / r.energy_j).powf(w) * (m.time_ms / r.time_ms).powf(1.0 - w),
            Objective::Mix { time, energy, power } => {
                time * (m.time_ms / r.time_ms) + energy * (m.energy_j / r.energy_j) + power * (m.power_w / r.power_w)
            }
        }
    }

    /// Cost from raw sums, as used by incremental evaluation.
    pub fn evaluate_sums(&self, time_ms: f64, energy_j: f64) -> f64 {
        self.evaluate(&Metrics::new(time_ms, energy_j))
    }
}

pub fn eval_cost(
    f: &CostFunction,
    graph: &Graph,
    a: &AlgorithmAssignment,
    db: &CostDatabase,
) -> Result<f64, CostError> {
    let m = model(graph, a, db)?;
    if m.time_ms <= 0.0 && matches!(f.objective, Objective::Power) {
        return Err(CostError::ZeroTime);
    }
    Ok(f.evaluate(&m))
}

/// Best achievable time and energy of `g0` (each minimized separately over
/// all assignments), and their ratio.
///
/// Time and energy are sums of per-node terms, so the minimum over
/// assignments is the sum of per-node minima.
pub fn normalization_refs(g0: &Graph, db: &CostDatabase) -> Result<Refs, CostError> {
    let table = CostTable::build(g0, db)?;
    let argmin = |key: fn(&Choice) -> f64| -> Vec<usize> {
        (0..table.len())
            .map(|i| {
                let opts = table.options(i);
                (0..opts.len()).min_by(|&x, &y| key(&opts[x]).total_cmp(&key(&opts[y]))).expect("non-empty options")
            })
            .collect()
    };
    let time_ms = table.metrics_at(&argmin(|c| c.time)).time_ms;
    let energy_j = table.metrics_at(&argmin(|c| c.energy)).energy_j;
    if time_ms <= 0.0 || energy_j <= 0.0 {
        return Err(CostError::ZeroTime);
    }
    Ok(Refs { time_ms, energy_j, power_w: energy_j / time_ms })
}

/// The three-convolution graph whose per-node costs the sample database holds.
pub fn sample_graph() -> Graph {
    crate::graph::from_json_str(include_str!("../data/table1_graph.json")).expect("bundled graph parses")
}
