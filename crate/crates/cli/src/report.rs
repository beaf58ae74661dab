//! Run reports: a JSON document and a plain-text rendering.

use std::fmt::Write as _;

use enerflow::cost::{CostTable, Refs};
use enerflow::graph::canonical_hash;
use enerflow::search::Ablation;
use enerflow::{
    AlgorithmAssignment, CostDatabase, CostError, CostFunction, Graph, Metrics, OptimizationResult, SearchStats,
};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct ConfigEcho {
    pub graph: String,
    pub rules: Vec<String>,
    pub alpha: f64,
    pub d: usize,
    pub seed: u64,
    pub profiler: String,
    pub max_queue: usize,
    pub max_graph_nodes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub time_ms: f64,
    pub energy_j: f64,
    pub power_w: f64,
    pub cost: f64,
    pub op_nodes: usize,
}

impl Summary {
    pub fn new(m: &Metrics, cost: f64, op_nodes: usize) -> Self {
        Summary { time_ms: m.time_ms, energy_j: m.energy_j, power_w: m.power_w, cost, op_nodes }
    }

    fn of(r: &OptimizationResult) -> Self {
        Summary::new(&r.metrics, r.cost, r.graph.op_count())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Change {
    pub time_pct: f64,
    pub energy_pct: f64,
    pub power_pct: f64,
}

fn pct(new: f64, old: f64) -> f64 {
    if old == 0.0 {
        0.0
    } else {
        100.0 * (new - old) / old
    }
}

impl Change {
    fn between(new: &Summary, old: &Summary) -> Self {
        Change {
            time_pct: pct(new.time_ms, old.time_ms),
            energy_pct: pct(new.energy_j, old.energy_j),
            power_pct: pct(new.power_w, old.power_w),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeRow {
    pub id: u32,
    pub kind: String,
    pub sig: String,
    pub alg: u32,
    pub label: String,
    pub time_ms: f64,
    pub power_w: f64,
    pub energy_j: f64,
}

/// Per-node algorithm table of an assignment.
pub fn node_rows(g: &Graph, a: &AlgorithmAssignment, db: &CostDatabase) -> Result<Vec<NodeRow>, CostError> {
    let table = CostTable::build(g, db)?;
    let idx = table.indices(a)?;
    Ok(table
        .nodes()
        .iter()
        .zip(idx)
        .enumerate()
        .map(|(i, (&id, k))| {
            let c = table.options(i)[k];
            let rec = db.lookup(table.signature(i), c.alg).expect("resolved above");
            NodeRow {
                id,
                kind: g.node(id).expect("table node").op.kind_name().to_string(),
                sig: table.signature(i).to_string(),
                alg: c.alg.0,
                label: c.alg.label(),
                time_ms: c.time,
                power_w: rec.power_w,
                energy_j: c.energy,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub cost_function: String,
    pub refs: Option<Refs>,
    pub config: ConfigEcho,
    pub origin: Summary,
    pub optimized: Summary,
    pub change: Change,
    pub stats: SearchStats,
    pub graph_hash: String,
    pub nodes: Vec<NodeRow>,
}

impl RunReport {
    pub fn new(
        cost_function: String,
        refs: Option<Refs>,
        config: ConfigEcho,
        origin: Summary,
        result: &OptimizationResult,
        nodes: Vec<NodeRow>,
    ) -> Self {
        let optimized = Summary::of(result);
        RunReport {
            cost_function,
            refs,
            change: Change::between(&optimized, &origin),
            config,
            origin,
            optimized,
            stats: result.stats.clone(),
            graph_hash: format!("{:016x}", canonical_hash(&result.graph)),
            nodes,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cost function: {}", self.cost_function);
        if let Some(r) = &self.refs {
            let _ = writeln!(
                s,
                "normalized by: time {:.6} ms, energy {:.6} J/1000, power {:.3} W",
                r.time_ms, r.energy_j, r.power_w
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>14} {:>16} {:>10} {:>12}",
            "", "nodes", "time (ms)", "energy (J/1000)", "power (W)", "cost"
        );
        for (name, m) in [("origin", &self.origin), ("optimized", &self.optimized)] {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>14.6} {:>16.6} {:>10.3} {:>12.6}",
                name, m.op_nodes, m.time_ms, m.energy_j, m.power_w, m.cost
            );
        }
        let c = &self.change;
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>13.1}% {:>15.1}% {:>9.1}%",
            "change", "", c.time_pct, c.energy_pct, c.power_pct
        );
        let st = &self.stats;
        let _ = writeln!(
            s,
            "\nsearch: {} graphs explored, {} scored, {} improvements, {} assignments evaluated, \
             {} inner sweeps, cap hits: queue {} / nodes {}",
            st.graphs_explored,
            st.graphs_evaluated,
            st.improvements,
            st.assignments_evaluated,
            st.inner_sweeps,
            st.queue_cap_hits,
            st.node_cap_hits
        );
        let _ = writeln!(
            s,
            "\n{:>5}  {:<10} {:>3}  {:>10} {:>9} {:>12}  signature",
            "node", "kind", "alg", "time", "power", "energy"
        );
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "{:>5}  {:<10} {:>3}  {:>10.6} {:>9.3} {:>12.6}  {}",
                n.id, n.kind, n.label, n.time_ms, n.power_w, n.energy_j, n.sig
            );
        }
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub config: &'static str,
    #[serde(flatten)]
    pub summary: Summary,
    pub change: Change,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub cost_function: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn new(f: &CostFunction, a: &Ablation) -> Self {
        let origin = Summary::of(&a.origin);
        let rows =
            [("origin", &a.origin), ("inner-only", &a.inner_only), ("outer-only", &a.outer_only), ("both", &a.both)]
                .into_iter()
                .map(|(config, r)| {
                    let summary = Summary::of(r);
                    ComparisonRow { config, change: Change::between(&summary, &origin), summary }
                })
                .collect();
        Comparison { cost_function: f.objective.to_string(), rows }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cost function: {}\n", self.cost_function);
        let _ = writeln!(
            s,
            "{:<11} {:>6} {:>12} {:>10} {:>16} {:>12} {:>9}",
            "config", "nodes", "time (ms)", "power (W)", "energy (J/1000)", "cost", "energy"
        );
        for r in &self.rows {
            let m = &r.summary;
            let _ = writeln!(
                s,
                "{:<11} {:>6} {:>12.6} {:>10.3} {:>16.6} {:>12.6} {:>8.1}%",
                r.config, m.op_nodes, m.time_ms, m.power_w, m.energy_j, m.cost, r.change.energy_pct
            );
        }
        s
    }
}
