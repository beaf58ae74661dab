//! Shared workloads for the benchmarks.

use enerflow::models::{random_graph, toy_squeeze};
use enerflow::{CostDatabase, Graph, Profiler, ProfilerSpec};

/// A graph together with a database holding every entry its search needs.
pub struct Workload {
    pub graph: Graph,
    pub db: CostDatabase,
}

fn profiled(graph: Graph, seed: u64) -> Workload {
    let mut db = CostDatabase::new();
    Profiler::new(ProfilerSpec::Synthetic { seed })
        .ensure_profiled(&graph, &mut db)
        .expect("synthetic profiling cannot fail");
    Workload { graph, db }
}

pub fn squeeze() -> Workload {
    profiled(toy_squeeze(), 0)
}

/// A random graph with `ops` operators, profiled with the same seed.
pub fn random(seed: u64, ops: usize) -> Workload {
    profiled(random_graph(seed, ops), seed)
}
