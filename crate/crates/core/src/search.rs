//! Joint search over equivalent graphs and algorithm assignments.
//!
//! The outer level is a cost-ordered backtracking search over graphs reached
//! by substitutions, relaxed by a factor α: a candidate stays in the frontier
//! when its cost is below α times the best cost found so far. The inner level
//! is a local search over assignments of one graph, moving to any
//! assignment within distance `d` that strictly lowers the cost.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::cost::{
    normalization_refs, AlgorithmAssignment, CostDatabase, CostError, CostFunction, CostTable, Metrics, Objective,
};
use crate::graph::{canonical_hash, Graph, GraphError};
use crate::profile::{ProfileError, Profiler};
use crate::rules::{neighbors_hashed, SubstitutionRule};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("search space has {size} points, above the limit of {limit}")]
    SpaceTooLarge { size: u128, limit: u128 },
    #[error("no configuration meets the time bound; best achievable time is {best_time_ms} ms")]
    Infeasible { best_time_ms: f64 },
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
}

pub const DEFAULT_ASSIGNMENT_LIMIT: u128 = 1_000_000;
pub const DEFAULT_SPACE_LIMIT: usize = 10_000;
const BISECTION_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchConfig {
    /// Relaxation factor, at least 1. 1 makes the outer search greedy.
    pub alpha: f64,
    /// Inner neighborhood radius, at least 1.
    pub d: usize,
    /// Upper bound on the frontier size.
    pub max_queue: usize,
    /// Largest operator count a candidate graph may have; `None` means four
    /// times the origin's.
    pub max_graph_nodes: Option<usize>,
    /// Reserved for randomized choices; the current search is deterministic.
    pub seed: u64,
    /// When false every graph keeps the default assignment.
    pub inner_enabled: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { alpha: 1.05, d: 1, max_queue: 100_000, max_graph_nodes: None, seed: 0, inner_enabled: true }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_string()));
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return bad("alpha must be at least 1");
        }
        if self.d < 1 {
            return bad("d must be at least 1");
        }
        if self.max_queue < 1 || self.max_graph_nodes == Some(0) {
            return bad("caps must be at least 1");
        }
        Ok(())
    }

    pub fn node_cap(&self, origin: &Graph) -> usize {
        self.max_graph_nodes.unwrap_or(4 * origin.op_count().max(1))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SearchStats {
    /// Graphs taken off the frontier and expanded.
    pub graphs_explored: usize,
    /// Distinct graphs scored, the origin included.
    pub graphs_evaluated: usize,
    pub graphs_enqueued: usize,
    /// Times a strictly better graph was adopted.
    pub improvements: usize,
    pub assignments_evaluated: u64,
    /// Inner-search sweeps over the neighborhood.
    pub inner_sweeps: u64,
    pub queue_cap_hits: usize,
    pub node_cap_hits: usize,
    /// Depends on what the database already held, so it is left out of
    /// serialized output.
    #[serde(skip)]
    pub records_profiled: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl SearchStats {
    fn absorb(&mut self, o: &SearchStats) {
        self.graphs_explored += o.graphs_explored;
        self.graphs_evaluated += o.graphs_evaluated;
        self.graphs_enqueued += o.graphs_enqueued;
        self.improvements += o.improvements;
        self.assignments_evaluated += o.assignments_evaluated;
        self.inner_sweeps += o.inner_sweeps;
        self.queue_cap_hits += o.queue_cap_hits;
        self.node_cap_hits += o.node_cap_hits;
        self.records_profiled += o.records_profiled;
        self.wall_time += o.wall_time;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationResult {
    pub graph: Graph,
    pub assignment: AlgorithmAssignment,
    pub cost: f64,
    pub metrics: Metrics,
    pub stats: SearchStats,
}

/// Inner search on a resolved table; returns option indices.
fn inner_indices(table: &CostTable, f: &CostFunction, d: usize, stats: &mut SearchStats) -> Vec<usize> {
    let n = table.len();
    let mut idx = vec![0usize; n];
    let free: Vec<usize> = (0..n).filter(|&i| table.options(i).len() > 1).collect();
    let m = table.metrics_at(&idx);
    let (mut t, mut e) = (m.time_ms, m.energy_j);
    let mut cost = f.evaluate_sums(t, e);

    let max_k = d.min(free.len());
    loop {
        stats.inner_sweeps += 1;
        let mut changed = false;
        for k in 1..=max_k {
            // lexicographic k-combinations of free nodes
            let mut combo: Vec<usize> = (0..k).collect();
            loop {
                let nodes: Vec<usize> = combo.iter().map(|&c| free[c]).collect();
                // odometer over the chosen nodes' options, last node fastest
                let mut pick = vec![0usize; k];
                'product: loop {
                    if nodes.iter().zip(&pick).all(|(&i, &p)| idx[i] != p) {
                        let (mut dt, mut de) = (0.0, 0.0);
                        for (&i, &p) in nodes.iter().zip(&pick) {
                            let (new, old) = (table.options(i)[p], table.options(i)[idx[i]]);
                            dt += new.time - old.time;
                            de += new.energy - old.energy;
                        }
                        stats.assignments_evaluated += 1;
                        if f.evaluate_sums(t + dt, e + de) < cost {
                            let saved: Vec<usize> = nodes.iter().map(|&i| idx[i]).collect();
                            for (&i, &p) in nodes.iter().zip(&pick) {
                                idx[i] = p;
                            }
                            let m = table.metrics_at(&idx);
                            let exact = f.evaluate_sums(m.time_ms, m.energy_j);
                            if exact < cost {
                                (t, e, cost) = (m.time_ms, m.energy_j, exact);
                                changed = true;
                            } else {
                                for (&i, &s) in nodes.iter().zip(&saved) {
                                    idx[i] = s;
                                }
                            }
                        }
                    }
                    let mut pos = k;
                    loop {
                        if pos == 0 {
                            break 'product;
                        }
                        pos -= 1;
                        pick[pos] += 1;
                        if pick[pos] < table.options(nodes[pos]).len() {
                            break;
                        }
                        pick[pos] = 0;
                    }
                }
                if !next_combination(&mut combo, free.len()) {
                    break;
                }
            }
        }
        if !changed {
            return idx;
        }
    }
}

/// Advances `combo` to the next k-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// A `d`-locally optimal assignment reached from the lowest-id start.
pub fn inner_search(
    g: &Graph,
    db: &CostDatabase,
    f: &CostFunction,
    d: usize,
) -> Result<AlgorithmAssignment, SearchError> {
    let table = CostTable::build(g, db)?;
    Ok(table.assignment(&inner_indices(&table, f, d.max(1), &mut SearchStats::default())))
}

/// Exhaustive minimum over option indices; ties go to the lexicographically
/// smallest vector. Partial sums follow node order, so every evaluated sum is
/// bit-identical to a fresh left-to-right summation.
fn brute_indices(
    table: &CostTable,
    f: &CostFunction,
    limit: u128,
    stats: &mut SearchStats,
) -> Result<Vec<usize>, SearchError> {
    let size = table.space_size();
    if size > limit {
        return Err(SearchError::SpaceTooLarge { size, limit });
    }
    let n = table.len();
    let mut idx = vec![0usize; n];
    // prefix[i] = sums over nodes 0..i
    let mut prefix = vec![(0.0f64, 0.0f64); n + 1];
    let refill = |prefix: &mut Vec<(f64, f64)>, idx: &[usize], from: usize| {
        for i in from..n {
            let c = table.options(i)[idx[i]];
            prefix[i + 1] = (prefix[i].0 + c.time, prefix[i].1 + c.energy);
        }
    };
    refill(&mut prefix, &idx, 0);
    let mut best = idx.clone();
    let mut best_cost = f.evaluate_sums(prefix[n].0, prefix[n].1);
    stats.assignments_evaluated += 1;
    loop {
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < table.options(pos).len() {
                break;
            }
            idx[pos] = 0;
        }
        refill(&mut prefix, &idx, pos);
        let c = f.evaluate_sums(prefix[n].0, prefix[n].1);
        stats.assignments_evaluated += 1;
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&idx);
        }
    }
}

pub fn brute_force_assignment(
    g: &Graph,
    db: &CostDatabase,
    f: &CostFunction,
) -> Result<AlgorithmAssignment, SearchError> {
    brute_force_assignment_with_limit(g, db, f, DEFAULT_ASSIGNMENT_LIMIT)
}

pub fn brute_force_assignment_with_limit(
    g: &Graph,
    db: &CostDatabase,
    f: &CostFunction,
    limit: u128,
) -> Result<AlgorithmAssignment, SearchError> {
    let table = CostTable::build(g, db)?;
    Ok(table.assignment(&brute_indices(&table, f, limit, &mut SearchStats::default())?))
}

/// How a single graph's assignment is chosen.
#[derive(Clone, Copy)]
enum Assign {
    Default,
    Local(usize),
    Exhaustive(u128),
}

struct Scored {
    assignment: AlgorithmAssignment,
    cost: f64,
    metrics: Metrics,
}

fn score(
    g: &Graph,
    db: &mut CostDatabase,
    f: &CostFunction,
    how: Assign,
    profiler: &mut Option<&mut Profiler>,
    stats: &mut SearchStats,
) -> Result<Scored, SearchError> {
    if let Some(p) = profiler.as_deref_mut() {
        stats.records_profiled += p.ensure_profiled(g, db)?;
    }
    let table = CostTable::build(g, db)?;
    let idx = match how {
        Assign::Default => vec![0; table.len()],
        Assign::Local(d) => inner_indices(&table, f, d, stats),
        Assign::Exhaustive(limit) => brute_indices(&table, f, limit, stats)?,
    };
    let metrics = table.metrics_at(&idx);
    stats.graphs_evaluated += 1;
    Ok(Scored { assignment: table.assignment(&idx), cost: f.evaluate(&metrics), metrics })
}

struct Frontier {
    cost: f64,
    hash: u64,
    graph: Graph,
}

impl PartialEq for Frontier {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Frontier {
    fn cmp(&self, o: &Self) -> Ordering {
        self.cost.total_cmp(&o.cost).then(self.hash.cmp(&o.hash))
    }
}

/// Relaxed backtracking search over the substitution space of `g0`.
///
/// The frontier is ordered by cost, then canonical hash. A generated graph
/// is scored once: it becomes the best result when strictly cheaper than the
/// best so far, and joins the frontier when strictly cheaper than α times the
/// best cost held before it was scored. Graphs are profiled on demand when a
/// profiler is given; otherwise missing database entries are errors.
pub fn outer_search(
    g0: &Graph,
    rules: &[SubstitutionRule],
    db: &mut CostDatabase,
    f: &CostFunction,
    cfg: &SearchConfig,
    mut profiler: Option<&mut Profiler>,
) -> Result<OptimizationResult, SearchError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut stats = SearchStats::default();
    let how = if cfg.inner_enabled { Assign::Local(cfg.d) } else { Assign::Default };
    let cap = cfg.node_cap(g0);

    let first = score(g0, db, f, how, &mut profiler, &mut stats)?;
    let h0 = canonical_hash(g0);
    let mut best = (g0.clone(), first);
    let mut visited = BTreeSet::from([h0]);
    let mut queue = BinaryHeap::from([Reverse(Frontier { cost: best.1.cost, hash: h0, graph: g0.clone() })]);
    stats.graphs_enqueued = 1;

    while let Some(Reverse(Frontier { graph, .. })) = queue.pop() {
        stats.graphs_explored += 1;
        for (h, next) in neighbors_hashed(&graph, rules) {
            if !visited.insert(h) {
                continue;
            }
            if next.op_count() > cap {
                stats.node_cap_hits += 1;
                continue;
            }
            let s = score(&next, db, f, how, &mut profiler, &mut stats)?;
            let threshold = cfg.alpha * best.1.cost;
            let cost = s.cost;
            if cost < best.1.cost {
                best = (next.clone(), s);
                stats.improvements += 1;
            }
            if cost < threshold {
                if queue.len() >= cfg.max_queue {
                    stats.queue_cap_hits += 1;
                } else {
                    queue.push(Reverse(Frontier { cost, hash: h, graph: next }));
                    stats.graphs_enqueued += 1;
                }
            }
        }
    }
    stats.wall_time = start.elapsed();
    let (graph, s) = best;
    Ok(OptimizationResult { graph, assignment: s.assignment, cost: s.cost, metrics: s.metrics, stats })
}

/// Every graph reachable from `g0` through `rules` whose operator count is at
/// most `node_cap`, in breadth-first order with `g0` first.
pub fn graph_space(
    g0: &Graph,
    rules: &[SubstitutionRule],
    node_cap: usize,
    limit: usize,
) -> Result<Vec<Graph>, SearchError> {
    let mut visited = BTreeSet::from([canonical_hash(g0)]);
    let mut order = vec![g0.clone()];
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        for (h, next) in neighbors_hashed(&order[i], rules) {
            if next.op_count() > node_cap || !visited.insert(h) {
                continue;
            }
            if order.len() >= limit {
                return Err(SearchError::SpaceTooLarge { size: order.len() as u128 + 1, limit: limit as u128 });
            }
            queue.push_back(order.len());
            order.push(next);
        }
    }
    Ok(order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceLimits {
    pub max_graphs: usize,
    pub max_graph_nodes: Option<usize>,
    pub max_assignments: u128,
}

impl Default for SpaceLimits {
    fn default() -> Self {
        SpaceLimits {
            max_graphs: DEFAULT_SPACE_LIMIT,
            max_graph_nodes: None,
            max_assignments: DEFAULT_ASSIGNMENT_LIMIT,
        }
    }
}

/// Exhaustive optimum over the whole substitution closure and every
/// assignment of each graph. Ties keep the earliest graph in breadth-first
/// order.
pub fn brute_force_space(
    g0: &Graph,
    rules: &[SubstitutionRule],
    db: &mut CostDatabase,
    f: &CostFunction,
    limits: &SpaceLimits,
    mut profiler: Option<&mut Profiler>,
) -> Result<OptimizationResult, SearchError> {
    let start = Instant::now();
    let cap = limits.max_graph_nodes.unwrap_or(4 * g0.op_count().max(1));
    let space = graph_space(g0, rules, cap, limits.max_graphs)?;
    let mut stats = SearchStats::default();
    let mut best: Option<(Graph, Scored)> = None;
    for g in space {
        let s = score(&g, db, f, Assign::Exhaustive(limits.max_assignments), &mut profiler, &mut stats)?;
        if best.as_ref().is_none_or(|(_, b)| s.cost < b.cost) {
            best = Some((g, s));
        }
    }
    stats.wall_time = start.elapsed();
    let (graph, s) = best.expect("space contains the origin");
    Ok(OptimizationResult { graph, assignment: s.assignment, cost: s.cost, metrics: s.metrics, stats })
}

/// Least energy subject to `time ≤ bound_ms`, by bisection on the weight of
/// a normalized linear objective.
///
/// `w = 0` is tried first; if even the time-optimal result misses the bound
/// the problem is infeasible. `w = 1` is tried next and returned when it
/// meets the bound. Otherwise the weight is bisected: a feasible midpoint
/// moves the lower end up (more weight on energy), an infeasible one moves
/// the upper end down. The feasible result with least energy (then least
/// time) is returned.
pub fn constrained_optimize(
    g0: &Graph,
    rules: &[SubstitutionRule],
    db: &mut CostDatabase,
    cfg: &SearchConfig,
    bound_ms: f64,
    mut profiler: Option<&mut Profiler>,
) -> Result<OptimizationResult, SearchError> {
    if !(bound_ms.is_finite() && bound_ms > 0.0) {
        return Err(SearchError::InvalidConfig("time bound must be positive".into()));
    }
    if let Some(p) = profiler.as_deref_mut() {
        p.ensure_profiled(g0, db)?;
    }
    let refs = normalization_refs(g0, db)?;
    let mut total = SearchStats::default();
    let mut run = |w: f64, db: &mut CostDatabase, total: &mut SearchStats| {
        let f = CostFunction::with_refs(Objective::Linear { w }, refs);
        let r = outer_search(g0, rules, db, &f, cfg, profiler.as_deref_mut())?;
        total.absorb(&r.stats);
        Ok::<_, SearchError>(r)
    };
    let finish = |mut r: OptimizationResult, total: SearchStats| {
        r.stats = total;
        Ok(r)
    };

    let r0 = run(0.0, db, &mut total)?;
    if r0.metrics.time_ms > bound_ms {
        return Err(SearchError::Infeasible { best_time_ms: r0.metrics.time_ms });
    }
    let r1 = run(1.0, db, &mut total)?;
    if r1.metrics.time_ms <= bound_ms {
        return finish(r1, total);
    }
    let better = |a: &OptimizationResult, b: &OptimizationResult| {
        (a.metrics.energy_j, a.metrics.time_ms) < (b.metrics.energy_j, b.metrics.time_ms)
    };
    let mut best = r0;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let r = run(mid, db, &mut total)?;
        if r.metrics.time_ms <= bound_ms {
            lo = mid;
            if better(&r, &best) {
                best = r;
            }
        } else {
            hi = mid;
        }
    }
    finish(best, total)
}

/// Outcomes of the four search configurations used in an ablation.
#[derive(Clone, Debug)]
pub struct Ablation {
    /// The input graph with the default assignment.
    pub origin: OptimizationResult,
    pub inner_only: OptimizationResult,
    /// Outer search with every graph held at its default assignment.
    pub outer_only: OptimizationResult,
    pub both: OptimizationResult,
}

pub fn ablation(
    g0: &Graph,
    rules: &[SubstitutionRule],
    db: &mut CostDatabase,
    f: &CostFunction,
    cfg: &SearchConfig,
    mut profiler: Option<&mut Profiler>,
) -> Result<Ablation, SearchError> {
    let off = SearchConfig { inner_enabled: false, ..cfg.clone() };
    let on = SearchConfig { inner_enabled: true, ..cfg.clone() };
    Ok(Ablation {
        origin: outer_search(g0, &[], db, f, &off, profiler.as_deref_mut())?,
        inner_only: outer_search(g0, &[], db, f, &on, profiler.as_deref_mut())?,
        outer_only: outer_search(g0, rules, db, f, &off, profiler.as_deref_mut())?,
        both: outer_search(g0, rules, db, f, &on, profiler)?,
    })
}
