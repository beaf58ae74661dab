//! Energy-aware optimization of DNN computation graphs.
//!
//! The optimizer searches jointly over graphs reachable through
//! semantics-preserving substitutions ([`rules`]) and over per-node algorithm
//! assignments, scoring candidates with an additive time/energy model backed
//! by a persistent per-signature cost database ([`cost`], [`profile`]).
//! [`search`] holds the two-level search, its brute-force oracles, and
//! time-constrained optimization.

pub mod cost;
pub mod graph;
pub mod models;
pub mod profile;
pub mod rules;
pub mod search;

pub use cost::{
    AlgorithmAssignment, AlgorithmId, CostDatabase, CostError, CostFunction, CostRecord, Metrics, Objective, Refs,
};
pub use graph::{Graph, GraphBuilder, GraphError, NodeId, NodeSignature};
pub use profile::{ProfileError, Profiler, ProfilerSpec};
pub use rules::{MatchSite, RuleError, SubstitutionRule};
pub use search::{OptimizationResult, SearchConfig, SearchError, SearchStats};
