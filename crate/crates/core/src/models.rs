//! Small deterministic graphs for demos, tests and benchmarks, and the
//! hand-built instances shipped with the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cost::{sample_graph, CostDatabase};
use crate::graph::{from_json_str, Edge, Graph, GraphBuilder};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown model `{0}` (expected toy-squeeze, toy-resnet, chain:N or table1)")]
    Unknown(String),
}

/// Names accepted by [`by_name`].
pub const MODEL_NAMES: &[&str] = &["toy-squeeze", "toy-resnet", "chain:N", "table1"];

pub fn by_name(name: &str) -> Result<Graph, ModelError> {
    match name {
        "toy-squeeze" => Ok(toy_squeeze()),
        "toy-resnet" => Ok(toy_resnet()),
        "table1" => Ok(table1()),
        other => match other.strip_prefix("chain:").map(str::parse::<usize>) {
            Some(Ok(n)) if n >= 1 => Ok(chain(n)),
            _ => Err(ModelError::Unknown(name.to_string())),
        },
    }
}

/// Three convolutions whose costs the bundled sample database holds.
pub fn table1() -> Graph {
    sample_graph()
}

/// `n` conv→relu pairs.
pub fn chain(n: usize) -> Graph {
    let mut b = GraphBuilder::new(1);
    let mut x = b.input("x", &[1, 4, 8, 8]);
    for _ in 0..n {
        let c = b.conv(x, 4, [3, 3], [1, 1], [1, 1], false);
        x = b.relu(c);
    }
    b.output(x);
    b.build()
}

/// A stem, one fire module (squeeze, two parallel 1×1 expands, concat) and a
/// pooled classifier. The expands share input and geometry, so they can be
/// merged into one wide convolution.
pub fn toy_squeeze() -> Graph {
    let mut b = GraphBuilder::new(2);
    let x = b.input("x", &[1, 3, 16, 16]);
    let c1 = b.conv(x, 8, [3, 3], [1, 1], [1, 1], false);
    let r1 = b.relu(c1);
    let p = b.max_pool(r1, [2, 2], [2, 2], [0, 0]);
    let sq = b.conv(p, 4, [1, 1], [1, 1], [0, 0], false);
    let rs = b.relu(sq);
    let e1 = b.conv(rs, 8, [1, 1], [1, 1], [0, 0], false);
    let e2 = b.conv(rs, 4, [1, 1], [1, 1], [0, 0], false);
    let r2 = b.relu(e1);
    let r3 = b.relu(e2);
    let cat = b.concat(&[r2, r3], 1);
    let cls = b.conv(cat, 10, [1, 1], [1, 1], [0, 0], false);
    let out = b.avg_pool(cls, [8, 8], [8, 8], [0, 0]);
    b.output(out);
    b.build()
}

/// A stem with batch norm and one residual block whose skip path passes
/// through an identity.
pub fn toy_resnet() -> Graph {
    let mut b = GraphBuilder::new(3);
    let x = b.input("x", &[1, 3, 8, 8]);
    let c0 = b.conv(x, 8, [3, 3], [1, 1], [1, 1], false);
    let bn = b.batch_norm(c0);
    let r0 = b.relu(bn);
    let c1 = b.conv(r0, 8, [3, 3], [1, 1], [1, 1], false);
    let r1 = b.relu(c1);
    let c2 = b.conv(r1, 8, [3, 3], [1, 1], [1, 1], false);
    let skip = b.identity(r0);
    let s = b.add(c2, skip);
    let r2 = b.relu(s);
    let out = b.avg_pool(r2, [8, 8], [8, 8], [0, 0]);
    b.output(out);
    b.build()
}

/// A random channels-first DAG with exactly `ops` operator nodes. Every
/// node reaches an output: sinks become outputs in creation order. Sibling
/// convolutions sharing input and geometry are generated on purpose so the
/// merge rule has sites.
pub fn random_graph(seed: u64, ops: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let channels = rng.random_range(2..=4);
    let x = b.input("x", &[1, channels, 6, 6]);
    let mut pool: Vec<Edge> = vec![x];
    let mut consumed: Vec<bool> = vec![false];
    let mut last_conv: Option<(Edge, usize, bool)> = None;

    let mut made = 0;
    while made < ops {
        let pick = rng.random_range(0..100);
        let i = rng.random_range(0..pool.len());
        let src = pool[i];
        let (edge, used): (Edge, Vec<usize>) = if pick < 40 {
            let (input, k, act) = match last_conv {
                Some(prev) if rng.random_bool(0.4) => prev,
                _ => (src, if rng.random_bool(0.5) { 1 } else { 3 }, rng.random_bool(0.3)),
            };
            let out = rng.random_range(2..=4);
            let e = b.conv(input, out, [k, k], [1, 1], [k / 2, k / 2], act);
            last_conv = Some((input, k, act));
            (e, vec![pool.iter().position(|p| *p == input).expect("input in pool")])
        } else if pick < 60 {
            (b.relu(src), vec![i])
        } else if pick < 68 {
            (b.identity(src), vec![i])
        } else if pick < 76 {
            (b.batch_norm(src), vec![i])
        } else if pick < 84 {
            (b.max_pool(src, [3, 3], [1, 1], [1, 1]), vec![i])
        } else {
            let shape = b.shape_of(src).clone();
            let mates: Vec<usize> = (0..pool.len()).filter(|&j| j != i && b.shape_of(pool[j]) == &shape).collect();
            if mates.is_empty() {
                continue;
            }
            let j = mates[rng.random_range(0..mates.len())];
            let e = if pick < 92 { b.add(src, pool[j]) } else { b.concat(&[src, pool[j]], 1) };
            (e, vec![i, j])
        };
        for u in used {
            consumed[u] = true;
        }
        pool.push(edge);
        consumed.push(false);
        made += 1;
    }
    for (e, used) in pool.iter().zip(&consumed) {
        if !used {
            b.output(*e);
        }
    }
    b.build()
}

/// Three graphs in a row, greedy-trapped. The origin (a wide convolution
/// feeding a channel split) costs 1.2 ms; splitting the convolution costs
/// 1.5 ms; fusing the relu into one half then costs 1.0 ms. Each node has a
/// single algorithm.
pub fn valley() -> (Graph, CostDatabase) {
    (
        from_json_str(include_str!("../data/valley_graph.json")).expect("bundled graph parses"),
        CostDatabase::from_jsonl(include_str!("../data/valley_costs.jsonl")).expect("bundled database parses"),
    )
}

/// Two convolutions with two algorithms each, where the lowest-id start is
/// a distance-1 local optimum of `0.5·power + 0.5·energy` (unnormalized)
/// but switching both nodes at once is cheaper.
pub fn witness() -> (Graph, CostDatabase) {
    (
        from_json_str(include_str!("../data/witness_graph.json")).expect("bundled graph parses"),
        CostDatabase::from_jsonl(include_str!("../data/witness_costs.jsonl")).expect("bundled database parses"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostTable;
    use crate::graph::{to_json_string, validate};
    use crate::rules::{match_rule, SubstitutionRule};

    #[test]
    fn named_models_validate() {
        for name in ["toy-squeeze", "toy-resnet", "table1", "chain:1", "chain:5"] {
            assert_eq!(validate(&by_name(name).unwrap()), Ok(()), "{name}");
        }
        assert!(by_name("chain:0").is_err());
        assert!(by_name("vgg").is_err());
    }

    #[test]
    fn chain_sizes() {
        assert_eq!(chain(3).op_count(), 6);
    }

    #[test]
    fn toy_squeeze_shape_and_sites() {
        let g = toy_squeeze();
        assert_eq!(g.op_count(), 12);
        assert!(!match_rule(SubstitutionRule::MergeParallelConvs, &g).is_empty());
        assert_eq!(to_json_string(&g), to_json_string(&toy_squeeze()));
    }

    #[test]
    fn toy_resnet_size() {
        let g = toy_resnet();
        assert_eq!(g.op_count(), 10);
        assert!(!match_rule(SubstitutionRule::FoldIdentity, &g).is_empty());
        assert!(!match_rule(SubstitutionRule::FuseConvBatchNorm, &g).is_empty());
    }

    #[test]
    fn random_graphs_are_valid_and_sized() {
        for seed in 0..200 {
            for ops in [1, 4, 6, 8] {
                let g = random_graph(seed, ops);
                assert_eq!(g.op_count(), ops);
                assert_eq!(validate(&g), Ok(()), "seed {seed} ops {ops}");
            }
        }
        assert_eq!(random_graph(7, 6), random_graph(7, 6));
    }

    #[test]
    fn fixtures_are_fully_covered() {
        for (g, db) in [valley(), witness()] {
            assert_eq!(validate(&g), Ok(()));
            CostTable::build(&g, &db).unwrap();
        }
    }
}
