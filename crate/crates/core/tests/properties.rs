use std::collections::BTreeSet;

use enerflow::cost::{
    distance, eval_cost, model_energy, model_metrics, model_time, AlgorithmAssignment, AlgorithmId, CostDatabase,
    CostFunction, CostRecord, CostTable, Metrics, Objective,
};
use enerflow::graph::{
    canonical_hash, canonicalize, equivalent, from_json_str, signatures, to_json_string, validate, Graph,
};
use enerflow::models::random_graph;
use enerflow::profile::{load, persist, Profiler, ProfilerSpec};
use enerflow::rules::{apply, default_rules, match_rule, neighbors};
use enerflow::search::{brute_force_assignment, inner_search, outer_search, SearchConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Database with 1..=4 random algorithms per signature of `g`.
fn random_db(g: &Graph, seed: u64) -> CostDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db = CostDatabase::new();
    let sigs: BTreeSet<String> = signatures(g).unwrap().values().map(|s| s.to_string()).collect();
    for sig in sigs {
        let n = rng.random_range(1..=4u32);
        for a in 0..n {
            let rec = CostRecord::new(rng.random_range(0.01..2.0), rng.random_range(40.0..200.0)).unwrap();
            db.insert(sig.clone(), AlgorithmId(a), rec).unwrap();
        }
    }
    db
}

fn cost_of(f: &CostFunction, g: &Graph, a: &AlgorithmAssignment, db: &CostDatabase) -> f64 {
    eval_cost(f, g, a, db).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_graphs_validate(seed in any::<u64>(), ops in 1usize..10) {
        prop_assert_eq!(validate(&random_graph(seed, ops)), Ok(()));
    }

    #[test]
    fn json_round_trip_is_exact(seed in any::<u64>(), ops in 1usize..10) {
        let g = random_graph(seed, ops);
        let text = to_json_string(&g);
        let back = from_json_str(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(to_json_string(&back), text);
    }

    #[test]
    fn hash_ignores_node_ids(seed in any::<u64>(), ops in 1usize..10, offset in 1u32..1000, stride in 1u32..7) {
        let g = random_graph(seed, ops);
        let moved = g.relabel(|id| offset + stride * id);
        prop_assert_eq!(canonical_hash(&g), canonical_hash(&moved));
        prop_assert_eq!(canonical_hash(&canonicalize(&moved)), canonical_hash(&g));
    }

    #[test]
    fn every_rule_application_is_sound(seed in any::<u64>(), ops in 2usize..9) {
        let g = random_graph(seed, ops);
        for rule in default_rules() {
            for site in match_rule(rule, &g) {
                let h = apply(rule, &g, &site).unwrap();
                prop_assert_eq!(validate(&h), Ok(()), "{} at {:?}", rule, site);
                prop_assert!(equivalent(&g, &h, 3, 1e-4).unwrap(), "{} at {:?}", rule, site);
            }
        }
    }

    #[test]
    fn inverse_rules_return_to_origin(seed in any::<u64>(), ops in 2usize..9) {
        let g = random_graph(seed, ops);
        let h0 = canonical_hash(&g);
        for rule in default_rules() {
            let Some(inv) = rule.inverse() else { continue };
            for site in match_rule(rule, &g) {
                let h = apply(rule, &g, &site).unwrap();
                let back: Vec<u64> = neighbors(&h, &[inv]).iter().map(canonical_hash).collect();
                prop_assert!(back.contains(&h0), "{} then {}", rule, inv);
            }
        }
    }

    #[test]
    fn neighbors_are_distinct(seed in any::<u64>(), ops in 2usize..9) {
        let ns = neighbors(&random_graph(seed, ops), &default_rules());
        let hs: BTreeSet<u64> = ns.iter().map(canonical_hash).collect();
        prop_assert_eq!(hs.len(), ns.len());
    }

    #[test]
    fn changing_one_node_moves_cost_by_its_delta(seed in any::<u64>(), ops in 1usize..9, pick in any::<prop::sample::Index>()) {
        let g = random_graph(seed, ops);
        let db = random_db(&g, seed);
        let table = CostTable::build(&g, &db).unwrap();
        let base = table.first_assignment();
        let i = pick.index(table.len());
        let node = table.nodes()[i];
        for choice in table.options(i) {
            let mut a = base.clone();
            a.set(node, choice.alg);
            let first = table.options(i)[0];
            let dt = model_time(&g, &a, &db).unwrap() - model_time(&g, &base, &db).unwrap();
            let de = model_energy(&g, &a, &db).unwrap() - model_energy(&g, &base, &db).unwrap();
            prop_assert!((dt - (choice.time - first.time)).abs() <= 1e-12 * (1.0 + dt.abs()));
            prop_assert!((de - (choice.energy - first.energy)).abs() <= 1e-9 * (1.0 + de.abs()));
            prop_assert!(distance(&a, &base).unwrap() <= 1);
        }
    }

    #[test]
    fn weighted_costs_are_monotone(
        t in 0.01f64..10.0, e in 0.01f64..1000.0, dt in 0.0f64..5.0, de in 0.0f64..500.0, w in 0.0f64..=1.0,
    ) {
        for obj in [Objective::Linear { w }, Objective::Product { w }] {
            let f = CostFunction::new(obj);
            let base = f.evaluate(&Metrics::new(t, e));
            prop_assert!(f.evaluate(&Metrics::new(t + dt, e)) >= base);
            prop_assert!(f.evaluate(&Metrics::new(t, e + de)) >= base);
        }
    }

    #[test]
    fn linear_inner_search_is_exact(seed in any::<u64>(), ops in 1usize..9, w in 0.0f64..=1.0) {
        let g = random_graph(seed, ops);
        let db = random_db(&g, seed);
        for obj in [Objective::Time, Objective::Energy, Objective::Linear { w }] {
            let f = CostFunction::new(obj);
            let inner = inner_search(&g, &db, &f, 1).unwrap();
            let brute = brute_force_assignment(&g, &db, &f).unwrap();
            prop_assert_eq!(cost_of(&f, &g, &inner, &db), cost_of(&f, &g, &brute, &db));
        }
    }

    #[test]
    fn power_inner_search_is_exact(seed in any::<u64>(), ops in 1usize..9) {
        // improvement of E/T at ratio P is the sign of ΔE − P·ΔT, a per-node
        // quantity, so distance-1 local optima are global
        let g = random_graph(seed, ops);
        let db = random_db(&g, seed);
        let f = CostFunction::new(Objective::Power);
        let inner = cost_of(&f, &g, &inner_search(&g, &db, &f, 1).unwrap(), &db);
        let brute = cost_of(&f, &g, &brute_force_assignment(&g, &db, &f).unwrap(), &db);
        prop_assert!((inner - brute).abs() <= 1e-12 * brute);
    }

    #[test]
    fn wider_radius_never_hurts(seed in any::<u64>(), ops in 1usize..9, w in 0.0f64..=1.0) {
        let g = random_graph(seed, ops);
        let db = random_db(&g, seed);
        let objs = [
            Objective::Power,
            Objective::Product { w },
            Objective::Mix { time: 0.0, energy: 0.5, power: 0.5 },
            Objective::Energy,
        ];
        for obj in objs {
            let f = CostFunction::new(obj);
            let c1 = cost_of(&f, &g, &inner_search(&g, &db, &f, 1).unwrap(), &db);
            let c2 = cost_of(&f, &g, &inner_search(&g, &db, &f, 2).unwrap(), &db);
            prop_assert!(c2 <= c1 * (1.0 + 1e-12), "{obj}: d=2 {c2} > d=1 {c1}");
        }
    }

    #[test]
    fn inner_result_is_locally_optimal(seed in any::<u64>(), ops in 1usize..7) {
        let g = random_graph(seed, ops);
        let db = random_db(&g, seed);
        let f = CostFunction::new(Objective::Mix { time: 0.3, energy: 0.3, power: 0.4 });
        let a = inner_search(&g, &db, &f, 1).unwrap();
        let c = cost_of(&f, &g, &a, &db);
        let table = CostTable::build(&g, &db).unwrap();
        for (i, &node) in table.nodes().iter().enumerate() {
            for choice in table.options(i) {
                let mut b = a.clone();
                b.set(node, choice.alg);
                prop_assert!(cost_of(&f, &g, &b, &db) >= c * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn outer_search_is_sound_and_dominant(seed in any::<u64>(), ops in 2usize..8) {
        let g = random_graph(seed, ops);
        let mut db = CostDatabase::new();
        let mut p = Profiler::new(ProfilerSpec::Synthetic { seed });
        let f = CostFunction::new(Objective::Energy);
        let r = outer_search(&g, &default_rules(), &mut db, &f, &SearchConfig::default(), Some(&mut p)).unwrap();
        prop_assert_eq!(validate(&r.graph), Ok(()));
        prop_assert!(equivalent(&g, &r.graph, 5, 1e-4).unwrap());
        prop_assert_eq!(model_metrics(&r.graph, &r.assignment, &db).unwrap(), r.metrics);
        prop_assert_eq!(cost_of(&f, &r.graph, &r.assignment, &db), r.cost);
        let base = cost_of(&f, &g, &inner_search(&g, &db, &f, 1).unwrap(), &db);
        prop_assert!(r.cost <= base);
    }

    #[test]
    fn greedy_explores_only_the_improving_chain(seed in any::<u64>(), ops in 2usize..8) {
        let g = random_graph(seed, ops);
        let mut db = CostDatabase::new();
        let mut p = Profiler::new(ProfilerSpec::Synthetic { seed });
        let f = CostFunction::new(Objective::Time);
        let cfg = SearchConfig { alpha: 1.0, ..SearchConfig::default() };
        let r = outer_search(&g, &default_rules(), &mut db, &f, &cfg, Some(&mut p)).unwrap();
        prop_assert_eq!(r.stats.graphs_enqueued, r.stats.improvements + 1);
        prop_assert_eq!(r.stats.graphs_explored, r.stats.graphs_enqueued);
    }

    #[test]
    fn database_round_trips_through_disk(seed in any::<u64>(), ops in 1usize..9) {
        let g = random_graph(seed, ops);
        let db = random_db(&g, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.jsonl");
        persist(&db, &path).unwrap();
        prop_assert_eq!(load(&path).unwrap(), db);
    }
}
