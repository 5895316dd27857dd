//! Acceptance suite: one line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p cdt-core --test acceptance`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cdt_core::clustering::{kmeans, EmbeddedPair};
use cdt_core::codex::{
    deserialize_tree, serialize_tree, CodifiedDecisionTree, InductionConfig, NodeId, StatementStatus, TreeKind,
    ValidationStats,
};
use cdt_core::corpus::{ActionRecord, Corpus};
use cdt_core::evalharness::{label_score, mean_score};
use cdt_core::grounding::{route, traverse};
use cdt_core::induction::{decide, induce, DecisionValue, Inducer, InductionLog, Stage};
use cdt_core::oracle::planted::{PlantedCorpus, PlantedOracle, WorldSpec};
use cdt_core::oracle::{CheckVerdict, NliLabel};
use common::{
    brute_force_reachable, brute_force_two_means, random_tree, reference_decision, subtree, Expected,
    RationalGates, TableDiscriminator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn planted_run(spec: &WorldSpec, config: &InductionConfig) -> (PlantedCorpus, CodifiedDecisionTree, InductionLog) {
    let world = PlantedCorpus::generate(spec);
    let suite = PlantedOracle::suite(world.world.clone());
    let corpus = Corpus::new(spec.character.clone(), world.pairs.clone());
    let (tree, log) = induce(&corpus, config, &suite, None).expect("induction succeeds");
    (world, tree, log)
}

fn accepted_texts(tree: &CodifiedDecisionTree) -> BTreeSet<String> {
    tree.nodes
        .values()
        .flat_map(|n| &n.statements)
        .filter(|s| s.status == StatementStatus::Accepted)
        .map(|s| s.text.clone())
        .collect()
}

fn planted_recovery() -> Outcome {
    let mut slowest = Duration::ZERO;
    for seed in 0..10 {
        let spec = WorldSpec {
            seed,
            ..WorldSpec::default()
        };
        let start = Instant::now();
        // planted oracles answer in-process; no HTTP client exists in this run
        let (world, tree, _) = planted_run(&spec, &InductionConfig::default());
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);
        ensure(
            world.rule_rates.iter().all(|r| (0.8..=1.0).contains(r)) && world.decoy_rates.iter().all(|r| *r <= 0.3),
            || format!("seed {seed}: world rates out of range"),
        )?;
        let texts = accepted_texts(&tree);
        let found = world.world.rules.iter().filter(|r| texts.contains(&r.statement())).count();
        let decoys = world.world.decoys.iter().filter(|r| texts.contains(&r.statement())).count();
        ensure(found == 5 && decoys == 0, || format!("seed {seed}: {found}/5 rules, {decoys}/5 decoys"))?;
        ensure(elapsed < Duration::from_secs(30), || format!("seed {seed}: {elapsed:?}"))?;
    }
    Ok(format!("5/5 rules and 0/5 decoys on 10 seeds, slowest {:.2}s", slowest.as_secs_f64()))
}

fn decision_oracle() -> Outcome {
    let configs = [
        (InductionConfig::default(), RationalGates {
            acc: (3, 4),
            rej: (1, 2),
            filter: (3, 4),
            min_node_data: 16,
            d_max: 4,
        }),
        (
            InductionConfig {
                theta_acc: 0.875,
                theta_rej: 0.25,
                theta_f: 0.5,
                min_node_data: 3,
                d_max: 2,
                ..InductionConfig::default()
            },
            RationalGates {
                acc: (7, 8),
                rej: (1, 4),
                filter: (1, 2),
                min_node_data: 3,
                d_max: 2,
            },
        ),
    ];
    let mut cases = 0u64;
    for (config, gates) in &configs {
        for re in 0..=20u32 {
            for rn in 0..=(20 - re) {
                for rc in 0..=(20 - re - rn) {
                    let stats = ValidationStats::new(re, rn, rc);
                    for d in 1..=24usize {
                        for dp in 0..=d {
                            for depth in 0..=4u32 {
                                let got = decide(&stats, d, dp, depth, config).value;
                                let want = reference_decision(
                                    gates,
                                    (re.into(), rn.into(), rc.into()),
                                    d as u64,
                                    dp as u64,
                                    depth.into(),
                                );
                                let same = matches!(
                                    (got, want),
                                    (DecisionValue::AcceptLeaf, Expected::Leaf)
                                        | (DecisionValue::Reject, Expected::Reject)
                                        | (DecisionValue::Recurse, Expected::Recurse)
                                );
                                ensure(same, || format!("({re},{rn},{rc}) d={d} d'={dp} depth={depth}: {got:?} vs {want:?}"))?;
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{cases} cases match the reference"))
}

fn random_world(rng: &mut ChaCha8Rng) -> (WorldSpec, InductionConfig) {
    let lo = rng.random_range(0.0..0.6);
    let spec = WorldSpec {
        n_pairs: rng.random_range(24..=120),
        n_rules: rng.random_range(0..=5),
        n_decoys: rng.random_range(0..=5),
        rule_rate: (lo, rng.random_range(lo..=1.0)),
        decoy_rate: (0.0, rng.random_range(0.0..=0.6)),
        trigger_share: (0.1, rng.random_range(0.1..=0.7)),
        off_trigger_contradiction: rng.random_range(0.0..=0.5),
        trigger_width: (1, rng.random_range(1..=2)),
        window: rng.random_range(1..=6),
        filler_vocab: rng.random_range(5..=60),
        noise_rate: rng.random_range(0.0..=0.2),
        seed: rng.random(),
        ..WorldSpec::default()
    };
    let theta_rej = rng.random_range(0.0..0.6);
    let config = InductionConfig {
        theta_acc: rng.random_range(theta_rej + 0.05..=1.0),
        theta_rej,
        theta_f: rng.random_range(0.3..=1.0),
        d_max: rng.random_range(1..=4),
        min_node_data: rng.random_range(1..=16),
        min_cluster_size: rng.random_range(4..=16),
        max_clusters: rng.random_range(1..=6),
        hypotheses_per_cluster: rng.random_range(1..=4),
        boosted_budget: rng.random_bool(0.3).then(|| rng.random_range(1..=8)),
        clustering_enabled: rng.random_bool(0.8),
        diversification: rng.random_bool(0.8),
        seed: rng.random(),
        ..InductionConfig::default()
    };
    (spec, config)
}

fn termination_and_structure() -> Outcome {
    let mut master = ChaCha8Rng::seed_from_u64(20_240_601);
    let worlds: Vec<(WorldSpec, InductionConfig)> = (0..1000).map(|_| random_world(&mut master)).collect();
    let results: Vec<Result<(usize, u32), String>> = worlds
        .par_iter()
        .enumerate()
        .map(|(i, (spec, config))| {
            let world = PlantedCorpus::generate(spec);
            let suite = PlantedOracle::suite(world.world.clone());
            let corpus = Corpus::new(spec.character.clone(), world.pairs);
            if corpus.len() < config.min_node_data {
                return Ok((0, 0));
            }
            let (tree, log) = induce(&corpus, config, &suite, None).map_err(|e| format!("world {i}: {e}"))?;
            tree.validate().map_err(|e| format!("world {i}: {e}"))?;
            ensure(tree.max_depth() <= config.d_max, || format!("world {i}: depth {}", tree.max_depth()))?;
            for node in tree.nodes.values() {
                ensure(!node.is_leaf || node.statements.len() == 1, || format!("world {i}: leaf {}", node.id))?;
            }
            let parents = tree.parent_map();
            for (id, data) in &log.node_datasets {
                if let Some(parent) = parents.get(id) {
                    let parent_data: BTreeSet<usize> = log.node_datasets[parent].iter().copied().collect();
                    ensure(data.iter().all(|i| parent_data.contains(i)), || format!("world {i}: {id} not a subset"))?;
                    ensure(data.len() < parent_data.len(), || format!("world {i}: {id} did not shrink"))?;
                }
            }
            let internal = tree.nodes.values().filter(|n| n.depth > 0 && !n.is_leaf).count();
            Ok((internal, tree.max_depth()))
        })
        .collect();
    let (mut internal, mut deepest) = (0, 0);
    for r in results {
        let (n, d) = r?;
        internal += n;
        deepest = deepest.max(d);
    }
    Ok(format!("1000 worlds terminated; {internal} recursed nodes, deepest {deepest}"))
}

fn flat_profile() -> Outcome {
    let config = InductionConfig {
        d_max: 1,
        ..InductionConfig::default()
    };
    let mut leaves = 0;
    for seed in 0..10 {
        let (_, tree, _) = planted_run(
            &WorldSpec {
                seed,
                ..WorldSpec::default()
            },
            &config,
        );
        let internal = tree.nodes.values().filter(|n| n.id != tree.root && !n.is_leaf).count();
        ensure(internal == 0, || format!("seed {seed}: {internal} internal nodes"))?;
        leaves += tree.nodes.len() - 1;
    }
    Ok(format!("no internal nodes on 10 seeds ({leaves} leaves)"))
}

fn traversal_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let verdicts = [CheckVerdict::True, CheckVerdict::True, CheckVerdict::False, CheckVerdict::Unknown];
    let mut flips = 0;
    for case in 0..300 {
        let tree = random_tree(&mut rng, 25);
        let table: BTreeMap<String, CheckVerdict> = tree
            .nodes
            .values()
            .flat_map(|n| &n.children)
            .map(|e| (e.question.clone(), verdicts[rng.random_range(0..verdicts.len())]))
            .collect();
        let bundle = traverse(&tree, "A: scene", &TableDiscriminator(table.clone())).map_err(|e| e.to_string())?;
        let visited: BTreeSet<NodeId> = bundle.visited.iter().copied().collect();
        ensure(visited == brute_force_reachable(&tree, &table), || format!("case {case}: visited set differs"))?;
        ensure(bundle.visited.len() == visited.len(), || format!("case {case}: duplicate visits"))?;

        let fired: Vec<(NodeId, String)> = tree
            .nodes
            .values()
            .flat_map(|n| &n.children)
            .filter(|e| visited.contains(&e.child))
            .map(|e| (e.child, e.question.clone()))
            .collect();
        if fired.is_empty() {
            continue;
        }
        let (child, question) = fired[rng.random_range(0..fired.len())].clone();
        let mut flipped = table.clone();
        flipped.insert(question, CheckVerdict::False);
        let after = traverse(&tree, "A: scene", &TableDiscriminator(flipped)).map_err(|e| e.to_string())?;
        let removed_nodes = subtree(&tree, child);
        let expected: Vec<_> = bundle
            .statements
            .iter()
            .filter(|s| !removed_nodes.contains(&s.node))
            .cloned()
            .collect();
        ensure(after.statements == expected, || format!("case {case}: flip changed more than the subtree"))?;
        flips += 1;
    }
    Ok(format!("300 trees match brute-force reachability, {flips} verdict flips checked"))
}

fn stats_algebra() -> Outcome {
    let mut checked = 0;
    for re in 0..=40 {
        for rn in 0..=40 {
            for rc in 0..=40 {
                let s = ValidationStats::new(re, rn, rc);
                if let (Some(u), Some(a)) = (s.usability(), s.accuracy()) {
                    ensure(u <= a, || format!("({re},{rn},{rc}) usability {u} > accuracy {a}"))?;
                    checked += 1;
                }
            }
        }
    }
    let s = ValidationStats::new(6, 2, 2);
    ensure(s.accuracy() == Some(0.75) && s.usability() == Some(0.6), || {
        format!("(6,2,2) gave {:?} / {:?}", s.accuracy(), s.usability())
    })?;
    Ok(format!("usability <= accuracy on {checked} triples; (6,2,2) -> 0.75 / 0.6"))
}

fn points(vectors: &[Vec<f64>]) -> Vec<EmbeddedPair> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| EmbeddedPair {
            pair_ref: i,
            vector: v.clone(),
        })
        .collect()
}

fn kmeans_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fixtures = 0;
    for n in 2..=12 {
        for _ in 0..10 {
            let split = rng.random_range(1..n);
            let vectors: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let offset = if i < split { 0.0 } else { 100.0 };
                    vec![offset + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
                })
                .collect();
            let got = kmeans(&points(&vectors), 2, rng.random(), 100, 1e-9).map_err(|e| e.to_string())?;
            let best = brute_force_two_means(&vectors);
            ensure((got.inertia - best).abs() <= 1e-9, || format!("n={n}: {} vs optimal {best}", got.inertia))?;
            fixtures += 1;
        }
    }
    for run in 0..100 {
        let n = rng.random_range(3..60);
        let k = rng.random_range(1..=n.min(8));
        let dim = rng.random_range(1..6);
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let seed = rng.random();
        let a = kmeans(&points(&vectors), k, seed, 100, 1e-6).map_err(|e| e.to_string())?;
        for w in a.history.windows(2) {
            ensure(w[1] <= w[0] + 1e-9, || format!("run {run}: inertia rose {} -> {}", w[0], w[1]))?;
        }
        let b = kmeans(&points(&vectors), k, seed, 100, 1e-6).map_err(|e| e.to_string())?;
        let bits = |c: &cdt_core::clustering::Clustering| {
            (
                c.assignments.clone(),
                c.inertia.to_bits(),
                c.centroids.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>(),
            )
        };
        ensure(bits(&a) == bits(&b), || format!("run {run}: nondeterministic"))?;
    }
    Ok(format!("{fixtures} brute-force fixtures matched; 100 runs monotone and bit-exact"))
}

fn boosted_budget() -> Outcome {
    let spec = WorldSpec {
        seed: 3,
        ..WorldSpec::default()
    };
    let boosted = InductionConfig {
        boosted_budget: Some(8),
        ..InductionConfig::default()
    };
    let (_, boosted_tree, log) = planted_run(&spec, &boosted);
    let (_, plain_tree, _) = planted_run(&spec, &InductionConfig::default());
    let root = boosted_tree.root;
    let candidates_at_root = log
        .events
        .iter()
        .filter(|e| e.node == root && matches!(e.stage, Stage::GlobalCheck | Stage::Duplicate | Stage::BoostPruned))
        .count();
    ensure(candidates_at_root == 24, || format!("root saw {candidates_at_root} candidates, expected 24"))?;
    for id in log.node_datasets.keys() {
        let v = log.validations_at(*id);
        ensure(v <= 8, || format!("node {id}: {v} validations"))?;
    }
    ensure(boosted_tree.nodes.len() <= plain_tree.nodes.len(), || {
        format!("boosted {} nodes > plain {}", boosted_tree.nodes.len(), plain_tree.nodes.len())
    })?;
    Ok(format!(
        "<= 8 validations per node from 24 candidates; {} nodes boosted vs {} plain",
        boosted_tree.nodes.len(),
        plain_tree.nodes.len()
    ))
}

fn scoring() -> Outcome {
    use NliLabel::*;
    ensure(label_score(Entailed) == 100 && label_score(Neutral) == 50 && label_score(Contradicted) == 0, || {
        "label mapping".into()
    })?;
    let mean = mean_score(&[Entailed, Entailed, Neutral, Contradicted]);
    ensure(mean == Some(62.5), || format!("mean {mean:?}"))?;
    Ok("E/N/C -> 100/50/0; [E,E,N,C] -> 62.5".into())
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let tree = random_tree(&mut rng, 30);
        let doc = serialize_tree(&tree);
        let back = deserialize_tree(&doc).map_err(|e| format!("tree {i}: {e}"))?;
        ensure(back == tree, || format!("tree {i}: structure changed"))?;
        ensure(serialize_tree(&back) == doc, || format!("tree {i}: bytes changed"))?;
    }
    Ok("1000 random trees round-trip byte-identically".into())
}

fn routing() -> Outcome {
    let general = CodifiedDecisionTree::empty("Kasumi", InductionConfig::default());
    let mut arisa = general.clone();
    arisa.kind = TreeKind::GoalDriven;
    arisa.relation_target = Some("Arisa".into());
    let relation = BTreeMap::from([("Arisa".to_string(), arisa.clone())]);
    let conversation = [
        ("Arisa", "Kasumi, you are late again."),
        ("Kasumi", "Sorry!"),
        ("Tae", "Let us start."),
        ("environment", "The lights dim."),
        ("Arisa", "Fine, from the top."),
        ("Saaya", "One, two."),
    ];
    let records: Vec<ActionRecord> = conversation
        .iter()
        .enumerate()
        .map(|(i, (a, t))| ActionRecord::new(*a, *t, i as u64))
        .collect();
    let mut routed = 0;
    for end in 0..=records.len() {
        let scene = &records[..end];
        let chosen = route(scene, &general, &relation);
        let expect_arisa = scene.last().is_some_and(|r| r.actor == "Arisa");
        ensure((chosen == &arisa) == expect_arisa, || format!("scene of {end} records routed wrongly"))?;
        routed += usize::from(expect_arisa);
    }
    Ok(format!("{} scenes routed, {routed} to the relation tree", records.len() + 1))
}

fn replay_determinism() -> Outcome {
    let spec = WorldSpec {
        seed: 9,
        ..WorldSpec::default()
    };
    let world = PlantedCorpus::generate(&spec);
    let corpus = Corpus::new(spec.character.clone(), world.pairs.clone());
    let mut docs = Vec::new();
    for parallelism in [1, 8] {
        let suite = PlantedOracle::suite(world.world.clone());
        let inducer = Inducer::new(&corpus, &InductionConfig::default(), &suite, None, parallelism).map_err(|e| e.to_string())?;
        let (tree, _) = inducer.run(inducer.initial_state(), &mut |_| {}).map_err(|e| e.to_string())?;
        docs.push(serialize_tree(&tree));
    }
    ensure(docs[0] == docs[1], || "tree documents differ".into())?;
    Ok(format!("identical {}-byte documents", docs[0].len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("planted-rule recovery", planted_recovery),
        ("decision-rule oracle", decision_oracle),
        ("termination & structure", termination_and_structure),
        ("flat-profile degeneration", flat_profile),
        ("traversal soundness", traversal_soundness),
        ("stats algebra", stats_algebra),
        ("k-means", kmeans_checks),
        ("boosted budget", boosted_budget),
        ("scoring arithmetic", scoring),
        ("serialization", serialization),
        ("goal-driven routing", routing),
        ("replay determinism", replay_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
