//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sgaug_core::eval::{self, Aggregate, EvalMode, EvalOptions, PairScores, PredictedGraph};
use sgaug_core::featmetrics::{self, FeatureSet, ManifoldMetrics};
use sgaug_core::losses::{self, EdgeLossMode, GraphEdges, ProbTable};
use sgaug_core::model::{BoundingBox, ObjectNode, Relationship, SceneGraph, Triplet, Vocabulary};
use sgaug_core::perturb::{self, Method, NodeChange, PerturbationConfig, PerturbationRecord, Resources};
use sgaug_core::quality::{self, HttpScorer, ScoreOptions, ScoreRequest};
use sgaug_core::stats::{self, NamedTriplet, ShotBucket, TripletFrequencyTable};
use sgaug_core::{ingest, Dataset, EmbeddingTable};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
use tempfile::TempDir;

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle-zs exactness", oracle_zs_exactness),
        ("shot-subset fidelity", shot_subset_fidelity),
        ("graphn sampling law", graphn_sampling_law),
        ("hit-rate alpha trend", hit_rate_alpha_trend),
        ("recall oracle equivalence", recall_oracle_equivalence),
        ("reweighting identities", reweighting_identities),
        ("feature metrics", feature_metrics),
        ("loss arithmetic", loss_arithmetic),
        ("determinism", determinism),
        ("plausibility protocol", plausibility_protocol),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{ms} ms]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{ms} ms]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:?}, limit {limit:?}"));
    }
    Ok(())
}

fn unit_box() -> BoundingBox {
    BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap()
}

fn graph(id: &str, cats: &[usize], edges: &[(usize, usize, usize)]) -> SceneGraph {
    SceneGraph::new(
        id,
        100,
        100,
        cats.iter().map(|&category| ObjectNode { category, bbox: unit_box() }).collect(),
        edges
            .iter()
            .map(|&(subject, predicate, object)| Relationship { subject, predicate, object })
            .collect(),
    )
    .unwrap()
}

fn vocab(objects: usize, predicates: usize) -> Vocabulary {
    Vocabulary::new(
        (0..objects).map(|i| format!("obj{i}")).collect(),
        (0..predicates).map(|i| format!("pred{i}")).collect(),
    )
    .unwrap()
}

fn write_vocab(path: &Path, v: &Vocabulary) {
    ingest::write_vocabulary(v, fs::File::create(path).unwrap()).unwrap();
}

fn write_subsets(path: &Path, v: &Vocabulary, buckets: &[(&str, &BTreeSet<Triplet>)]) {
    let raw: BTreeMap<String, Vec<NamedTriplet>> = buckets
        .iter()
        .map(|(name, set)| {
            (
                name.to_string(),
                set.iter().map(|t| NamedTriplet::from_triplet(t, v, None)).collect(),
            )
        })
        .collect();
    fs::write(path, serde_json::to_string(&raw).unwrap()).unwrap();
}

fn read_records(path: &Path) -> Vec<PerturbationRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, id: String, objects: usize, predicates: usize, max_nodes: usize) -> SceneGraph {
    let n = rng.random_range(2..=max_nodes);
    let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..objects)).collect();
    let m = rng.random_range(1..=2 * n);
    let edges: Vec<(usize, usize, usize)> = (0..m)
        .map(|_| {
            let s = rng.random_range(0..n);
            let mut o = rng.random_range(0..n - 1);
            if o >= s {
                o += 1;
            }
            (s, rng.random_range(0..predicates), o)
        })
        .collect();
    graph(&id, &cats, &edges)
}

// 1

fn oracle_zs_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (objects, predicates) = (12, 3);
    let v = vocab(objects, predicates);
    let mut zs = BTreeSet::new();
    for s in 0..objects {
        for p in 0..predicates {
            for o in 0..objects {
                if rng.random::<f64>() < 0.4 {
                    zs.insert(Triplet::new(s, p, o));
                }
            }
        }
    }
    let graphs: Vec<SceneGraph> = (0..1000)
        .map(|i| random_graph(&mut rng, format!("toy{i:04}"), objects, predicates, 6))
        .collect();
    let ds = Dataset::new(v.clone(), graphs).unwrap();

    let dir = TempDir::new().unwrap();
    let d = |n: &str| dir.path().join(n);
    write_vocab(&d("vocab.json"), &v);
    ingest::save_dataset(d("toy.jsonl"), &ds).unwrap();
    write_subsets(&d("subsets.json"), &v, &[("zs", &zs)]);
    run_ok(&[
        "perturb",
        "--method",
        "oracle_zs",
        "--intensity",
        "0.5",
        "--zs",
        p(&d("subsets.json")),
        "--input",
        p(&d("toy.jsonl")),
        "--vocab",
        p(&d("vocab.json")),
        "--out",
        p(&d("out.jsonl")),
        "--records",
        p(&d("rec.jsonl")),
    ]);
    run_ok(&[
        "hit-rate",
        "--vocab",
        p(&d("vocab.json")),
        "--subsets",
        p(&d("subsets.json")),
        "--records",
        p(&d("rec.jsonl")),
        "--perturbed",
        p(&d("out.jsonl")),
        "--out",
        p(&d("hr.json")),
    ]);

    // recount from the written files
    let perturbed = ingest::load_dataset(d("out.jsonl"), &v).unwrap();
    let by_id: HashMap<&str, &SceneGraph> = perturbed.graphs.iter().map(|g| (g.image_id(), g)).collect();
    let records = read_records(&d("rec.jsonl"));
    let mut checked = 0;
    for r in &records {
        let g = by_id[r.image_id.as_str()];
        for &k in &r.affected_edges {
            let e = g.edges()[k];
            let t = Triplet::new(g.category(e.subject), e.predicate, g.category(e.object));
            ensure!(zs.contains(&t), "{}: edge {k} became {t}, not zero-shot", r.image_id);
            checked += 1;
        }
    }
    ensure!(checked > 0, "no triplet was perturbed");
    let rates = read_json(&d("hr.json"));
    let zs_rate = rates[0]["percent"].as_f64().unwrap();
    ensure!(rates[0]["bucket"] == "zs" && zs_rate == 100.0, "hit-rate reported {zs_rate}");
    within(start, Duration::from_secs(5))?;
    Ok(format!("{} graphs perturbed, {checked} triplets, hit rate {zs_rate}", records.len()))
}

// 2

fn shot_subset_fidelity() -> Outcome {
    let synthetic = synthetic_partition()?;
    let vg = match std::env::var_os("SGAUG_VG_DIR") {
        None => "VG split skipped (SGAUG_VG_DIR unset)".to_owned(),
        Some(dir) => vg_partition(Path::new(&dir))?,
    };
    Ok(format!("{synthetic}; {vg}"))
}

/// Training counts 0 / 5 / 50 / 500 for four fixed compositions; test graph
/// `i` carries composition `i % 4`, and every tenth graph an extra zero-shot
/// edge. Expected graph counts: zs 25 + 5 = 30, few10 25, few100 25.
fn synthetic_partition() -> Result<String, String> {
    let v = vocab(5, 1);
    let counts = [0usize, 5, 50, 500];
    let mut train = Vec::new();
    for (kind, &c) in counts.iter().enumerate() {
        for i in 0..c {
            train.push(graph(&format!("tr{kind}-{i}"), &[kind, kind + 1], &[(0, 0, 1)]));
        }
    }
    let test: Vec<SceneGraph> = (0..100)
        .map(|i| {
            let kind = i % 4;
            let mut edges = vec![(0, 0, 1)];
            let mut cats = vec![kind, kind + 1];
            if i % 10 == 0 {
                cats.extend([0, 1]);
                edges.push((2, 0, 3));
            }
            graph(&format!("te{i:03}"), &cats, &edges)
        })
        .collect();
    let train = Dataset::new(v.clone(), train).unwrap();
    let test = Dataset::new(v.clone(), test).unwrap();
    let subsets = stats::shot_subsets(&test, &stats::build_frequency_table(&train));
    let expected = [
        (ShotBucket::Zero, 30, 35),
        (ShotBucket::Few10, 25, 25),
        (ShotBucket::Few100, 25, 25),
        (ShotBucket::All, 100, 110),
    ];
    for (bucket, graphs, edges) in expected {
        let s = subsets.get(bucket);
        ensure!(
            s.dataset.len() == graphs && s.dataset.num_edges() == edges,
            "{}: {} graphs / {} edges, expected {graphs} / {edges}",
            bucket.name(),
            s.dataset.len(),
            s.dataset.num_edges()
        );
    }
    Ok("synthetic 30/25/25 exact".to_owned())
}

/// Expects `train.jsonl`, `test.jsonl` and `vocab.json` in toolkit format.
fn vg_partition(dir: &Path) -> Result<String, String> {
    let v = ingest::load_vocabulary(dir.join("vocab.json")).map_err(|e| e.to_string())?;
    let train = ingest::load_dataset(dir.join("train.jsonl"), &v).map_err(|e| e.to_string())?;
    let test = ingest::load_dataset(dir.join("test.jsonl"), &v).map_err(|e| e.to_string())?;
    let subsets = stats::shot_subsets(&test, &stats::build_frequency_table(&train));
    let got = [ShotBucket::Zero, ShotBucket::Few10, ShotBucket::Few100].map(|b| subsets.get(b).dataset.len());
    ensure!(got == [4519, 9602, 16528], "VG bucket sizes {got:?}, expected [4519, 9602, 16528]");
    Ok(format!("VG sizes {got:?}"))
}

// 3

fn graphn_sampling_law() -> Outcome {
    let start = Instant::now();
    // objects A B C D, predicate on
    let (a, b, c, d) = (0, 1, 2, 3);
    let table = TripletFrequencyTable::from_counts([(Triplet::new(a, 0, b), 4), (Triplet::new(c, 0, b), 1)]);
    let g = graph("toy", &[d, b], &[(0, 0, 1)]);

    let filtered = perturb::graphn_candidates(&g, 0, &table, 2.0).map_err(|e| e.to_string())?;
    ensure!(
        filtered.len() == 1 && filtered[0].category == a && filtered[0].probability == 1.0,
        "alpha = 2 left {filtered:?}"
    );

    let candidates = perturb::graphn_candidates(&g, 0, &table, 1.0).map_err(|e| e.to_string())?;
    let expected: BTreeMap<usize, f64> = [(a, 0.2), (c, 0.8)].into();
    ensure!(candidates.len() == 2, "alpha = 1 candidates {candidates:?}");
    for cand in &candidates {
        ensure!((cand.probability - expected[&cand.category]).abs() < 1e-12, "candidate {cand:?}");
    }

    // top_k = 0 leaves only the anchor, so the draw follows the candidate law
    let emb = EmbeddingTable::new(vec![vec![1.0, 0.0]; 4]).unwrap();
    let mut cfg = PerturbationConfig::new(Method::GraphN);
    cfg.intensity = 1.0;
    cfg.top_k = 0;
    cfg.alpha = 1.0;
    let draws = 100_000;
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..draws {
        let (out, _) = perturb::perturb_graphn(&g, &cfg, &emb, &table, &mut rng).map_err(|e| e.to_string())?;
        *counts.entry(out.category(0)).or_default() += 1;
    }
    ensure!(counts.keys().all(|k| expected.contains_key(k)), "unexpected categories {counts:?}");
    let chi2: f64 = expected
        .iter()
        .map(|(cat, prob)| {
            let e = prob * draws as f64;
            let o = counts.get(cat).copied().unwrap_or(0) as f64;
            (o - e).powi(2) / e
        })
        .sum();
    let p_value = ChiSquared::new((expected.len() - 1) as f64).unwrap().sf(chi2);
    ensure!(p_value > 0.001, "chi-square {chi2:.3}, p = {p_value:.2e}");
    within(start, Duration::from_secs(10))?;
    Ok(format!("counts {counts:?}, chi2 {chi2:.3}, p = {p_value:.3}"))
}

// 4

const GROUPS: usize = 3;
const PER_GROUP: usize = 20;
const PREDICATES: usize = 5;

/// Long-tail corpus of disjoint-pair graphs. Category popularity follows a
/// Zipf law within each of three groups; the embedding of a category is its
/// group one-hot (scaled) plus its popularity rank, so semantic neighbours
/// share group and popularity.
fn long_tail_corpus(seed: u64) -> (Dataset, Dataset, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = GROUPS * PER_GROUP;
    let v = vocab(objects, PREDICATES);
    let cat_w: Vec<f64> = (0..objects).map(|c| 1.0 / ((c % PER_GROUP) + 1) as f64).collect();
    let pred_w: Vec<f64> = (0..PREDICATES).map(|r| 1.0 / (r + 1) as f64).collect();
    let cats = WeightedIndex::new(&cat_w).unwrap();
    let preds = WeightedIndex::new(&pred_w).unwrap();
    let mut make = |prefix: &str, n: usize| -> Vec<SceneGraph> {
        (0..n)
            .map(|i| {
                let nodes: Vec<usize> = (0..4).map(|_| cats.sample(&mut rng)).collect();
                let edges = [(0, preds.sample(&mut rng), 1), (2, preds.sample(&mut rng), 3)];
                graph(&format!("{prefix}{i:05}"), &nodes, &edges)
            })
            .collect()
    };
    let train = make("tr", 5000);
    let test = make("te", 2000);
    let emb = (0..objects)
        .map(|c| {
            let mut e = vec![0.0; GROUPS + 1];
            e[c / PER_GROUP] = 10.0;
            e[GROUPS] = ((c % PER_GROUP) + 1) as f64;
            e
        })
        .collect();
    (
        Dataset::new(v.clone(), train).unwrap(),
        Dataset::new(v, test).unwrap(),
        EmbeddingTable::new(emb).unwrap(),
    )
}

fn hit_rate_alpha_trend() -> Outcome {
    let start = Instant::now();
    let seeds = 10u64;
    let mut zs_wins = 0;
    let mut all_wins = 0;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let (train, test, emb) = long_tail_corpus(seed);
        let table = stats::build_frequency_table(&train);
        let subsets = stats::shot_subsets(&test, &table);
        let zs = &subsets.get(ShotBucket::Zero).triplets;
        let all = &subsets.get(ShotBucket::All).triplets;
        let res = Resources {
            embeddings: Some(&emb),
            table: Some(&table),
            ..Resources::new(&train.vocab)
        };
        let rate = |alpha: f64| -> Result<(f64, f64), String> {
            let mut cfg = PerturbationConfig::new(Method::GraphN);
            cfg.alpha = alpha;
            cfg.master_seed = seed;
            let (out, records) = perturb::perturb_dataset(&train, &cfg, &res).map_err(|e| e.to_string())?;
            let z = quality::hit_rate(&records, &out, zs).map_err(|e| e.to_string())?;
            let a = quality::hit_rate(&records, &out, all).map_err(|e| e.to_string())?;
            Ok((z.percent, a.percent))
        };
        let (zs1, all1) = rate(1.0)?;
        let (zs20, all20) = rate(20.0)?;
        zs_wins += usize::from(zs1 > zs20);
        all_wins += usize::from(all20 > all1);
        rows.push(format!("{zs1:.2}/{zs20:.2} {all1:.1}/{all20:.1}"));
    }
    // one-sided sign test: P(X >= wins) under Binomial(seeds, 1/2)
    let null = Binomial::new(0.5, seeds).unwrap();
    let p_of = |wins: usize| if wins == 0 { 1.0 } else { null.sf(wins as u64 - 1) };
    let (p_zs, p_all) = (p_of(zs_wins), p_of(all_wins));
    let detail = format!(
        "zs wins {zs_wins}/{seeds} (p = {p_zs:.4}), all-shot wins {all_wins}/{seeds} (p = {p_all:.4}); zs a1/a20 all a1/a20: {}",
        rows.join(", ")
    );
    ensure!(p_zs < 0.05 && p_all < 0.05, "{detail}");
    within(start, Duration::from_secs(60))?;
    Ok(detail)
}

// 5

struct BruteOutcome {
    kept: BTreeSet<(usize, usize, usize)>,
    matched: Vec<bool>,
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

/// Keeps a candidate when fewer than `k` candidates score strictly higher
/// (instances are drawn so that scores never tie), then marks a GT edge as
/// recalled when a kept candidate has its nodes, labels and predicate and no
/// earlier GT edge claimed the same key.
fn brute_force(pred: &PredictedGraph, gt: &SceneGraph, constraint: bool, k: usize) -> BruteOutcome {
    let labels: Vec<usize> = pred.object_scores().iter().map(|r| first_argmax(r)).collect();
    let mut candidates = Vec::new();
    for pair in pred.pairs() {
        let preds: Vec<usize> = if constraint {
            vec![first_argmax(&pair.scores)]
        } else {
            (0..pair.scores.len()).collect()
        };
        for r in preds {
            let score = pred.object_scores()[pair.subject][labels[pair.subject]]
                * pred.object_scores()[pair.object][labels[pair.object]]
                * pair.scores[r];
            candidates.push(((pair.subject, pair.object, r), score));
        }
    }
    let kept: BTreeSet<(usize, usize, usize)> = candidates
        .iter()
        .filter(|(_, s)| candidates.iter().filter(|(_, t)| t > s).count() < k)
        .map(|(key, _)| *key)
        .collect();
    let mut claimed = BTreeSet::new();
    let matched = gt
        .edges()
        .iter()
        .map(|e| {
            let key = (e.subject, e.object, e.predicate);
            let labels_ok = labels[e.subject] == gt.category(e.subject) && labels[e.object] == gt.category(e.object);
            labels_ok && kept.contains(&key) && claimed.insert(key)
        })
        .collect();
    BruteOutcome { kept, matched }
}

fn random_prediction(rng: &mut ChaCha8Rng, gt: &SceneGraph, objects: usize, predicates: usize, mode: EvalMode) -> PredictedGraph {
    let n = gt.num_nodes();
    let object_scores: Vec<Vec<f64>> = (0..n)
        .map(|i| match mode {
            EvalMode::PredCls => (0..objects).map(|c| f64::from(u8::from(c == gt.category(i)))).collect(),
            _ => {
                let raw: Vec<f64> = (0..objects).map(|_| rng.random::<f64>() + 1e-3).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|x| x / sum).collect()
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for s in 0..n {
        for o in 0..n {
            if s != o && rng.random::<f64>() < 0.8 {
                pairs.push(PairScores {
                    subject: s,
                    object: o,
                    scores: (0..predicates).map(|_| rng.random::<f64>()).collect(),
                });
            }
        }
    }
    PredictedGraph::new(gt.image_id(), object_scores, pairs, None).unwrap()
}

fn recall_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (objects, predicates) = (3, 3);
    let v = vocab(objects, predicates);
    let mut evaluations = 0;
    for instance in 0..200 {
        let images = rng.random_range(1..=3);
        let gts: Vec<SceneGraph> = (0..images)
            .map(|i| {
                let n = rng.random_range(2..=4);
                let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..objects)).collect();
                let m = rng.random_range(1..=5);
                let edges: Vec<(usize, usize, usize)> = (0..m)
                    .map(|_| {
                        let s = rng.random_range(0..n);
                        let o = (s + rng.random_range(1..n)) % n;
                        (s, rng.random_range(0..predicates), o)
                    })
                    .collect();
                graph(&format!("i{instance}-{i}"), &cats, &edges)
            })
            .collect();
        let mode = if instance % 2 == 0 { EvalMode::SgCls } else { EvalMode::PredCls };
        let preds: Vec<PredictedGraph> = gts
            .iter()
            .map(|g| random_prediction(&mut rng, g, objects, predicates, mode))
            .collect();
        let ds = Dataset::new(v.clone(), gts.clone()).unwrap();

        for constraint in [true, false] {
            for k in [1, 5, 50] {
                let brute: Vec<BruteOutcome> =
                    preds.iter().zip(&gts).map(|(p, g)| brute_force(p, g, constraint, k)).collect();
                for (p, b) in preds.iter().zip(&brute) {
                    let ranked = eval::rank_triplets(p, constraint, k);
                    let got: BTreeSet<_> = ranked.iter().map(|t| (t.subject, t.object, t.predicate)).collect();
                    ensure!(got == b.kept, "instance {instance}: ranked set differs (k = {k}, constraint {constraint})");
                    ensure!(
                        ranked.windows(2).all(|w| w[0].score >= w[1].score),
                        "instance {instance}: ranking not sorted"
                    );
                }
                for how in [Aggregate::Image, Aggregate::Triplet] {
                    let mut opts = EvalOptions::new(k, mode);
                    opts.graph_constraint = constraint;
                    opts.aggregate = how;
                    let recall = eval::recall_at_k(&preds, &ds, &opts).map_err(|e| e.to_string())?;
                    let mr = eval::mean_recall(&preds, &ds, &opts).map_err(|e| e.to_string())?;
                    let (want_r, want_mr) = brute_recalls(&brute, &gts, predicates, how);
                    ensure!(
                        recall.value == want_r,
                        "instance {instance}: R@{k} {} vs brute force {want_r} ({how:?}, constraint {constraint})",
                        recall.value
                    );
                    ensure!(
                        mr.value == want_mr,
                        "instance {instance}: mR@{k} {} vs brute force {want_mr} ({how:?}, constraint {constraint})",
                        mr.value
                    );
                    evaluations += 1;
                }
            }
        }
    }
    Ok(format!("200 instances, {evaluations} evaluations agree exactly"))
}

fn brute_recalls(brute: &[BruteOutcome], gts: &[SceneGraph], predicates: usize, how: Aggregate) -> (f64, f64) {
    let ratio = |hits: usize, total: usize| hits as f64 / total as f64;
    let recall = match how {
        Aggregate::Image => {
            100.0
                * brute
                    .iter()
                    .map(|b| ratio(b.matched.iter().filter(|&&m| m).count(), b.matched.len()))
                    .sum::<f64>()
                / brute.len() as f64
        }
        Aggregate::Triplet => {
            let hits = brute.iter().flat_map(|b| &b.matched).filter(|&&m| m).count();
            let total: usize = brute.iter().map(|b| b.matched.len()).sum();
            100.0 * hits as f64 / total as f64
        }
    };
    let mut per_predicate = Vec::new();
    for r in 0..predicates {
        let mut per_image = Vec::new();
        for (b, g) in brute.iter().zip(gts) {
            let idx: Vec<usize> = (0..g.edges().len()).filter(|&k| g.edges()[k].predicate == r).collect();
            if !idx.is_empty() {
                per_image.push((idx.iter().filter(|&&k| b.matched[k]).count(), idx.len()));
            }
        }
        if per_image.is_empty() {
            continue;
        }
        per_predicate.push(match how {
            Aggregate::Image => {
                100.0 * per_image.iter().map(|&(h, t)| ratio(h, t)).sum::<f64>() / per_image.len() as f64
            }
            Aggregate::Triplet => {
                let h: usize = per_image.iter().map(|c| c.0).sum();
                let t: usize = per_image.iter().map(|c| c.1).sum();
                100.0 * h as f64 / t as f64
            }
        });
    }
    let mean = per_predicate.iter().sum::<f64>() / per_predicate.len() as f64;
    (recall, mean)
}

// 6

fn reweighting_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let pairs: Vec<PairScores> = (0..6)
            .map(|i| PairScores {
                subject: i,
                object: i + 1,
                scores: (0..7).map(|_| rng.random::<f64>()).collect(),
            })
            .collect();
        let freqs: Vec<f64> = (0..7).map(|_| rng.random::<f64>() + 0.01).collect();
        let same = eval::reweight_scores(&pairs, &freqs, 0.0).map_err(|e| e.to_string())?;
        for (a, b) in pairs.iter().zip(&same) {
            ensure!(
                a.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits()),
                "x = 0 changed scores"
            );
        }
        let uniform = vec![1.0 / 7.0; 7];
        let pred = PredictedGraph::one_hot("u", &[0; 7], 1, pairs.clone()).unwrap();
        for x in [0.5, 1.0, 2.0, 3.7] {
            let rw = pred.with_pairs(eval::reweight_scores(&pairs, &uniform, x).map_err(|e| e.to_string())?);
            for constraint in [true, false] {
                let before: Vec<_> = eval::rank_triplets(&pred, constraint, 100)
                    .iter()
                    .map(|t| (t.subject, t.predicate))
                    .collect();
                let after: Vec<_> = eval::rank_triplets(&rw, constraint, 100)
                    .iter()
                    .map(|t| (t.subject, t.predicate))
                    .collect();
                ensure!(before == after, "uniform frequencies changed the ranking at x = {x}");
            }
        }
    }

    let [xs, recalls, mean_recalls] = reweight_trend()?;
    let strictly = |v: &[f64], up: bool| v.windows(2).all(|w| if up { w[1] > w[0] } else { w[1] < w[0] });
    let detail = format!("x {xs:?}: R {recalls:.2?}, mR {mean_recalls:.2?}");
    ensure!(strictly(&recalls, false) && strictly(&mean_recalls, true), "{detail}");
    Ok(detail)
}

/// One image, predicate frequencies (0.9, 0.1). Each pair scores (a, b) for
/// the frequent and rare predicate, so the rare one takes over once
/// `9^x > a / b`. Level t pairs have `b / a = 3 * 9^-t` and flip at
/// x = t - 1/2: two pairs annotated with the frequent predicate (lost when
/// they flip) and one annotated with the rare one (gained). Three more
/// frequent pairs never flip in the tested range.
fn reweight_trend() -> Result<[Vec<f64>; 3], String> {
    let mut specs: Vec<(f64, usize)> = Vec::new();
    for t in 1..=3 {
        let ratio = 3.0 * 9f64.powi(-t);
        specs.extend([(ratio, 0), (ratio, 0), (ratio, 1)]);
    }
    specs.extend([(1e-4, 0); 3]);
    let n = specs.len() * 2;
    let cats = vec![0; n];
    let edges: Vec<(usize, usize, usize)> = specs.iter().enumerate().map(|(i, &(_, r))| (2 * i, r, 2 * i + 1)).collect();
    let gt = graph("trend", &cats, &edges);
    let pairs = specs
        .iter()
        .enumerate()
        .map(|(i, &(ratio, _))| PairScores {
            subject: 2 * i,
            object: 2 * i + 1,
            scores: vec![0.5, 0.5 * ratio],
        })
        .collect();
    let pred = PredictedGraph::one_hot("trend", &cats, 1, pairs).unwrap();
    let ds = Dataset::new(vocab(1, 2), vec![gt]).unwrap();
    let freqs = [0.9, 0.1];
    let xs = vec![0.0, 1.0, 2.0, 3.0];
    let mut recalls = Vec::new();
    let mut mean_recalls = Vec::new();
    for &x in &xs {
        let mut opts = EvalOptions::new(50, EvalMode::PredCls);
        opts.reweight = Some((x, &freqs));
        let preds = [pred.clone()];
        recalls.push(eval::recall_at_k(&preds, &ds, &opts).map_err(|e| e.to_string())?.value);
        mean_recalls.push(eval::mean_recall(&preds, &ds, &opts).map_err(|e| e.to_string())?.value);
    }
    Ok([xs, recalls, mean_recalls])
}

// 7

fn naive_prdc(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> [f64; 4] {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        set.iter()
            .map(|a| {
                let mut d: Vec<f64> = set.iter().map(|b| dist(a, b)).collect();
                d.sort_by(f64::total_cmp);
                d[k] // d[0] is the point itself
            })
            .collect()
    };
    let (rr, rf) = (radii(real), radii(fake));
    let inside = |x: &[f64], set: &[Vec<f64>], r: &[f64]| set.iter().zip(r).filter(|(c, &r)| dist(x, c) <= r).count();
    let precision = fake.iter().filter(|y| inside(y, real, &rr) > 0).count() as f64 / fake.len() as f64;
    let recall = real.iter().filter(|x| inside(x, fake, &rf) > 0).count() as f64 / real.len() as f64;
    let density =
        fake.iter().map(|y| inside(y, real, &rr) as f64).sum::<f64>() / (k as f64 * fake.len() as f64);
    let coverage = real
        .iter()
        .zip(&rr)
        .filter(|(x, &r)| fake.iter().any(|y| dist(x, y) <= r))
        .count() as f64
        / real.len() as f64;
    [precision, recall, density, coverage]
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() + shift).collect()).collect()
}

fn metrics(q: [f64; 4]) -> ManifoldMetrics {
    ManifoldMetrics {
        precision: q[0],
        recall: q[1],
        density: q[2],
        coverage: q[3],
    }
}

fn feature_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = random_rows(&mut rng, 60, 4, 0.0);
    let set = FeatureSet::from_rows(&rows).unwrap();
    let m = featmetrics::precision_recall_density_coverage(&set, &set, 5).map_err(|e| e.to_string())?;
    ensure!(
        m.precision == 1.0 && m.recall == 1.0 && m.coverage == 1.0,
        "identical sets gave {m:?}"
    );

    let mut worst = 0.0f64;
    for i in 0..50 {
        let (n, f) = (rng.random_range(10..40), rng.random_range(10..40));
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        let real = random_rows(&mut rng, n, d, 0.0);
        let fake = random_rows(&mut rng, f, d, if i % 2 == 0 { 0.0 } else { 0.3 });
        let got = featmetrics::precision_recall_density_coverage(
            &FeatureSet::from_rows(&real).unwrap(),
            &FeatureSet::from_rows(&fake).unwrap(),
            k,
        )
        .map_err(|e| e.to_string())?
        .as_array();
        let want = naive_prdc(&real, &fake, k);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure!(worst <= 1e-12, "largest deviation from brute force {worst:e}");

    // rows of the published table: (label, test quadruple, test-zs quadruple, avg, avg-zs, drop)
    let published = [
        ("nodes", [0.74, 0.75, 1.02, 0.97], [0.66, 0.70, 0.99, 0.94], 0.87, 0.82, 6.0),
        ("edges", [0.73, 0.72, 0.97, 0.97], [0.53, 0.59, 0.99, 0.87], 0.85, 0.75, 12.0),
        ("global", [0.30, 0.31, 0.96, 0.99], [0.20, 0.35, 0.73, 0.91], 0.64, 0.55, 14.0),
    ];
    let entries: Vec<(&str, ManifoldMetrics, ManifoldMetrics)> =
        published.iter().map(|(l, a, b, ..)| (*l, metrics(*a), metrics(*b))).collect();
    let report = featmetrics::summarize_feature_report(["test", "test-zs"], &entries);
    for (i, (label, _, _, avg, avg_zs, drop)) in published.iter().enumerate() {
        let (ref_row, zs_row) = (&report.rows[2 * i], &report.rows[2 * i + 1]);
        ensure!(
            ref_row.average == *avg && zs_row.average == *avg_zs && zs_row.drop_percent == Some(*drop),
            "{label}: got {} -> {} ({:?}%), expected {avg} -> {avg_zs} (-{drop}%)",
            ref_row.average,
            zs_row.average,
            zs_row.drop_percent
        );
    }

    let real = random_rows(&mut rng, 200, 3, 0.0);
    let shift = [0.3, -1.2, 2.0];
    let moved: Vec<Vec<f64>> = real.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
    let fd = featmetrics::frechet_distance(&FeatureSet::from_rows(&real).unwrap(), &FeatureSet::from_rows(&moved).unwrap())
        .map_err(|e| e.to_string())?;
    let norm2: f64 = shift.iter().map(|s| s * s).sum();
    ensure!((fd - norm2).abs() < 1e-6, "translated copy: FD {fd}, |v|^2 {norm2}");
    Ok(format!(
        "identity exact, oracle max dev {worst:.1e}, nodes avg 0.87 -> 0.82 (-6%), FD {fd:.9} vs {norm2}"
    ))
}

// 8

fn loss_arithmetic() -> Outcome {
    let node = losses::node_loss(&ProbTable::uniform(20, 151)).map_err(|e| e.to_string())?;
    ensure!((node - 151f64.ln()).abs() < 1e-9, "uniform node loss {node}");
    let graphs: Vec<GraphEdges> = [2usize, 3, 5]
        .iter()
        .map(|&n| GraphEdges {
            pairs: ProbTable::uniform(n * (n - 1), 51),
            num_nodes: n,
        })
        .collect();
    let edge = losses::edge_loss(&graphs, EdgeLossMode::DensityNormalized).map_err(|e| e.to_string())?;
    ensure!((edge - 51f64.ln()).abs() < 1e-9, "uniform edge loss {edge}");
    let cls = losses::cls_loss(&ProbTable::uniform(4, 151), &graphs, EdgeLossMode::default()).map_err(|e| e.to_string())?;
    ensure!((cls - 151f64.ln() - 51f64.ln()).abs() < 1e-9, "uniform cls loss {cls}");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    let mut bound_hits = [0usize; 2];
    for _ in 0..10_000 {
        let mut rand_box = || {
            let (x, y) = (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
            BoundingBox::new(x, y, x + rng.random_range(0.0..300.0), y + rng.random_range(0.0..300.0)).unwrap()
        };
        let (a, b) = (rand_box(), rand_box());
        let s = rng.random_range(1.0..1000.0);
        let l = losses::box_margin_l1(&a, &b, s).map_err(|e| e.to_string())?;
        if !(0.05 * s..=0.5 * s).contains(&l) {
            violations += 1;
        }
        if l == 0.05 * s {
            bound_hits[0] += 1;
        }
        if l == 0.5 * s {
            bound_hits[1] += 1;
        }
    }
    ensure!(violations == 0, "{violations} box losses outside [0.05 S, 0.5 S]");
    let same = unit_box();
    let floor = losses::box_margin_l1(&same, &same, 40.0).map_err(|e| e.to_string())?;
    ensure!(floor == 2.0, "identical boxes gave {floor}, expected the 0.05 S floor");

    // dyadic inputs keep every product and sum exact
    let spots = [
        (1.5, 0.25, -0.75, -0.5, 5.0, 1.5 + 0.25 + 5.0 * 1.25),
        (2.0, 1.0, -1.0, -2.0, 0.0, 3.0),
        (0.5, 0.5, -0.25, -0.25, 2.0, 2.0),
    ];
    for (cls, rec, d, g, gamma, want) in spots {
        let got = losses::total_loss(cls, rec, d, g, gamma);
        ensure!(got == want, "total_loss({cls}, {rec}, {d}, {g}, {gamma}) = {got}, expected {want}");
    }
    let base = losses::total_loss(1.0, 2.0, -0.5, -0.25, 4.0);
    let doubled = losses::total_loss(2.0, 4.0, -1.0, -0.5, 4.0);
    ensure!(doubled == 2.0 * base, "total_loss is not homogeneous");
    Ok(format!(
        "node {node:.12}, edge {edge:.12}, 10^4 boxes in range ({} at floor, {} at cap)",
        bound_hits[0], bound_hits[1]
    ))
}

// 9

fn determinism() -> Outcome {
    let dir = TempDir::new().unwrap();
    let f = |n: &str| fixture(n).to_str().unwrap().to_owned();
    let sub_a = dir.path().join("sub_a");
    let sub_b = dir.path().join("sub_b");
    for out in [&sub_a, &sub_b] {
        run_ok(&[
            "subsets",
            "--train",
            &f("train.jsonl"),
            "--test",
            &f("test.jsonl"),
            "--vocab",
            &f("vocab.json"),
            "--out-dir",
            p(out),
        ]);
    }
    for entry in fs::read_dir(&sub_a).unwrap() {
        let name = entry.unwrap().file_name();
        ensure!(
            fs::read(sub_a.join(&name)).unwrap() == fs::read(sub_b.join(&name)).unwrap(),
            "subsets/{} differs between runs",
            name.to_string_lossy()
        );
    }
    let zs = sub_a.join("subset_triplets.json");
    let zs = p(&zs).to_owned();

    let data = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = vec!["--vocab".into(), f("vocab.json")];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let perturb = |method: &str, seed: &str| {
        let mut v = vec!["perturb".to_owned()];
        v.extend(data(&[
            "--method",
            method,
            "--seed",
            seed,
            "--embeddings",
            &f("embeddings.txt"),
            "--train",
            &f("train.jsonl"),
            "--zs",
            &zs,
            "--input",
            &f("train.jsonl"),
            "--records",
            "{aux}",
        ]));
        v
    };
    let mut commands: Vec<Vec<String>> = vec![
        [vec!["stats".to_owned(), "--train".into(), f("train.jsonl")], data(&[])].concat(),
        perturb("rand", "7"),
        perturb("neigh", "7"),
        perturb("graphn", "7"),
        perturb("oracle_zs", "7"),
        [
            vec!["--csv".to_owned(), "hit-rate".into()],
            data(&[
                "--subsets",
                &zs,
                "--sweep-alpha",
                "1,2,5",
                "--input",
                &f("train.jsonl"),
                "--train",
                &f("train.jsonl"),
                "--embeddings",
                &f("embeddings.txt"),
            ]),
        ]
        .concat(),
        [
            vec!["plausibility".to_owned()],
            data(&["--graphs", &f("test.jsonl"), "--stub-frequency", &f("train.jsonl"), "--seed", "11"]),
        ]
        .concat(),
        [
            vec!["eval".to_owned()],
            data(&["--predictions", &f("predictions.jsonl"), "--gt", &f("test.jsonl"), "--subsets", &zs, "--subset", "zs"]),
        ]
        .concat(),
        vec![
            "feat-metrics".into(),
            "--real".into(),
            f("feat_0.tsv"),
            "--fake".into(),
            f("feat_1.tsv"),
            "--real-b".into(),
            f("feat_0.tsv"),
            "--fake-b".into(),
            f("feat_2.tsv"),
            "--frechet".into(),
        ],
    ];

    // hit-rate on records written by a perturb run
    let hr_records = dir.path().join("hr_records.jsonl");
    let hr_perturbed = dir.path().join("hr_perturbed.jsonl");
    {
        let mut args = perturb("graphn", "3");
        for a in &mut args {
            if a == "{aux}" {
                *a = p(&hr_records).to_owned();
            }
        }
        args.extend(["--out".into(), p(&hr_perturbed).to_owned()]);
        run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    commands.push(
        [
            vec!["hit-rate".to_owned()],
            data(&["--subsets", &zs, "--records", p(&hr_records), "--perturbed", p(&hr_perturbed)]),
        ]
        .concat(),
    );

    let run = |args: &[String], tag: &str| -> Vec<u8> {
        let out = dir.path().join(format!("out_{tag}"));
        let aux = dir.path().join(format!("aux_{tag}"));
        let _ = fs::remove_file(&aux);
        let mut full: Vec<String> = args
            .iter()
            .map(|a| if a == "{aux}" { p(&aux).to_owned() } else { a.clone() })
            .collect();
        full.extend(["--out".into(), p(&out).to_owned()]);
        run_ok(&full.iter().map(String::as_str).collect::<Vec<_>>());
        let mut bytes = fs::read(&out).unwrap();
        if aux.exists() {
            bytes.extend(fs::read(&aux).unwrap());
        }
        bytes
    };
    for args in &commands {
        let first = run(args, "a");
        let again = run(args, "b");
        ensure!(first == again, "rerun differs: {}", args[..2].join(" "));
        let threaded = run(&[vec!["--jobs".to_owned(), "3".into()], args.clone()].concat(), "c");
        ensure!(first == threaded, "--jobs 3 output differs: {}", args[..2].join(" "));
    }

    // reversing the input order leaves every per-image perturbation unchanged
    let text = fs::read_to_string(fixture("train.jsonl")).unwrap();
    let reversed: String = text.lines().rev().map(|l| format!("{l}\n")).collect();
    let rev_path = dir.path().join("reversed.jsonl");
    fs::write(&rev_path, reversed).unwrap();
    for method in ["rand", "neigh", "graphn", "oracle_zs"] {
        let mut per_image = Vec::new();
        for input in [f("train.jsonl"), p(&rev_path).to_owned()] {
            let mut args = perturb(method, "5");
            let pos = args.iter().position(|a| a == "--input").unwrap();
            args[pos + 1] = input;
            let bytes = run(&args, "perm");
            let text = String::from_utf8(bytes).unwrap();
            let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
            lines.sort();
            per_image.push(lines);
        }
        ensure!(per_image[0] == per_image[1], "{method}: permuted input changed per-image output");
    }
    Ok(format!("{} commands + subsets byte-identical across reruns and thread counts; order-invariant", commands.len()))
}

// 10

fn plausibility_protocol() -> Outcome {
    let server = StubServer::start(|body| match serde_json::from_str::<ScoreRequest>(body) {
        Ok(req) if req.target == "shorts" => (200, r#"{"score": 9.8}"#.to_owned()),
        Ok(_) => (200, r#"{"score": 0.5}"#.to_owned()),
        Err(_) => (400, "{}".to_owned()),
    });

    // the appendix example: a person wearing shorts on a beach, shorts masked
    let v = Vocabulary::new(
        vec!["man".into(), "shorts".into(), "shirt".into(), "beach".into()],
        vec!["wearing".into(), "on".into()],
    )
    .unwrap();
    let g = graph("b2", &[0, 1, 2, 3], &[(0, 0, 1), (0, 0, 2), (0, 1, 3)]);
    let ds = Dataset::new(v.clone(), vec![g]).unwrap();
    let record = PerturbationRecord {
        image_id: "b2".into(),
        changes: vec![NodeChange { node: 1, old: 1, new: 1 }],
        affected_edges: vec![0],
    };
    let scorer = HttpScorer::new(&server.url, Duration::from_secs(5));
    let report = quality::score_graphs(&scorer, &ds, Some(std::slice::from_ref(&record)), &ScoreOptions::default())
        .map_err(|e| e.to_string())?;
    ensure!(report.mean == 9.8, "mean {} (expected the canned 9.8)", report.mean);
    let sent = server.requests.lock().unwrap().clone();
    ensure!(sent.len() == 1, "{} requests sent", sent.len());
    let body: Value = serde_json::from_str(&sent[0]).map_err(|e| e.to_string())?;
    let keys: BTreeSet<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    ensure!(keys == BTreeSet::from(["text", "target"]), "request keys {keys:?}");
    let text = body["text"].as_str().unwrap();
    ensure!(body["target"] == "shorts", "target {}", body["target"]);
    ensure!(text.contains("man wearing [MASK]"), "text {text:?}");
    ensure!(text.matches("[MASK]").count() == 1, "text {text:?}");
    for phrase in ["man wearing shirt", "man on beach"] {
        ensure!(text.contains(phrase), "phrase {phrase:?} missing from {text:?}");
    }

    // same round trip through the CLI, endpoint from the environment
    let dir = TempDir::new().unwrap();
    let d = |n: &str| dir.path().join(n);
    write_vocab(&d("vocab.json"), &v);
    ingest::save_dataset(d("g.jsonl"), &ds).unwrap();
    fs::write(d("rec.jsonl"), serde_json::to_string(&record).unwrap() + "\n").unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_sgaug"))
        .args([
            "plausibility",
            "--graphs",
            p(&d("g.jsonl")),
            "--vocab",
            p(&d("vocab.json")),
            "--records",
            p(&d("rec.jsonl")),
            "--out",
            p(&d("pl.json")),
        ])
        .env("SGG_LM_ENDPOINT", &server.url)
        .status()
        .unwrap();
    ensure!(status.success(), "CLI exited with {status}");
    let cli = read_json(&d("pl.json"));
    ensure!(cli["mean"].as_f64() == Some(9.8), "CLI mean {}", cli["mean"]);
    ensure!(cli["per_graph"][0]["target"] == "shorts", "CLI target {}", cli["per_graph"][0]["target"]);
    Ok(format!("POST /score {{text, target}} -> {{score}}; shorts -> {}", report.mean))
}
