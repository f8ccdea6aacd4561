//! Fixture generators for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgaug_core::eval::{PairScores, PredictedGraph};
use sgaug_core::model::{BoundingBox, ObjectNode, Relationship, SceneGraph, Vocabulary};
use sgaug_core::{Dataset, EmbeddingTable, FeatureSet};

pub fn vocab(objects: usize, predicates: usize) -> Vocabulary {
    Vocabulary::new(
        (0..objects).map(|i| format!("obj{i}")).collect(),
        (0..predicates).map(|i| format!("pred{i}")).collect(),
    )
    .unwrap()
}

/// `graphs` random graphs with up to `max_nodes` nodes and about twice as
/// many edges. Category ids are skewed toward low values.
pub fn dataset(vocab: &Vocabulary, graphs: usize, max_nodes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skewed = |rng: &mut ChaCha8Rng, n: usize| ((rng.random::<f64>().powi(3)) * n as f64) as usize;
    let bbox = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let graphs = (0..graphs)
        .map(|i| {
            let n = rng.random_range(2..=max_nodes);
            let nodes = (0..n)
                .map(|_| ObjectNode {
                    category: skewed(&mut rng, vocab.num_objects()),
                    bbox,
                })
                .collect();
            let edges = (0..rng.random_range(1..=2 * n))
                .map(|_| {
                    let subject = rng.random_range(0..n);
                    Relationship {
                        subject,
                        predicate: skewed(&mut rng, vocab.num_predicates()),
                        object: (subject + rng.random_range(1..n)) % n,
                    }
                })
                .collect();
            SceneGraph::new(format!("img{i:06}"), 640, 480, nodes, edges).unwrap()
        })
        .collect();
    Dataset::new(vocab.clone(), graphs).unwrap()
}

pub fn embeddings(vocab: &Vocabulary, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTable::new(
        (0..vocab.num_objects())
            .map(|_| (0..dim).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect(),
    )
    .unwrap()
}

/// Random soft predictions over every ordered node pair of each GT graph.
pub fn predictions(gt: &Dataset, seed: u64) -> Vec<PredictedGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, r) = (gt.vocab.num_objects(), gt.vocab.num_predicates());
    gt.graphs
        .iter()
        .map(|g| {
            let n = g.num_nodes();
            let object_scores = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / sum).collect()
                })
                .collect();
            let mut pairs = Vec::with_capacity(n * (n - 1));
            for subject in 0..n {
                for object in (0..n).filter(|&o| o != subject) {
                    pairs.push(PairScores {
                        subject,
                        object,
                        scores: (0..r).map(|_| rng.random::<f64>()).collect(),
                    });
                }
            }
            PredictedGraph::new(g.image_id(), object_scores, pairs, None).unwrap()
        })
        .collect()
}

pub fn features(n: usize, dim: usize, shift: f64, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureSet::from_flat(n, dim, (0..n * dim).map(|_| rng.random::<f64>() + shift).collect()).unwrap()
}
