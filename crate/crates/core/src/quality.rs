//! Perturbation quality: hit rates against reference triplet sets and
//! masked-LM plausibility scoring over an HTTP service.

use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::{SceneGraph, Triplet, Vocabulary};
use crate::perturb::{image_rng, PerturbationRecord};
use crate::stats::TripletFrequencyTable;

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";
pub const PHRASE_SEPARATOR: &str = " . ";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitRate {
    /// `100 * hits / total`, or 0 when nothing was perturbed.
    pub percent: f64,
    pub hits: usize,
    /// Number of perturbed triplet instances.
    pub total: usize,
    /// Set when `total == 0`.
    pub empty: bool,
}

/// Share of perturbed triplet instances whose composition is in `reference`.
///
/// Every edge listed in a record's `affected_edges` counts once, with its
/// categories as found in the matching perturbed graph.
pub fn hit_rate(
    records: &[PerturbationRecord],
    perturbed: &Dataset,
    reference: &BTreeSet<Triplet>,
) -> Result<HitRate> {
    let by_id: HashMap<&str, &SceneGraph> = perturbed.graphs.iter().map(|g| (g.image_id(), g)).collect();
    let mut hits = 0;
    let mut total = 0;
    for rec in records {
        let g = by_id.get(rec.image_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("record for image {} has no perturbed graph", rec.image_id))
        })?;
        for &k in &rec.affected_edges {
            if k >= g.edges().len() {
                return Err(Error::Validation(format!(
                    "record for image {} lists edge {k} but graph has {} edges",
                    rec.image_id,
                    g.edges().len()
                )));
            }
            total += 1;
            if reference.contains(&g.triplet_of(k)) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        warn!("hit rate requested but no triplets were perturbed");
        return Ok(HitRate { percent: 0.0, hits: 0, total: 0, empty: true });
    }
    Ok(HitRate {
        percent: 100.0 * hits as f64 / total as f64,
        hits,
        total,
        empty: false,
    })
}

/// A masked-LM request for one graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlausibilityQuery {
    pub text: String,
    pub target: String,
    /// Composition of the edge whose node occurrence was masked.
    #[serde(skip)]
    pub masked_triplet: Triplet,
}

/// Builds a query from all edges of `graph` in shuffled order, masking the
/// node `masked_node` in one randomly chosen incident edge.
pub fn build_query<R: Rng + ?Sized>(
    graph: &SceneGraph,
    masked_node: usize,
    vocab: &Vocabulary,
    rng: &mut R,
    mask_token: &str,
) -> Result<PlausibilityQuery> {
    if masked_node >= graph.num_nodes() {
        return Err(Error::InvalidArgument(format!(
            "node {masked_node} out of range for graph with {} nodes",
            graph.num_nodes()
        )));
    }
    if mask_token.is_empty() {
        return Err(Error::InvalidArgument("mask token is empty".into()));
    }
    let incident: Vec<usize> = graph.incident_edges(masked_node).collect();
    if incident.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "node {masked_node} of image {} has no edges to give context",
            graph.image_id()
        )));
    }
    let masked_edge = incident[rng.random_range(0..incident.len())];
    let mut phrases: Vec<String> = graph
        .edges()
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let name = |node: usize| {
                if k == masked_edge && node == masked_node {
                    mask_token
                } else {
                    vocab.object_name(graph.category(node))
                }
            };
            format!("{} {} {}", name(e.subject), vocab.predicate_name(e.predicate), name(e.object))
        })
        .collect();
    phrases.shuffle(rng);
    Ok(PlausibilityQuery {
        text: phrases.join(PHRASE_SEPARATOR),
        target: vocab.object_name(graph.category(masked_node)).to_owned(),
        masked_triplet: graph.triplet_of(masked_edge),
    })
}

/// Something that assigns a plausibility score to a masked query.
pub trait PlausibilityScorer: Sync {
    fn score(&self, query: &PlausibilityQuery) -> Result<f64>;
}

/// Offline scorer: `ln(1 + training count of the masked triplet)`.
pub struct FrequencyScorer<'a> {
    table: &'a TripletFrequencyTable,
}

impl<'a> FrequencyScorer<'a> {
    pub fn new(table: &'a TripletFrequencyTable) -> Self {
        Self { table }
    }
}

impl PlausibilityScorer for FrequencyScorer<'_> {
    fn score(&self, query: &PlausibilityQuery) -> Result<f64> {
        Ok((self.table.count(&query.masked_triplet) as f64).ln_1p())
    }
}

/// Request body of `POST /score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub text: String,
    pub target: String,
}

/// Response body of `POST /score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

/// Client for a masked-LM scoring service speaking the `/score` protocol.
pub struct HttpScorer {
    url: String,
    agent: ureq::Agent,
    retries: usize,
    backoff: Duration,
}

impl HttpScorer {
    /// `endpoint` is the service base URL; `/score` is appended unless present.
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/score") {
            base.to_owned()
        } else {
            format!("{base}/score")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url,
            agent,
            retries: 2,
            backoff: Duration::from_millis(100),
        }
    }

    pub fn with_retries(mut self, retries: usize, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn request_once(&self, body: &ScoreRequest) -> std::result::Result<f64, String> {
        let mut resp = self.agent.post(&self.url).send_json(body).map_err(|e| e.to_string())?;
        let parsed: ScoreResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        if !parsed.score.is_finite() {
            return Err(format!("non-finite score {}", parsed.score));
        }
        Ok(parsed.score)
    }
}

impl PlausibilityScorer for HttpScorer {
    fn score(&self, query: &PlausibilityQuery) -> Result<f64> {
        let body = ScoreRequest {
            text: query.text.clone(),
            target: query.target.clone(),
        };
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * (1 << (attempt - 1)));
            }
            match self.request_once(&body) {
                Ok(score) => return Ok(score),
                Err(e) => {
                    warn!("scoring request to {} failed (attempt {}): {e}", self.url, attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Scorer {
            attempts: self.retries + 1,
            message: last,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub mask_token: String,
    /// Upper bound on concurrent scorer calls.
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            mask_token: DEFAULT_MASK_TOKEN.to_owned(),
            max_in_flight: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphScore {
    pub image_id: String,
    pub masked_node: usize,
    pub text: String,
    pub target: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlausibilityReport {
    /// Mean over scored graphs; 0 when none were scored.
    pub mean: f64,
    pub per_graph: Vec<GraphScore>,
    /// Graphs without a usable node to mask.
    pub skipped: usize,
}

/// Scores one masked query per graph.
///
/// With `records`, the masked node is drawn uniformly from the graph's
/// perturbed nodes that have at least one edge; without, from all nodes that
/// have at least one edge. Graphs with no such node are skipped. Each graph
/// draws from its own image-seeded generator, so results are independent of
/// concurrency.
pub fn score_graphs(
    scorer: &dyn PlausibilityScorer,
    dataset: &Dataset,
    records: Option<&[PerturbationRecord]>,
    opts: &ScoreOptions,
) -> Result<PlausibilityReport> {
    let record_map: Option<HashMap<&str, &PerturbationRecord>> =
        records.map(|rs| rs.iter().map(|r| (r.image_id.as_str(), r)).collect());

    let run = || -> Result<Vec<Option<GraphScore>>> {
        dataset
            .graphs
            .par_iter()
            .map(|g| {
                let degrees = g.degrees();
                let choices: Vec<usize> = match &record_map {
                    Some(map) => map
                        .get(g.image_id())
                        .map(|r| r.changes.iter().map(|c| c.node).filter(|&n| degrees[n] > 0).collect())
                        .unwrap_or_default(),
                    None => (0..g.num_nodes()).filter(|&n| degrees[n] > 0).collect(),
                };
                if choices.is_empty() {
                    return Ok(None);
                }
                let mut rng = image_rng(g.image_id(), opts.seed);
                let node = choices[rng.random_range(0..choices.len())];
                let query = build_query(g, node, &dataset.vocab, &mut rng, &opts.mask_token)
                    .map_err(|e| e.for_image(g.image_id()))?;
                let score = scorer.score(&query).map_err(|e| e.for_image(g.image_id()))?;
                Ok(Some(GraphScore {
                    image_id: g.image_id().to_owned(),
                    masked_node: node,
                    text: query.text,
                    target: query.target,
                    score,
                }))
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_in_flight.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build scoring pool: {e}")))?;
    let results = pool.install(run)?;

    let skipped = results.iter().filter(|r| r.is_none()).count();
    let per_graph: Vec<GraphScore> = results.into_iter().flatten().collect();
    let mean = if per_graph.is_empty() {
        0.0
    } else {
        per_graph.iter().map(|s| s.score).sum::<f64>() / per_graph.len() as f64
    };
    Ok(PlausibilityReport { mean, per_graph, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::perturb::NodeChange;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, changes: &[(usize, usize, usize)], edges: &[usize]) -> PerturbationRecord {
        PerturbationRecord {
            image_id: id.into(),
            changes: changes.iter().map(|&(node, old, new)| NodeChange { node, old, new }).collect(),
            affected_edges: edges.to_vec(),
        }
    }

    #[test]
    fn quarter_hit_rate() {
        let ds = Dataset::new(
            surf_vocab(),
            vec![graph("a", &[0, 1, 2, 3], &[(0, 1, 1), (2, 0, 0), (3, 1, 1), (0, 0, 2)])],
        )
        .unwrap();
        let recs = vec![record("a", &[(0, 3, 0)], &[0, 1, 2, 3])];
        let reference = BTreeSet::from([Triplet::new(0, 1, 1)]);
        let hr = hit_rate(&recs, &ds, &reference).unwrap();
        assert_eq!(hr.percent, 25.0);
        assert_eq!((hr.hits, hr.total), (1, 4));

        let none = hit_rate(&recs, &ds, &BTreeSet::new()).unwrap();
        assert_eq!(none.percent, 0.0);
    }

    #[test]
    fn empty_and_mismatched_records() {
        let ds = Dataset::new(surf_vocab(), vec![graph("a", &[0, 1], &[(0, 1, 1)])]).unwrap();
        let hr = hit_rate(&[record("a", &[], &[])], &ds, &BTreeSet::new()).unwrap();
        assert!(hr.empty);
        assert_eq!(hr.percent, 0.0);
        assert!(hit_rate(&[record("zzz", &[], &[])], &ds, &BTreeSet::new()).is_err());
    }

    #[test]
    fn surf_query() {
        let v = surf_vocab();
        let g = surf_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = build_query(&g, 2, &v, &mut rng, DEFAULT_MASK_TOKEN).unwrap();
        assert!(q.text.contains("person on [MASK]"), "{}", q.text);
        assert!(q.text.contains("wave above person"), "{}", q.text);
        assert_eq!(q.target, "surfboard");
        assert_eq!(q.text.matches(DEFAULT_MASK_TOKEN).count(), 1);
    }

    #[test]
    fn single_edge_and_isolated() {
        let v = surf_vocab();
        let g = graph("g", &[0, 1, 2], &[(0, 1, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = build_query(&g, 0, &v, &mut rng, "<mask>").unwrap();
        assert_eq!(q.text, "<mask> on surfboard");
        assert!(build_query(&g, 2, &v, &mut rng, "<mask>").is_err());
    }

    #[test]
    fn only_one_occurrence_masked() {
        // person is subject of two edges; exactly one gets the mask
        let v = surf_vocab();
        let g = graph("g", &[0, 1, 2], &[(0, 1, 1), (0, 0, 2)]);
        for seed in 0..20 {
            let q = build_query(&g, 0, &v, &mut ChaCha8Rng::seed_from_u64(seed), "[MASK]").unwrap();
            assert_eq!(q.text.matches("[MASK]").count(), 1);
            assert_eq!(q.text.matches("person").count(), 1);
        }
    }

    #[test]
    fn same_seed_same_order() {
        let v = surf_vocab();
        let g = graph("g", &[0, 1, 2, 3], &[(0, 1, 1), (2, 0, 0), (3, 1, 1), (0, 0, 2)]);
        let a = build_query(&g, 0, &v, &mut ChaCha8Rng::seed_from_u64(5), "[MASK]").unwrap();
        let b = build_query(&g, 0, &v, &mut ChaCha8Rng::seed_from_u64(5), "[MASK]").unwrap();
        assert_eq!(a, b);
    }

    struct Constant(f64);

    impl PlausibilityScorer for Constant {
        fn score(&self, _: &PlausibilityQuery) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn constant_scorer_mean() {
        let ds = Dataset::new(
            surf_vocab(),
            vec![surf_graph(), graph("b", &[0, 1], &[(0, 1, 1)]), graph("c", &[0], &[])],
        )
        .unwrap();
        let rep = score_graphs(&Constant(1.0), &ds, None, &ScoreOptions::default()).unwrap();
        assert_eq!(rep.mean, 1.0);
        assert_eq!(rep.per_graph.len(), 2);
        assert_eq!(rep.skipped, 1);
    }

    #[test]
    fn perturbed_mode_masks_a_perturbed_node() {
        let ds = Dataset::new(surf_vocab(), vec![graph("a", &[0, 1, 2], &[(0, 1, 1), (2, 0, 0)])]).unwrap();
        let recs = vec![record("a", &[(2, 3, 2)], &[1])];
        for seed in 0..10 {
            let opts = ScoreOptions { seed, ..Default::default() };
            let rep = score_graphs(&Constant(2.0), &ds, Some(&recs), &opts).unwrap();
            assert_eq!(rep.per_graph[0].masked_node, 2);
            assert_eq!(rep.per_graph[0].target, "wave");
        }
        let rep = score_graphs(&Constant(2.0), &ds, Some(&[]), &ScoreOptions::default()).unwrap();
        assert_eq!(rep.skipped, 1);
    }

    #[test]
    fn frequency_scorer_prefers_frequent_compositions() {
        // person on surfboard seen 9 times; dog on surfboard never
        let table = TripletFrequencyTable::from_counts([(Triplet::new(0, 1, 1), 9)]);
        let scorer = FrequencyScorer::new(&table);
        let v = surf_vocab();
        let frequent = graph("f", &[0, 1], &[(0, 1, 1)]);
        let zero_shot = graph("z", &[3, 1], &[(0, 1, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qf = build_query(&frequent, 0, &v, &mut rng, "[MASK]").unwrap();
        let qz = build_query(&zero_shot, 0, &v, &mut rng, "[MASK]").unwrap();
        let (sf, sz) = (scorer.score(&qf).unwrap(), scorer.score(&qz).unwrap());
        assert!((sf - 10f64.ln()).abs() < 1e-12);
        assert_eq!(sz, 0.0);
        assert!(sf > sz);
    }

    #[test]
    fn scorer_errors_carry_image_id() {
        struct Failing;
        impl PlausibilityScorer for Failing {
            fn score(&self, _: &PlausibilityQuery) -> Result<f64> {
                Err(Error::Scorer { attempts: 3, message: "down".into() })
            }
        }
        let ds = Dataset::new(surf_vocab(), vec![surf_graph()]).unwrap();
        let err = score_graphs(&Failing, &ds, None, &ScoreOptions::default()).unwrap_err();
        assert!(err.to_string().contains("surf"));
        assert!(err.is_environmental());
    }

    #[test]
    fn endpoint_url_normalization() {
        let t = Duration::from_secs(1);
        assert_eq!(HttpScorer::new("http://h:1/", t).url(), "http://h:1/score");
        assert_eq!(HttpScorer::new("http://h:1/score", t).url(), "http://h:1/score");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hit_rate_bounded_and_monotone(
                cats in proptest::collection::vec(0usize..4, 2..6),
                raw in proptest::collection::vec((0usize..6, 0usize..2, 0usize..6), 1..8),
                refs in proptest::collection::vec((0usize..4, 0usize..2, 0usize..4), 0..10),
                extra in proptest::collection::vec((0usize..4, 0usize..2, 0usize..4), 0..10),
            ) {
                let n = cats.len();
                let edges: Vec<_> = raw.into_iter().map(|(s, p, o)| (s % n, p, o % n)).filter(|(s, _, o)| s != o).collect();
                let g = graph("a", &cats, &edges);
                let ds = Dataset::new(surf_vocab(), vec![g]).unwrap();
                let recs = vec![record("a", &[], &(0..edges.len()).collect::<Vec<_>>())];
                let small: BTreeSet<Triplet> = refs.iter().map(|&(s, p, o)| Triplet::new(s, p, o)).collect();
                let mut large = small.clone();
                large.extend(extra.iter().map(|&(s, p, o)| Triplet::new(s, p, o)));
                let a = hit_rate(&recs, &ds, &small).unwrap().percent;
                let b = hit_rate(&recs, &ds, &large).unwrap().percent;
                prop_assert!((0.0..=100.0).contains(&a));
                prop_assert!(a <= b);
            }
        }
    }
}
