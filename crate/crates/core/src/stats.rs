//! Dataset statistics: triplet frequencies, shot-subset partitions,
//! predicate frequencies and category marginals.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::{CategoryId, PredicateId, Triplet, Vocabulary};

/// Training-set count of every categorical triplet that occurs at least once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletFrequencyTable {
    counts: BTreeMap<Triplet, u64>,
    total: u64,
    // (predicate, object) -> [(subject, count)] and (subject, predicate) -> [(object, count)]
    by_predicate_object: HashMap<(PredicateId, CategoryId), Vec<(CategoryId, u64)>>,
    by_subject_predicate: HashMap<(CategoryId, PredicateId), Vec<(CategoryId, u64)>>,
}

impl TripletFrequencyTable {
    /// Builds a table from `(triplet, count)` pairs; zero counts are dropped
    /// and repeated triplets are summed.
    pub fn from_counts(pairs: impl IntoIterator<Item = (Triplet, u64)>) -> Self {
        let mut counts = BTreeMap::new();
        for (t, c) in pairs {
            if c > 0 {
                *counts.entry(t).or_insert(0) += c;
            }
        }
        Self::from_map(counts)
    }

    fn from_map(counts: BTreeMap<Triplet, u64>) -> Self {
        let mut by_predicate_object: HashMap<_, Vec<_>> = HashMap::new();
        let mut by_subject_predicate: HashMap<_, Vec<_>> = HashMap::new();
        for (t, &c) in &counts {
            by_predicate_object
                .entry((t.predicate, t.object))
                .or_default()
                .push((t.subject, c));
            by_subject_predicate
                .entry((t.subject, t.predicate))
                .or_default()
                .push((t.object, c));
        }
        let total = counts.values().sum();
        Self {
            counts,
            total,
            by_predicate_object,
            by_subject_predicate,
        }
    }

    pub fn count(&self, t: &Triplet) -> u64 {
        self.counts.get(t).copied().unwrap_or(0)
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.counts.contains_key(t)
    }

    pub fn total_triplets(&self) -> u64 {
        self.total
    }

    pub fn distinct_triplets(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Triplets in ascending `(subject, predicate, object)` order.
    pub fn iter(&self) -> impl Iterator<Item = (&Triplet, u64)> {
        self.counts.iter().map(|(t, &c)| (t, c))
    }

    /// Subject categories `s` with `(s, predicate, object)` in the table, by ascending `s`.
    pub fn subjects_for(&self, predicate: PredicateId, object: CategoryId) -> &[(CategoryId, u64)] {
        self.by_predicate_object
            .get(&(predicate, object))
            .map_or(&[], Vec::as_slice)
    }

    /// Object categories `o` with `(subject, predicate, o)` in the table, by ascending `o`.
    pub fn objects_for(&self, subject: CategoryId, predicate: PredicateId) -> &[(CategoryId, u64)] {
        self.by_subject_predicate
            .get(&(subject, predicate))
            .map_or(&[], Vec::as_slice)
    }

    pub fn triplet_set(&self) -> BTreeSet<Triplet> {
        self.counts.keys().copied().collect()
    }
}

pub fn build_frequency_table(train: &Dataset) -> TripletFrequencyTable {
    let counts = train
        .graphs
        .par_iter()
        .fold(BTreeMap::new, |mut acc: BTreeMap<Triplet, u64>, g| {
            for t in g.categorical_triplets() {
                *acc.entry(t).or_insert(0) += 1;
            }
            acc
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (t, c) in b {
                *a.entry(t).or_insert(0) += c;
            }
            a
        });
    TripletFrequencyTable::from_map(counts)
}

/// Training-occurrence class of a test triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotBucket {
    /// Never seen in training.
    #[serde(rename = "zs")]
    Zero,
    /// Seen 1 to 10 times.
    Few10,
    /// Seen 11 to 100 times.
    Few100,
    /// Every test triplet, unfiltered.
    All,
}

impl ShotBucket {
    pub const ALL: [ShotBucket; 4] = [ShotBucket::Zero, ShotBucket::Few10, ShotBucket::Few100, ShotBucket::All];

    pub fn name(self) -> &'static str {
        match self {
            ShotBucket::Zero => "zs",
            ShotBucket::Few10 => "few10",
            ShotBucket::Few100 => "few100",
            ShotBucket::All => "all",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn admits(self, train_count: u64) -> bool {
        match self {
            ShotBucket::Zero => train_count == 0,
            ShotBucket::Few10 => (1..=10).contains(&train_count),
            ShotBucket::Few100 => (11..=100).contains(&train_count),
            ShotBucket::All => true,
        }
    }
}

/// Occurrence class including the implicit `>100` class, so that every
/// count falls into exactly one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OccurrenceClass {
    Zero,
    Few10,
    Few100,
    Many,
}

pub fn occurrence_class(train_count: u64) -> OccurrenceClass {
    match train_count {
        0 => OccurrenceClass::Zero,
        1..=10 => OccurrenceClass::Few10,
        11..=100 => OccurrenceClass::Few100,
        _ => OccurrenceClass::Many,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotSubset {
    pub bucket: ShotBucket,
    /// Graphs with at least one bucket triplet; edges outside the bucket removed.
    pub dataset: Dataset,
    /// Distinct compositions kept in this bucket.
    pub triplets: BTreeSet<Triplet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotSubsets {
    pub subsets: Vec<ShotSubset>,
}

impl ShotSubsets {
    pub fn get(&self, bucket: ShotBucket) -> &ShotSubset {
        self.subsets
            .iter()
            .find(|s| s.bucket == bucket)
            .expect("all buckets are always present")
    }
}

/// Splits `test` into zero/10/100/all-shot subsets by training count.
///
/// Within each filtered bucket a graph keeps its full node list but only the
/// edges whose composition falls in the bucket; graphs left without edges
/// are dropped. The `all` bucket is the unfiltered test set.
pub fn shot_subsets(test: &Dataset, table: &TripletFrequencyTable) -> ShotSubsets {
    let subsets = ShotBucket::ALL
        .into_iter()
        .map(|bucket| {
            let mut triplets = BTreeSet::new();
            let graphs = if bucket == ShotBucket::All {
                for g in &test.graphs {
                    triplets.extend(g.categorical_triplets());
                }
                test.graphs.clone()
            } else {
                test.graphs
                    .iter()
                    .filter_map(|g| {
                        let kept = g.retain_edges(|e| {
                            let t = Triplet::new(g.category(e.subject), e.predicate, g.category(e.object));
                            bucket.admits(table.count(&t))
                        });
                        if kept.edges().is_empty() {
                            return None;
                        }
                        triplets.extend(kept.categorical_triplets());
                        Some(kept)
                    })
                    .collect()
            };
            ShotSubset {
                bucket,
                dataset: Dataset {
                    vocab: test.vocab.clone(),
                    graphs,
                },
                triplets,
            }
        })
        .collect();
    ShotSubsets { subsets }
}

/// Fraction of training edges carrying each predicate.
pub fn predicate_frequencies(train: &Dataset) -> Result<Vec<f64>> {
    let hist = predicate_histogram(train);
    if hist.total() == 0 {
        return Err(Error::InvalidArgument(
            "predicate frequencies need at least one training edge".into(),
        ));
    }
    Ok(hist.normalized())
}

/// Occurrence counts indexed by category or predicate id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    counts: Vec<u64>,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts divided by the total; all zeros when the histogram is empty.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// Up to `k` nonzero entries `(id, count, fraction)`, most frequent
    /// first, ties by ascending id.
    pub fn top_k(&self, k: usize) -> Vec<(usize, u64, f64)> {
        let total = self.total() as f64;
        let mut entries: Vec<(usize, u64)> = self
            .counts
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, c)| c > 0)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        entries
            .into_iter()
            .take(k)
            .map(|(id, c)| (id, c, c as f64 / total))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub objects: Histogram,
    pub predicates: Histogram,
}

fn predicate_histogram(ds: &Dataset) -> Histogram {
    let mut counts = vec![0u64; ds.vocab.num_predicates()];
    for g in &ds.graphs {
        for e in g.edges() {
            counts[e.predicate] += 1;
        }
    }
    Histogram { counts }
}

/// Object histogram over nodes and predicate histogram over edges.
pub fn marginal_distributions(ds: &Dataset) -> Marginals {
    let mut objects = vec![0u64; ds.vocab.num_objects()];
    for g in &ds.graphs {
        for n in g.nodes() {
            objects[n.category] += 1;
        }
    }
    Marginals {
        objects: Histogram { counts: objects },
        predicates: predicate_histogram(ds),
    }
}

// ---------------------------------------------------------------------------
// JSON snapshots

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedTriplet {
    pub s: String,
    pub p: String,
    pub o: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
}

impl NamedTriplet {
    pub fn from_triplet(t: &Triplet, vocab: &Vocabulary, count: Option<u64>) -> Self {
        Self {
            s: vocab.object_name(t.subject).to_owned(),
            p: vocab.predicate_name(t.predicate).to_owned(),
            o: vocab.object_name(t.object).to_owned(),
            count,
        }
    }

    pub fn resolve(&self, vocab: &Vocabulary) -> Result<Triplet> {
        let obj = |name: &str| {
            vocab
                .object_id(name)
                .ok_or_else(|| Error::Validation(format!("unknown object category {name:?}")))
        };
        let predicate = vocab
            .predicate_id(&self.p)
            .ok_or_else(|| Error::Validation(format!("unknown predicate {:?}", self.p)))?;
        Ok(Triplet::new(obj(&self.s)?, predicate, obj(&self.o)?))
    }
}

/// Contents of `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub triplets: Vec<NamedTriplet>,
    pub predicate_freq: Vec<f64>,
    pub object_hist: Vec<u64>,
    pub predicate_hist: Vec<u64>,
    pub object_names: Vec<String>,
    pub predicate_names: Vec<String>,
}

impl StatsReport {
    pub fn build(train: &Dataset) -> Result<Self> {
        let table = build_frequency_table(train);
        let marginals = marginal_distributions(train);
        Ok(Self {
            triplets: table
                .iter()
                .map(|(t, c)| NamedTriplet::from_triplet(t, &train.vocab, Some(c)))
                .collect(),
            predicate_freq: predicate_frequencies(train)?,
            object_hist: marginals.objects.counts,
            predicate_hist: marginals.predicates.counts,
            object_names: train.vocab.object_names().to_vec(),
            predicate_names: train.vocab.predicate_names().to_vec(),
        })
    }

    pub fn frequency_table(&self, vocab: &Vocabulary) -> Result<TripletFrequencyTable> {
        let pairs = self
            .triplets
            .iter()
            .map(|nt| Ok((nt.resolve(vocab)?, nt.count.unwrap_or(0))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TripletFrequencyTable::from_counts(pairs))
    }
}

/// Contents of `subset_triplets.json`: bucket name to sorted triplet list.
pub fn subset_triplets_json(subsets: &ShotSubsets, vocab: &Vocabulary) -> BTreeMap<String, Vec<NamedTriplet>> {
    subsets
        .subsets
        .iter()
        .map(|s| {
            (
                s.bucket.name().to_owned(),
                s.triplets
                    .iter()
                    .map(|t| NamedTriplet::from_triplet(t, vocab, None))
                    .collect(),
            )
        })
        .collect()
}

pub fn parse_subset_triplets(
    raw: &BTreeMap<String, Vec<NamedTriplet>>,
    vocab: &Vocabulary,
) -> Result<BTreeMap<ShotBucket, BTreeSet<Triplet>>> {
    raw.iter()
        .map(|(name, list)| {
            let bucket = ShotBucket::from_name(name)
                .ok_or_else(|| Error::Validation(format!("unknown subset bucket {name:?}")))?;
            let set = list.iter().map(|nt| nt.resolve(vocab)).collect::<Result<_>>()?;
            Ok((bucket, set))
        })
        .collect()
}
