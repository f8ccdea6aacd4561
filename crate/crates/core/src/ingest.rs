//! On-disk formats: vocabulary JSON, JSON-Lines datasets and predictions,
//! whitespace-separated word embeddings, and feature-matrix TSV files.
//!
//! Every loader has a reader-based variant (`read_*`) so callers can feed
//! in-memory buffers; the path-based variants only add file opening and put
//! the path into error locations.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{PairScores, PredictedGraph};
use crate::featmetrics::FeatureSet;
use crate::model::{BoundingBox, CategoryId, ObjectNode, Relationship, SceneGraph, Vocabulary};

/// A vocabulary plus an ordered list of graphs validated against it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub graphs: Vec<SceneGraph>,
}

impl Dataset {
    pub fn new(vocab: Vocabulary, graphs: Vec<SceneGraph>) -> Result<Self> {
        for g in &graphs {
            g.validate(&vocab).map_err(|e| e.for_image(g.image_id()))?;
        }
        Ok(Self { vocab, graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.graphs.iter().map(|g| g.edges().len()).sum()
    }
}

/// Word vectors for every object category.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// `vectors[c]` is the embedding of category `c`.
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("embedding table is empty".into()))?;
        if dim == 0 {
            return Err(Error::Validation("embedding dimension is 0".into()));
        }
        for (c, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Validation(format!(
                    "category {c} has dimension {} (expected {dim})",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("category {c} has a non-finite entry")));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::Validation(format!("category {c} has an all-zero vector")));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, category: CategoryId) -> &[f64] {
        &self.vectors[category]
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn source_name(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------------------
// vocabulary

#[derive(Deserialize)]
struct RawVocabulary {
    objects: Vec<String>,
    predicates: Vec<String>,
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    read_vocabulary(open(path)?, &source_name(path))
}

pub fn read_vocabulary(mut reader: impl Read, source: &str) -> Result<Vocabulary> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::parse(source, e.to_string()))?;
    let raw: RawVocabulary = serde_json::from_str(&text).map_err(|e| {
        Error::parse(format!("{source}:{}:{}", e.line(), e.column()), e.to_string())
    })?;
    for (field, names) in [("objects", &raw.objects), ("predicates", &raw.predicates)] {
        if names.is_empty() {
            return Err(Error::parse(format!("{source}:{field}"), "array is empty"));
        }
        let mut seen = HashSet::new();
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::parse(format!("{source}:{field}[{i}]"), "empty name"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::parse(
                    format!("{source}:{field}[{i}]"),
                    format!("duplicate name {name:?}"),
                ));
            }
        }
    }
    Vocabulary::new(raw.objects, raw.predicates)
}

pub fn write_vocabulary(vocab: &Vocabulary, mut writer: impl Write) -> std::io::Result<()> {
    let value = serde_json::json!({
        "objects": vocab.object_names(),
        "predicates": vocab.predicate_names(),
    });
    serde_json::to_writer(&mut writer, &value)?;
    writeln!(writer)
}

// ---------------------------------------------------------------------------
// datasets

/// Image ids appear as strings or integers in the wild.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawId {
    Text(String),
    Number(u64),
}

impl RawId {
    fn into_string(self) -> String {
        match self {
            RawId::Text(s) => s,
            RawId::Number(n) => n.to_string(),
        }
    }
}

/// A category or predicate given by name or by id.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum Label {
    Name(String),
    Id(usize),
}

impl Label {
    fn resolve(&self, lookup: impl Fn(&str) -> Option<usize>, len: usize) -> Option<usize> {
        match self {
            Label::Name(name) => lookup(name),
            Label::Id(id) if *id < len => Some(*id),
            Label::Id(_) => None,
        }
    }
}

#[derive(Deserialize)]
struct RawGraph {
    image_id: RawId,
    width: u32,
    height: u32,
    objects: Vec<RawObject>,
    #[serde(default)]
    relationships: Vec<RawRelationship>,
}

#[derive(Deserialize)]
struct RawObject {
    category: Label,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawRelationship {
    subject: usize,
    predicate: Label,
    object: usize,
}

#[derive(Serialize)]
struct OutGraph<'a> {
    image_id: &'a str,
    width: u32,
    height: u32,
    objects: Vec<OutObject<'a>>,
    relationships: Vec<OutRelationship<'a>>,
}

#[derive(Serialize)]
struct OutObject<'a> {
    category: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize)]
struct OutRelationship<'a> {
    subject: usize,
    predicate: &'a str,
    object: usize,
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Dataset> {
    let path = path.as_ref();
    read_dataset(open(path)?, vocab, &source_name(path))
}

/// Reads a JSON-Lines dataset. Blank lines are skipped.
pub fn read_dataset(reader: impl BufRead, vocab: &Vocabulary, source: &str) -> Result<Dataset> {
    let mut graphs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::parse(format!("{source}:{lineno}"), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawGraph = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{source}:{lineno}"), e.to_string()))?;
        graphs.push(convert_graph(raw, vocab, source, lineno)?);
    }
    Ok(Dataset {
        vocab: vocab.clone(),
        graphs,
    })
}

fn convert_graph(raw: RawGraph, vocab: &Vocabulary, source: &str, lineno: usize) -> Result<SceneGraph> {
    let image_id = raw.image_id.into_string();
    let at = |field: String| format!("{source}:{lineno} (image_id {image_id}) {field}");

    let mut nodes = Vec::with_capacity(raw.objects.len());
    for (i, obj) in raw.objects.iter().enumerate() {
        let category = obj
            .category
            .resolve(|n| vocab.object_id(n), vocab.num_objects())
            .ok_or_else(|| {
                Error::parse(at(format!("objects[{i}].category")), format!("unknown category {:?}", obj.category))
            })?;
        let [x1, y1, x2, y2] = obj.bbox;
        let bbox = BoundingBox::new(x1, y1, x2, y2)
            .map_err(|e| Error::parse(at(format!("objects[{i}].box")), e.to_string()))?;
        nodes.push(ObjectNode { category, bbox });
    }

    let mut edges = Vec::with_capacity(raw.relationships.len());
    for (k, rel) in raw.relationships.iter().enumerate() {
        let predicate = rel
            .predicate
            .resolve(|n| vocab.predicate_id(n), vocab.num_predicates())
            .ok_or_else(|| {
                Error::parse(
                    at(format!("relationships[{k}].predicate")),
                    format!("unknown predicate {:?}", rel.predicate),
                )
            })?;
        edges.push(Relationship {
            subject: rel.subject,
            predicate,
            object: rel.object,
        });
    }

    SceneGraph::new(image_id.clone(), raw.width, raw.height, nodes, edges)
        .map_err(|e| Error::parse(at("relationships".into()), e.to_string()))
}

/// Writes one JSON object per graph, categories and predicates by name.
pub fn write_dataset(dataset: &Dataset, mut writer: impl Write) -> std::io::Result<()> {
    for g in &dataset.graphs {
        write_graph(g, &dataset.vocab, &mut writer)?;
    }
    writer.flush()
}

pub fn write_graph(g: &SceneGraph, vocab: &Vocabulary, mut writer: impl Write) -> std::io::Result<()> {
    let out = OutGraph {
        image_id: g.image_id(),
        width: g.width(),
        height: g.height(),
        objects: g
            .nodes()
            .iter()
            .map(|n| OutObject {
                category: vocab.object_name(n.category),
                bbox: n.bbox.to_array(),
            })
            .collect(),
        relationships: g
            .edges()
            .iter()
            .map(|e| OutRelationship {
                subject: e.subject,
                predicate: vocab.predicate_name(e.predicate),
                object: e.object,
            })
            .collect(),
    };
    serde_json::to_writer(&mut writer, &out)?;
    writeln!(writer)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(dataset, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// embeddings

pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    read_embeddings(open(path)?, vocab, &source_name(path))
}

/// Reads `token v1 .. vD` lines. A category resolves to its own token when
/// present (spaces may also be written as `_`); otherwise to the mean of the
/// vectors of its whitespace-separated words.
pub fn read_embeddings(reader: impl BufRead, vocab: &Vocabulary, source: &str) -> Result<EmbeddingTable> {
    let mut wanted: HashSet<String> = HashSet::new();
    for name in vocab.object_names() {
        for key in lookup_keys(name) {
            wanted.insert(key);
        }
        for word in name.split_whitespace() {
            wanted.insert(word.to_owned());
            wanted.insert(word.to_lowercase());
        }
    }

    let mut dim: Option<usize> = None;
    let mut words: HashMap<String, Vec<f64>> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::parse(format!("{source}:{lineno}"), e.to_string()))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        match dim {
            None if values.is_empty() => {
                return Err(Error::parse(format!("{source}:{lineno}"), "token has no vector"));
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    format!("{source}:{lineno}"),
                    format!("dimension {} differs from {d} on earlier lines", values.len()),
                ));
            }
            Some(_) => {}
        }
        if !wanted.contains(token) || words.contains_key(token) {
            continue;
        }
        let vector = values
            .iter()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::parse(format!("{source}:{lineno}"), "invalid or non-finite number"))?;
        words.insert(token.to_owned(), vector);
    }
    let dim = dim.ok_or_else(|| Error::parse(source, "no embeddings in file"))?;

    let mut vectors = Vec::with_capacity(vocab.num_objects());
    let mut missing = Vec::new();
    for name in vocab.object_names() {
        if let Some(v) = lookup_keys(name).iter().find_map(|k| words.get(k)) {
            vectors.push(v.clone());
            continue;
        }
        let parts: Vec<&Vec<f64>> = name
            .split_whitespace()
            .filter_map(|w| words.get(w).or_else(|| words.get(&w.to_lowercase())))
            .collect();
        if parts.is_empty() {
            missing.push(name.clone());
            vectors.push(Vec::new());
            continue;
        }
        let mut mean = vec![0.0; dim];
        for p in &parts {
            for (m, x) in mean.iter_mut().zip(p.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= parts.len() as f64);
        vectors.push(mean);
    }
    if !missing.is_empty() {
        return Err(Error::parse(
            source,
            format!("no embedding for categories: {}", missing.join(", ")),
        ));
    }
    EmbeddingTable::new(vectors).map_err(|e| Error::parse(source, e.to_string()))
}

fn lookup_keys(name: &str) -> Vec<String> {
    let underscored = name.split_whitespace().collect::<Vec<_>>().join("_");
    vec![
        name.to_owned(),
        underscored.clone(),
        name.to_lowercase(),
        underscored.to_lowercase(),
    ]
}

// ---------------------------------------------------------------------------
// predictions

#[derive(Deserialize)]
struct RawPrediction {
    image_id: RawId,
    #[serde(default)]
    object_scores: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    object_labels: Option<Vec<Label>>,
    #[serde(default)]
    pairs: Vec<RawPair>,
    #[serde(default)]
    boxes: Option<Vec<[f64; 4]>>,
}

#[derive(Deserialize)]
struct RawPair {
    subject: usize,
    object: usize,
    predicate_scores: Vec<f64>,
}

pub fn load_predictions(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<PredictedGraph>> {
    let path = path.as_ref();
    read_predictions(open(path)?, vocab, &source_name(path))
}

/// Reads prediction lines. `object_labels` (ids or names) become one-hot
/// score rows; `object_scores` are taken as given.
pub fn read_predictions(reader: impl BufRead, vocab: &Vocabulary, source: &str) -> Result<Vec<PredictedGraph>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let loc = || format!("{source}:{lineno}");
        let line = line.map_err(|e| Error::parse(loc(), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPrediction =
            serde_json::from_str(&line).map_err(|e| Error::parse(loc(), e.to_string()))?;
        let image_id = raw.image_id.into_string();
        let at = |field: &str| format!("{source}:{lineno} (image_id {image_id}) {field}");

        let object_scores = match (raw.object_scores, raw.object_labels) {
            (Some(scores), None) => scores,
            (None, Some(labels)) => {
                let mut rows = Vec::with_capacity(labels.len());
                for (i, l) in labels.iter().enumerate() {
                    let c = l
                        .resolve(|n| vocab.object_id(n), vocab.num_objects())
                        .ok_or_else(|| Error::parse(at(&format!("object_labels[{i}]")), format!("unknown label {l:?}")))?;
                    let mut row = vec![0.0; vocab.num_objects()];
                    row[c] = 1.0;
                    rows.push(row);
                }
                rows
            }
            (Some(_), Some(_)) => {
                return Err(Error::parse(at("object_scores"), "both object_scores and object_labels given"));
            }
            (None, None) => {
                return Err(Error::parse(at("object_scores"), "one of object_scores or object_labels is required"));
            }
        };
        for (i, row) in object_scores.iter().enumerate() {
            if row.len() != vocab.num_objects() {
                return Err(Error::parse(
                    at(&format!("object_scores[{i}]")),
                    format!("length {} != {} object classes", row.len(), vocab.num_objects()),
                ));
            }
        }
        for (k, p) in raw.pairs.iter().enumerate() {
            if p.predicate_scores.len() != vocab.num_predicates() {
                return Err(Error::parse(
                    at(&format!("pairs[{k}].predicate_scores")),
                    format!("length {} != {} predicate classes", p.predicate_scores.len(), vocab.num_predicates()),
                ));
            }
        }
        let boxes = match raw.boxes {
            None => None,
            Some(bs) => Some(
                bs.iter()
                    .enumerate()
                    .map(|(i, b)| {
                        BoundingBox::new(b[0], b[1], b[2], b[3])
                            .map_err(|e| Error::parse(at(&format!("boxes[{i}]")), e.to_string()))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let pairs = raw
            .pairs
            .into_iter()
            .map(|p| PairScores {
                subject: p.subject,
                object: p.object,
                scores: p.predicate_scores,
            })
            .collect();
        let pred = PredictedGraph::new(image_id.clone(), object_scores, pairs, boxes)
            .map_err(|e| Error::parse(at("pairs"), e.to_string()))?;
        out.push(pred);
    }
    Ok(out)
}

/// Writes predictions in the JSON-Lines schema accepted by [`read_predictions`].
pub fn write_predictions(preds: &[PredictedGraph], mut writer: impl Write) -> std::io::Result<()> {
    for p in preds {
        let mut obj = serde_json::json!({
            "image_id": p.image_id(),
            "object_scores": p.object_scores(),
            "pairs": p.pairs().iter().map(|q| serde_json::json!({
                "subject": q.subject,
                "object": q.object,
                "predicate_scores": q.scores,
            })).collect::<Vec<_>>(),
        });
        if let Some(boxes) = p.boxes() {
            obj["boxes"] = serde_json::json!(boxes.iter().map(BoundingBox::to_array).collect::<Vec<_>>());
        }
        serde_json::to_writer(&mut writer, &obj)?;
        writeln!(writer)?;
    }
    writer.flush()
}

// ---------------------------------------------------------------------------
// feature matrices

pub fn load_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    read_feature_matrix(open(path)?, &source_name(path))
}

/// Reads a `N D` header followed by `N` rows of `D` numbers. Rows are
/// numbered from 1 in error messages.
pub fn read_feature_matrix(reader: impl BufRead, source: &str) -> Result<FeatureSet> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(format!("{source}:header"), "file is empty"))?
        .map_err(|e| Error::parse(format!("{source}:header"), e.to_string()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(format!("{source}:header"), format!("expected `N D`, got {header:?}")))?;
    let [n, d] = dims[..] else {
        return Err(Error::parse(format!("{source}:header"), format!("expected `N D`, got {header:?}")));
    };
    if d == 0 {
        return Err(Error::parse(format!("{source}:header"), "dimension must be at least 1"));
    }

    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0usize;
    for line in lines {
        let line = line.map_err(|e| Error::parse(format!("{source}:row {}", rows + 1), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let loc = || format!("{source}:row {rows}");
        if rows > n {
            return Err(Error::parse(loc(), format!("more rows than the declared {n}")));
        }
        let before = data.len();
        for field in line.split_whitespace() {
            let x: f64 = field
                .parse()
                .map_err(|_| Error::parse(loc(), format!("invalid number {field:?}")))?;
            if !x.is_finite() {
                return Err(Error::parse(loc(), format!("non-finite value {field}")));
            }
            data.push(x);
        }
        if data.len() - before != d {
            return Err(Error::parse(loc(), format!("{} values, expected {d}", data.len() - before)));
        }
    }
    if rows != n {
        return Err(Error::parse(source, format!("header declares {n} rows, found {rows}")));
    }
    FeatureSet::from_flat(n, d, data)
}

pub fn write_feature_matrix(features: &FeatureSet, mut writer: impl Write) -> std::io::Result<()> {
    writeln!(writer, "{} {}", features.len(), features.dim())?;
    for row in features.rows() {
        let fields: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(writer, "{}", fields.join("\t"))?;
    }
    writer.flush()
}
