//! Scene-graph data model.
//!
//! A [`SceneGraph`] is a set of labeled, boxed object nodes joined by directed
//! predicate edges. Categories and predicates are integer ids into a shared
//! [`Vocabulary`]. Everything here is immutable once constructed; the
//! perturbation code works on clones.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub type CategoryId = usize;
pub type PredicateId = usize;

/// Object-category and predicate name lists, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    object_names: Vec<String>,
    predicate_names: Vec<String>,
    object_index: HashMap<String, CategoryId>,
    predicate_index: HashMap<String, PredicateId>,
}

impl Vocabulary {
    pub fn new(object_names: Vec<String>, predicate_names: Vec<String>) -> Result<Self> {
        let object_index = index_names("objects", &object_names)?;
        let predicate_index = index_names("predicates", &predicate_names)?;
        Ok(Self {
            object_names,
            predicate_names,
            object_index,
            predicate_index,
        })
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    pub fn predicate_names(&self) -> &[String] {
        &self.predicate_names
    }

    pub fn num_objects(&self) -> usize {
        self.object_names.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_names.len()
    }

    pub fn object_id(&self, name: &str) -> Option<CategoryId> {
        self.object_index.get(name).copied()
    }

    pub fn predicate_id(&self, name: &str) -> Option<PredicateId> {
        self.predicate_index.get(name).copied()
    }

    pub fn object_name(&self, id: CategoryId) -> &str {
        &self.object_names[id]
    }

    pub fn predicate_name(&self, id: PredicateId) -> &str {
        &self.predicate_names[id]
    }

    /// Renders a triplet as `"subject predicate object"`.
    pub fn phrase(&self, t: &Triplet) -> String {
        format!(
            "{} {} {}",
            self.object_name(t.subject),
            self.predicate_name(t.predicate),
            self.object_name(t.object)
        )
    }
}

fn index_names(field: &str, names: &[String]) -> Result<HashMap<String, usize>> {
    if names.is_empty() {
        return Err(Error::Validation(format!("vocabulary `{field}` is empty")));
    }
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if name.trim().is_empty() {
            return Err(Error::Validation(format!(
                "vocabulary `{field}`[{i}] is an empty name"
            )));
        }
        if index.insert(name.clone(), i).is_some() {
            return Err(Error::Validation(format!(
                "vocabulary `{field}` has duplicate name {name:?}"
            )));
        }
    }
    Ok(index)
}

/// Axis-aligned box in corner format, pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Validation(format!(
                "box {coords:?} has a negative or non-finite coordinate"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Validation(format!("box {coords:?} is degenerate")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectNode {
    pub category: CategoryId,
    pub bbox: BoundingBox,
}

/// Directed edge `subject --predicate--> object` between node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Relationship {
    pub subject: usize,
    pub predicate: PredicateId,
    pub object: usize,
}

/// Categorical triplet (composition): node identities dropped, categories kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: CategoryId,
    pub predicate: PredicateId,
    pub object: CategoryId,
}

impl Triplet {
    pub fn new(subject: CategoryId, predicate: PredicateId, object: CategoryId) -> Self {
        Self {
            subject,
            predicate,
            object,
        }
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    image_id: String,
    width: u32,
    height: u32,
    nodes: Vec<ObjectNode>,
    edges: Vec<Relationship>,
}

impl SceneGraph {
    /// Builds a graph, checking edge indices and rejecting self-loops.
    /// Category and predicate ranges are checked by [`SceneGraph::validate`].
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        nodes: Vec<ObjectNode>,
        edges: Vec<Relationship>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "image size {width}x{height} must be positive"
            )));
        }
        let n = nodes.len();
        for (k, e) in edges.iter().enumerate() {
            if e.subject >= n || e.object >= n {
                return Err(Error::Validation(format!(
                    "relationships[{k}] references node {} but graph has {n} nodes",
                    e.subject.max(e.object)
                )));
            }
            if e.subject == e.object {
                return Err(Error::Validation(format!(
                    "relationships[{k}] is a self-loop on node {}",
                    e.subject
                )));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            width,
            height,
            nodes,
            edges,
        })
    }

    /// Checks category and predicate ids against `vocab`.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.category >= vocab.num_objects() {
                return Err(Error::Validation(format!(
                    "objects[{i}] category {} out of range (vocabulary has {})",
                    node.category,
                    vocab.num_objects()
                )));
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.predicate >= vocab.num_predicates() {
                return Err(Error::Validation(format!(
                    "relationships[{k}] predicate {} out of range (vocabulary has {})",
                    e.predicate,
                    vocab.num_predicates()
                )));
            }
        }
        Ok(())
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn nodes(&self) -> &[ObjectNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Relationship] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn category(&self, node: usize) -> CategoryId {
        self.nodes[node].category
    }

    /// In-degree plus out-degree of `node`.
    pub fn degree(&self, node: usize) -> Result<usize> {
        if node >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "node {node} out of range for graph with {} nodes",
                self.nodes.len()
            )));
        }
        Ok(self
            .edges
            .iter()
            .map(|e| usize::from(e.subject == node) + usize::from(e.object == node))
            .sum())
    }

    /// Degrees of all nodes in one pass.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for e in &self.edges {
            deg[e.subject] += 1;
            deg[e.object] += 1;
        }
        deg
    }

    /// Indices of edges touching `node` in either role, in edge order.
    pub fn incident_edges(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.subject == node || e.object == node)
            .map(|(k, _)| k)
    }

    pub fn triplet_of(&self, edge: usize) -> Triplet {
        let e = &self.edges[edge];
        Triplet::new(
            self.nodes[e.subject].category,
            e.predicate,
            self.nodes[e.object].category,
        )
    }

    /// One categorical triplet per edge, in edge order (multiplicity kept).
    pub fn categorical_triplets(&self) -> Vec<Triplet> {
        (0..self.edges.len()).map(|k| self.triplet_of(k)).collect()
    }

    pub(crate) fn set_category(&mut self, node: usize, category: CategoryId) {
        self.nodes[node].category = category;
    }

    /// Same graph with only the edges for which `keep` returns true.
    pub(crate) fn retain_edges(&self, mut keep: impl FnMut(&Relationship) -> bool) -> Self {
        Self {
            edges: self.edges.iter().copied().filter(|e| keep(e)).collect(),
            ..self.clone()
        }
    }
}
