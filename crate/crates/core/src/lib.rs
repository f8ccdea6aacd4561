//! Scene-graph augmentation and evaluation.
//!
//! Perturbs object categories of annotated scene graphs (random, semantic
//! neighbour, graph-structured and zero-shot oracle schemes), measures how
//! novel and plausible the perturbations are, and evaluates predictions with
//! triplet recall over zero-, few- and all-shot subsets.

pub mod error;
pub mod eval;
pub mod featmetrics;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod perturb;
pub mod quality;
pub mod stats;

pub use error::{Error, Result};
pub use eval::{EvalMode, EvalOptions, PairScores, PredictedGraph};
pub use featmetrics::FeatureSet;
pub use ingest::{Dataset, EmbeddingTable};
pub use model::{BoundingBox, CategoryId, ObjectNode, PredicateId, Relationship, SceneGraph, Triplet, Vocabulary};
pub use perturb::{Method, PerturbationConfig, PerturbationRecord, Resources, ZeroShotSet};
pub use stats::{ShotBucket, TripletFrequencyTable};
