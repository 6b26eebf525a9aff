// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic fact generators for the composition, comparison and complex
//! comparison tasks, together with the rule engines used to deduce inferred
//! facts and to decide which queries are derivable from a training set.
//!
//! Entities, relations and attributes are dense `u32` ids starting at zero.
//! Attribute values are ordinals in `1..=n_values`.

mod comparison;
mod complex;
mod composition;
mod derive;
mod graph;
pub mod io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use comparison::{build_comparison_dataset, ComparisonDataset, ComparisonOptions};
pub use complex::{build_complex_dataset, sample_complex_train_facts, ComplexDataset, ComplexOptions, ComplexTrainFacts};
pub use composition::{build_composition_dataset, deduce_compositions, CompositionDataset, CompositionOptions};
pub use derive::{derivable_bounds, derivable_eq3_only, derivable_full, AttributeFacts, DerivabilityBounds, Entailment};
pub use graph::{gen_knowledge_graph, KnowledgeGraph};
pub use io::{load_dataset, serialize_dataset, serialize_dataset_with_config, Dataset};

/// `(subject, relation, object)` edge of a knowledge graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
}

impl Triple {
    pub fn new(subject: u32, relation: u32, object: u32) -> Self {
        Triple {
            subject,
            relation,
            object,
        }
    }
}

/// Two-hop composition `(head, r1, r2, tail)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TwoHop {
    pub head: u32,
    pub r1: u32,
    pub r2: u32,
    pub tail: u32,
}

/// `(entity, attribute, value)` atomic fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttrFact {
    pub entity: u32,
    pub attribute: u32,
    pub value: u32,
}

/// Comparative relation between two attribute values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cmp {
    Less,
    Equal,
    Greater,
}

impl Cmp {
    pub const ALL: [Cmp; 3] = [Cmp::Less, Cmp::Equal, Cmp::Greater];

    pub fn flip(self) -> Cmp {
        match self {
            Cmp::Less => Cmp::Greater,
            Cmp::Equal => Cmp::Equal,
            Cmp::Greater => Cmp::Less,
        }
    }

    /// Position inside an attribute's three-token label space.
    pub fn index(self) -> usize {
        match self {
            Cmp::Less => 0,
            Cmp::Equal => 1,
            Cmp::Greater => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Cmp> {
        Cmp::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Cmp::Less => "lt",
            Cmp::Equal => "eq",
            Cmp::Greater => "gt",
        }
    }
}

/// `(attribute, e1, e2, label)` comparison fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Comparison {
    pub attribute: u32,
    pub e1: u32,
    pub e2: u32,
    pub label: Cmp,
}

impl Comparison {
    /// The same fact read in the opposite direction.
    pub fn reversed(self) -> Comparison {
        Comparison {
            attribute: self.attribute,
            e1: self.e2,
            e2: self.e1,
            label: self.label.flip(),
        }
    }
}

/// Label of `(a, e1, e2, ?)` given the two attribute values.
pub fn compare_label(v1: u32, v2: u32) -> Cmp {
    match v1.cmp(&v2) {
        std::cmp::Ordering::Less => Cmp::Less,
        std::cmp::Ordering::Equal => Cmp::Equal,
        std::cmp::Ordering::Greater => Cmp::Greater,
    }
}

/// Deterministic RNG for one named sub-stream of a generator seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniformly sample `k` distinct indices from `0..n` in random order.
pub(crate) fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.shuffle(rng);
    idx
}

pub(crate) fn check_fraction(name: &str, x: f64) -> crate::Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(crate::Error::Config(format!("{name} must lie in (0, 1), got {x}")));
    }
    Ok(())
}
