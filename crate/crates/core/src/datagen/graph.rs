// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_indices, stream_rng, Triple};
use crate::{Error, Result};

/// Random knowledge graph where every subject has `out_degree` edges with
/// pairwise distinct relations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub n_entities: u32,
    pub n_relations: u32,
    pub out_degree: u32,
    pub seed: u64,
    /// Sorted by `(subject, relation)`.
    pub edges: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Object of `(subject, relation)` if that edge exists.
    pub fn object(&self, subject: u32, relation: u32) -> Option<u32> {
        let d = self.out_degree as usize;
        let start = subject as usize * d;
        let row = self.edges.get(start..start + d)?;
        row.binary_search_by_key(&relation, |t| t.relation)
            .ok()
            .map(|i| row[i].object)
    }

    /// Outgoing edges of `subject`.
    pub fn out_edges(&self, subject: u32) -> &[Triple] {
        let d = self.out_degree as usize;
        let start = subject as usize * d;
        &self.edges[start..start + d]
    }
}

/// Generate a graph whose objects are drawn uniformly from the other entities.
pub fn gen_knowledge_graph(
    n_entities: u32,
    n_relations: u32,
    out_degree: u32,
    seed: u64,
) -> Result<KnowledgeGraph> {
    if n_entities < 2 {
        return Err(Error::Config(format!("n_entities must be >= 2, got {n_entities}")));
    }
    if out_degree > n_relations {
        return Err(Error::Config(format!(
            "out_degree {out_degree} exceeds n_relations {n_relations}: distinct relations per subject are impossible"
        )));
    }
    let mut rng = stream_rng(seed, 1);
    let mut edges = Vec::with_capacity(n_entities as usize * out_degree as usize);
    for subject in 0..n_entities {
        let mut rels = sample_indices(&mut rng, n_relations as usize, out_degree as usize);
        rels.sort_unstable();
        for r in rels {
            let mut object = rng.gen_range(0..n_entities - 1);
            if object >= subject {
                object += 1;
            }
            edges.push(Triple::new(subject, r as u32, object));
        }
    }
    Ok(KnowledgeGraph {
        n_entities,
        n_relations,
        out_degree,
        seed,
        edges,
    })
}
