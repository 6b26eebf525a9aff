// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{check_fraction, sample_indices, stream_rng, KnowledgeGraph, Triple, TwoHop};
use crate::{Error, Result};

/// Two-hop composition: every `(h, r1, b)` and `(b, r2, t)` yields `(h, r1, r2, t)`.
///
/// Output is sorted and free of duplicates. Conflicting tails for the same
/// `(h, r1, r2)` are all kept.
pub fn deduce_compositions(atomic: &[Triple]) -> Vec<TwoHop> {
    let mut out_edges: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    for t in atomic {
        out_edges.entry(t.subject).or_default().push((t.relation, t.object));
    }
    let mut inferred = Vec::new();
    for first in atomic {
        if let Some(second) = out_edges.get(&first.object) {
            for &(r2, tail) in second {
                inferred.push(TwoHop {
                    head: first.subject,
                    r1: first.relation,
                    r2,
                    tail,
                });
            }
        }
    }
    inferred.sort_unstable();
    inferred.dedup();
    inferred
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionOptions {
    /// Fraction of edges moved to `atomic_ood`.
    pub ood_fraction: f64,
    /// `|train_inferred_id| / |atomic_id|`.
    pub phi: f64,
    /// Size of the uniform sample of unseen ID inferred facts kept for testing.
    pub test_size: usize,
    /// Generation fails if fewer OOD two-hop facts exist.
    pub min_ood_inferred: usize,
}

impl Default for CompositionOptions {
    fn default() -> Self {
        CompositionOptions {
            ood_fraction: 0.05,
            phi: 7.2,
            test_size: 3000,
            min_ood_inferred: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionDataset {
    pub n_entities: u32,
    pub n_relations: u32,
    pub out_degree: u32,
    pub graph_seed: u64,
    pub seed: u64,
    pub options: CompositionOptions,
    pub atomic_id: Vec<Triple>,
    pub atomic_ood: Vec<Triple>,
    pub train_inferred_id: Vec<TwoHop>,
    pub test_inferred_id: Vec<TwoHop>,
    pub test_inferred_ood: Vec<TwoHop>,
}

impl CompositionDataset {
    pub fn phi(&self) -> f64 {
        self.options.phi
    }

    /// All atomic facts (the training set contains both ID and OOD atomics).
    pub fn atomic(&self) -> impl Iterator<Item = &Triple> {
        self.atomic_id.iter().chain(self.atomic_ood.iter())
    }

    /// `(subject, relation) -> object` over every edge of the graph.
    pub fn edge_map(&self) -> HashMap<(u32, u32), u32> {
        self.atomic().map(|t| ((t.subject, t.relation), t.object)).collect()
    }
}

/// Split a graph into ID/OOD atomic facts and sample the inferred splits.
pub fn build_composition_dataset(
    graph: &KnowledgeGraph,
    options: CompositionOptions,
    seed: u64,
) -> Result<CompositionDataset> {
    check_fraction("ood_fraction", options.ood_fraction)?;
    if !(options.phi >= 0.0) {
        return Err(Error::Config(format!("phi must be >= 0, got {}", options.phi)));
    }
    let mut rng = stream_rng(seed, 2);

    let n_edges = graph.edges.len();
    let n_ood = (options.ood_fraction * n_edges as f64).round() as usize;
    let order = sample_indices(&mut rng, n_edges, n_edges);
    let mut atomic_ood: Vec<Triple> = order[..n_ood].iter().map(|&i| graph.edges[i]).collect();
    let mut atomic_id: Vec<Triple> = order[n_ood..].iter().map(|&i| graph.edges[i]).collect();
    atomic_ood.sort_unstable();
    atomic_id.sort_unstable();

    let inferred_id = deduce_compositions(&atomic_id);
    assert_functional(&inferred_id)?;
    let n_train = (options.phi * atomic_id.len() as f64).round() as usize;
    if n_train > inferred_id.len() {
        return Err(Error::PhiTooLarge {
            requested: options.phi,
            max_feasible: inferred_id.len() as f64 / atomic_id.len().max(1) as f64,
        });
    }
    let n_test = options.test_size.min(inferred_id.len() - n_train);
    let picked = sample_indices(&mut rng, inferred_id.len(), n_train + n_test);
    let mut train_inferred_id: Vec<TwoHop> = picked[..n_train].iter().map(|&i| inferred_id[i]).collect();
    let mut test_inferred_id: Vec<TwoHop> = picked[n_train..].iter().map(|&i| inferred_id[i]).collect();
    train_inferred_id.sort_unstable();
    test_inferred_id.sort_unstable();

    let test_inferred_ood = deduce_compositions(&atomic_ood);
    if test_inferred_ood.len() < options.min_ood_inferred.max(1) {
        return Err(Error::Data(format!(
            "only {} OOD two-hop facts exist, at least {} required",
            test_inferred_ood.len(),
            options.min_ood_inferred.max(1)
        )));
    }

    Ok(CompositionDataset {
        n_entities: graph.n_entities,
        n_relations: graph.n_relations,
        out_degree: graph.out_degree,
        graph_seed: graph.seed,
        seed,
        options,
        atomic_id,
        atomic_ood,
        train_inferred_id,
        test_inferred_id,
        test_inferred_ood,
    })
}

/// `(h, r1, r2)` must determine the tail; the generator makes relations
/// functional per subject so a violation is a bug upstream.
fn assert_functional(sorted: &[TwoHop]) -> Result<()> {
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.head, a.r1, a.r2) == (b.head, b.r1, b.r2) {
            return Err(Error::Data(format!(
                "two-hop query ({}, {}, {}) has conflicting tails {} and {}",
                a.head, a.r1, a.r2, a.tail, b.tail
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_knowledge_graph;
    use std::collections::HashSet;

    fn pairwise_join(atomic: &[Triple]) -> Vec<TwoHop> {
        let mut out = Vec::new();
        for a in atomic {
            for b in atomic {
                if a.object == b.subject {
                    out.push(TwoHop {
                        head: a.subject,
                        r1: a.relation,
                        r2: b.relation,
                        tail: b.object,
                    });
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    #[test]
    fn single_chain() {
        let atomic = [Triple::new(0, 1, 1), Triple::new(1, 2, 2)];
        assert_eq!(
            deduce_compositions(&atomic),
            vec![TwoHop { head: 0, r1: 1, r2: 2, tail: 2 }]
        );
    }

    #[test]
    fn no_second_hop() {
        assert!(deduce_compositions(&[Triple::new(0, 1, 1)]).is_empty());
    }

    #[test]
    fn conflicting_tails_are_kept() {
        // (0, r0) reaches two bridges, so (0, r0, r1) has two tails.
        let atomic = [
            Triple::new(0, 0, 1),
            Triple::new(0, 0, 2),
            Triple::new(1, 1, 3),
            Triple::new(2, 1, 4),
        ];
        let out = deduce_compositions(&atomic);
        assert_eq!(out.len(), 2);
        assert!(assert_functional(&out).is_err());
    }

    #[test]
    fn matches_pairwise_join_on_random_graph() {
        let g = gen_knowledge_graph(50, 10, 4, 5).unwrap();
        assert_eq!(deduce_compositions(&g.edges), pairwise_join(&g.edges));
    }

    #[test]
    fn split_counts_follow_parameters() {
        let g = gen_knowledge_graph(200, 40, 10, 1).unwrap();
        let opts = CompositionOptions { phi: 3.0, ..Default::default() };
        let d = build_composition_dataset(&g, opts, 1).unwrap();
        assert_eq!(d.atomic_ood.len(), 100);
        assert_eq!(d.atomic_id.len(), 1900);
        assert_eq!(d.train_inferred_id.len(), 5700);
        assert_eq!(d.test_inferred_id.len(), 3000);

        let id: HashSet<_> = d.atomic_id.iter().copied().collect();
        let ood: HashSet<_> = d.atomic_ood.iter().copied().collect();
        assert!(id.is_disjoint(&ood));
        assert_eq!(id.len() + ood.len(), g.edges.len());

        let train: HashSet<_> = d.train_inferred_id.iter().collect();
        assert!(d.test_inferred_id.iter().all(|f| !train.contains(f)));

        let witnessed = |f: &TwoHop, src: &HashSet<Triple>| {
            src.iter().any(|a| {
                a.subject == f.head
                    && a.relation == f.r1
                    && src.contains(&Triple::new(a.object, f.r2, f.tail))
            })
        };
        for f in d.train_inferred_id.iter().chain(&d.test_inferred_id).take(300) {
            assert!(witnessed(f, &id));
        }
        for f in &d.test_inferred_ood {
            assert!(witnessed(f, &ood));
        }
    }

    #[test]
    fn reference_scale_split_arithmetic() {
        let g = gen_knowledge_graph(2000, 200, 20, 0).unwrap();
        let d = build_composition_dataset(&g, CompositionOptions::default(), 0).unwrap();
        assert_eq!(d.atomic_ood.len(), 2000);
        assert_eq!(d.atomic_id.len(), 38_000);
        assert_eq!(d.train_inferred_id.len(), 273_600);
    }

    #[test]
    fn infeasible_phi_reports_maximum() {
        let g = gen_knowledge_graph(30, 10, 2, 2).unwrap();
        let opts = CompositionOptions { phi: 50.0, ..Default::default() };
        match build_composition_dataset(&g, opts, 0) {
            Err(Error::PhiTooLarge { max_feasible, .. }) => assert!(max_feasible < 50.0),
            other => panic!("expected PhiTooLarge, got {other:?}"),
        }
    }
}
