// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream analysis: logit lens, rank statistics, causal tracing by
//! token replacement, circuit pruning and linear probes.
//!
//! States are addressed as `S[layer, position]` with layer 0 the embedding
//! and layer `i` the output of block `i`.

mod circuit;
mod probe;
mod trace;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::datagen::{Cmp, Comparison, Dataset, TwoHop};
use crate::model::{Batch, Model, Scalar};
use crate::vocab::{Fact, Role, TokenSequence, Vocab};
use crate::{Error, Result};

pub use circuit::{lens_annotations, prune_circuit, CircuitEdge, CircuitNode, CircuitReport, LensAnnotation};
pub use probe::{linear_probe, ProbeResult};
pub use trace::{all_sites, causal_trace, is_ancestor, perturb_example, CausalGrid, GridCell, Site, MAX_PERTURB_ATTEMPTS};

/// Logits of a residual state read through the final norm and the tied
/// unembedding, and the token ranking (descending; ties by ascending id).
pub fn logit_lens<T: Scalar>(model: &Model<T>, state: &[T]) -> Result<(Vec<T>, Vec<u32>)> {
    if state.len() != model.config.hidden_dim {
        return Err(Error::Shape(format!(
            "state has {} values, hidden_dim is {}",
            state.len(),
            model.config.hidden_dim
        )));
    }
    let logits = model.lens_logits(state);
    let order = ranking(&logits);
    Ok((logits, order))
}

/// Token ids by descending logit, ties by ascending id.
pub fn ranking<T: Scalar>(logits: &[T]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..logits.len() as u32).collect();
    order.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// 1-based rank of `token` under the same ordering as [`ranking`].
pub fn rank_of<T: Scalar>(logits: &[T], token: u32) -> usize {
    let x = logits[token as usize];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &y)| y > x || (y == x && (i as u32) < token))
        .count()
}

/// Top-1 token (lowest id on ties).
pub fn top1<T: Scalar>(logits: &[T]) -> u32 {
    crate::model::forward_argmax(logits)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Data("mrr of an empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Data("ranks are 1-based".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Recall@k over instances that each designate a set of tokens: the mean,
/// over instances, of the fraction of the set ranked within the top `k`.
/// For singleton sets this is the fraction of instances with rank ≤ k.
pub fn recall_at_k(rank_sets: &[Vec<usize>], k: usize) -> Result<f64> {
    if rank_sets.is_empty() || rank_sets.iter().any(Vec::is_empty) {
        return Err(Error::Data("recall@k needs non-empty rank sets".into()));
    }
    let total: f64 = rank_sets
        .iter()
        .map(|s| s.iter().filter(|&&r| r <= k).count() as f64 / s.len() as f64)
        .sum();
    Ok(total / rank_sets.len() as f64)
}

/// Ground truth of every fact expressible in a dataset's world, used to
/// complete perturbed inputs.
#[derive(Debug, Clone)]
pub struct TaskIndex {
    pub n_entities: u32,
    pub n_relations: u32,
    pub n_attributes: u32,
    edges: HashMap<(u32, u32), u32>,
    values: Vec<u32>,
}

impl TaskIndex {
    pub fn new(dataset: &Dataset) -> Self {
        match dataset {
            Dataset::Composition(d) => TaskIndex {
                n_entities: d.n_entities,
                n_relations: d.n_relations,
                n_attributes: 0,
                edges: d.edge_map(),
                values: Vec::new(),
            },
            Dataset::Comparison(d) => TaskIndex {
                n_entities: d.options.n_entities,
                n_relations: 0,
                n_attributes: d.options.n_attributes,
                edges: HashMap::new(),
                values: d.values.clone(),
            },
            Dataset::Complex(d) => TaskIndex {
                n_entities: d.options.n_entities,
                n_relations: 0,
                n_attributes: d.options.n_attributes,
                edges: HashMap::new(),
                values: d.facts.values.clone(),
            },
        }
    }

    pub fn object(&self, subject: u32, relation: u32) -> Option<u32> {
        self.edges.get(&(subject, relation)).copied()
    }

    pub fn value(&self, entity: u32, attribute: u32) -> Option<u32> {
        if entity >= self.n_entities || attribute >= self.n_attributes {
            return None;
        }
        self.values.get((entity * self.n_attributes + attribute) as usize).copied()
    }

    /// Bridge entity of a two-hop fact.
    pub fn bridge(&self, f: &TwoHop) -> Option<u32> {
        self.object(f.head, f.r1)
    }

    /// The fact with its answer recomputed from its inputs; `None` when the
    /// inputs name no fact of the world.
    pub fn complete(&self, fact: &Fact) -> Option<Fact> {
        Some(match *fact {
            Fact::Atomic(mut t) => {
                t.object = self.object(t.subject, t.relation)?;
                Fact::Atomic(t)
            }
            Fact::TwoHop(mut f) => {
                let b = self.object(f.head, f.r1)?;
                f.tail = self.object(b, f.r2)?;
                Fact::TwoHop(f)
            }
            Fact::Attribute(mut f) => {
                f.value = self.value(f.entity, f.attribute)?;
                Fact::Attribute(f)
            }
            Fact::Comparison(c) => {
                if c.e1 == c.e2 {
                    return None;
                }
                let (v1, v2) = (self.value(c.e1, c.attribute)?, self.value(c.e2, c.attribute)?);
                let label = match v1.cmp(&v2) {
                    std::cmp::Ordering::Less => Cmp::Less,
                    std::cmp::Ordering::Equal => Cmp::Equal,
                    std::cmp::Ordering::Greater => Cmp::Greater,
                };
                Fact::Comparison(Comparison { label, ..c })
            }
        })
    }
}

/// Symbols whose rank is tracked through the logit lens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensTarget {
    /// Bridge entity of a two-hop fact.
    Bridge,
    Head,
    Relation1,
    Relation2,
    /// Gold answer.
    Answer,
    /// Value of the first compared entity.
    Value1,
    Value2,
    /// The three label tokens of the compared attribute.
    LabelSpace,
}

impl LensTarget {
    pub const ALL: [LensTarget; 8] = [
        LensTarget::Bridge,
        LensTarget::Head,
        LensTarget::Relation1,
        LensTarget::Relation2,
        LensTarget::Answer,
        LensTarget::Value1,
        LensTarget::Value2,
        LensTarget::LabelSpace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LensTarget::Bridge => "bridge",
            LensTarget::Head => "head",
            LensTarget::Relation1 => "r1",
            LensTarget::Relation2 => "r2",
            LensTarget::Answer => "answer",
            LensTarget::Value1 => "v1",
            LensTarget::Value2 => "v2",
            LensTarget::LabelSpace => "label_space",
        }
    }

    pub fn parse(s: &str) -> Option<LensTarget> {
        LensTarget::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Designated tokens of `fact`, or `None` if the target does not apply.
    pub fn tokens(self, fact: &Fact, index: &TaskIndex, vocab: &Vocab) -> Option<Vec<u32>> {
        let ent = |e: u32| vocab.entity(e).ok().map(<[u32]>::to_vec);
        match (self, fact) {
            (LensTarget::Bridge, Fact::TwoHop(f)) => ent(index.bridge(f)?),
            (LensTarget::Head, Fact::TwoHop(f)) => ent(f.head),
            (LensTarget::Head, Fact::Atomic(t)) => ent(t.subject),
            (LensTarget::Relation1, Fact::TwoHop(f)) => Some(vec![vocab.relation(f.r1).ok()?]),
            (LensTarget::Relation2, Fact::TwoHop(f)) => Some(vec![vocab.relation(f.r2).ok()?]),
            (LensTarget::Answer, f) => vocab.encode(f).ok().map(|s| s.target),
            (LensTarget::Value1, Fact::Comparison(c)) => Some(vec![vocab.value(index.value(c.e1, c.attribute)?).ok()?]),
            (LensTarget::Value2, Fact::Comparison(c)) => Some(vec![vocab.value(index.value(c.e2, c.attribute)?).ok()?]),
            (LensTarget::LabelSpace, Fact::Comparison(c)) => Some(vocab.label_tokens(c.attribute).to_vec()),
            _ => None,
        }
    }
}

/// Residual states of encoded examples sharing one layout.
pub struct StateSet<T> {
    pub seqs: Vec<TokenSequence>,
    pub cache: crate::model::ActivationCache<T>,
}

/// Run the inputs of `facts` (which must share a layout) and keep every
/// residual state.
pub fn collect_states<T: Scalar>(model: &Model<T>, vocab: &Vocab, facts: &[Fact]) -> Result<StateSet<T>> {
    let seqs: Vec<TokenSequence> = facts.iter().map(|f| vocab.encode(f)).collect::<Result<_>>()?;
    let out = model.forward(&Batch::from_inputs(&seqs)?, true, &[])?;
    Ok(StateSet {
        seqs,
        cache: out.cache.expect("capture requested"),
    })
}

/// Per-example lens ranks of the designated tokens at `S[layer, role]`.
/// Examples where the target does not apply are left out.
pub fn lens_ranks<T: Scalar>(
    model: &Model<T>,
    states: &StateSet<T>,
    facts: &[Fact],
    layer: usize,
    role: Role,
    target: LensTarget,
    index: &TaskIndex,
    vocab: &Vocab,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (s, (seq, fact)) in states.seqs.iter().zip(facts).enumerate() {
        let Some(pos) = seq.position(role) else {
            return Err(Error::Data(format!("role {} absent from {:?} facts", role.name(), seq.kind)));
        };
        let Some(tokens) = target.tokens(fact, index, vocab) else { continue };
        let logits = model.lens_logits(states.cache.state(layer, s, pos));
        out.push(tokens.iter().map(|&t| rank_of(&logits, t)).collect());
    }
    Ok(out)
}

/// MRR with the best-ranked designated token of each instance.
pub fn mrr_of_sets(rank_sets: &[Vec<usize>]) -> Result<f64> {
    let best: Vec<usize> = rank_sets.iter().filter_map(|s| s.iter().min().copied()).collect();
    mrr(&best)
}

/// A lens statistic at one site, for CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensStat {
    pub metric: String,
    pub layer: usize,
    pub position: usize,
    pub role: String,
    pub value: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

/// MRR and Recall@3 of `target` at `S[layer, role]` for every layer.
pub fn lens_profile<T: Scalar>(
    model: &Model<T>,
    states: &StateSet<T>,
    facts: &[Fact],
    role: Role,
    target: LensTarget,
    index: &TaskIndex,
    vocab: &Vocab,
) -> Result<Vec<LensStat>> {
    let mut out = Vec::new();
    let Some(position) = states.seqs.first().and_then(|s| s.position(role)) else {
        return Ok(out);
    };
    for layer in 0..=model.config.n_layers {
        let sets = lens_ranks(model, states, facts, layer, role, target, index, vocab)?;
        if sets.is_empty() {
            continue;
        }
        let skipped = facts.len() - sets.len();
        for (metric, value) in [("mrr", mrr_of_sets(&sets)?), ("recall@3", recall_at_k(&sets, 3)?)] {
            out.push(LensStat {
                metric: format!("{metric}:{}", target.name()),
                layer,
                position,
                role: role.name().to_string(),
                value,
                n_used: sets.len(),
                n_skipped: skipped,
            });
        }
    }
    Ok(out)
}

/// `# comment` line (when given) plus the site CSV layout shared by lens
/// statistics: `step,metric,layer,position,role,value,n_used,n_skipped`.
pub fn lens_csv(rows: &[(u64, LensStat)], comment: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(c) = comment {
        s.push_str(&format!("# {c}\n"));
    }
    s.push_str("step,metric,layer,position,role,value,n_used,n_skipped\n");
    for (step, r) in rows {
        s.push_str(&format!(
            "{step},{},{},{},{},{:.6},{},{}\n",
            r.metric, r.layer, r.position, r.role, r.value, r.n_used, r.n_skipped
        ));
    }
    s
}

/// Group facts by encoded layout so each group can run as one batch.
pub fn group_by_layout(vocab: &Vocab, facts: &[Fact]) -> Result<BTreeMap<(usize, usize), Vec<Fact>>> {
    let mut g: BTreeMap<(usize, usize), Vec<Fact>> = BTreeMap::new();
    for f in facts {
        let s = vocab.encode(f)?;
        g.entry((s.input.len(), s.target.len())).or_default().push(*f);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_composition_dataset, gen_knowledge_graph, CompositionOptions};
    use crate::model::{init_model, ModelConfig};
    use crate::vocab::{build_vocab, VocabMode, VocabSpec};

    #[test]
    fn rank_metrics() {
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0]).is_err());
        assert_eq!(recall_at_k(&[vec![1], vec![3], vec![4]], 3).unwrap(), 2.0 / 3.0);
        assert_eq!(recall_at_k(&[vec![1, 2, 3]], 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[vec![1, 2, 9]], 3).unwrap(), 2.0 / 3.0);
        assert!(recall_at_k(&[], 3).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let l = [0.5f32, 2.0, 0.5, 2.0, -1.0];
        assert_eq!(ranking(&l), vec![1, 3, 0, 2, 4]);
        for (r, &t) in ranking(&l).iter().enumerate() {
            assert_eq!(rank_of(&l, t), r + 1);
        }
        assert_eq!(top1(&l), 1);
    }

    #[test]
    fn lens_matches_independent_recomputation() {
        let cfg = ModelConfig::new(2, 16, 2, 4, 23);
        let mut m: Model<f64> = init_model(&cfg, 5).unwrap();
        for (i, x) in m.params.iter_mut().enumerate() {
            *x += ((i * 7919) % 97) as f64 / 97.0 - 0.5;
        }
        let state: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let (logits, order) = logit_lens(&m, &state).unwrap();
        // Norm then product with the tied embedding, written out longhand.
        let mean = state.iter().sum::<f64>() / 16.0;
        let var = state.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
        let g = m.tensor("lnf_g").unwrap();
        let b = m.tensor("lnf_b").unwrap();
        let h: Vec<f64> = (0..16).map(|i| (state[i] - mean) / (var + 1e-5).sqrt() * g[i] + b[i]).collect();
        let wte = m.tensor("wte").unwrap();
        for t in 0..23 {
            let want: f64 = (0..16).map(|i| h[i] * wte[t * 16 + i]).sum();
            assert!((logits[t] - want).abs() < 1e-10);
        }
        assert_eq!(order[0], top1(&logits));
        assert!(logit_lens(&m, &state[..8]).is_err());
    }

    #[test]
    fn final_layer_lens_is_the_prediction() {
        let g = gen_knowledge_graph(40, 6, 4, 3).unwrap();
        let d = build_composition_dataset(&g, CompositionOptions { phi: 1.0, test_size: 10, ..Default::default() }, 3).unwrap();
        let ds = Dataset::Composition(d);
        let vocab = build_vocab(VocabSpec::for_dataset(&ds), VocabMode::Single, 0).unwrap();
        let m: Model<f32> = init_model(&ModelConfig::new(2, 16, 2, 4, vocab.size()), 2).unwrap();
        let Dataset::Composition(d) = &ds else { unreachable!() };
        let facts: Vec<Fact> = d.train_inferred_id.iter().take(20).copied().map(Fact::TwoHop).collect();
        let states = collect_states(&m, &vocab, &facts).unwrap();
        let refs: Vec<&TokenSequence> = states.seqs.iter().collect();
        let greedy = m.greedy(&refs).unwrap();
        for (s, seq) in states.seqs.iter().enumerate() {
            let (_, order) = logit_lens(&m, states.cache.state(2, s, seq.answer_index())).unwrap();
            assert_eq!(order[0], greedy[s][0]);
        }
        let index = TaskIndex::new(&ds);
        let prof = lens_profile(&m, &states, &facts, Role::R1, LensTarget::Bridge, &index, &vocab).unwrap();
        assert_eq!(prof.len(), 2 * 3);
        assert!(prof.iter().all(|p| (0.0..=1.0).contains(&p.value) && p.n_used == 20));
    }

    #[test]
    fn task_index_completes_facts() {
        let g = gen_knowledge_graph(40, 6, 4, 3).unwrap();
        let d = build_composition_dataset(&g, CompositionOptions { phi: 1.0, test_size: 10, ..Default::default() }, 3).unwrap();
        let ds = Dataset::Composition(d.clone());
        let index = TaskIndex::new(&ds);
        for f in d.train_inferred_id.iter().chain(&d.test_inferred_ood) {
            let mut blank = *f;
            blank.tail = u32::MAX;
            assert_eq!(index.complete(&Fact::TwoHop(blank)), Some(Fact::TwoHop(*f)));
        }
    }
}
