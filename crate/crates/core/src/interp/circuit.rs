// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit extraction from causal grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{mrr_of_sets, rank_of, top1, CausalGrid, LensTarget, Site, StateSet, TaskIndex};
use crate::model::{Model, Scalar};
use crate::vocab::{Fact, Vocab};
use crate::Result;

/// What the logit lens reads at a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensAnnotation {
    pub site: Site,
    /// Most frequent top-1 symbols with their frequency.
    pub top_tokens: Vec<(String, f64)>,
    /// MRR of designated symbols (best-ranked token per instance).
    pub mrr: Vec<(String, f64)>,
}

/// Lens annotations of every site over the examples held in `states`.
pub fn lens_annotations<T: Scalar>(
    model: &Model<T>,
    states: &StateSet<T>,
    facts: &[Fact],
    sites: &[Site],
    targets: &[LensTarget],
    index: &TaskIndex,
    vocab: &Vocab,
) -> Result<Vec<LensAnnotation>> {
    let mut out = Vec::with_capacity(sites.len());
    for &site in sites {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut ranks: BTreeMap<LensTarget, Vec<Vec<usize>>> = BTreeMap::new();
        for (s, fact) in facts.iter().enumerate() {
            let logits = model.lens_logits(states.cache.state(site.layer, s, site.position));
            *counts.entry(top1(&logits)).or_default() += 1;
            for &t in targets {
                if let Some(tokens) = t.tokens(fact, index, vocab) {
                    ranks.entry(t).or_default().push(tokens.iter().map(|&k| rank_of(&logits, k)).collect());
                }
            }
        }
        let mut top: Vec<(u32, usize)> = counts.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out.push(LensAnnotation {
            site,
            top_tokens: top
                .iter()
                .take(3)
                .map(|&(t, n)| (vocab.token_symbol(t), n as f64 / facts.len() as f64))
                .collect(),
            mrr: ranks
                .iter()
                .map(|(t, r)| Ok((t.name().to_string(), mrr_of_sets(r)?)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitNode {
    pub site: Site,
    pub role: String,
    pub lens: Option<LensAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitEdge {
    pub from: Site,
    pub to: Site,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitReport {
    pub tau: f64,
    pub nodes: Vec<CircuitNode>,
    pub edges: Vec<CircuitEdge>,
    /// The unpruned grids the circuit was read from.
    pub grids: Vec<CausalGrid>,
}

/// Keep the edges `site -> target` of every grid whose site can reach the
/// target and whose strength is at least `tau`; nodes are the endpoints of
/// surviving edges, annotated with lens statistics when available.
pub fn prune_circuit(grids: &[CausalGrid], lens: &[LensAnnotation], tau: f64) -> CircuitReport {
    let mut edges = Vec::new();
    let mut roles: BTreeMap<Site, String> = BTreeMap::new();
    for g in grids {
        let role = |p: usize| g.roles.get(p).map_or("?".to_string(), |r| r.name().to_string());
        for c in &g.cells {
            if !c.downstream || c.site == g.target {
                continue;
            }
            let Some(s) = c.strength else { continue };
            if s >= tau {
                edges.push(CircuitEdge {
                    from: c.site,
                    to: g.target,
                    strength: s,
                });
                roles.insert(c.site, role(c.site.position));
                roles.insert(g.target, role(g.target.position));
            }
        }
    }
    edges.sort_by(|a, b| (a.to, a.from).cmp(&(b.to, b.from)));
    let used: BTreeSet<Site> = edges.iter().flat_map(|e| [e.from, e.to]).collect();
    let nodes = used
        .into_iter()
        .map(|site| CircuitNode {
            site,
            role: roles[&site].clone(),
            lens: lens.iter().find(|a| a.site == site).cloned(),
        })
        .collect();
    CircuitReport {
        tau,
        nodes,
        edges,
        grids: grids.to_vec(),
    }
}

fn node_label(n: &CircuitNode) -> String {
    let mut s = format!("S[{},{}]", n.site.layer, n.role);
    if let Some(l) = &n.lens {
        if let Some((tok, f)) = l.top_tokens.first() {
            let _ = write!(s, " ~ {tok} ({:.0}%)", f * 100.0);
        }
        for (name, v) in &l.mrr {
            let _ = write!(s, " mrr({name})={v:.2}");
        }
    }
    s
}

impl CircuitReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("circuit (tau = {})\nnodes:\n", self.tau);
        for n in &self.nodes {
            let _ = writeln!(s, "  {}", node_label(n));
        }
        s.push_str("edges:\n");
        let role = |site: Site| self.nodes.iter().find(|n| n.site == site).map_or("?", |n| n.role.as_str());
        for e in &self.edges {
            let _ = writeln!(
                s,
                "  S[{},{}] -> S[{},{}]  {:.3}",
                e.from.layer,
                role(e.from),
                e.to.layer,
                role(e.to),
                e.strength
            );
        }
        s
    }

    /// Graphviz rendering; layers increase upwards.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph circuit {\n  rankdir=BT;\n  node [shape=box, fontname=\"monospace\"];\n");
        let id = |site: Site| format!("s{}_{}", site.layer, site.position);
        for n in &self.nodes {
            let _ = writeln!(s, "  {} [label=\"{}\"];", id(n.site), node_label(n).replace('"', "'"));
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "  {} -> {} [label=\"{:.2}\", penwidth={:.1}];",
                id(e.from),
                id(e.to),
                e.strength,
                1.0 + 3.0 * e.strength
            );
        }
        s.push_str("}\n");
        s
    }
}
