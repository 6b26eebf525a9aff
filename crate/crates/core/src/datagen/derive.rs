// SPDX-License-Identifier: MIT OR Apache-2.0

//! Entailment over comparison facts.
//!
//! Facts for one attribute are the known atomic values plus comparison facts.
//! The rules are value comparison (two known values yield a label), symmetry,
//! and transitivity of a single label. Two query forms are answered:
//!
//! * full: every rule may be used;
//! * comparison-only: atomic values are ignored, only symmetry and
//!   transitivity over the comparison facts.
//!
//! Full `<` entailment between `x` and `z` holds iff a pure `<` chain links
//! them, or `ceiling(x) < floor(z)`, where `ceiling(x)` is the smallest known
//! value reachable upward from `x` along `<` chains and `floor(z)` the largest
//! known value reachable downward from `z`. `=` entailment holds iff the two
//! equality classes coincide or pin the same known value. `<` and `=` are
//! never mixed inside one chain.

use std::collections::{HashMap, VecDeque};

use super::{AttrFact, Cmp, Comparison};
use crate::{Error, Result};

/// Training facts of one attribute.
#[derive(Debug, Clone, Default)]
pub struct AttributeFacts {
    pub attribute: u32,
    /// Entities whose atomic value is part of the facts.
    pub known: HashMap<u32, u32>,
    pub comparisons: Vec<Comparison>,
}

impl AttributeFacts {
    /// Keep the facts of `attribute` out of mixed fact lists.
    pub fn collect<'a>(
        attribute: u32,
        atomic: impl IntoIterator<Item = &'a AttrFact>,
        comparisons: impl IntoIterator<Item = &'a Comparison>,
    ) -> Self {
        AttributeFacts {
            attribute,
            known: atomic
                .into_iter()
                .filter(|f| f.attribute == attribute)
                .map(|f| (f.entity, f.value))
                .collect(),
            comparisons: comparisons
                .into_iter()
                .filter(|c| c.attribute == attribute)
                .copied()
                .collect(),
        }
    }
}

/// What the training facts pin down about one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DerivabilityBounds {
    /// Largest known value at or below the entity along `<` chains
    /// (strictly below for entities without a known value).
    pub floor: Option<u32>,
    /// Smallest known value at or above the entity along `<` chains.
    pub ceiling: Option<u32>,
    /// Value fixed through an equality chain to a known entity.
    pub exact: Option<u32>,
    /// The entity's own atomic value is among the facts.
    pub known: bool,
}

impl DerivabilityBounds {
    /// Tightest closed lower bound implied by `<` chains; `None` is −∞.
    pub fn lower(&self) -> Option<i64> {
        match (self.known, self.floor) {
            (true, f) => f.map(i64::from),
            (false, f) => f.map(|v| i64::from(v) + 1),
        }
    }

    /// Tightest closed upper bound implied by `<` chains; `None` is +∞.
    pub fn upper(&self) -> Option<i64> {
        match (self.known, self.ceiling) {
            (true, c) => c.map(i64::from),
            (false, c) => c.map(|v| i64::from(v) - 1),
        }
    }
}

/// Precomputed entailment structure for one attribute's facts.
#[derive(Debug, Clone)]
pub struct Entailment {
    attribute: u32,
    index: HashMap<u32, usize>,
    entities: Vec<u32>,
    bounds: Vec<DerivabilityBounds>,
    /// `less[i]` holds every `j` with a fact `i < j`.
    less: Vec<Vec<usize>>,
    eq_class: Vec<usize>,
}

impl Entailment {
    pub fn new(facts: &AttributeFacts) -> Result<Self> {
        let mut index: HashMap<u32, usize> = HashMap::new();
        let mut entities = Vec::new();
        let mut intern = |e: u32, entities: &mut Vec<u32>| -> usize {
            *index.entry(e).or_insert_with(|| {
                entities.push(e);
                entities.len() - 1
            })
        };
        let mut known_list: Vec<(u32, u32)> = facts.known.iter().map(|(&e, &v)| (e, v)).collect();
        known_list.sort_unstable();
        for &(e, _) in &known_list {
            intern(e, &mut entities);
        }
        let mut lt_edges = Vec::new();
        let mut eq_edges = Vec::new();
        for c in &facts.comparisons {
            let a = intern(c.e1, &mut entities);
            let b = intern(c.e2, &mut entities);
            match c.label {
                Cmp::Less => lt_edges.push((a, b)),
                Cmp::Greater => lt_edges.push((b, a)),
                Cmp::Equal => eq_edges.push((a, b)),
            }
        }
        let n = entities.len();
        let mut less = vec![Vec::new(); n];
        let mut greater = vec![Vec::new(); n];
        for &(a, b) in &lt_edges {
            less[a].push(b);
            greater[b].push(a);
        }
        for l in less.iter_mut().chain(greater.iter_mut()) {
            l.sort_unstable();
            l.dedup();
        }

        let mut bounds = vec![DerivabilityBounds::default(); n];
        for &(e, v) in &known_list {
            let i = index[&e];
            bounds[i] = DerivabilityBounds {
                floor: Some(v),
                ceiling: Some(v),
                exact: Some(v),
                known: true,
            };
        }
        let own: Vec<Option<u32>> = bounds.iter().map(|b| b.exact).collect();
        let ceiling = propagate(&own, &greater, |cur, new| new < cur);
        let floor = propagate(&own, &less, |cur, new| new > cur);

        let eq_class = union_find(n, &eq_edges);
        let mut class_value: HashMap<usize, u32> = HashMap::new();
        for &(e, v) in &known_list {
            let c = eq_class[index[&e]];
            if let Some(&prev) = class_value.get(&c) {
                if prev != v {
                    return Err(Error::Contradiction {
                        attribute: facts.attribute,
                        entity: e,
                        detail: format!("equality chain joins known values {prev} and {v}"),
                    });
                }
            }
            class_value.insert(c, v);
        }

        for i in 0..n {
            let b = &mut bounds[i];
            b.ceiling = ceiling[i];
            b.floor = floor[i];
            if !b.known {
                b.exact = class_value.get(&eq_class[i]).copied();
            }
            let entity = entities[i];
            let contradiction = |detail: String| Error::Contradiction {
                attribute: facts.attribute,
                entity,
                detail,
            };
            if let (Some(lo), Some(hi)) = (b.lower(), b.upper()) {
                if lo > hi {
                    return Err(contradiction(format!("lower bound {lo} exceeds upper bound {hi}")));
                }
            }
            if let Some(x) = b.exact {
                let x = i64::from(x);
                if b.lower().is_some_and(|lo| x < lo) || b.upper().is_some_and(|hi| x > hi) {
                    return Err(contradiction(format!(
                        "exact value {x} outside [{:?}, {:?}]",
                        b.lower(),
                        b.upper()
                    )));
                }
            }
        }

        Ok(Entailment {
            attribute: facts.attribute,
            index,
            entities,
            bounds,
            less,
            eq_class,
        })
    }

    pub fn attribute(&self) -> u32 {
        self.attribute
    }

    pub fn bounds(&self, entity: u32) -> DerivabilityBounds {
        self.index
            .get(&entity)
            .map(|&i| self.bounds[i])
            .unwrap_or_default()
    }

    pub fn bounds_map(&self) -> HashMap<u32, DerivabilityBounds> {
        self.entities
            .iter()
            .zip(&self.bounds)
            .map(|(&e, &b)| (e, b))
            .collect()
    }

    /// Label entailed for `(e1, e2)` using every rule.
    pub fn derive(&self, e1: u32, e2: u32) -> Option<Cmp> {
        if e1 == e2 {
            return None;
        }
        let (b1, b2) = (self.bounds(e1), self.bounds(e2));
        if let (Some(x), Some(y)) = (b1.exact, b2.exact) {
            if x == y {
                return Some(Cmp::Equal);
            }
        }
        if let (Some(c), Some(f)) = (b1.ceiling, b2.floor) {
            if c < f {
                return Some(Cmp::Less);
            }
        }
        if let (Some(f), Some(c)) = (b1.floor, b2.ceiling) {
            if f > c {
                return Some(Cmp::Greater);
            }
        }
        self.derive_eq3_only(e1, e2)
    }

    /// Label entailed for `(e1, e2)` by symmetry and transitivity over the
    /// comparison facts alone.
    pub fn derive_eq3_only(&self, e1: u32, e2: u32) -> Option<Cmp> {
        let (&i, &j) = (self.index.get(&e1)?, self.index.get(&e2)?);
        if i == j {
            return None;
        }
        if self.eq_class[i] == self.eq_class[j] {
            return Some(Cmp::Equal);
        }
        if self.reaches(i, j) {
            return Some(Cmp::Less);
        }
        if self.reaches(j, i) {
            return Some(Cmp::Greater);
        }
        None
    }

    /// Every entity reachable from `e` along one or more `<` facts.
    pub fn reachable_above(&self, e: u32) -> Vec<u32> {
        let Some(&start) = self.index.get(&e) else {
            return Vec::new();
        };
        let seen = self.bfs(start);
        let mut out: Vec<u32> = (0..seen.len())
            .filter(|&k| seen[k] && k != start)
            .map(|k| self.entities[k])
            .collect();
        out.sort_unstable();
        out
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        self.bfs(from)[to]
    }

    fn bfs(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.entities.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            for &w in &self.less[u] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// Bitset of entities reachable from `e` by `<` chains, indexed by entity id.
    pub(crate) fn reach_set(&self, e: u32, n_entities: usize) -> Vec<bool> {
        let mut out = vec![false; n_entities];
        if let Some(&start) = self.index.get(&e) {
            for (k, s) in self.bfs(start).into_iter().enumerate() {
                if s && k != start {
                    out[self.entities[k] as usize] = true;
                }
            }
        }
        out
    }

    /// Whether `e1` and `e2` share an equality class of the comparison facts.
    pub(crate) fn same_eq_class(&self, e1: u32, e2: u32) -> bool {
        match (self.index.get(&e1), self.index.get(&e2)) {
            (Some(&i), Some(&j)) => self.eq_class[i] == self.eq_class[j],
            _ => false,
        }
    }
}

/// Push known values along `edges` until no bound improves.
fn propagate(own: &[Option<u32>], edges: &[Vec<usize>], better: impl Fn(u32, u32) -> bool) -> Vec<Option<u32>> {
    let mut best = own.to_vec();
    let mut queue: VecDeque<usize> = (0..own.len()).filter(|&i| own[i].is_some()).collect();
    let mut queued: Vec<bool> = own.iter().map(Option::is_some).collect();
    while let Some(u) = queue.pop_front() {
        queued[u] = false;
        let v = best[u].expect("queued nodes carry a bound");
        for &w in &edges[u] {
            let improves = match best[w] {
                None => true,
                Some(cur) => better(cur, v),
            };
            if improves {
                best[w] = Some(v);
                if !queued[w] {
                    queued[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    best
}

fn union_find(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

/// Per-entity bounds implied by one attribute's training facts.
pub fn derivable_bounds(facts: &AttributeFacts) -> Result<HashMap<u32, DerivabilityBounds>> {
    Ok(Entailment::new(facts)?.bounds_map())
}

/// Label of `(e1, e2)` entailed by all rules, if any.
pub fn derivable_full(facts: &AttributeFacts, e1: u32, e2: u32) -> Result<Option<Cmp>> {
    Ok(Entailment::new(facts)?.derive(e1, e2))
}

/// Whether `(e1, e2)` is entailed by symmetry and transitivity over the
/// comparison facts alone, ignoring every atomic value.
pub fn derivable_eq3_only(facts: &AttributeFacts, e1: u32, e2: u32) -> bool {
    let comparisons_only = AttributeFacts {
        attribute: facts.attribute,
        known: HashMap::new(),
        comparisons: facts.comparisons.clone(),
    };
    Entailment::new(&comparisons_only)
        .map(|e| e.derive_eq3_only(e1, e2).is_some())
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmp(e1: u32, label: Cmp, e2: u32) -> Comparison {
        Comparison { attribute: 0, e1, e2, label }
    }

    fn facts(known: &[(u32, u32)], comparisons: &[Comparison]) -> AttributeFacts {
        AttributeFacts {
            attribute: 0,
            known: known.iter().copied().collect(),
            comparisons: comparisons.to_vec(),
        }
    }

    #[test]
    fn equality_pins_exact_value() {
        let f = facts(&[(10, 7)], &[cmp(1, Cmp::Equal, 10)]);
        assert_eq!(derivable_bounds(&f).unwrap()[&1].exact, Some(7));
    }

    #[test]
    fn strict_inequality_gives_closed_upper_bound() {
        let f = facts(&[(10, 3)], &[cmp(1, Cmp::Less, 10)]);
        let b = derivable_bounds(&f).unwrap()[&1];
        assert_eq!((b.lower(), b.upper()), (None, Some(2)));
        assert_eq!(b.exact, None);
    }

    #[test]
    fn two_bridges_give_less() {
        // e1 < b1 (3), e2 > b2 (5)
        let f = facts(&[(10, 3), (11, 5)], &[cmp(1, Cmp::Less, 10), cmp(2, Cmp::Greater, 11)]);
        let b = derivable_bounds(&f).unwrap();
        assert_eq!(b[&1].upper(), Some(2));
        assert_eq!(b[&2].lower(), Some(6));
        assert_eq!(derivable_full(&f, 1, 2).unwrap(), Some(Cmp::Less));
        assert_eq!(derivable_full(&f, 2, 1).unwrap(), Some(Cmp::Greater));
        assert!(!derivable_eq3_only(&f, 1, 2));
    }

    #[test]
    fn shared_bridge_is_comparison_only() {
        let f = facts(&[(10, 3)], &[cmp(1, Cmp::Less, 10), cmp(10, Cmp::Less, 2)]);
        assert!(derivable_eq3_only(&f, 1, 2));
        assert_eq!(derivable_full(&f, 1, 2).unwrap(), Some(Cmp::Less));
    }

    #[test]
    fn unlinked_entities_are_not_derivable() {
        let f = facts(&[], &[cmp(1, Cmp::Less, 10), cmp(2, Cmp::Less, 11)]);
        assert!(!derivable_eq3_only(&f, 1, 2));
        assert_eq!(derivable_full(&f, 1, 2).unwrap(), None);
    }

    #[test]
    fn equal_anchor_values_do_not_entail_order() {
        // e1 < b1 (4), e2 > b2 (4): no rule chain orders e1 and e2.
        let f = facts(&[(10, 4), (11, 4)], &[cmp(1, Cmp::Less, 10), cmp(2, Cmp::Greater, 11)]);
        assert_eq!(derivable_full(&f, 1, 2).unwrap(), None);
        // Mixing '=' with '<' is not a rule either.
        let f = facts(&[(10, 3), (11, 5)], &[cmp(1, Cmp::Equal, 10), cmp(2, Cmp::Greater, 11)]);
        assert_eq!(derivable_full(&f, 1, 2).unwrap(), None);
    }

    #[test]
    fn equality_through_two_known_bridges() {
        let f = facts(&[(10, 6), (11, 6)], &[cmp(1, Cmp::Equal, 10), cmp(11, Cmp::Equal, 2)]);
        assert_eq!(derivable_full(&f, 1, 2).unwrap(), Some(Cmp::Equal));
        assert!(!derivable_eq3_only(&f, 1, 2));
    }

    #[test]
    fn contradictions_are_reported() {
        let f = facts(&[(10, 3), (11, 5)], &[cmp(1, Cmp::Less, 10), cmp(1, Cmp::Greater, 11)]);
        assert!(matches!(derivable_bounds(&f), Err(Error::Contradiction { .. })));
        let f = facts(&[(10, 3), (11, 5)], &[cmp(1, Cmp::Equal, 10), cmp(1, Cmp::Equal, 11)]);
        assert!(derivable_bounds(&f).is_err());
    }

    #[test]
    fn chains_through_unknown_entities() {
        // 1 < 2 < b(5) and b'(2) < 3 < 4
        let f = facts(
            &[(10, 5), (11, 2)],
            &[cmp(1, Cmp::Less, 2), cmp(2, Cmp::Less, 10), cmp(11, Cmp::Less, 3), cmp(3, Cmp::Less, 4)],
        );
        let b = derivable_bounds(&f).unwrap();
        assert_eq!(b[&1].ceiling, Some(5));
        assert_eq!(b[&4].floor, Some(2));
        assert_eq!(derivable_full(&f, 4, 1).unwrap(), None);
        assert_eq!(derivable_full(&f, 11, 1).unwrap(), None);
        assert_eq!(derivable_full(&f, 3, 10).unwrap(), None);
        assert_eq!(derivable_full(&f, 11, 10).unwrap(), Some(Cmp::Less));
    }
}
