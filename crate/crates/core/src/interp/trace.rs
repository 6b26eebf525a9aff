// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing by input-token replacement and activation patching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{top1, TaskIndex};
use crate::datagen::stream_rng;
use crate::model::{Batch, Intervention, Model, Scalar};
use crate::optim::epoch_seed;
use crate::vocab::{Fact, Role, TokenSequence, Vocab, VocabMode};
use crate::{Error, Result};

pub const MAX_PERTURB_ATTEMPTS: usize = 50;

/// A residual-stream site `S[layer, position]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub position: usize,
}

impl Site {
    pub fn new(layer: usize, position: usize) -> Self {
        Site { layer, position }
    }
}

/// Whether `site` can influence `target` under the causal mask: the same
/// position at the same or a later layer, or an earlier position at a
/// strictly later layer.
pub fn is_ancestor(site: Site, target: Site) -> bool {
    (site.position == target.position && site.layer <= target.layer)
        || (site.position < target.position && site.layer < target.layer)
}

/// Replace the input symbol at `position` by a random symbol of the same
/// type so that the result is a fact of the world with a different answer.
///
/// With two-token entities only the token at `position` changes: the
/// replacement entity shares the other name token. Returns `None` after
/// [`MAX_PERTURB_ATTEMPTS`] failed draws.
pub fn perturb_example(
    fact: &Fact,
    position: usize,
    index: &TaskIndex,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<Option<(Fact, TokenSequence)>> {
    let seq = vocab.encode(fact)?;
    let Some(&role) = seq.roles.get(position) else {
        return Err(Error::Data(format!("position {position} is not an input position of a {:?} fact", seq.kind)));
    };
    let entity_at = |e: u32| -> Result<(usize, Vec<u32>)> {
        // Which token of the entity sits at `position`, and the candidates
        // sharing the other token.
        let first = seq.roles.iter().position(|&r| r == role).unwrap();
        let k = position - first;
        let toks = vocab.entity(e)?.to_vec();
        let cands: Vec<u32> = match vocab.mode {
            VocabMode::Single => (0..index.n_entities).collect(),
            VocabMode::Multi { .. } => (0..index.n_entities)
                .filter(|&c| {
                    let t = vocab.entity(c).unwrap();
                    (0..t.len()).all(|j| j == k || t[j] == toks[j])
                })
                .collect(),
        };
        Ok((k, cands))
    };
    let candidates: Vec<u32> = match (role, fact) {
        (Role::H, Fact::Atomic(t)) => entity_at(t.subject)?.1,
        (Role::H, Fact::TwoHop(f)) => entity_at(f.head)?.1,
        (Role::E, Fact::Attribute(f)) => entity_at(f.entity)?.1,
        (Role::E1, Fact::Comparison(c)) => entity_at(c.e1)?.1,
        (Role::E2, Fact::Comparison(c)) => entity_at(c.e2)?.1,
        (Role::R | Role::R1 | Role::R2, _) => (0..index.n_relations).collect(),
        (Role::A, _) => (0..index.n_attributes).collect(),
        _ => return Err(Error::Data(format!("cannot perturb role {}", role.name()))),
    };
    if candidates.is_empty() {
        return Ok(None);
    }
    for _ in 0..MAX_PERTURB_ATTEMPTS {
        let c = candidates[rng.gen_range(0..candidates.len())];
        let draft = match (role, *fact) {
            (Role::H, Fact::Atomic(mut t)) => {
                t.subject = c;
                Fact::Atomic(t)
            }
            (Role::R, Fact::Atomic(mut t)) => {
                t.relation = c;
                Fact::Atomic(t)
            }
            (Role::H, Fact::TwoHop(mut f)) => {
                f.head = c;
                Fact::TwoHop(f)
            }
            (Role::R1, Fact::TwoHop(mut f)) => {
                f.r1 = c;
                Fact::TwoHop(f)
            }
            (Role::R2, Fact::TwoHop(mut f)) => {
                f.r2 = c;
                Fact::TwoHop(f)
            }
            (Role::E, Fact::Attribute(mut f)) => {
                f.entity = c;
                Fact::Attribute(f)
            }
            (Role::A, Fact::Attribute(mut f)) => {
                f.attribute = c;
                Fact::Attribute(f)
            }
            (Role::A, Fact::Comparison(mut x)) => {
                x.attribute = c;
                Fact::Comparison(x)
            }
            (Role::E1, Fact::Comparison(mut x)) => {
                x.e1 = c;
                Fact::Comparison(x)
            }
            (Role::E2, Fact::Comparison(mut x)) => {
                x.e2 = c;
                Fact::Comparison(x)
            }
            _ => return Err(Error::Data(format!("role {} does not belong to {:?}", role.name(), fact.kind()))),
        };
        let Some(done) = index.complete(&draft) else { continue };
        let new_seq = vocab.encode(&done)?;
        let changed = new_seq.input.iter().zip(&seq.input).filter(|(a, b)| a != b).count();
        if changed != 1 || new_seq.input[position] == seq.input[position] {
            continue;
        }
        // Label tokens are attribute-specific, so an attribute swap always
        // changes the target token; require a different label as well.
        let same_answer = match (&done, fact) {
            (Fact::Comparison(a), Fact::Comparison(b)) => a.label == b.label,
            _ => new_seq.target == seq.target,
        };
        if same_answer {
            continue;
        }
        return Ok(Some((done, new_seq)));
    }
    Ok(None)
}

/// Causal strength of one site on the target state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub site: Site,
    /// Fraction of usable examples whose target top-1 flips when the site
    /// is patched with its perturbed-run activation; `None` without usable
    /// examples.
    pub strength: Option<f64>,
    pub n_used: usize,
    pub n_skipped: usize,
    /// False when the site cannot reach the target; such cells are still
    /// computed (and are 0) but flagged.
    pub downstream: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGrid {
    pub target: Site,
    pub n_examples: usize,
    pub seed: u64,
    /// Role of every input position.
    pub roles: Vec<Role>,
    pub cells: Vec<GridCell>,
}

impl CausalGrid {
    pub fn cell(&self, site: Site) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.site == site)
    }

    /// `layer,position,value,n_used,n_skipped,downstream` rows, preceded by
    /// `# ...` comment lines.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(c) = comment {
            s.push_str(&format!("# {c}\n"));
        }
        s.push_str(&format!(
            "# target: layer={} position={} role={}; examples={} seed={}\n",
            self.target.layer,
            self.target.position,
            self.roles.get(self.target.position).map_or("?", |r| r.name()),
            self.n_examples,
            self.seed
        ));
        let roles: Vec<&str> = self.roles.iter().map(|r| r.name()).collect();
        s.push_str(&format!("# roles: {}\n", roles.join(",")));
        s.push_str("layer,position,value,n_used,n_skipped,downstream\n");
        for c in &self.cells {
            let v = c.strength.map_or(String::new(), |v| format!("{v:.6}"));
            s.push_str(&format!(
                "{},{},{v},{},{},{}\n",
                c.site.layer, c.site.position, c.n_used, c.n_skipped, c.downstream
            ));
        }
        s
    }
}

/// Trace every site against `target` over `examples` (one fact kind and
/// layout). For each site position the input token there is perturbed;
/// an example is usable at that position when a valid perturbation exists
/// and it changes the target's lens top-1. Every site is then patched with
/// the perturbed run's activation and the flips of the target top-1 are
/// counted.
pub fn causal_trace<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    index: &TaskIndex,
    examples: &[Fact],
    sites: &[Site],
    target: Site,
    seed: u64,
) -> Result<CausalGrid> {
    if examples.is_empty() {
        return Err(Error::Data("causal tracing needs at least one example".into()));
    }
    let seqs: Vec<TokenSequence> = examples.iter().map(|f| vocab.encode(f)).collect::<Result<_>>()?;
    let input_len = seqs[0].input.len();
    if seqs.iter().any(|s| s.input.len() != input_len || s.kind != seqs[0].kind) {
        return Err(Error::Data("causal tracing examples must share one fact kind and layout".into()));
    }
    let n_layers = model.config.n_layers;
    for s in sites.iter().chain(std::iter::once(&target)) {
        if s.layer > n_layers || s.position >= input_len {
            return Err(Error::Data(format!(
                "site S[{}, {}] outside {} layers x {input_len} positions",
                s.layer, s.position, n_layers
            )));
        }
    }
    let target_top1 = |cache: &crate::model::ActivationCache<T>, s: usize| {
        top1(&model.lens_logits(cache.state(target.layer, s, target.position)))
    };

    let mut cells = Vec::with_capacity(sites.len());
    let mut positions: Vec<usize> = sites.iter().map(|s| s.position).collect();
    positions.sort_unstable();
    positions.dedup();
    for &pos in &positions {
        let mut normal_rows = Vec::new();
        let mut perturbed_rows = Vec::new();
        for (i, f) in examples.iter().enumerate() {
            let mut rng = stream_rng(epoch_seed(seed, i as u64), 100 + pos as u64);
            if let Some((_, p)) = perturb_example(f, pos, index, vocab, &mut rng)? {
                normal_rows.push(seqs[i].input.clone());
                perturbed_rows.push(p.input);
            }
        }
        let mut usable = Vec::new();
        let mut normal_top = Vec::new();
        let mut batches = None;
        if !normal_rows.is_empty() {
            let nb = Batch::from_rows(&normal_rows, 1)?;
            let normal = model.forward(&nb, true, &[])?.cache.expect("capture");
            let perturbed = model.forward(&Batch::from_rows(&perturbed_rows, 1)?, true, &[])?.cache.expect("capture");
            for s in 0..normal_rows.len() {
                let a = target_top1(&normal, s);
                normal_top.push(a);
                if target_top1(&perturbed, s) != a {
                    usable.push(s);
                }
            }
            batches = Some((nb, perturbed));
        }
        for site in sites.iter().filter(|s| s.position == pos) {
            let mut altered = 0;
            if let (Some((nb, perturbed)), false) = (&batches, usable.is_empty()) {
                let values = perturbed.site(site.layer, pos);
                let patch = [Intervention {
                    layer: site.layer,
                    position: pos,
                    values: &values,
                }];
                let patched = model.forward(nb, true, &patch)?.cache.expect("capture");
                altered = usable.iter().filter(|&&s| target_top1(&patched, s) != normal_top[s]).count();
            }
            let n_used = usable.len();
            cells.push(GridCell {
                site: *site,
                strength: (n_used > 0).then(|| altered as f64 / n_used as f64),
                n_used,
                n_skipped: examples.len() - n_used,
                downstream: is_ancestor(*site, target),
            });
        }
    }
    cells.sort_by_key(|c| (c.site.layer, c.site.position));
    Ok(CausalGrid {
        target,
        n_examples: examples.len(),
        seed,
        roles: seqs[0].roles.clone(),
        cells,
    })
}

/// Every `(layer, position)` site of a model over `input_len` positions.
pub fn all_sites(n_layers: usize, input_len: usize) -> Vec<Site> {
    (0..=n_layers)
        .flat_map(|l| (0..input_len).map(move |p| Site::new(l, p)))
        .collect()
}
