// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_fraction, compare_label, sample_indices, stream_rng, AttrFact, Comparison};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOptions {
    pub n_entities: u32,
    pub n_attributes: u32,
    pub n_values: u32,
    pub ood_fraction: f64,
    pub phi: f64,
    /// Cap on the ID and OOD test samples.
    pub test_size: usize,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        ComparisonOptions {
            n_entities: 1000,
            n_attributes: 20,
            n_values: 20,
            ood_fraction: 0.1,
            phi: 7.2,
            test_size: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDataset {
    pub options: ComparisonOptions,
    pub seed: u64,
    /// Row-major `entity * n_attributes + attribute`.
    pub values: Vec<u32>,
    pub atomic_id: Vec<AttrFact>,
    pub atomic_ood: Vec<AttrFact>,
    pub train_inferred_id: Vec<Comparison>,
    pub test_inferred_id: Vec<Comparison>,
    pub test_inferred_ood: Vec<Comparison>,
}

impl ComparisonDataset {
    pub fn value(&self, entity: u32, attribute: u32) -> u32 {
        self.values[entity as usize * self.options.n_attributes as usize + attribute as usize]
    }

    pub fn phi(&self) -> f64 {
        self.options.phi
    }

    pub fn atomic(&self) -> impl Iterator<Item = &AttrFact> {
        self.atomic_id.iter().chain(self.atomic_ood.iter())
    }

    pub fn label(&self, attribute: u32, e1: u32, e2: u32) -> Comparison {
        Comparison {
            attribute,
            e1,
            e2,
            label: compare_label(self.value(e1, attribute), self.value(e2, attribute)),
        }
    }
}

/// Draw a value table, partition its atomic facts, and sample comparisons.
pub fn build_comparison_dataset(options: ComparisonOptions, seed: u64) -> Result<ComparisonDataset> {
    let ComparisonOptions {
        n_entities,
        n_attributes,
        n_values,
        ..
    } = options;
    if n_entities < 2 || n_attributes == 0 || n_values == 0 {
        return Err(Error::Config(format!(
            "need n_entities >= 2 and positive attribute/value counts, got ({n_entities}, {n_attributes}, {n_values})"
        )));
    }
    check_fraction("ood_fraction", options.ood_fraction)?;

    let mut rng = stream_rng(seed, 3);
    let values = random_values(&mut rng, n_entities, n_attributes, n_values);
    let (atomic_id, atomic_ood) = partition_atomic(&mut rng, &values, n_entities, n_attributes, options.ood_fraction);

    let id_space = PairSpace::new(&atomic_id, n_attributes);
    let ood_space = PairSpace::new(&atomic_ood, n_attributes);
    let label = |a: u32, e1: u32, e2: u32| Comparison {
        attribute: a,
        e1,
        e2,
        label: compare_label(
            values[(e1 * n_attributes + a) as usize],
            values[(e2 * n_attributes + a) as usize],
        ),
    };

    let n_train = (options.phi * atomic_id.len() as f64).round() as usize;
    if n_train > id_space.len() {
        return Err(Error::PhiTooLarge {
            requested: options.phi,
            max_feasible: id_space.len() as f64 / atomic_id.len().max(1) as f64,
        });
    }
    let n_test = options.test_size.min(id_space.len() - n_train);
    let picked = sample_indices(&mut rng, id_space.len(), n_train + n_test);
    let mut train_inferred_id: Vec<Comparison> = picked[..n_train]
        .iter()
        .map(|&i| id_space.pair(i))
        .map(|(a, e1, e2)| label(a, e1, e2))
        .collect();
    let mut test_inferred_id: Vec<Comparison> = picked[n_train..]
        .iter()
        .map(|&i| id_space.pair(i))
        .map(|(a, e1, e2)| label(a, e1, e2))
        .collect();
    let n_ood = options.test_size.min(ood_space.len());
    let mut test_inferred_ood: Vec<Comparison> = sample_indices(&mut rng, ood_space.len(), n_ood)
        .into_iter()
        .map(|i| ood_space.pair(i))
        .map(|(a, e1, e2)| label(a, e1, e2))
        .collect();
    train_inferred_id.sort_unstable();
    test_inferred_id.sort_unstable();
    test_inferred_ood.sort_unstable();

    Ok(ComparisonDataset {
        options,
        seed,
        values,
        atomic_id,
        atomic_ood,
        train_inferred_id,
        test_inferred_id,
        test_inferred_ood,
    })
}

pub(crate) fn random_values(rng: &mut impl Rng, n_entities: u32, n_attributes: u32, n_values: u32) -> Vec<u32> {
    (0..n_entities as usize * n_attributes as usize)
        .map(|_| rng.gen_range(1..=n_values))
        .collect()
}

/// Randomly move `ood_fraction` of all `(e, a, v)` facts into the OOD split.
pub(crate) fn partition_atomic(
    rng: &mut rand_chacha::ChaCha8Rng,
    values: &[u32],
    n_entities: u32,
    n_attributes: u32,
    ood_fraction: f64,
) -> (Vec<AttrFact>, Vec<AttrFact>) {
    let all: Vec<AttrFact> = (0..n_entities)
        .flat_map(|e| {
            (0..n_attributes).map(move |a| AttrFact {
                entity: e,
                attribute: a,
                value: values[(e * n_attributes + a) as usize],
            })
        })
        .collect();
    let n_ood = (ood_fraction * all.len() as f64).round() as usize;
    let order = sample_indices(rng, all.len(), all.len());
    let mut ood: Vec<AttrFact> = order[..n_ood].iter().map(|&i| all[i]).collect();
    let mut id: Vec<AttrFact> = order[n_ood..].iter().map(|&i| all[i]).collect();
    ood.sort_unstable();
    id.sort_unstable();
    (id, ood)
}

/// Index space over ordered within-attribute entity pairs `(e1, e2)`, `e1 != e2`,
/// restricted to the entities listed for each attribute.
struct PairSpace {
    members: Vec<Vec<u32>>,
    offsets: Vec<usize>,
}

impl PairSpace {
    fn new(facts: &[AttrFact], n_attributes: u32) -> Self {
        let mut members = vec![Vec::new(); n_attributes as usize];
        for f in facts {
            members[f.attribute as usize].push(f.entity);
        }
        let mut offsets = Vec::with_capacity(members.len() + 1);
        let mut total = 0usize;
        offsets.push(0);
        for m in &mut members {
            m.sort_unstable();
            let n = m.len();
            total += n * n.saturating_sub(1);
            offsets.push(total);
        }
        PairSpace { members, offsets }
    }

    fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn pair(&self, index: usize) -> (u32, u32, u32) {
        let a = self.offsets.partition_point(|&o| o <= index) - 1;
        let local = index - self.offsets[a];
        let m = &self.members[a];
        let n1 = m.len() - 1;
        let i = local / n1;
        let r = local % n1;
        let j = if r < i { r } else { r + 1 };
        (a as u32, m[i], m[j])
    }
}
