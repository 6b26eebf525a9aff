// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::comparison::{partition_atomic, random_values};
use super::derive::{AttributeFacts, Entailment};
use super::{check_fraction, compare_label, sample_indices, stream_rng, AttrFact, Cmp, Comparison};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexOptions {
    pub n_entities: u32,
    pub n_attributes: u32,
    pub n_values: u32,
    pub ood_fraction: f64,
    /// Probability with which each ordered (ID, ID) or (ID, OOD) pair enters training.
    pub comparison_sample_rate: f64,
    /// Test queries per label, pooled over attributes.
    pub n_test_per_label: usize,
}

impl Default for ComplexOptions {
    fn default() -> Self {
        ComplexOptions {
            n_entities: 1000,
            n_attributes: 20,
            n_values: 20,
            ood_fraction: 0.1,
            comparison_sample_rate: 0.03,
            n_test_per_label: 50,
        }
    }
}

/// Training facts of the complex task before test selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexTrainFacts {
    /// Ground truth for every `(entity, attribute)`, row-major.
    pub values: Vec<u32>,
    pub atomic_id: Vec<AttrFact>,
    /// Never trained on; used to probe whether the model infers OOD values.
    pub atomic_ood: Vec<AttrFact>,
    pub train_id_id: Vec<Comparison>,
    pub train_id_ood: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexDataset {
    pub options: ComplexOptions,
    pub seed: u64,
    pub facts: ComplexTrainFacts,
    /// OOD-OOD queries, balanced by label.
    pub test_queries: Vec<Comparison>,
}

impl ComplexDataset {
    pub fn value(&self, entity: u32, attribute: u32) -> u32 {
        self.facts.values[(entity * self.options.n_attributes + attribute) as usize]
    }

    /// Training comparisons of both kinds.
    pub fn train_comparisons(&self) -> impl Iterator<Item = &Comparison> {
        self.facts.train_id_id.iter().chain(self.facts.train_id_ood.iter())
    }

    pub fn attribute_facts(&self, attribute: u32) -> AttributeFacts {
        AttributeFacts::collect(attribute, &self.facts.atomic_id, self.train_comparisons())
    }
}

fn validate(options: &ComplexOptions) -> Result<()> {
    if options.n_entities < 2 || options.n_attributes == 0 || options.n_values == 0 {
        return Err(Error::Config("complex task needs n_entities >= 2 and positive attribute/value counts".into()));
    }
    check_fraction("ood_fraction", options.ood_fraction)?;
    if !(options.comparison_sample_rate > 0.0 && options.comparison_sample_rate <= 1.0) {
        return Err(Error::Config(format!(
            "comparison_sample_rate must lie in (0, 1], got {}",
            options.comparison_sample_rate
        )));
    }
    Ok(())
}

/// Values, atomic split and sampled training comparisons.
pub fn sample_complex_train_facts(options: &ComplexOptions, seed: u64) -> Result<ComplexTrainFacts> {
    validate(options)?;
    let (n_e, n_a) = (options.n_entities, options.n_attributes);
    let mut rng = stream_rng(seed, 4);
    let values = random_values(&mut rng, n_e, n_a, options.n_values);
    let (atomic_id, atomic_ood) = partition_atomic(&mut rng, &values, n_e, n_a, options.ood_fraction);

    let mut is_ood = vec![false; (n_e * n_a) as usize];
    for f in &atomic_ood {
        is_ood[(f.entity * n_a + f.attribute) as usize] = true;
    }
    let mut train_id_id = Vec::new();
    let mut train_id_ood = Vec::new();
    for a in 0..n_a {
        for e1 in 0..n_e {
            let ood1 = is_ood[(e1 * n_a + a) as usize];
            for e2 in 0..n_e {
                let ood2 = is_ood[(e2 * n_a + a) as usize];
                if e1 == e2 || (ood1 && ood2) {
                    continue;
                }
                if rng.gen_bool(options.comparison_sample_rate) {
                    let c = Comparison {
                        attribute: a,
                        e1,
                        e2,
                        label: compare_label(values[(e1 * n_a + a) as usize], values[(e2 * n_a + a) as usize]),
                    };
                    if ood1 || ood2 {
                        train_id_ood.push(c);
                    } else {
                        train_id_id.push(c);
                    }
                }
            }
        }
    }
    Ok(ComplexTrainFacts {
        values,
        atomic_id,
        atomic_ood,
        train_id_id,
        train_id_ood,
    })
}

/// Build the complex comparison task: OOD atomic values are withheld and
/// test queries compare two OOD entities through two ID bridges.
pub fn build_complex_dataset(options: ComplexOptions, seed: u64) -> Result<ComplexDataset> {
    let facts = sample_complex_train_facts(&options, seed)?;
    let mut rng = stream_rng(seed, 5);
    let n_a = options.n_attributes;
    let n_e = options.n_entities as usize;

    let mut by_label: [Vec<Comparison>; 3] = Default::default();
    for a in 0..n_a {
        let attr_facts = AttributeFacts::collect(
            a,
            &facts.atomic_id,
            facts.train_id_id.iter().chain(&facts.train_id_ood),
        );
        let entail = Entailment::new(&attr_facts)?;
        let ood: Vec<u32> = facts
            .atomic_ood
            .iter()
            .filter(|f| f.attribute == a)
            .map(|f| f.entity)
            .collect();
        let reach: Vec<Vec<bool>> = ood.iter().map(|&e| entail.reach_set(e, n_e)).collect();

        for (i, &e1) in ood.iter().enumerate() {
            for (j, &e2) in ood.iter().enumerate() {
                if i == j {
                    continue;
                }
                let Some(label) = derive_with_values(&entail, e1, e2) else {
                    continue;
                };
                let comparison_only = match label {
                    Cmp::Less => reach[i][e2 as usize],
                    Cmp::Greater => reach[j][e1 as usize],
                    Cmp::Equal => entail.same_eq_class(e1, e2),
                };
                if comparison_only {
                    continue;
                }
                let gold = compare_label(
                    facts.values[(e1 * n_a + a) as usize],
                    facts.values[(e2 * n_a + a) as usize],
                );
                if gold != label {
                    return Err(Error::Data(format!(
                        "attribute {a}: derived {label:?} for ({e1}, {e2}) but true label is {gold:?}"
                    )));
                }
                by_label[label.index()].push(Comparison {
                    attribute: a,
                    e1,
                    e2,
                    label,
                });
            }
        }
    }
    let mut test_queries = Vec::new();
    for cmp in Cmp::ALL {
        let pool = &by_label[cmp.index()];
        if pool.len() < options.n_test_per_label {
            return Err(Error::InsufficientQueries {
                label: cmp.name(),
                available: pool.len(),
                requested: options.n_test_per_label,
            });
        }
        for k in sample_indices(&mut rng, pool.len(), options.n_test_per_label) {
            test_queries.push(pool[k]);
        }
    }
    test_queries.sort_unstable();
    Ok(ComplexDataset {
        options,
        seed,
        facts,
        test_queries,
    })
}

/// Labels reachable only through known values (exact classes or anchors).
fn derive_with_values(entail: &Entailment, e1: u32, e2: u32) -> Option<Cmp> {
    let (b1, b2) = (entail.bounds(e1), entail.bounds(e2));
    if let (Some(x), Some(y)) = (b1.exact, b2.exact) {
        if x == y {
            return Some(Cmp::Equal);
        }
    }
    match (b1.ceiling, b2.floor, b1.floor, b2.ceiling) {
        (Some(c1), Some(f2), _, _) if c1 < f2 => Some(Cmp::Less),
        (_, _, Some(f1), Some(c2)) if f1 > c2 => Some(Cmp::Greater),
        _ => None,
    }
}
