// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompting baselines for the complex comparison task: facts rendered as
//! English sentences, optional two-hop retrieval, direct or step-by-step
//! prompts, and a keyword answer parser.

mod endpoint;

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::LlmSection;
use crate::datagen::{stream_rng, AttrFact, Cmp, Comparison, ComplexDataset, ComplexTrainFacts};
use crate::vocab::Fact;
use crate::{Error, Result};

pub use endpoint::{
    run_baseline, BaselineOptions, BaselineReport, ChatEndpoint, GoldEcho, RandomAnswer, TranscriptRecord,
    Verdict,
};
#[cfg(feature = "http")]
pub use endpoint::HttpEndpoint;

const FIRST_NAMES: &str = include_str!("../../data/first_names.txt");
const LAST_NAMES: &str = include_str!("../../data/last_names.txt");

/// Entity id to display name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameMap {
    pub names: Vec<String>,
}

impl NameMap {
    /// Unique "First Last" names drawn without replacement from the bundled
    /// lists.
    pub fn person_names(n_entities: u32, seed: u64) -> Result<Self> {
        let first: Vec<&str> = FIRST_NAMES.lines().filter(|l| !l.is_empty()).collect();
        let last: Vec<&str> = LAST_NAMES.lines().filter(|l| !l.is_empty()).collect();
        let capacity = first.len() * last.len();
        if n_entities as usize > capacity {
            return Err(Error::Config(format!("only {capacity} bundled names for {n_entities} entities")));
        }
        let mut pairs: Vec<usize> = (0..capacity).collect();
        pairs.shuffle(&mut stream_rng(seed, 20));
        let names = pairs[..n_entities as usize]
            .iter()
            .map(|&k| format!("{} {}", first[k / last.len()], last[k % last.len()]))
            .collect();
        Ok(NameMap { names })
    }

    /// `entity_<id>` names.
    pub fn ids(n_entities: u32) -> Self {
        NameMap {
            names: (0..n_entities).map(|e| format!("entity_{e}")).collect(),
        }
    }

    pub fn name(&self, e: u32) -> Result<&str> {
        self.names
            .get(e as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("no name for entity {e}")))
    }
}

/// Words used to talk about one attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeWords {
    pub noun: String,
    pub less: String,
    pub greater: String,
    pub equal: String,
}

const NAMED_ATTRIBUTES: [[&str; 4]; 4] = [
    ["age", "younger than", "older than", "in the same age as"],
    ["height", "shorter than", "taller than", "in the same height as"],
    ["weight", "lighter than", "heavier than", "in the same weight as"],
    ["income", "poorer than", "richer than", "in the same income as"],
];

/// Words for attribute `a`; attributes past the named ones get generic
/// "lower/higher in attribute_k" phrasing.
pub fn attribute_words(a: u32) -> AttributeWords {
    if let Some([noun, less, greater, equal]) = NAMED_ATTRIBUTES.get(a as usize) {
        return AttributeWords {
            noun: noun.to_string(),
            less: less.to_string(),
            greater: greater.to_string(),
            equal: equal.to_string(),
        };
    }
    let noun = format!("attribute_{a}");
    AttributeWords {
        less: format!("lower in {noun} than"),
        greater: format!("higher in {noun} than"),
        equal: format!("in the same {noun} as"),
        noun,
    }
}

impl AttributeWords {
    pub fn relation(&self, c: Cmp) -> &str {
        match c {
            Cmp::Less => &self.less,
            Cmp::Equal => &self.equal,
            Cmp::Greater => &self.greater,
        }
    }
}

/// One sentence per fact: "The age of {name} is {value}." and
/// "{name1} is {younger than|older than|in the same age as} {name2}."
pub fn render_facts(facts: &[Fact], names: &NameMap) -> Result<Vec<String>> {
    facts
        .iter()
        .map(|f| match f {
            Fact::Attribute(a) => {
                let w = attribute_words(a.attribute);
                Ok(format!("The {} of {} is {}.", w.noun, names.name(a.entity)?, a.value))
            }
            Fact::Comparison(c) => {
                let w = attribute_words(c.attribute);
                Ok(format!("{} is {} {}.", names.name(c.e1)?, w.relation(c.label), names.name(c.e2)?))
            }
            _ => Err(Error::Data("only attribute and comparison facts can be rendered".into())),
        })
        .collect()
}

/// Training facts of one attribute as renderable facts.
pub fn attribute_context(train: &ComplexTrainFacts, attribute: u32) -> Vec<Fact> {
    train
        .atomic_id
        .iter()
        .filter(|f| f.attribute == attribute)
        .copied()
        .map(Fact::Attribute)
        .chain(
            train
                .train_id_id
                .iter()
                .chain(&train.train_id_ood)
                .filter(|c| c.attribute == attribute)
                .copied()
                .map(Fact::Comparison),
        )
        .collect()
}

/// The two-hop neighborhood of a query: comparisons touching `e1` or `e2`,
/// then every comparison and atomic fact touching an entity reached in
/// that first step (and the query entities' own atomic facts).
pub fn retrieve_two_hop(train: &ComplexTrainFacts, attribute: u32, e1: u32, e2: u32) -> Result<Vec<Fact>> {
    let comps: Vec<&Comparison> = train
        .train_id_id
        .iter()
        .chain(&train.train_id_ood)
        .filter(|c| c.attribute == attribute)
        .collect();
    let mut by_entity: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, c) in comps.iter().enumerate() {
        by_entity.entry(c.e1).or_default().push(i);
        by_entity.entry(c.e2).or_default().push(i);
    }
    for e in [e1, e2] {
        if !by_entity.contains_key(&e) {
            return Err(Error::Data(format!("entity {e} has no training comparison on attribute {attribute}")));
        }
    }
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    let mut reached: HashSet<u32> = HashSet::from([e1, e2]);
    for e in [e1, e2] {
        for &i in &by_entity[&e] {
            chosen.insert(i);
            reached.insert(comps[i].e1);
            reached.insert(comps[i].e2);
        }
    }
    for e in &reached {
        if let Some(list) = by_entity.get(e) {
            chosen.extend(list.iter().copied());
        }
    }
    let atomic: Vec<&AttrFact> = train
        .atomic_id
        .iter()
        .filter(|f| f.attribute == attribute && reached.contains(&f.entity))
        .collect();
    let mut out: Vec<Fact> = atomic.into_iter().copied().map(Fact::Attribute).collect();
    out.extend(chosen.into_iter().map(|i| Fact::Comparison(*comps[i])));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompting {
    Direct,
    Cot,
}

impl Prompting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Prompting::Direct),
            "cot" => Ok(Prompting::Cot),
            _ => Err(Error::Config(format!("prompting must be direct or cot, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptJob {
    pub id: String,
    pub query: Comparison,
    pub prompting: Prompting,
    pub retrieval: bool,
    /// Seed of the context permutation.
    pub seed: u64,
    pub context: Vec<String>,
    pub prompt: String,
    /// Names of the two query entities.
    pub names: (String, String),
}

/// Build the prompt of one query; the context lines are permuted with a
/// seed derived from `seed` and the query.
pub fn build_job(
    train: &ComplexTrainFacts,
    query: Comparison,
    names: &NameMap,
    prompting: Prompting,
    retrieval: bool,
    seed: u64,
) -> Result<PromptJob> {
    let facts = if retrieval {
        retrieve_two_hop(train, query.attribute, query.e1, query.e2)?
    } else {
        attribute_context(train, query.attribute)
    };
    let mut context = render_facts(&facts, names)?;
    let job_seed = seed ^ (u64::from(query.attribute) << 48) ^ (u64::from(query.e1) << 24) ^ u64::from(query.e2);
    context.shuffle(&mut stream_rng(job_seed, 21));
    let (n1, n2) = (names.name(query.e1)?.to_string(), names.name(query.e2)?.to_string());
    let prompt = prompt_text(&context, query.attribute, &n1, &n2, prompting);
    Ok(PromptJob {
        id: format!("a{}-e{}-e{}", query.attribute, query.e1, query.e2),
        query,
        prompting,
        retrieval,
        seed: job_seed,
        context,
        prompt,
        names: (n1, n2),
    })
}

/// The fixed prompt templates.
pub fn prompt_text(context: &[String], attribute: u32, n1: &str, n2: &str, prompting: Prompting) -> String {
    let w = attribute_words(attribute);
    let mut s = String::from("Here are some facts:\n");
    for line in context {
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(&format!(
        "\nQuestion: Based only on these facts, is {n1} {}, {}, or {} {n2}?\n",
        w.less, w.greater, w.equal
    ));
    let forms = format!(
        "\"{n1} is {} {n2}.\", \"{n1} is {} {n2}.\", \"{n1} is {} {n2}.\" or \"The answer cannot be decided.\"",
        w.less, w.greater, w.equal
    );
    match prompting {
        Prompting::Direct => s.push_str(&format!("Answer with exactly one of {forms} Do not explain.\n")),
        Prompting::Cot => s.push_str(&format!(
            "Think step by step: write down the facts you use and the conclusions you draw from them. \
             End your response with exactly one of {forms}\n"
        )),
    }
    s
}

/// Parsed model answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parsed {
    Label(Cmp),
    /// The model declared the answer undeterminable.
    Undecided,
    Unparseable,
}

const UNDECIDED: [&str; 6] = [
    "cannot be decided",
    "cannot be determined",
    "can't be decided",
    "can't be determined",
    "not possible to determine",
    "undetermined",
];

/// The last occurrence of a relation phrase (or of an "undecided" phrase)
/// in the response decides. Matching is case-insensitive; the short keywords
/// "younger", "older" and "same age" count for the age attribute.
pub fn parse_answer(response: &str, attribute: u32) -> Parsed {
    let text = response.to_lowercase();
    let w = attribute_words(attribute);
    let mut keys: Vec<(String, Parsed)> = vec![
        (w.less.clone(), Parsed::Label(Cmp::Less)),
        (w.greater.clone(), Parsed::Label(Cmp::Greater)),
        (w.equal.clone(), Parsed::Label(Cmp::Equal)),
    ];
    for (k, label) in [(&w.less, Cmp::Less), (&w.greater, Cmp::Greater)] {
        // "younger than" -> "younger"
        if let Some(stem) = k.strip_suffix(" than") {
            keys.push((stem.to_string(), Parsed::Label(label)));
        }
    }
    if let Some(rest) = w.equal.strip_prefix("in the ").and_then(|r| r.strip_suffix(" as")) {
        keys.push((rest.to_string(), Parsed::Label(Cmp::Equal)));
    }
    keys.extend(UNDECIDED.iter().map(|u| (u.to_string(), Parsed::Undecided)));
    let mut best: Option<(usize, usize, Parsed)> = None;
    for (k, p) in &keys {
        if let Some(i) = text.rfind(k.as_str()) {
            // Later end wins; at equal ends the longer phrase wins.
            let end = i + k.len();
            if best.map_or(true, |(be, bl, _)| end > be || (end == be && k.len() > bl)) {
                best = Some((end, k.len(), *p));
            }
        }
    }
    best.map_or(Parsed::Unparseable, |(_, _, p)| p)
}

/// A label-balanced sample of test queries.
pub fn balanced_queries(dataset: &ComplexDataset, n: usize, seed: u64) -> Result<Vec<Comparison>> {
    let per = n / 3;
    let mut out = Vec::with_capacity(per * 3);
    let mut rng = stream_rng(seed, 22);
    for label in Cmp::ALL {
        let mut pool: Vec<Comparison> = dataset.test_queries.iter().filter(|q| q.label == label).copied().collect();
        if pool.len() < per {
            return Err(Error::InsufficientQueries {
                label: label.name(),
                available: pool.len(),
                requested: per,
            });
        }
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..per]);
    }
    out.sort();
    Ok(out)
}

/// The prompt jobs an `[llm]` configuration section describes.
pub fn jobs_from_config(dataset: &ComplexDataset, cfg: &LlmSection) -> Result<Vec<PromptJob>> {
    let n_entities = dataset.options.n_entities;
    let names = match cfg.naming.as_str() {
        "names" => NameMap::person_names(n_entities, cfg.seed)?,
        "ids" => NameMap::ids(n_entities),
        other => return Err(Error::Config(format!("llm.naming must be \"names\" or \"ids\", got {other:?}"))),
    };
    let prompting = Prompting::parse(&cfg.prompting)?;
    balanced_queries(dataset, cfg.n_queries, cfg.seed)?
        .into_iter()
        .map(|q| build_job(&dataset.facts, q, &names, prompting, cfg.retrieval, cfg.seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_complex_dataset, derivable_full, AttributeFacts, ComplexOptions};

    pub(crate) fn small() -> ComplexDataset {
        build_complex_dataset(
            ComplexOptions {
                n_entities: 30,
                n_attributes: 2,
                n_values: 6,
                ood_fraction: 0.3,
                comparison_sample_rate: 0.1,
                n_test_per_label: 2,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn templates() {
        let names = NameMap {
            names: vec!["Alice".into(), "Bob".into()],
        };
        let facts = [
            Fact::Attribute(AttrFact { entity: 0, attribute: 0, value: 7 }),
            Fact::Comparison(Comparison { attribute: 0, e1: 0, e2: 1, label: Cmp::Less }),
            Fact::Comparison(Comparison { attribute: 0, e1: 1, e2: 0, label: Cmp::Greater }),
            Fact::Comparison(Comparison { attribute: 0, e1: 0, e2: 1, label: Cmp::Equal }),
        ];
        assert_eq!(
            render_facts(&facts, &names).unwrap(),
            vec![
                "The age of Alice is 7.",
                "Alice is younger than Bob.",
                "Bob is older than Alice.",
                "Alice is in the same age as Bob."
            ]
        );
        assert!(render_facts(&[Fact::Attribute(AttrFact { entity: 5, attribute: 0, value: 1 })], &names).is_err());
    }

    #[test]
    fn render_is_injective() {
        let d = small();
        let names = NameMap::person_names(30, 0).unwrap();
        let facts: Vec<Fact> = (0..2).flat_map(|a| attribute_context(&d.facts, a)).collect();
        let lines = render_facts(&facts, &names).unwrap();
        let unique: HashSet<&String> = lines.iter().collect();
        assert_eq!(unique.len(), facts.len());
    }

    #[test]
    fn names_are_unique_and_deterministic() {
        let a = NameMap::person_names(2000, 1).unwrap();
        let set: HashSet<&String> = a.names.iter().collect();
        assert_eq!(set.len(), 2000);
        assert_eq!(a, NameMap::person_names(2000, 1).unwrap());
        assert_ne!(a, NameMap::person_names(2000, 2).unwrap());
        assert_eq!(NameMap::ids(3).name(2).unwrap(), "entity_2");
    }

    #[test]
    fn star_graph_retrieval() {
        // e0 - b(1) only; b also compares with 2 and 3; 3 compares with 4.
        let c = |e1, e2| Comparison { attribute: 0, e1, e2, label: Cmp::Less };
        let train = ComplexTrainFacts {
            values: vec![1, 2, 3, 4, 5, 6],
            atomic_id: vec![AttrFact { entity: 1, attribute: 0, value: 2 }, AttrFact { entity: 4, attribute: 0, value: 5 }],
            atomic_ood: vec![],
            train_id_id: vec![c(1, 2), c(1, 3), c(3, 4)],
            train_id_ood: vec![c(0, 1), c(5, 3)],
        };
        let got: BTreeSet<Fact> = retrieve_two_hop(&train, 0, 0, 5).unwrap().into_iter().collect();
        let want: BTreeSet<Fact> = [
            Fact::Comparison(c(0, 1)),
            Fact::Comparison(c(1, 2)),
            Fact::Comparison(c(1, 3)),
            Fact::Comparison(c(5, 3)),
            Fact::Comparison(c(3, 4)),
            Fact::Attribute(AttrFact { entity: 1, attribute: 0, value: 2 }),
        ]
        .into();
        assert_eq!(got, want);
        assert!(retrieve_two_hop(&train, 0, 0, 9).is_err());
    }

    #[test]
    fn retrieval_suffices_for_derivation() {
        let d = small();
        for q in &d.test_queries {
            let facts = retrieve_two_hop(&d.facts, q.attribute, q.e1, q.e2).unwrap();
            let atomic: Vec<AttrFact> = facts.iter().filter_map(|f| if let Fact::Attribute(a) = f { Some(*a) } else { None }).collect();
            let comps: Vec<Comparison> = facts.iter().filter_map(|f| if let Fact::Comparison(c) = f { Some(*c) } else { None }).collect();
            let sub = AttributeFacts::collect(q.attribute, &atomic, &comps);
            assert_eq!(derivable_full(&sub, q.e1, q.e2).unwrap(), Some(q.label), "{q:?}");
        }
    }

    #[test]
    fn parser_rules() {
        let p = |s| parse_answer(s, 0);
        assert_eq!(p("Let me think... therefore Alice is younger than Bob."), Parsed::Label(Cmp::Less));
        assert_eq!(p("Bob is older than Carl, so Alice is in the same age as Bob."), Parsed::Label(Cmp::Equal));
        assert_eq!(p("Alice is OLDER than Bob"), Parsed::Label(Cmp::Greater));
        assert_eq!(p("The answer cannot be determined."), Parsed::Undecided);
        assert_eq!(p("Alice is younger than Bob? No, the answer cannot be decided."), Parsed::Undecided);
        assert_eq!(p("It cannot be determined directly, but Alice is older."), Parsed::Label(Cmp::Greater));
        assert_eq!(p("Same age."), Parsed::Label(Cmp::Equal));
        assert_eq!(p("I like turtles."), Parsed::Unparseable);
        assert_eq!(parse_answer("X is taller than Y.", 1), Parsed::Label(Cmp::Greater));
    }

    fn golden(name: &str, text: &str) {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
        if std::env::var_os("GROK_BLESS").is_some() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, text).unwrap();
        }
        let want = std::fs::read_to_string(&path).unwrap_or_default();
        assert_eq!(text, want, "golden file {name} differs (GROK_BLESS=1 regenerates)");
    }

    #[test]
    fn prompt_golden_files() {
        let d = small();
        let names = NameMap::person_names(30, 0).unwrap();
        let q = d.test_queries[0];
        for (p, retrieval, file) in [
            (Prompting::Direct, true, "prompt_direct_retrieval.txt"),
            (Prompting::Cot, true, "prompt_cot_retrieval.txt"),
            (Prompting::Direct, false, "prompt_direct_full.txt"),
        ] {
            let job = build_job(&d.facts, q, &names, p, retrieval, 11).unwrap();
            assert_eq!(job, build_job(&d.facts, q, &names, p, retrieval, 11).unwrap());
            golden(file, &job.prompt);
        }
    }
}
