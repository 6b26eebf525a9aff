// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON dataset files.
//!
//! Line 1 is a header `{"schema_version", "task", "seed", "parameters", "counts"}`;
//! every following line is one fact `{"kind", "input", "target", "split"}`.
//! Symbols are written as `e<id>` (entity), `r<id>` (relation), `a<id>`
//! (attribute), `v<value>` (ordinal value) and `a<id>:lt|eq|gt` (label).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AttrFact, Cmp, Comparison, ComparisonDataset, ComparisonOptions, ComplexDataset, ComplexOptions,
    ComplexTrainFacts, CompositionDataset, CompositionOptions, Triple, TwoHop,
};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Composition(CompositionDataset),
    Comparison(ComparisonDataset),
    Complex(ComplexDataset),
}

impl Dataset {
    pub fn task(&self) -> &'static str {
        match self {
            Dataset::Composition(_) => "composition",
            Dataset::Comparison(_) => "comparison",
            Dataset::Complex(_) => "complex",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Dataset::Composition(d) => d.seed,
            Dataset::Comparison(d) => d.seed,
            Dataset::Complex(d) => d.seed,
        }
    }

    /// Generator parameters as written to the header.
    pub fn parameters(&self) -> Value {
        match self {
            Dataset::Composition(d) => json!({
                "n_entities": d.n_entities,
                "n_relations": d.n_relations,
                "out_degree": d.out_degree,
                "graph_seed": d.graph_seed,
                "options": d.options,
            }),
            Dataset::Comparison(d) => json!({ "options": d.options }),
            Dataset::Complex(d) => json!({ "options": d.options }),
        }
    }

    fn records(&self) -> Vec<(&'static str, Vec<Record>)> {
        match self {
            Dataset::Composition(d) => vec![
                ("atomic_id", d.atomic_id.iter().map(|t| Record::triple(t, "atomic_id")).collect()),
                ("atomic_ood", d.atomic_ood.iter().map(|t| Record::triple(t, "atomic_ood")).collect()),
                split_two_hop(&d.train_inferred_id, "train_inferred_id"),
                split_two_hop(&d.test_inferred_id, "test_inferred_id"),
                split_two_hop(&d.test_inferred_ood, "test_inferred_ood"),
            ],
            Dataset::Comparison(d) => vec![
                split_attr(&d.atomic_id, "atomic_id"),
                split_attr(&d.atomic_ood, "atomic_ood"),
                split_cmp(&d.train_inferred_id, "train_inferred_id"),
                split_cmp(&d.test_inferred_id, "test_inferred_id"),
                split_cmp(&d.test_inferred_ood, "test_inferred_ood"),
            ],
            Dataset::Complex(d) => vec![
                split_attr(&d.facts.atomic_id, "atomic_id"),
                split_attr(&d.facts.atomic_ood, "atomic_ood"),
                split_cmp(&d.facts.train_id_id, "train_id_id"),
                split_cmp(&d.facts.train_id_ood, "train_id_ood"),
                split_cmp(&d.test_queries, "test_query"),
            ],
        }
    }
}

fn split_two_hop(facts: &[TwoHop], split: &'static str) -> (&'static str, Vec<Record>) {
    (split, facts.iter().map(|f| Record::two_hop(f, split)).collect())
}

fn split_attr(facts: &[AttrFact], split: &'static str) -> (&'static str, Vec<Record>) {
    (split, facts.iter().map(|f| Record::attribute(f, split)).collect())
}

fn split_cmp(facts: &[Comparison], split: &'static str) -> (&'static str, Vec<Record>) {
    (split, facts.iter().map(|f| Record::comparison(f, split)).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    task: String,
    seed: u64,
    parameters: Value,
    counts: BTreeMap<String, usize>,
    /// Resolved run configuration, when written by a tool that has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    kind: String,
    input: Vec<String>,
    target: String,
    split: String,
}

impl Record {
    fn triple(t: &Triple, split: &str) -> Self {
        Record {
            kind: "atomic".into(),
            input: vec![format!("e{}", t.subject), format!("r{}", t.relation)],
            target: format!("e{}", t.object),
            split: split.into(),
        }
    }

    fn two_hop(f: &TwoHop, split: &str) -> Self {
        Record {
            kind: "two_hop".into(),
            input: vec![format!("e{}", f.head), format!("r{}", f.r1), format!("r{}", f.r2)],
            target: format!("e{}", f.tail),
            split: split.into(),
        }
    }

    fn attribute(f: &AttrFact, split: &str) -> Self {
        Record {
            kind: "attribute".into(),
            input: vec![format!("e{}", f.entity), format!("a{}", f.attribute)],
            target: format!("v{}", f.value),
            split: split.into(),
        }
    }

    fn comparison(c: &Comparison, split: &str) -> Self {
        Record {
            kind: "comparison".into(),
            input: vec![format!("a{}", c.attribute), format!("e{}", c.e1), format!("e{}", c.e2)],
            target: format!("a{}:{}", c.attribute, c.label.name()),
            split: split.into(),
        }
    }
}

/// Write `dataset` to `path`, header first.
pub fn serialize_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    serialize_dataset_with_config(dataset, path, None)
}

/// As [`serialize_dataset`], embedding `config` in the header.
pub fn serialize_dataset_with_config(dataset: &Dataset, path: &Path, config: Option<Value>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let groups = dataset.records();
    let header = Header {
        schema_version: SCHEMA_VERSION,
        task: dataset.task().into(),
        seed: dataset.seed(),
        parameters: dataset.parameters(),
        counts: groups.iter().map(|(s, r)| (s.to_string(), r.len())).collect(),
        config,
    };
    let io_err = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for (_, records) in &groups {
        for r in records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
            w.write_all(b"\n").map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a file written by [`serialize_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "empty file, expected header"))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| Error::format(path, 1, format!("bad header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }

    let mut splits: BTreeMap<String, Vec<Fact>> = BTreeMap::new();
    let mut line_no = 1;
    for line in lines {
        line_no += 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::format(path, line_no, format!("malformed record: {e}")))?;
        let fact = parse_fact(&rec).map_err(|msg| Error::format(path, line_no, msg))?;
        if !header.counts.contains_key(&rec.split) {
            return Err(Error::format(path, line_no, format!("unknown split {:?}", rec.split)));
        }
        splits.entry(rec.split).or_default().push(fact);
    }
    for (split, &n) in &header.counts {
        let got = splits.get(split).map_or(0, Vec::len);
        if got != n {
            return Err(Error::format(
                path,
                line_no + 1,
                format!("split {split} has {got} records, header announces {n} (truncated file?)"),
            ));
        }
    }
    let bad = |msg: String| Error::format(path, 1, msg);
    let mut take = |name: &str| splits.remove(name).unwrap_or_default();
    let params = &header.parameters;
    let options = |key: &str| params.get(key).cloned().ok_or_else(|| bad(format!("missing parameter {key}")));
    let dataset = match header.task.as_str() {
        "composition" => {
            let get_u = |k: &str| {
                params
                    .get(k)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| bad(format!("missing parameter {k}")))
            };
            let opts: CompositionOptions = serde_json::from_value(options("options")?).map_err(|e| bad(e.to_string()))?;
            Dataset::Composition(CompositionDataset {
                n_entities: get_u("n_entities")? as u32,
                n_relations: get_u("n_relations")? as u32,
                out_degree: get_u("out_degree")? as u32,
                graph_seed: get_u("graph_seed")?,
                seed: header.seed,
                options: opts,
                atomic_id: triples(take("atomic_id")),
                atomic_ood: triples(take("atomic_ood")),
                train_inferred_id: two_hops(take("train_inferred_id")),
                test_inferred_id: two_hops(take("test_inferred_id")),
                test_inferred_ood: two_hops(take("test_inferred_ood")),
            })
        }
        "comparison" => {
            let opts: ComparisonOptions = serde_json::from_value(options("options")?).map_err(|e| bad(e.to_string()))?;
            let atomic_id = attrs(take("atomic_id"));
            let atomic_ood = attrs(take("atomic_ood"));
            let values = value_table(opts.n_entities, opts.n_attributes, atomic_id.iter().chain(&atomic_ood))
                .map_err(bad)?;
            Dataset::Comparison(ComparisonDataset {
                options: opts,
                seed: header.seed,
                values,
                atomic_id,
                atomic_ood,
                train_inferred_id: comparisons(take("train_inferred_id")),
                test_inferred_id: comparisons(take("test_inferred_id")),
                test_inferred_ood: comparisons(take("test_inferred_ood")),
            })
        }
        "complex" => {
            let opts: ComplexOptions = serde_json::from_value(options("options")?).map_err(|e| bad(e.to_string()))?;
            let atomic_id = attrs(take("atomic_id"));
            let atomic_ood = attrs(take("atomic_ood"));
            let values = value_table(opts.n_entities, opts.n_attributes, atomic_id.iter().chain(&atomic_ood))
                .map_err(bad)?;
            Dataset::Complex(ComplexDataset {
                options: opts,
                seed: header.seed,
                facts: ComplexTrainFacts {
                    values,
                    atomic_id,
                    atomic_ood,
                    train_id_id: comparisons(take("train_id_id")),
                    train_id_ood: comparisons(take("train_id_ood")),
                },
                test_queries: comparisons(take("test_query")),
            })
        }
        other => return Err(bad(format!("unknown task {other:?}"))),
    };
    Ok(dataset)
}

enum Fact {
    Triple(Triple),
    TwoHop(TwoHop),
    Attr(AttrFact),
    Cmp(Comparison),
}

fn triples(v: Vec<Fact>) -> Vec<Triple> {
    v.into_iter()
        .filter_map(|f| if let Fact::Triple(t) = f { Some(t) } else { None })
        .collect()
}

fn two_hops(v: Vec<Fact>) -> Vec<TwoHop> {
    v.into_iter()
        .filter_map(|f| if let Fact::TwoHop(t) = f { Some(t) } else { None })
        .collect()
}

fn attrs(v: Vec<Fact>) -> Vec<AttrFact> {
    v.into_iter()
        .filter_map(|f| if let Fact::Attr(t) = f { Some(t) } else { None })
        .collect()
}

fn comparisons(v: Vec<Fact>) -> Vec<Comparison> {
    v.into_iter()
        .filter_map(|f| if let Fact::Cmp(t) = f { Some(t) } else { None })
        .collect()
}

fn value_table<'a>(
    n_entities: u32,
    n_attributes: u32,
    facts: impl Iterator<Item = &'a AttrFact>,
) -> std::result::Result<Vec<u32>, String> {
    let mut values = vec![0u32; (n_entities * n_attributes) as usize];
    for f in facts {
        let slot = values
            .get_mut((f.entity * n_attributes + f.attribute) as usize)
            .ok_or_else(|| format!("fact {f:?} outside the entity/attribute range"))?;
        *slot = f.value;
    }
    if values.iter().any(|&v| v == 0) {
        return Err("atomic facts do not cover every (entity, attribute) pair".into());
    }
    Ok(values)
}

/// Parse a symbol of the form `<prefix><number>`.
pub(crate) fn parse_symbol(s: &str, prefix: char) -> std::result::Result<u32, String> {
    s.strip_prefix(prefix)
        .and_then(|rest| rest.parse().ok())
        .ok_or_else(|| format!("expected {prefix}<id>, got {s:?}"))
}

pub(crate) fn parse_label(s: &str) -> std::result::Result<(u32, Cmp), String> {
    let (attr, cmp) = s.split_once(':').ok_or_else(|| format!("expected a<id>:lt|eq|gt, got {s:?}"))?;
    let a = parse_symbol(attr, 'a')?;
    let cmp = match cmp {
        "lt" => Cmp::Less,
        "eq" => Cmp::Equal,
        "gt" => Cmp::Greater,
        _ => return Err(format!("unknown comparison {cmp:?}")),
    };
    Ok((a, cmp))
}

fn parse_fact(r: &Record) -> std::result::Result<Fact, String> {
    let arity = |n: usize| {
        if r.input.len() == n {
            Ok(())
        } else {
            Err(format!("kind {} needs {n} input symbols, got {}", r.kind, r.input.len()))
        }
    };
    match r.kind.as_str() {
        "atomic" => {
            arity(2)?;
            Ok(Fact::Triple(Triple::new(
                parse_symbol(&r.input[0], 'e')?,
                parse_symbol(&r.input[1], 'r')?,
                parse_symbol(&r.target, 'e')?,
            )))
        }
        "two_hop" => {
            arity(3)?;
            Ok(Fact::TwoHop(TwoHop {
                head: parse_symbol(&r.input[0], 'e')?,
                r1: parse_symbol(&r.input[1], 'r')?,
                r2: parse_symbol(&r.input[2], 'r')?,
                tail: parse_symbol(&r.target, 'e')?,
            }))
        }
        "attribute" => {
            arity(2)?;
            Ok(Fact::Attr(AttrFact {
                entity: parse_symbol(&r.input[0], 'e')?,
                attribute: parse_symbol(&r.input[1], 'a')?,
                value: parse_symbol(&r.target, 'v')?,
            }))
        }
        "comparison" => {
            arity(3)?;
            let attribute = parse_symbol(&r.input[0], 'a')?;
            let (label_attr, label) = parse_label(&r.target)?;
            if label_attr != attribute {
                return Err(format!("label {} belongs to a different attribute", r.target));
            }
            Ok(Fact::Cmp(Comparison {
                attribute,
                e1: parse_symbol(&r.input[1], 'e')?,
                e2: parse_symbol(&r.input[2], 'e')?,
                label,
            }))
        }
        other => Err(format!("unknown kind {other:?}")),
    }
}
