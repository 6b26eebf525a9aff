// SPDX-License-Identifier: MIT OR Apache-2.0

//! Symbol to token mapping and fact layouts.
//!
//! Token ids are laid out in blocks: entity tokens (one per entity, or the
//! first-name block followed by the last-name block in multi-token mode),
//! relations, attributes, values `1..=V`, then three label tokens per
//! attribute in the order `lt, eq, gt`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{stream_rng, AttrFact, Cmp, Comparison, Dataset, Triple, TwoHop};
use crate::{Error, Result};

pub const VOCAB_SCHEMA_VERSION: u32 = 1;

/// Symbol counts a vocabulary must cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_entities: u32,
    pub n_relations: u32,
    pub n_attributes: u32,
    pub n_values: u32,
}

impl VocabSpec {
    pub fn for_dataset(d: &Dataset) -> Self {
        match d {
            Dataset::Composition(c) => VocabSpec {
                n_entities: c.n_entities,
                n_relations: c.n_relations,
                n_attributes: 0,
                n_values: 0,
            },
            Dataset::Comparison(c) => VocabSpec {
                n_entities: c.options.n_entities,
                n_relations: 0,
                n_attributes: c.options.n_attributes,
                n_values: c.options.n_values,
            },
            Dataset::Complex(c) => VocabSpec {
                n_entities: c.options.n_entities,
                n_relations: 0,
                n_attributes: c.options.n_attributes,
                n_values: c.options.n_values,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum VocabMode {
    Single,
    /// Each entity is a (first name, last name) token pair drawn from two
    /// name sets of `name_set_size` tokens each.
    Multi { name_set_size: u32 },
}

/// Any fact the tasks produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fact {
    Atomic(Triple),
    TwoHop(TwoHop),
    Attribute(AttrFact),
    Comparison(Comparison),
}

impl Fact {
    pub fn kind(&self) -> FactKind {
        match self {
            Fact::Atomic(_) => FactKind::Atomic,
            Fact::TwoHop(_) => FactKind::TwoHop,
            Fact::Attribute(_) => FactKind::Attribute,
            Fact::Comparison(_) => FactKind::Comparison,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactKind {
    Atomic,
    TwoHop,
    Attribute,
    Comparison,
}

/// Role of an input position, named after the circuit notation `S[i, role]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Head entity of a composition fact.
    H,
    /// Relation of an atomic composition fact.
    R,
    R1,
    R2,
    /// Entity of an attribute fact.
    E,
    A,
    E1,
    E2,
    /// Teacher-forced answer token (multi-token answers only).
    Answer,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::H => "h",
            Role::R => "r",
            Role::R1 => "r1",
            Role::R2 => "r2",
            Role::E => "e",
            Role::A => "a",
            Role::E1 => "e1",
            Role::E2 => "e2",
            Role::Answer => "answer",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "h" => Role::H,
            "r" => Role::R,
            "r1" => Role::R1,
            "r2" => Role::R2,
            "e" => Role::E,
            "a" => Role::A,
            "e1" => Role::E1,
            "e2" => Role::E2,
            _ => return None,
        })
    }
}

/// Input roles of a fact kind, one per symbol.
pub fn kind_roles(kind: FactKind) -> &'static [Role] {
    match kind {
        FactKind::Atomic => &[Role::H, Role::R],
        FactKind::TwoHop => &[Role::H, Role::R1, Role::R2],
        FactKind::Attribute => &[Role::E, Role::A],
        FactKind::Comparison => &[Role::A, Role::E1, Role::E2],
    }
}

/// An encoded fact.
///
/// `input` holds the fact's input symbols; `target` the answer tokens (two
/// for entity answers in multi-token mode). The model reads
/// [`model_tokens`](Self::model_tokens) and is scored at its last
/// `target.len()` positions, the first of which is `answer_index`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub kind: FactKind,
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    /// Role per input position.
    pub roles: Vec<Role>,
}

impl TokenSequence {
    /// Input plus every answer token but the last (teacher forcing).
    pub fn model_tokens(&self) -> Vec<u32> {
        let mut t = self.input.clone();
        t.extend_from_slice(&self.target[..self.target.len() - 1]);
        t
    }

    pub fn len(&self) -> usize {
        self.input.len() + self.target.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Position whose output predicts the first answer token.
    pub fn answer_index(&self) -> usize {
        self.input.len() - 1
    }

    /// Last input position carrying `role` (the second token for two-token
    /// entities).
    pub fn position(&self, role: Role) -> Option<usize> {
        self.roles.iter().rposition(|&r| r == role)
    }
}

/// Symbol table for one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub spec: VocabSpec,
    pub mode: VocabMode,
    pub seed: u64,
    /// Token(s) of every entity.
    entity_tokens: Vec<Vec<u32>>,
    pair_index: HashMap<(u32, u32), u32>,
    n_entity_tokens: u32,
}

/// Build the vocabulary. Single mode is a bijection; multi mode gives every
/// entity a unique ordered (first, last) name pair and every name token is
/// shared by exactly `n_entities / name_set_size` entities.
pub fn build_vocab(spec: VocabSpec, mode: VocabMode, seed: u64) -> Result<Vocab> {
    let n_e = spec.n_entities;
    if n_e == 0 {
        return Err(Error::Config("vocabulary needs at least one entity".into()));
    }
    let (entity_tokens, n_entity_tokens) = match mode {
        VocabMode::Single => ((0..n_e).map(|e| vec![e]).collect::<Vec<_>>(), n_e),
        VocabMode::Multi { name_set_size: s } => {
            if s == 0 || n_e % s != 0 {
                return Err(Error::Config(format!(
                    "name_set_size {s} must divide n_entities {n_e} (integer token multiplicity)"
                )));
            }
            if u64::from(n_e) > u64::from(s) * u64::from(s) {
                return Err(Error::Config(format!(
                    "name_set_size {s} too small: {n_e} entities need at least {} names for unique pairs",
                    (f64::from(n_e)).sqrt().ceil()
                )));
            }
            let mut rng = stream_rng(seed, 10);
            let mut order: Vec<u32> = (0..n_e).collect();
            order.shuffle(&mut rng);
            let mut first: Vec<u32> = (0..s).collect();
            let mut last: Vec<u32> = (0..s).collect();
            first.shuffle(&mut rng);
            last.shuffle(&mut rng);
            let mut toks = vec![Vec::new(); n_e as usize];
            for (k, &e) in order.iter().enumerate() {
                let k = k as u32;
                let (f, l) = (k % s, (k % s + k / s) % s);
                toks[e as usize] = vec![first[f as usize], s + last[l as usize]];
            }
            (toks, 2 * s)
        }
    };
    let pair_index = match mode {
        VocabMode::Single => HashMap::new(),
        VocabMode::Multi { .. } => entity_tokens
            .iter()
            .enumerate()
            .map(|(e, t)| ((t[0], t[1]), e as u32))
            .collect(),
    };
    Ok(Vocab {
        spec,
        mode,
        seed,
        entity_tokens,
        pair_index,
        n_entity_tokens,
    })
}

impl Vocab {
    fn rel_base(&self) -> u32 {
        self.n_entity_tokens
    }
    fn attr_base(&self) -> u32 {
        self.rel_base() + self.spec.n_relations
    }
    fn value_base(&self) -> u32 {
        self.attr_base() + self.spec.n_attributes
    }
    fn label_base(&self) -> u32 {
        self.value_base() + self.spec.n_values
    }

    pub fn size(&self) -> usize {
        (self.label_base() + 3 * self.spec.n_attributes) as usize
    }

    /// Entity tokens per entity (1 or 2).
    pub fn entity_width(&self) -> usize {
        match self.mode {
            VocabMode::Single => 1,
            VocabMode::Multi { .. } => 2,
        }
    }

    /// `n_entities / name_set_size` in multi mode, 1 otherwise.
    pub fn token_multiplicity(&self) -> u32 {
        match self.mode {
            VocabMode::Single => 1,
            VocabMode::Multi { name_set_size } => self.spec.n_entities / name_set_size,
        }
    }

    pub fn entity(&self, e: u32) -> Result<&[u32]> {
        self.entity_tokens
            .get(e as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| unknown(format!("e{e}")))
    }

    pub fn relation(&self, r: u32) -> Result<u32> {
        check(r, self.spec.n_relations, 'r')?;
        Ok(self.rel_base() + r)
    }

    pub fn attribute(&self, a: u32) -> Result<u32> {
        check(a, self.spec.n_attributes, 'a')?;
        Ok(self.attr_base() + a)
    }

    /// Token of ordinal value `v` in `1..=n_values`.
    pub fn value(&self, v: u32) -> Result<u32> {
        if v == 0 || v > self.spec.n_values {
            return Err(unknown(format!("v{v}")));
        }
        Ok(self.value_base() + v - 1)
    }

    pub fn label(&self, attribute: u32, cmp: Cmp) -> Result<u32> {
        check(attribute, self.spec.n_attributes, 'a')?;
        Ok(self.label_base() + 3 * attribute + cmp.index() as u32)
    }

    /// Tokens of every value, in value order.
    pub fn value_tokens(&self) -> std::ops::Range<u32> {
        self.value_base()..self.label_base()
    }

    /// The three label tokens of `attribute`.
    pub fn label_tokens(&self, attribute: u32) -> [u32; 3] {
        let b = self.label_base() + 3 * attribute;
        [b, b + 1, b + 2]
    }

    /// Entity with the given token(s).
    pub fn entity_of(&self, tokens: &[u32]) -> Option<u32> {
        match (self.mode, tokens) {
            (VocabMode::Single, [t]) if *t < self.n_entity_tokens => Some(*t),
            (VocabMode::Multi { .. }, [a, b]) => self.pair_index.get(&(*a, *b)).copied(),
            _ => None,
        }
    }

    /// Human-readable symbol of a single token.
    pub fn token_symbol(&self, t: u32) -> String {
        if t < self.n_entity_tokens {
            return match self.mode {
                VocabMode::Single => format!("e{t}"),
                VocabMode::Multi { name_set_size: s } if t < s => format!("f{t}"),
                VocabMode::Multi { name_set_size: s } => format!("l{}", t - s),
            };
        }
        if t < self.attr_base() {
            format!("r{}", t - self.rel_base())
        } else if t < self.value_base() {
            format!("a{}", t - self.attr_base())
        } else if t < self.label_base() {
            format!("v{}", t - self.value_base() + 1)
        } else if (t as usize) < self.size() {
            let k = t - self.label_base();
            format!("a{}:{}", k / 3, Cmp::ALL[(k % 3) as usize].name())
        } else {
            format!("<{t}>")
        }
    }

    fn push_entity(&self, e: u32, role: Role, input: &mut Vec<u32>, roles: &mut Vec<Role>) -> Result<()> {
        for &t in self.entity(e)? {
            input.push(t);
            roles.push(role);
        }
        Ok(())
    }

    pub fn encode(&self, fact: &Fact) -> Result<TokenSequence> {
        let mut input = Vec::with_capacity(6);
        let mut roles = Vec::with_capacity(6);
        let target = match *fact {
            Fact::Atomic(t) => {
                self.push_entity(t.subject, Role::H, &mut input, &mut roles)?;
                input.push(self.relation(t.relation)?);
                roles.push(Role::R);
                self.entity(t.object)?.to_vec()
            }
            Fact::TwoHop(f) => {
                self.push_entity(f.head, Role::H, &mut input, &mut roles)?;
                input.push(self.relation(f.r1)?);
                roles.push(Role::R1);
                input.push(self.relation(f.r2)?);
                roles.push(Role::R2);
                self.entity(f.tail)?.to_vec()
            }
            Fact::Attribute(f) => {
                self.push_entity(f.entity, Role::E, &mut input, &mut roles)?;
                input.push(self.attribute(f.attribute)?);
                roles.push(Role::A);
                vec![self.value(f.value)?]
            }
            Fact::Comparison(c) => {
                input.push(self.attribute(c.attribute)?);
                roles.push(Role::A);
                self.push_entity(c.e1, Role::E1, &mut input, &mut roles)?;
                self.push_entity(c.e2, Role::E2, &mut input, &mut roles)?;
                vec![self.label(c.attribute, c.label)?]
            }
        };
        Ok(TokenSequence {
            kind: fact.kind(),
            input,
            target,
            roles,
        })
    }

    /// Inverse of [`encode`](Self::encode).
    pub fn decode(&self, seq: &TokenSequence) -> Result<Fact> {
        let w = self.entity_width();
        let bad = || Error::Data(format!("token sequence {:?} is not a {:?} fact", seq.input, seq.kind));
        let ent = |toks: &[u32]| self.entity_of(toks).ok_or_else(bad);
        let sym = |t: u32, lo: u32, hi: u32| if (lo..hi).contains(&t) { Ok(t - lo) } else { Err(bad()) };
        let x = &seq.input;
        let expect = |n: usize| if x.len() == n { Ok(()) } else { Err(bad()) };
        Ok(match seq.kind {
            FactKind::Atomic => {
                expect(w + 1)?;
                Fact::Atomic(Triple::new(
                    ent(&x[..w])?,
                    sym(x[w], self.rel_base(), self.attr_base())?,
                    ent(&seq.target)?,
                ))
            }
            FactKind::TwoHop => {
                expect(w + 2)?;
                Fact::TwoHop(TwoHop {
                    head: ent(&x[..w])?,
                    r1: sym(x[w], self.rel_base(), self.attr_base())?,
                    r2: sym(x[w + 1], self.rel_base(), self.attr_base())?,
                    tail: ent(&seq.target)?,
                })
            }
            FactKind::Attribute => {
                expect(w + 1)?;
                let [v] = seq.target[..] else { return Err(bad()) };
                Fact::Attribute(AttrFact {
                    entity: ent(&x[..w])?,
                    attribute: sym(x[w], self.attr_base(), self.value_base())?,
                    value: sym(v, self.value_base(), self.label_base())? + 1,
                })
            }
            FactKind::Comparison => {
                expect(1 + 2 * w)?;
                let attribute = sym(x[0], self.attr_base(), self.value_base())?;
                let [l] = seq.target[..] else { return Err(bad()) };
                let k = sym(l, self.label_base(), self.size() as u32)?;
                if k / 3 != attribute {
                    return Err(bad());
                }
                Fact::Comparison(Comparison {
                    attribute,
                    e1: ent(&x[1..1 + w])?,
                    e2: ent(&x[1 + w..])?,
                    label: Cmp::ALL[(k % 3) as usize],
                })
            }
        })
    }

    /// Every `(symbol, tokens)` pair in token order.
    pub fn entries(&self) -> Vec<(String, Vec<u32>)> {
        let mut out = Vec::with_capacity(self.size() + self.spec.n_entities as usize);
        if let VocabMode::Multi { .. } = self.mode {
            for t in 0..self.n_entity_tokens {
                out.push((self.token_symbol(t), vec![t]));
            }
        }
        for (e, toks) in self.entity_tokens.iter().enumerate() {
            out.push((format!("e{e}"), toks.clone()));
        }
        for t in self.rel_base()..self.size() as u32 {
            out.push((self.token_symbol(t), vec![t]));
        }
        out
    }
}

fn unknown(symbol: String) -> Error {
    Error::Data(format!("unknown symbol {symbol}"))
}

fn check(id: u32, n: u32, prefix: char) -> Result<()> {
    if id < n {
        Ok(())
    } else {
        Err(unknown(format!("{prefix}{id}")))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabHeader {
    schema_version: u32,
    seed: u64,
    spec: VocabSpec,
    #[serde(flatten)]
    mode: VocabMode,
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    symbol: String,
    tokens: Vec<u32>,
}

/// Write the vocabulary as line-delimited JSON: a header, then one
/// `{symbol, tokens}` record per symbol.
pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    save_vocab_with_config(vocab, path, None)
}

/// As [`save_vocab`], embedding `config` in the header.
pub fn save_vocab_with_config(vocab: &Vocab, path: &Path, config: Option<serde_json::Value>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = VocabHeader {
        schema_version: VOCAB_SCHEMA_VERSION,
        seed: vocab.seed,
        spec: vocab.spec,
        mode: vocab.mode,
        size: vocab.size(),
        config,
    };
    let io = |e| Error::io(path, e);
    write_line(&mut w, &header).map_err(io)?;
    for (symbol, tokens) in vocab.entries() {
        write_line(&mut w, &VocabEntry { symbol, tokens }).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

/// Read a vocabulary file and check every record against the rebuilt table.
pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "empty vocabulary file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: VocabHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, 1, format!("bad header: {e}")))?;
    if header.schema_version != VOCAB_SCHEMA_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: header.schema_version,
            expected: VOCAB_SCHEMA_VERSION,
        });
    }
    let vocab = build_vocab(header.spec, header.mode, header.seed)?;
    let expected = vocab.entries();
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let entry: VocabEntry =
            serde_json::from_str(&line).map_err(|e| Error::format(path, i + 2, format!("malformed entry: {e}")))?;
        match expected.get(i) {
            Some((s, t)) if *s == entry.symbol && *t == entry.tokens => {}
            _ => return Err(Error::format(path, i + 2, format!("entry {} does not match the vocabulary", entry.symbol))),
        }
        n += 1;
    }
    if n != expected.len() {
        return Err(Error::format(path, n + 2, format!("expected {} entries, found {n}", expected.len())));
    }
    Ok(vocab)
}
