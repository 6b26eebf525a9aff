// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one `PASS`, `FAIL` or `SKIP` line per criterion.
//!
//! Criteria 1-4 and 13 always run. The long training runs (5-12) are skipped
//! unless `GROK_ACCEPTANCE_LONG=1`; their run directories live under
//! `GROK_ACCEPTANCE_DIR` (default `target/acceptance`) and resume from the
//! latest checkpoint, so an interrupted run continues where it stopped.
//! `GROK_ACCEPTANCE_MAX_STEPS` caps every long run, and
//! `GROK_ACCEPTANCE_ONLY=2,13` restricts the suite to the listed criteria.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use grokking_core::analysis::{lens_split, mid_layer, role_position, select_examples, trace_split, RunDir};
use grokking_core::config::{LlmSection, RunConfig};
use grokking_core::datagen::{
    build_comparison_dataset, build_complex_dataset, build_composition_dataset, compare_label, deduce_compositions,
    derivable_full, gen_knowledge_graph, AttributeFacts, Cmp, Comparison, ComparisonOptions, ComplexOptions,
    CompositionOptions, Dataset, Triple, TwoHop,
};
use grokking_core::interp::{all_sites, causal_trace, LensTarget, Site, TaskIndex};
use grokking_core::llm::{
    build_job, jobs_from_config, run_baseline, BaselineOptions, GoldEcho, NameMap, Prompting, RandomAnswer,
};
use grokking_core::model::{init_model, Batch, Intervention, Model, ModelConfig};
use grokking_core::trainer::{
    accuracy, detect_saturation, encode_all, first_step_at, task_facts, EvalRecord, EvalSplit, Trainer,
    SATURATION_THRESHOLD,
};
use grokking_core::vocab::{build_vocab, Role, VocabMode, VocabSpec};
use grokking_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Fast criteria.
const ORACLE_INSTANCES: usize = 24;
const ORACLE_MAX_ENTITIES: u32 = 50;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const MEMORIZE_STEPS: u64 = 5000;
const MEMORIZE_ACC: f64 = 0.99;
const RANDOM_MOCK_TOL: f64 = 0.05;
const BALANCED_QUERIES: usize = 900;

// Long criteria.
const GROKKED: f64 = 0.9;
const SATURATION_ID_MAX: f64 = 0.2;
const COMPOSITION_OOD_MAX: f64 = 0.02;
const EXTENDED_FACTOR: u64 = 10;
const TREND_GAIN: f64 = 0.3;
const FINAL_MRR: f64 = 0.8;
const LABEL_RECALL: f64 = 0.9;
const SHARED_OOD_MIN: f64 = 0.5;
const ATOMIC_OOD_GAIN: f64 = 0.05;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn skip(detail: &str) -> Outcome {
    Outcome {
        status: Status::Skip,
        detail: detail.to_string(),
    }
}

fn report(n: u32, title: &str, result: Result<Outcome>) -> bool {
    let o = result.unwrap_or_else(|e| Outcome {
        status: Status::Fail,
        detail: format!("error: {e}"),
    });
    let tag = match o.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    println!("{tag} {n:>2} {title}: {}", o.detail);
    !matches!(o.status, Status::Fail)
}

// ---------------------------------------------------------------- oracles

fn join_oracle(atomic: &[Triple]) -> Vec<TwoHop> {
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
    out.sort();
    out.dedup();
    out
}

/// Exhaustive forward chaining: value comparison of known pairs, symmetry,
/// and transitivity of one label at a time, applied until nothing changes.
fn closure_oracle(n: usize, facts: &AttributeFacts) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let mut lt = vec![vec![false; n]; n];
    let mut eq = vec![vec![false; n]; n];
    for c in &facts.comparisons {
        let (a, b) = (c.e1 as usize, c.e2 as usize);
        match c.label {
            Cmp::Less => lt[a][b] = true,
            Cmp::Greater => lt[b][a] = true,
            Cmp::Equal => eq[a][b] = true,
        }
    }
    for (&a, &va) in &facts.known {
        for (&b, &vb) in &facts.known {
            if a != b {
                lt[a as usize][b as usize] |= va < vb;
                eq[a as usize][b as usize] |= va == vb;
            }
        }
    }
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if eq[i][j] && !eq[j][i] {
                    eq[j][i] = true;
                    changed = true;
                }
                for k in 0..n {
                    if lt[i][j] && lt[j][k] && !lt[i][k] {
                        lt[i][k] = true;
                        changed = true;
                    }
                    if eq[i][j] && eq[j][k] && i != k && !eq[i][k] {
                        eq[i][k] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return (lt, eq);
        }
    }
}

fn criterion_1() -> Result<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = Vec::new();

    let mut joins = 0;
    for i in 0..ORACLE_INSTANCES {
        let n = rng.gen_range(5..=ORACLE_MAX_ENTITIES);
        let n_rel = rng.gen_range(2..=8);
        let deg = rng.gen_range(1..=n_rel);
        let g = gen_knowledge_graph(n, n_rel, deg, i as u64)?;
        let want = join_oracle(&g.edges);
        if deduce_compositions(&g.edges) != want {
            mismatches.push(format!("composition instance {i}"));
        }
        joins += want.len();
    }

    let mut labels = 0;
    for i in 0..ORACLE_INSTANCES {
        let options = ComparisonOptions {
            n_entities: rng.gen_range(10..=ORACLE_MAX_ENTITIES),
            n_attributes: rng.gen_range(1..=4),
            n_values: rng.gen_range(2..=10),
            ood_fraction: 0.2,
            phi: rng.gen_range(0.5..3.0),
            test_size: 50,
        };
        let d = build_comparison_dataset(options, i as u64)?;
        let mut value = std::collections::HashMap::new();
        for f in d.atomic() {
            value.insert((f.entity, f.attribute), f.value);
        }
        for c in d.train_inferred_id.iter().chain(&d.test_inferred_id).chain(&d.test_inferred_ood) {
            labels += 1;
            if compare_label(value[&(c.e1, c.attribute)], value[&(c.e2, c.attribute)]) != c.label {
                mismatches.push(format!("comparison instance {i}: {c:?}"));
            }
        }
    }

    let mut queries = 0;
    for i in 0..ORACLE_INSTANCES {
        let n = rng.gen_range(5..=ORACLE_MAX_ENTITIES) as usize;
        let n_values = rng.gen_range(1..=8);
        let values: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n_values)).collect();
        let p_known = rng.gen_range(0.0..0.5);
        let p_pair = rng.gen_range(0.01..0.15);
        let mut facts = AttributeFacts {
            attribute: 0,
            ..Default::default()
        };
        for e in 0..n {
            if rng.gen_bool(p_known) {
                facts.known.insert(e as u32, values[e]);
            }
            for f in 0..n {
                if e != f && rng.gen_bool(p_pair) {
                    facts.comparisons.push(Comparison {
                        attribute: 0,
                        e1: e as u32,
                        e2: f as u32,
                        label: compare_label(values[e], values[f]),
                    });
                }
            }
        }
        let (lt, eq) = closure_oracle(n, &facts);
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let want = if lt[a][b] {
                    Some(Cmp::Less)
                } else if lt[b][a] {
                    Some(Cmp::Greater)
                } else if eq[a][b] {
                    Some(Cmp::Equal)
                } else {
                    None
                };
                queries += 1;
                let got = derivable_full(&facts, a as u32, b as u32)?;
                if got != want {
                    mismatches.push(format!("complex instance {i}: ({a}, {b}) got {got:?}, oracle {want:?}"));
                }
            }
        }
    }

    let elapsed = t.elapsed();
    let mut detail = format!(
        "{ORACLE_INSTANCES} instances per task, {joins} joins, {labels} labels, {queries} derivability queries, {:.1}s",
        elapsed.as_secs_f64()
    );
    if let Some(m) = mismatches.first() {
        detail += &format!("; {} mismatches, first: {m}", mismatches.len());
    }
    Ok(verdict(mismatches.is_empty() && elapsed < ORACLE_BUDGET, detail))
}

// ---------------------------------------------------------------- gradients

fn criterion_2() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = ModelConfig::new(2, 32, 4, 6, 23);
    let mut m: Model<f64> = init_model(&cfg, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Move off the initialization so norm gains and biases matter.
    for x in m.params.iter_mut() {
        *x += rng.gen_range(-0.2..0.2);
    }
    let (n_seq, seq_len, n_scored) = (4, 6, 2);
    let batch = Batch {
        tokens: (0..n_seq * seq_len).map(|_| rng.gen_range(0..23)).collect(),
        n_seq,
        seq_len,
        n_scored,
        targets: (0..n_seq * n_scored).map(|_| rng.gen_range(0..23)).collect(),
    };
    let (_, grads) = m.loss_and_grads(&batch)?;
    let h = 1e-5;
    let mut worst = (String::new(), 0.0f64, 0.0, 0.0);
    for info in m.layout.tensors.clone() {
        let idx: Vec<usize> = if info.range.len() <= 48 {
            info.range.clone().collect()
        } else {
            (0..48).map(|_| rng.gen_range(info.range.clone())).collect()
        };
        for i in idx {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let lp = m.loss_and_grads(&batch)?.0;
            m.params[i] = orig - h;
            let lm = m.loss_and_grads(&batch)?.0;
            m.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            // Key biases have an exactly zero gradient (softmax is shift
            // invariant), so the denominator is floored above roundoff.
            let err = (fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(GRAD_FLOOR);
            if err > worst.1 {
                worst = (info.name.clone(), err, fd, grads[i]);
            }
        }
    }
    let elapsed = t.elapsed();
    Ok(verdict(
        worst.1 < GRAD_REL_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{} tensors, worst relative error {:.2e} ({}: finite difference {:.3e}, analytic {:.3e}), {:.1}s",
            m.layout.tensors.len(),
            worst.1,
            worst.0,
            worst.2,
            worst.3,
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- causal tracing

fn trace_checks(model: &Model<f32>, ds: &Dataset, mode: VocabMode, vocab_seed: u64) -> Result<(usize, Vec<String>)> {
    let vocab = build_vocab(VocabSpec::for_dataset(ds), mode, vocab_seed)?;
    let index = TaskIndex::new(ds);
    let facts = task_facts(ds);
    let examples = select_examples(&vocab, &facts.eval[&EvalSplit::TrainInferred], 60, 0)?;
    let seq = vocab.encode(&examples[0])?;
    let n_layers = model.config.n_layers;
    let len = seq.input.len();
    let mut problems = Vec::new();
    let mut checked = 0;
    for target in [Site::new(n_layers, len - 1), Site::new(mid_layer(n_layers).max(1), len - 2)] {
        let grid = causal_trace(model, &vocab, &index, &examples, &all_sites(n_layers, len), target, 3)?;
        for c in &grid.cells {
            if c.n_used == 0 {
                continue;
            }
            checked += 1;
            if c.site.layer == 0 && c.downstream && c.strength != Some(1.0) {
                problems.push(format!("layer-0 {:?} -> {:?}: {:?}", c.site, target, c.strength));
            }
            if !c.downstream && c.strength != Some(0.0) {
                problems.push(format!("non-ancestor {:?} -> {:?}: {:?}", c.site, target, c.strength));
            }
        }
    }
    // Identity patches: every site replaced by its own cached state.
    let seqs = encode_all(&vocab, &examples)?;
    let batch = Batch::from_inputs(&seqs)?;
    let base = model.forward(&batch, true, &[])?;
    let cache = base.cache.as_ref().expect("captured");
    for site in all_sites(n_layers, len) {
        let values = cache.site(site.layer, site.position);
        let patched = model.forward(
            &batch,
            false,
            &[Intervention {
                layer: site.layer,
                position: site.position,
                values: &values,
            }],
        )?;
        checked += 1;
        if patched.logits != base.logits {
            problems.push(format!("identity patch at {site:?} changed the logits"));
        }
    }
    Ok((checked, problems))
}

fn criterion_3(trained: Option<&(Model<f32>, Dataset)>) -> Result<Outcome> {
    let g = gen_knowledge_graph(40, 6, 4, 3)?;
    let ds = Dataset::Composition(build_composition_dataset(
        &g,
        CompositionOptions {
            phi: 2.0,
            test_size: 20,
            ..Default::default()
        },
        3,
    )?);
    let mut checked = 0;
    let mut problems = Vec::new();
    let mut models = 0;
    for (mode, width) in [(VocabMode::Single, 6), (VocabMode::Multi { name_set_size: 10 }, 8)] {
        let probe_vocab = build_vocab(VocabSpec::for_dataset(&ds), mode, 1)?;
        let m: Model<f32> = init_model(&ModelConfig::new(3, 16, 2, width, probe_vocab.size()), 4)?;
        let (c, p) = trace_checks(&m, &ds, mode, 1)?;
        checked += c;
        problems.extend(p);
        models += 1;
    }
    if let Some((m, ds)) = trained {
        let (c, p) = trace_checks(m, ds, VocabMode::Single, 0)?;
        checked += c;
        problems.extend(p);
        models += 1;
    }
    let mut detail = format!("{models} models (random single/multi-token, trained), {checked} cells and patches checked");
    if let Some(p) = problems.first() {
        detail += &format!("; {} violations, first: {p}", problems.len());
    }
    Ok(verdict(problems.is_empty() && checked > 0, detail))
}

// ---------------------------------------------------------------- memorization

const MEMORIZE_CONFIG: &str = r#"
[data]
task = "composition"
n_entities = 100
n_relations = 200
out_degree = 20
phi = 3.6
test_size = 300

[model]
n_layers = 2
hidden_dim = 128
n_heads = 4

[optim]
lr = 1e-3
warmup_steps = 200
weight_decay = 0.1
batch_size = 512

[train]
total_steps = 5000
eval_every = 250
checkpoint_every = 5000
eval_sample_size = 1000
"#;

fn criterion_4() -> Result<(Outcome, Option<(Model<f32>, Dataset)>)> {
    let t = Instant::now();
    let cfg = RunConfig::from_toml(MEMORIZE_CONFIG)?;
    let mut trainer = Trainer::new(cfg, None, Path::new("."))?;
    trainer.run_with(|r| {
        !(r.get(EvalSplit::TrainAtomic).is_some_and(|a| a >= MEMORIZE_ACC)
            && r.get(EvalSplit::TrainInferred).is_some_and(|a| a >= MEMORIZE_ACC))
    })?;
    // Sampled evaluation decides when to stop; the verdict uses full splits.
    let facts = task_facts(&trainer.dataset);
    let atomic = accuracy(&trainer.model, &encode_all(&trainer.vocab, &facts.eval[&EvalSplit::TrainAtomic])?)?;
    let inferred = accuracy(&trainer.model, &encode_all(&trainer.vocab, &facts.eval[&EvalSplit::TrainInferred])?)?;
    let step = trainer.step();
    let outcome = verdict(
        step <= MEMORIZE_STEPS && atomic >= MEMORIZE_ACC && inferred >= MEMORIZE_ACC,
        format!(
            "|E|=100, 2x128: train_atomic {atomic:.4}, train_inferred {inferred:.4} at step {step}, {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
    Ok((outcome, Some((trainer.model, trainer.dataset))))
}

// ---------------------------------------------------------------- LLM harness

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn criterion_13() -> Result<Outcome> {
    // Gold echo and golden prompts on the fixture the golden files were made from.
    let small = build_complex_dataset(
        ComplexOptions {
            n_entities: 30,
            n_attributes: 2,
            n_values: 6,
            ood_fraction: 0.3,
            comparison_sample_rate: 0.1,
            n_test_per_label: 2,
        },
        3,
    )?;
    let names = NameMap::person_names(30, 0)?;
    let mut changed = Vec::new();
    for (p, retrieval, file) in [
        (Prompting::Direct, true, "prompt_direct_retrieval.txt"),
        (Prompting::Cot, true, "prompt_cot_retrieval.txt"),
        (Prompting::Direct, false, "prompt_direct_full.txt"),
    ] {
        let job = build_job(&small.facts, small.test_queries[0], &names, p, retrieval, 11)?;
        if std::fs::read_to_string(golden_path(file)).ok().as_deref() != Some(job.prompt.as_str()) {
            changed.push(file);
        }
    }
    let options = BaselineOptions {
        concurrency: 1,
        ..Default::default()
    };
    let gold_jobs: Vec<_> = small
        .test_queries
        .iter()
        .map(|&q| build_job(&small.facts, q, &names, Prompting::Direct, false, 0))
        .collect::<Result<_>>()?;
    let (gold, _) = run_baseline(&gold_jobs, &GoldEcho, &options)?;

    // Uniform-random mock on a balanced set of 300 queries per label.
    let big = build_complex_dataset(
        ComplexOptions {
            n_entities: 300,
            n_attributes: 60,
            n_values: 6,
            ood_fraction: 0.1,
            comparison_sample_rate: 0.03,
            n_test_per_label: BALANCED_QUERIES / 3,
        },
        0,
    )?;
    let llm = LlmSection {
        retrieval: true,
        naming: "ids".into(),
        n_queries: BALANCED_QUERIES,
        ..Default::default()
    };
    let jobs = jobs_from_config(&big, &llm)?;
    let per_label: Vec<usize> =
        Cmp::ALL.iter().map(|&l| jobs.iter().filter(|j| j.query.label == l).count()).collect();
    let (random, _) = run_baseline(&jobs, &RandomAnswer { seed: 0 }, &options)?;
    let ok = changed.is_empty()
        && gold.accuracy == 1.0
        && jobs.len() == BALANCED_QUERIES
        && per_label.iter().all(|&n| n == BALANCED_QUERIES / 3)
        && (random.accuracy - 1.0 / 3.0).abs() <= RANDOM_MOCK_TOL;
    Ok(verdict(
        ok,
        format!(
            "gold echo {:.3} on {} jobs; random {:.4} on {} queries {:?}; golden files changed: {:?}",
            gold.accuracy,
            gold_jobs.len(),
            random.accuracy,
            jobs.len(),
            per_label,
            changed
        ),
    ))
}

// ---------------------------------------------------------------- long runs

struct Long {
    dir: PathBuf,
    max_steps: Option<u64>,
}

impl Long {
    fn from_env() -> Option<Long> {
        if std::env::var("GROK_ACCEPTANCE_LONG").ok().as_deref() != Some("1") {
            return None;
        }
        let dir = std::env::var_os("GROK_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
        let max_steps = std::env::var("GROK_ACCEPTANCE_MAX_STEPS").ok().and_then(|s| s.parse().ok());
        Some(Long { dir, max_steps })
    }

    /// Train (or resume) `name` until `done` holds for the history or the
    /// step budget runs out.
    fn run(&self, name: &str, toml: &str, done: impl Fn(&[EvalRecord]) -> bool) -> Result<(RunDir, Vec<EvalRecord>)> {
        let mut cfg = RunConfig::from_toml(toml)?;
        if let Some(m) = self.max_steps {
            cfg.train.total_steps = cfg.train.total_steps.min(m);
        }
        let dir = self.dir.join(name);
        let mut trainer = Trainer::new(cfg, Some(&dir), &dir)?;
        let mut history = trainer.history.clone();
        if !done(&history) {
            trainer.run_with(|r| {
                if history.last().map(|h| h.step) != Some(r.step) {
                    history.push(r.clone());
                }
                let stop = done(&history);
                eprintln!(
                    "[{name}] step {} {}",
                    r.step,
                    r.accuracy.iter().map(|(k, v)| format!("{}={v:.3}", k.name())).collect::<Vec<_>>().join(" ")
                );
                !stop
            })?;
        }
        let history = trainer.history.clone();
        Ok((RunDir::open(&dir)?, history))
    }
}

fn at(history: &[EvalRecord], step: u64, split: EvalSplit) -> Option<f64> {
    history.iter().find(|r| r.step == step).and_then(|r| r.get(split))
}

fn last(history: &[EvalRecord], split: EvalSplit) -> Option<f64> {
    history.last().and_then(|r| r.get(split))
}

fn fmt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn composition_config(n_entities: u32, phi: f64, weight_decay: f64, share: bool, total: u64) -> String {
    format!(
        r#"
[data]
task = "composition"
n_entities = {n_entities}
n_relations = 200
out_degree = 20
phi = {phi}
test_size = 3000

[model]
n_layers = 4
hidden_dim = 256
n_heads = 4
share_layers = {share}

[optim]
weight_decay = {weight_decay}

[train]
total_steps = {total}
eval_every = 500
checkpoint_every = 5000
eval_sample_size = 3000
"#
    )
}

const COMPARISON_CONFIG: &str = r#"
[data]
task = "comparison"
n_entities = 300
n_attributes = 10
n_values = 20
phi = 7.2
test_size = 3000

[model]
n_layers = 4
hidden_dim = 256
n_heads = 4

[train]
total_steps = 100000
eval_every = 500
checkpoint_every = 5000
eval_sample_size = 3000
"#;

const COMPLEX_CONFIG: &str = r#"
[data]
task = "complex"
n_entities = 300
n_attributes = 5
n_values = 20
comparison_sample_rate = 0.03
n_test_per_label = 30

[model]
n_layers = 4
hidden_dim = 256
n_heads = 4

[train]
total_steps = 150000
eval_every = 500
checkpoint_every = 5000
eval_sample_size = 3000
"#;

/// Grokked after at least `EXTENDED_FACTOR` times the saturation step.
fn extended_and(split: EvalSplit, threshold: f64) -> impl Fn(&[EvalRecord]) -> bool {
    move |h: &[EvalRecord]| {
        let Some(sat) = detect_saturation(h, SATURATION_THRESHOLD) else { return false };
        let r = h.last().unwrap();
        r.step >= EXTENDED_FACTOR * sat.max(1) && r.get(split).is_some_and(|a| a >= threshold)
    }
}

fn reaches(split: EvalSplit, threshold: f64) -> impl Fn(&[EvalRecord]) -> bool {
    move |h: &[EvalRecord]| h.last().and_then(|r| r.get(split)).is_some_and(|a| a >= threshold)
}

fn criterion_5(long: &Long) -> Result<(Outcome, RunDir, Vec<EvalRecord>)> {
    let (run, h) = long.run(
        "composition_e500",
        &composition_config(500, 9.0, 0.1, false, 150_000),
        extended_and(EvalSplit::TestId, GROKKED),
    )?;
    let sat = detect_saturation(&h, SATURATION_THRESHOLD);
    let id_at_sat = sat.and_then(|s| at(&h, s, EvalSplit::TestId));
    let extended: Vec<f64> = h
        .iter()
        .filter(|r| sat.is_some_and(|s| r.step >= EXTENDED_FACTOR * s))
        .filter_map(|r| r.get(EvalSplit::TestId))
        .collect();
    let best_late = extended.iter().cloned().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let max_ood = h.iter().filter_map(|r| r.get(EvalSplit::TestOod)).fold(0.0, f64::max);
    let ok = id_at_sat.is_some_and(|a| a < SATURATION_ID_MAX)
        && best_late.is_some_and(|a| a >= GROKKED)
        && max_ood <= COMPOSITION_OOD_MAX;
    let detail = format!(
        "saturation at {sat:?} with test_id {}; best test_id after {EXTENDED_FACTOR}x saturation {}; max test_ood {max_ood:.3}; {} steps",
        fmt(id_at_sat),
        fmt(best_late),
        h.last().map_or(0, |r| r.step)
    );
    Ok((verdict(ok, detail), run, h))
}

fn criterion_6(long: &Long) -> Result<(Outcome, RunDir, Vec<EvalRecord>)> {
    let (run, h) = long.run("comparison_e300", COMPARISON_CONFIG, |h| {
        reaches(EvalSplit::TestId, GROKKED)(h) && reaches(EvalSplit::TestOod, GROKKED)(h)
    })?;
    let (id, ood) = (last(&h, EvalSplit::TestId), last(&h, EvalSplit::TestOod));
    let ok = id.is_some_and(|a| a >= GROKKED) && ood.is_some_and(|a| a >= GROKKED);
    Ok((
        verdict(
            ok,
            format!(
                "final test_id {}, test_ood {} at step {}",
                fmt(id),
                fmt(ood),
                h.last().map_or(0, |r| r.step)
            ),
        ),
        run,
        h,
    ))
}

/// Steps to `GROKKED` on the ID test split for each configuration; the
/// ordering must follow `values` from slowest to fastest.
fn ordering(long: &Long, label: &str, runs: &[(f64, String)]) -> Result<Outcome> {
    let mut steps = Vec::new();
    for (v, toml) in runs {
        let (_, h) = long.run(&format!("{label}_{v}"), toml, reaches(EvalSplit::TestId, GROKKED))?;
        steps.push((*v, first_step_at(&h, EvalSplit::TestId, GROKKED)));
    }
    let all = steps.iter().all(|(_, s)| s.is_some());
    let decreasing = steps.windows(2).all(|w| matches!((w[0].1, w[1].1), (Some(a), Some(b)) if b < a));
    Ok(verdict(
        all && decreasing,
        format!(
            "steps to test_id >= {GROKKED}: {}",
            steps.iter().map(|(v, s)| format!("{label}={v}: {s:?}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn lens_value(run: &RunDir, model: &Model<f32>, role: Role, target: LensTarget, layer: usize, metric: &str) -> Result<Option<f64>> {
    let c = &run.config.interp;
    let stats = lens_split(run, model, EvalSplit::TestId, role, target, c.n_examples, c.seed)?;
    let key = format!("{metric}:{}", target.name());
    Ok(stats.iter().find(|s| s.layer == layer && s.metric == key).map(|s| s.value))
}

fn criterion_8(run: &RunDir, h: &[EvalRecord]) -> Result<Outcome> {
    let Some(sat) = detect_saturation(h, SATURATION_THRESHOLD) else {
        return Ok(verdict(false, "the run never saturated".into()));
    };
    let c = &run.config.interp;
    let n_layers = run.config.model.n_layers;
    let mid = mid_layer(n_layers);
    let mut strength = Vec::new();
    let mut mrr_r2 = Vec::new();
    let mut mrr_b = Vec::new();
    for step in [Some(sat), None] {
        let (model, _) = run.load_model(step)?;
        let grid = trace_split(run, &model, EvalSplit::TestId, None, c.n_examples, c.seed)?;
        let examples = select_examples(&run.vocab, &run.split(EvalSplit::TestId)?, 1, c.seed)?;
        let r1 = role_position(&run.vocab, &examples[0], Role::R1)?;
        strength.push(grid.cell(Site::new(mid, r1)).and_then(|cell| cell.strength));
        mrr_r2.push(lens_value(run, &model, Role::R2, LensTarget::Relation2, mid, "mrr")?);
        mrr_b.push(lens_value(run, &model, Role::R1, LensTarget::Bridge, mid, "mrr")?);
    }
    let gain = |v: &[Option<f64>]| match (v[0], v[1]) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    let ok = gain(&strength).is_some_and(|g| g >= TREND_GAIN)
        && gain(&mrr_r2).is_some_and(|g| g >= TREND_GAIN)
        && mrr_b[1].is_some_and(|m| m >= FINAL_MRR);
    Ok(verdict(
        ok,
        format!(
            "mid layer {mid} of {n_layers}; saturation step {sat} -> final: strength S[{mid},r1]->prediction {} -> {}, MRR(r2 @ S[{mid},r2]) {} -> {}, MRR(b @ S[{mid},r1]) final {}",
            fmt(strength[0]),
            fmt(strength[1]),
            fmt(mrr_r2[0]),
            fmt(mrr_r2[1]),
            fmt(mrr_b[1])
        ),
    ))
}

fn criterion_9(run: &RunDir) -> Result<Outcome> {
    let n_layers = run.config.model.n_layers;
    let mid = mid_layer(n_layers);
    let upper = (mid + 2).min(n_layers);
    let mut recalls = Vec::new();
    for (step, _) in run.checkpoints() {
        let (model, _) = run.load_model(Some(step))?;
        recalls.push((step, lens_value(run, &model, Role::A, LensTarget::LabelSpace, upper, "recall@3")?));
    }
    let (model, _) = run.load_model(None)?;
    let v1 = lens_value(run, &model, Role::E1, LensTarget::Value1, mid, "mrr")?;
    let v2 = lens_value(run, &model, Role::E2, LensTarget::Value2, mid, "mrr")?;
    let min_recall = recalls.iter().map(|(_, r)| r.unwrap_or(0.0)).fold(1.0, f64::min);
    let ok = !recalls.is_empty()
        && min_recall >= LABEL_RECALL
        && v1.is_some_and(|m| m >= FINAL_MRR)
        && v2.is_some_and(|m| m >= FINAL_MRR);
    Ok(verdict(
        ok,
        format!(
            "layers mid={mid}, upper={upper} of {n_layers}; min label-space recall@3 at S[{upper},a] over {} checkpoints {min_recall:.3}; final MRR(v1 @ S[{mid},e1]) {}, MRR(v2 @ S[{mid},e2]) {}",
            recalls.len(),
            fmt(v1),
            fmt(v2)
        ),
    ))
}

fn criterion_11(long: &Long, control: Option<&[EvalRecord]>) -> Result<Outcome> {
    let (_, h) = long.run(
        "composition_e500_shared",
        &composition_config(500, 9.0, 0.1, true, 150_000),
        reaches(EvalSplit::TestOod, SHARED_OOD_MIN),
    )?;
    let shared = h.iter().filter_map(|r| r.get(EvalSplit::TestOod)).fold(0.0, f64::max);
    let control = control.map(|c| c.iter().filter_map(|r| r.get(EvalSplit::TestOod)).fold(0.0, f64::max));
    let ok = shared >= SHARED_OOD_MIN && control.is_some_and(|c| c <= COMPOSITION_OOD_MAX);
    Ok(verdict(
        ok,
        format!(
            "shared best test_ood {shared:.3} by step {}; unshared control best test_ood {}",
            h.last().map_or(0, |r| r.step),
            fmt(control)
        ),
    ))
}

fn criterion_12(long: &Long) -> Result<Outcome> {
    let (_, h) = long.run("complex_e300", COMPLEX_CONFIG, reaches(EvalSplit::TestOod, GROKKED))?;
    let sat = detect_saturation(&h, SATURATION_THRESHOLD);
    let query = last(&h, EvalSplit::TestOod);
    let atomic_sat = sat.and_then(|s| at(&h, s, EvalSplit::AtomicOod));
    let atomic_final = last(&h, EvalSplit::AtomicOod);
    let ok = query.is_some_and(|a| a >= GROKKED)
        && matches!((atomic_sat, atomic_final), (Some(a), Some(b)) if b - a >= ATOMIC_OOD_GAIN);
    Ok(verdict(
        ok,
        format!(
            "final OOD-OOD query accuracy {}; atomic_ood {} at saturation {sat:?} -> {} at step {}",
            fmt(query),
            fmt(atomic_sat),
            fmt(atomic_final),
            h.last().map_or(0, |r| r.step)
        ),
    ))
}

fn selected(n: u32) -> bool {
    match std::env::var("GROK_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(n)),
        Err(_) => true,
    }
}

fn unselected() -> Result<Outcome> {
    Ok(skip("not selected by GROK_ACCEPTANCE_ONLY"))
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "oracle equivalence", if selected(1) { criterion_1() } else { unselected() });
    ok &= report(2, "gradient correctness", if selected(2) { criterion_2() } else { unselected() });
    let (c4, trained) = match selected(4).then(criterion_4) {
        Some(Ok((o, m))) => (Ok(o), m),
        Some(Err(e)) => (Err(e), None),
        None => (unselected(), None),
    };
    let c3 = if selected(3) { criterion_3(trained.as_ref()) } else { unselected() };
    ok &= report(3, "causal-tracing sanity", c3);
    ok &= report(4, "memorization capacity", c4);

    const GATE: &str = "long-running; set GROK_ACCEPTANCE_LONG=1";
    match Long::from_env() {
        _ if !(5..=12).any(selected) => {
            for n in 5..=12 {
                ok &= report(n, "long run", unselected());
            }
        }
        None => {
            for (n, title) in [
                (5, "composition grokking"),
                (6, "comparison grokking"),
                (7, "phi ordering"),
                (8, "composition circuit trends"),
                (9, "comparison circuit"),
                (10, "weight-decay ordering"),
                (11, "parameter sharing"),
                (12, "complex-task run"),
            ] {
                ok &= report(n, title, Ok(skip(GATE)));
            }
        }
        Some(long) => {
            let c5 = criterion_5(&long);
            let control = c5.as_ref().ok().map(|(_, _, h)| h.clone());
            let run5 = c5.as_ref().ok().map(|(_, r, h)| (RunDir::open(&r.dir), h.clone()));
            ok &= report(5, "composition grokking", c5.map(|(o, _, _)| o));
            let c6 = criterion_6(&long);
            let run6 = c6.as_ref().ok().map(|(_, r, _)| r.dir.clone());
            ok &= report(6, "comparison grokking", c6.map(|(o, _, _)| o));
            let phis = [3.6, 7.2, 12.6].map(|p| (p, composition_config(300, p, 0.1, false, 100_000)));
            ok &= report(7, "phi ordering", ordering(&long, "phi", &phis));
            ok &= report(
                8,
                "composition circuit trends",
                match run5 {
                    Some((run, h)) => run.and_then(|r| criterion_8(&r, &h)),
                    None => Ok(skip("criterion 5 run unavailable")),
                },
            );
            ok &= report(
                9,
                "comparison circuit",
                match run6 {
                    Some(dir) => RunDir::open(&dir).and_then(|r| criterion_9(&r)),
                    None => Ok(skip("criterion 6 run unavailable")),
                },
            );
            let wds = [0.03, 0.1, 0.3].map(|w| (w, composition_config(300, 7.2, w, false, 100_000)));
            ok &= report(10, "weight-decay ordering", ordering(&long, "wd", &wds));
            ok &= report(11, "parameter sharing", criterion_11(&long, control.as_deref()));
            ok &= report(12, "complex-task run", criterion_12(&long));
        }
    }

    ok &= report(13, "LLM harness self-test", if selected(13) { criterion_13() } else { unselected() });
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
