// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop with periodic evaluation, checkpoints and resumption.
//!
//! A run directory holds `dataset.jsonl`, `vocab.jsonl`, `config.toml`,
//! `metrics.csv`, `report.json` and `checkpoints/step_XXXXXXXX.ckpt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{serialize_dataset_with_config, Dataset};
use crate::model::{init_model, load_checkpoint, save_checkpoint, Batch, Checkpoint, Model, Scalar};
use crate::optim::{epoch_seed, make_batches, OptimizerState};
use crate::vocab::{build_vocab, save_vocab_with_config, Fact, TokenSequence, Vocab, VocabSpec};
use crate::{Error, Result};

/// Evaluation splits, in `metrics.csv` column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    TrainAtomic,
    TrainInferred,
    TestId,
    TestOod,
    /// Held-out atomic facts the model never sees (complex task only).
    AtomicOod,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 5] = [
        EvalSplit::TrainAtomic,
        EvalSplit::TrainInferred,
        EvalSplit::TestId,
        EvalSplit::TestOod,
        EvalSplit::AtomicOod,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::TrainAtomic => "train_atomic",
            EvalSplit::TrainInferred => "train_inferred",
            EvalSplit::TestId => "test_id",
            EvalSplit::TestOod => "test_ood",
            EvalSplit::AtomicOod => "atomic_ood",
        }
    }

    pub fn parse(s: &str) -> Option<EvalSplit> {
        EvalSplit::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Facts of a dataset grouped by role in training and evaluation.
#[derive(Debug, Clone, Default)]
pub struct TaskFacts {
    pub train: Vec<Fact>,
    pub eval: BTreeMap<EvalSplit, Vec<Fact>>,
}

pub fn task_facts(dataset: &Dataset) -> TaskFacts {
    let mut eval = BTreeMap::new();
    let train;
    match dataset {
        Dataset::Composition(d) => {
            let atomic: Vec<Fact> = d.atomic().copied().map(Fact::Atomic).collect();
            let inferred: Vec<Fact> = d.train_inferred_id.iter().copied().map(Fact::TwoHop).collect();
            train = atomic.iter().chain(&inferred).copied().collect();
            eval.insert(EvalSplit::TrainAtomic, atomic);
            eval.insert(EvalSplit::TrainInferred, inferred);
            eval.insert(EvalSplit::TestId, d.test_inferred_id.iter().copied().map(Fact::TwoHop).collect());
            eval.insert(EvalSplit::TestOod, d.test_inferred_ood.iter().copied().map(Fact::TwoHop).collect());
        }
        Dataset::Comparison(d) => {
            let atomic: Vec<Fact> = d.atomic().copied().map(Fact::Attribute).collect();
            let inferred: Vec<Fact> = d.train_inferred_id.iter().copied().map(Fact::Comparison).collect();
            train = atomic.iter().chain(&inferred).copied().collect();
            eval.insert(EvalSplit::TrainAtomic, atomic);
            eval.insert(EvalSplit::TrainInferred, inferred);
            eval.insert(EvalSplit::TestId, d.test_inferred_id.iter().copied().map(Fact::Comparison).collect());
            eval.insert(EvalSplit::TestOod, d.test_inferred_ood.iter().copied().map(Fact::Comparison).collect());
        }
        Dataset::Complex(d) => {
            let atomic: Vec<Fact> = d.facts.atomic_id.iter().copied().map(Fact::Attribute).collect();
            let inferred: Vec<Fact> = d.train_comparisons().copied().map(Fact::Comparison).collect();
            train = atomic.iter().chain(&inferred).copied().collect();
            eval.insert(EvalSplit::TrainAtomic, atomic);
            eval.insert(EvalSplit::TrainInferred, inferred);
            eval.insert(EvalSplit::TestOod, d.test_queries.iter().copied().map(Fact::Comparison).collect());
            eval.insert(EvalSplit::AtomicOod, d.facts.atomic_ood.iter().copied().map(Fact::Attribute).collect());
        }
    }
    TaskFacts { train, eval }
}

pub fn encode_all(vocab: &Vocab, facts: &[Fact]) -> Result<Vec<TokenSequence>> {
    facts.iter().map(|f| vocab.encode(f)).collect()
}

/// Exact-match accuracy of greedy decoding over all `seqs`.
pub fn accuracy<T: Scalar>(model: &Model<T>, seqs: &[TokenSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<&TokenSequence>> = BTreeMap::new();
    for s in seqs {
        groups.entry((s.input.len(), s.target.len())).or_default().push(s);
    }
    let mut correct = 0usize;
    for group in groups.values() {
        for chunk in group.chunks(512) {
            let preds = model.greedy(chunk)?;
            correct += chunk.iter().zip(&preds).filter(|(s, p)| s.target == **p).count();
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

/// Accuracy on a uniform sample of at most `sample_size` examples drawn
/// with `seed`; the whole set when it is smaller.
pub fn evaluate<T: Scalar>(model: &Model<T>, seqs: &[TokenSequence], sample_size: usize, seed: u64) -> Result<f64> {
    accuracy(model, &sample_subset(seqs, sample_size, seed))
}

fn sample_subset(seqs: &[TokenSequence], sample_size: usize, seed: u64) -> Vec<TokenSequence> {
    if seqs.len() <= sample_size {
        return seqs.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, seqs.len(), sample_size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| seqs[i].clone()).collect()
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: u64,
    /// Mean training loss since the previous evaluation (NaN at step 0).
    pub loss: f64,
    pub accuracy: BTreeMap<EvalSplit, f64>,
}

impl EvalRecord {
    pub fn get(&self, split: EvalSplit) -> Option<f64> {
        self.accuracy.get(&split).copied()
    }
}

/// First evaluation at which both training accuracies reach `threshold`.
pub fn detect_saturation(history: &[EvalRecord], threshold: f64) -> Option<u64> {
    history
        .iter()
        .find(|r| {
            r.get(EvalSplit::TrainAtomic).is_some_and(|a| a >= threshold)
                && r.get(EvalSplit::TrainInferred).is_some_and(|a| a >= threshold)
        })
        .map(|r| r.step)
}

/// First evaluation at which `split` reaches `threshold`.
pub fn first_step_at(history: &[EvalRecord], split: EvalSplit, threshold: f64) -> Option<u64> {
    history.iter().find(|r| r.get(split).is_some_and(|a| a >= threshold)).map(|r| r.step)
}

pub const SATURATION_THRESHOLD: f64 = 0.99;
pub const GENERALIZATION_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub saturation_step: Option<u64>,
    /// Split whose 0.9 crossing defines generalization.
    pub generalization_split: EvalSplit,
    pub generalization_step: Option<u64>,
    /// `generalization_step / saturation_step`.
    pub ratio: Option<f64>,
    pub final_record: Option<EvalRecord>,
}

impl TrainReport {
    pub fn from_history(history: &[EvalRecord], steps: u64, generalization_split: EvalSplit) -> Self {
        let saturation_step = detect_saturation(history, SATURATION_THRESHOLD);
        let generalization_step = first_step_at(history, generalization_split, GENERALIZATION_THRESHOLD);
        let ratio = match (saturation_step, generalization_step) {
            (Some(s), Some(g)) if s > 0 => Some(g as f64 / s as f64),
            _ => None,
        };
        TrainReport {
            steps,
            saturation_step,
            generalization_split,
            generalization_step,
            ratio,
            final_record: history.last().cloned(),
        }
    }
}

pub fn metrics_header(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut s = format!("# config: {json}\nstep,epoch,loss");
    for split in EvalSplit::ALL {
        let _ = write!(s, ",acc_{}", split.name());
    }
    s.push('\n');
    s
}

pub fn metrics_row(r: &EvalRecord) -> String {
    let mut s = format!("{},{},", r.step, r.epoch);
    if r.loss.is_finite() {
        let _ = write!(s, "{:.6}", r.loss);
    }
    for split in EvalSplit::ALL {
        s.push(',');
        if let Some(a) = r.get(split) {
            let _ = write!(s, "{a:.6}");
        }
    }
    s.push('\n');
    s
}

/// Parse a `metrics.csv` written by [`Trainer`].
pub fn read_metrics(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut columns: Option<Vec<String>> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let Some(cols) = &columns else {
            columns = Some(cells.iter().map(|c| c.to_string()).collect());
            continue;
        };
        if cells.len() != cols.len() {
            return Err(Error::format(path, line_no, format!("expected {} cells, found {}", cols.len(), cells.len())));
        }
        let num = |c: &str| -> Result<f64> {
            c.parse::<f64>().map_err(|_| Error::format(path, line_no, format!("bad number {c:?}")))
        };
        let mut rec = EvalRecord {
            step: 0,
            epoch: 0,
            loss: f64::NAN,
            accuracy: BTreeMap::new(),
        };
        for (col, cell) in cols.iter().zip(&cells) {
            if cell.is_empty() {
                continue;
            }
            match col.as_str() {
                "step" => rec.step = num(cell)? as u64,
                "epoch" => rec.epoch = num(cell)? as u64,
                "loss" => rec.loss = num(cell)?,
                c => {
                    if let Some(split) = EvalSplit::ALL.iter().find(|s| c == format!("acc_{}", s.name())) {
                        rec.accuracy.insert(*split, num(cell)?);
                    }
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Checkpoints of a run directory, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Vec<(u64, PathBuf)> {
    let Ok(entries) = std::fs::read_dir(dir.join("checkpoints")) else {
        return Vec::new();
    };
    let mut out: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step: u64 = name.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    out.sort();
    out
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    list_checkpoints(dir).pop().map(|(_, p)| p)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    run_config: RunConfig,
    loss_sum: f64,
    loss_count: u64,
}

/// A training run.
pub struct Trainer {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub train: Vec<TokenSequence>,
    /// Fixed evaluation samples.
    pub eval_sets: BTreeMap<EvalSplit, Vec<TokenSequence>>,
    pub history: Vec<EvalRecord>,
    out_dir: Option<PathBuf>,
    batches_per_epoch: u64,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
    loss_sum: f64,
    loss_count: u64,
    saturation_saved: bool,
}

impl Trainer {
    /// Build a run from `config`. With an `out_dir` that already holds a
    /// checkpoint, training resumes from the latest one. Relative dataset
    /// paths resolve against `base_dir`.
    pub fn new(config: RunConfig, out_dir: Option<&Path>, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let dataset = config.data.build(base_dir)?;
        let vocab = build_vocab(VocabSpec::for_dataset(&dataset), config.vocab.mode()?, config.vocab.seed)?;
        let facts = task_facts(&dataset);
        let train = encode_all(&vocab, &facts.train)?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut eval_sets = BTreeMap::new();
        let mut max_len = train.iter().map(TokenSequence::len).max().unwrap_or(1);
        for (k, (split, f)) in facts.eval.iter().enumerate() {
            if f.is_empty() {
                continue;
            }
            let seqs = encode_all(&vocab, f)?;
            max_len = max_len.max(seqs.iter().map(TokenSequence::len).max().unwrap_or(1));
            let seed = config.train.seed ^ (0xE7A1_0000 + k as u64);
            eval_sets.insert(*split, sample_subset(&seqs, config.train.eval_sample_size, seed));
        }
        let model_cfg = config.model.model_config(max_len, vocab.size());
        let model = init_model::<f32>(&model_cfg, config.model.seed)?;
        let optimizer = OptimizerState::new(config.optim.adamw(), model.params.len());
        let bs = config.optim.batch_size;
        let batches_per_epoch = make_batches(&train, bs, 0).len() as u64;
        let mut t = Trainer {
            config,
            dataset,
            vocab,
            model,
            optimizer,
            train,
            eval_sets,
            history: Vec::new(),
            out_dir: out_dir.map(Path::to_path_buf),
            batches_per_epoch,
            epoch_cache: None,
            loss_sum: 0.0,
            loss_count: 0,
            saturation_saved: false,
        };
        if let Some(dir) = out_dir {
            t.prepare_dir(dir)?;
        }
        Ok(t)
    }

    fn prepare_dir(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        if let Some(ckpt) = latest_checkpoint(dir) {
            return self.resume(dir, &ckpt);
        }
        let cfg = serde_json::to_value(&self.config).expect("config serializes");
        serialize_dataset_with_config(&self.dataset, &dir.join("dataset.jsonl"), Some(cfg.clone()))?;
        save_vocab_with_config(&self.vocab, &dir.join("vocab.jsonl"), Some(cfg))?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, self.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        self.write_metrics()
    }

    fn resume(&mut self, dir: &Path, ckpt_path: &Path) -> Result<()> {
        let ck = load_checkpoint(ckpt_path)?;
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Data(format!("{}: bad checkpoint metadata: {e}", ckpt_path.display())))?;
        let mut stored = meta.run_config.clone();
        stored.train.total_steps = self.config.train.total_steps;
        if stored != self.config {
            return Err(Error::Config(format!(
                "{} was written by a different configuration; only train.total_steps may change on resume",
                ckpt_path.display()
            )));
        }
        if ck.config != self.model.config {
            return Err(Error::Config(format!("{} holds a different model shape", ckpt_path.display())));
        }
        self.model = Model::from_params(ck.config, ck.params)?;
        let (m, v) = ck
            .moments
            .ok_or_else(|| Error::Data(format!("{} has no optimizer state", ckpt_path.display())))?;
        self.optimizer.m = m;
        self.optimizer.v = v;
        self.optimizer.step = ck.step;
        self.loss_sum = meta.loss_sum;
        self.loss_count = meta.loss_count;
        let metrics = dir.join("metrics.csv");
        self.history = if metrics.exists() { read_metrics(&metrics)? } else { Vec::new() };
        self.history.retain(|r| r.step <= ck.step);
        self.saturation_saved = detect_saturation(&self.history, SATURATION_THRESHOLD).is_some();
        self.write_metrics()
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn epoch(&self) -> u64 {
        self.step() / self.batches_per_epoch
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.batches_per_epoch
    }

    /// Split whose 0.9 crossing marks generalization for this task.
    pub fn generalization_split(&self) -> EvalSplit {
        if self.eval_sets.contains_key(&EvalSplit::TestId) {
            EvalSplit::TestId
        } else {
            EvalSplit::TestOod
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let step = self.step();
        let (epoch, idx) = (step / self.batches_per_epoch, (step % self.batches_per_epoch) as usize);
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let seed = epoch_seed(self.config.train.seed, epoch);
            self.epoch_cache = Some((epoch, make_batches(&self.train, self.config.optim.batch_size, seed)));
        }
        self.epoch_cache.as_ref().unwrap().1[idx].clone()
    }

    /// One optimization step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let idx = self.next_batch();
        let batch = Batch::from_sequences(idx.iter().map(|&i| &self.train[i]))?;
        let step = self.step() + 1;
        let (loss, grads) = self.model.loss_and_grads(&batch).map_err(|e| match e {
            Error::NonFinite { what } => Error::NonFinite {
                what: format!("{what} at step {step}"),
            },
            e => e,
        })?;
        self.optimizer.adamw_step(&mut self.model, &grads).map_err(|e| match e {
            Error::NonFinite { what } => Error::NonFinite {
                what: format!("{what} at step {step}"),
            },
            e => e,
        })?;
        let loss = f64::from(loss);
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    /// Evaluate every split and append the record to the history.
    pub fn evaluate_all(&mut self) -> Result<EvalRecord> {
        let mut acc = BTreeMap::new();
        for (split, seqs) in &self.eval_sets {
            acc.insert(*split, accuracy(&self.model, seqs)?);
        }
        let loss = if self.loss_count == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.loss_count as f64
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        let rec = EvalRecord {
            step: self.step(),
            epoch: self.epoch(),
            loss,
            accuracy: acc,
        };
        self.history.retain(|r| r.step != rec.step);
        self.history.push(rec.clone());
        self.write_metrics()?;
        Ok(rec)
    }

    fn write_metrics(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let mut text = metrics_header(&self.config);
        for r in &self.history {
            text.push_str(&metrics_row(r));
        }
        let path = dir.join("metrics.csv");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Current state as a checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            run_config: self.config.clone(),
            loss_sum: self.loss_sum,
            loss_count: self.loss_count,
        };
        Checkpoint {
            config: self.model.config.clone(),
            step: self.step(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            params: self.model.params.clone(),
            moments: Some((self.optimizer.m.clone(), self.optimizer.v.clone())),
        }
    }

    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else { return Ok(None) };
        let path = dir.join("checkpoints").join(checkpoint_name(self.step()));
        save_checkpoint(&path, &self.checkpoint())?;
        Ok(Some(path))
    }

    pub fn report(&self) -> TrainReport {
        TrainReport::from_history(&self.history, self.step(), self.generalization_split())
    }

    /// Train to `train.total_steps`.
    pub fn run(&mut self) -> Result<TrainReport> {
        self.run_with(|_| true)
    }

    /// Train to `train.total_steps`, calling `on_eval` after every
    /// evaluation; returning `false` stops early (with a checkpoint).
    pub fn run_with(&mut self, mut on_eval: impl FnMut(&EvalRecord) -> bool) -> Result<TrainReport> {
        let (total, eval_every, ckpt_every) =
            (self.config.train.total_steps, self.config.train.eval_every, self.config.train.checkpoint_every);
        if self.history.last().map(|r| r.step) != Some(self.step()) {
            let rec = self.evaluate_all()?;
            if !on_eval(&rec) {
                return self.finish();
            }
        }
        while self.step() < total {
            self.train_step()?;
            let step = self.step();
            if step % eval_every == 0 || step == total {
                let rec = self.evaluate_all()?;
                let saturated = !self.saturation_saved && detect_saturation(&self.history, SATURATION_THRESHOLD).is_some();
                if step % ckpt_every == 0 || saturated {
                    self.saturation_saved |= saturated;
                    self.save_checkpoint()?;
                }
                if !on_eval(&rec) {
                    break;
                }
            }
        }
        self.finish()
    }

    fn finish(&mut self) -> Result<TrainReport> {
        if let Some(dir) = &self.out_dir {
            let last = dir.join("checkpoints").join(checkpoint_name(self.step()));
            if !last.exists() {
                self.save_checkpoint()?;
            }
        }
        let report = self.report();
        if let Some(dir) = &self.out_dir {
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(report)
    }
}

/// Load a model from a run directory (latest checkpoint) or a checkpoint
/// file, together with its run configuration.
pub fn load_run_model(path: &Path) -> Result<(Model<f32>, RunConfig, u64)> {
    let ckpt = if path.is_dir() {
        latest_checkpoint(path).ok_or_else(|| Error::Data(format!("no checkpoint under {}", path.display())))?
    } else {
        path.to_path_buf()
    };
    let ck = load_checkpoint(&ckpt)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta)
        .map_err(|e| Error::Data(format!("{}: bad checkpoint metadata: {e}", ckpt.display())))?;
    Ok((Model::from_params(ck.config, ck.params)?, meta.run_config, ck.step))
}
