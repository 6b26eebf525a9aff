// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analyses of a finished (or running) training directory: the glue
//! between checkpoints on disk and the interp toolkit.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{load_dataset, Dataset};
use crate::interp::{
    all_sites, causal_trace, collect_states, group_by_layout, lens_annotations, lens_profile, linear_probe,
    prune_circuit, CausalGrid, CircuitReport, LensStat, LensTarget, ProbeResult, Site, TaskIndex,
};
use crate::model::{load_checkpoint, Model, Scalar};
use crate::trainer::{list_checkpoints, task_facts, EvalSplit};
use crate::vocab::{load_vocab, Fact, Role, Vocab};
use crate::{Error, Result};

/// A training directory as written by the trainer.
pub struct RunDir {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub index: TaskIndex,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "expected run artifact is missing")))
    }
}

impl RunDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&require(dir.join("config.toml"))?)?;
        let dataset = load_dataset(&require(dir.join("dataset.jsonl"))?)?;
        let vocab = load_vocab(&require(dir.join("vocab.jsonl"))?)?;
        let index = TaskIndex::new(&dataset);
        Ok(RunDir {
            dir: dir.to_path_buf(),
            config,
            dataset,
            vocab,
            index,
        })
    }

    pub fn checkpoints(&self) -> Vec<(u64, PathBuf)> {
        list_checkpoints(&self.dir)
    }

    /// The checkpoint at `step`, or the latest one.
    pub fn checkpoint(&self, step: Option<u64>) -> Result<(u64, PathBuf)> {
        let all = self.checkpoints();
        let expected = self.dir.join("checkpoints");
        match step {
            None => all
                .last()
                .cloned()
                .ok_or_else(|| Error::Data(format!("no checkpoint found; expected step_*.ckpt under {}", expected.display()))),
            Some(s) => all.into_iter().find(|(k, _)| *k == s).ok_or_else(|| {
                Error::Data(format!("no checkpoint for step {s}; expected {}", expected.join(format!("step_{s:08}.ckpt")).display()))
            }),
        }
    }

    pub fn load_model(&self, step: Option<u64>) -> Result<(Model<f32>, u64)> {
        let (s, p) = self.checkpoint(step)?;
        let ck = load_checkpoint(&p)?;
        Ok((Model::from_params(ck.config, ck.params)?, s))
    }

    pub fn split(&self, split: EvalSplit) -> Result<Vec<Fact>> {
        task_facts(&self.dataset)
            .eval
            .remove(&split)
            .filter(|f| !f.is_empty())
            .ok_or_else(|| Error::Data(format!("the {} task has no {} split", self.dataset.task(), split.name())))
    }
}

/// The middle block, standing in for the layer the deep reference model
/// reads its bridge from.
pub fn mid_layer(n_layers: usize) -> usize {
    n_layers / 2
}

/// Up to `n` facts from the largest layout group, sampled with `seed` and
/// kept in their original order.
pub fn select_examples(vocab: &Vocab, facts: &[Fact], n: usize, seed: u64) -> Result<Vec<Fact>> {
    let groups = group_by_layout(vocab, facts)?;
    let group = groups
        .into_values()
        .max_by_key(Vec::len)
        .ok_or_else(|| Error::Data("no examples to select from".into()))?;
    if group.len() <= n {
        return Ok(group);
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), group.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| group[i]).collect())
}

/// The top-layer state at the last input position, whose output is the
/// model's prediction of the first answer token.
pub fn prediction_site(model_layers: usize, vocab: &Vocab, example: &Fact) -> Result<Site> {
    let s = vocab.encode(example)?;
    Ok(Site::new(model_layers, s.answer_index()))
}

/// Position of `role` in the layout of `example`.
pub fn role_position(vocab: &Vocab, example: &Fact, role: Role) -> Result<usize> {
    let s = vocab.encode(example)?;
    s.position(role)
        .ok_or_else(|| Error::Data(format!("role {} is absent from {:?} facts", role.name(), s.kind)))
}

/// Causal grid of every site against `target` (defaulting to the
/// prediction site) over examples drawn from `split`.
pub fn trace_split<T: Scalar>(
    run: &RunDir,
    model: &Model<T>,
    split: EvalSplit,
    target: Option<(usize, Role)>,
    n_examples: usize,
    seed: u64,
) -> Result<CausalGrid> {
    let examples = select_examples(&run.vocab, &run.split(split)?, n_examples, seed)?;
    let n_layers = model.config.n_layers;
    let target = match target {
        Some((layer, role)) => Site::new(layer, role_position(&run.vocab, &examples[0], role)?),
        None => prediction_site(n_layers, &run.vocab, &examples[0])?,
    };
    let input_len = run.vocab.encode(&examples[0])?.input.len();
    causal_trace(model, &run.vocab, &run.index, &examples, &all_sites(n_layers, input_len), target, seed)
}

/// MRR and Recall@3 of `target` read at every layer above `role`.
pub fn lens_split<T: Scalar>(
    run: &RunDir,
    model: &Model<T>,
    split: EvalSplit,
    role: Role,
    target: LensTarget,
    n_examples: usize,
    seed: u64,
) -> Result<Vec<LensStat>> {
    let examples = select_examples(&run.vocab, &run.split(split)?, n_examples, seed)?;
    let states = collect_states(model, &run.vocab, &examples)?;
    lens_profile(model, &states, &examples, role, target, &run.index, &run.vocab)
}

/// Probe `S[layer, role]` for the first designated token of `target`.
#[allow(clippy::too_many_arguments)]
pub fn probe_split<T: Scalar>(
    run: &RunDir,
    model: &Model<T>,
    split: EvalSplit,
    layer: usize,
    role: Role,
    target: LensTarget,
    n_examples: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let examples = select_examples(&run.vocab, &run.split(split)?, n_examples, seed)?;
    let pos = role_position(&run.vocab, &examples[0], role)?;
    if layer > model.config.n_layers {
        return Err(Error::Config(format!("layer {layer} exceeds the model's {} layers", model.config.n_layers)));
    }
    let states = collect_states(model, &run.vocab, &examples)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (s, f) in examples.iter().enumerate() {
        if let Some(t) = target.tokens(f, &run.index, &run.vocab) {
            x.push(states.cache.state(layer, s, pos).iter().map(|v| v.f64() as f32).collect());
            y.push(t[0]);
        }
    }
    let c = &run.config.interp;
    linear_probe(&x, &y, c.probe_train_fraction, c.probe_epochs, seed)
}

/// Trace the prediction site plus, for two-hop facts, the `r1` state of
/// the mid layer, then prune at `tau` and annotate with the logit lens.
pub fn circuit_split<T: Scalar>(
    run: &RunDir,
    model: &Model<T>,
    split: EvalSplit,
    n_examples: usize,
    seed: u64,
    tau: f64,
) -> Result<CircuitReport> {
    let examples = select_examples(&run.vocab, &run.split(split)?, n_examples, seed)?;
    let n_layers = model.config.n_layers;
    let seq = run.vocab.encode(&examples[0])?;
    let sites = all_sites(n_layers, seq.input.len());
    let mut targets = vec![prediction_site(n_layers, &run.vocab, &examples[0])?];
    let mid = mid_layer(n_layers);
    for role in [Role::R1, Role::E1, Role::E2] {
        if let Some(p) = seq.position(role) {
            if mid > 0 {
                targets.push(Site::new(mid, p));
            }
        }
    }
    targets.dedup();
    let grids = targets
        .iter()
        .map(|&t| causal_trace(model, &run.vocab, &run.index, &examples, &sites, t, seed))
        .collect::<Result<Vec<_>>>()?;
    let states = collect_states(model, &run.vocab, &examples)?;
    let lens = lens_annotations(model, &states, &examples, &sites, &LensTarget::ALL, &run.index, &run.vocab)?;
    Ok(prune_circuit(&grids, &lens, tau))
}

/// Embedded in analysis outputs so every artifact names its inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub run_dir: String,
    pub step: u64,
    pub split: String,
    pub n_examples: usize,
    pub seed: u64,
    pub config: RunConfig,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("provenance: {}", serde_json::to_string(self).expect("provenance serializes"))
    }
}
