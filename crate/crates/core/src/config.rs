// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{
    build_comparison_dataset, build_complex_dataset, build_composition_dataset, gen_knowledge_graph, load_dataset,
    ComparisonOptions, ComplexOptions, CompositionOptions, Dataset,
};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::vocab::VocabMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Composition,
    Comparison,
    Complex,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Composition => "composition",
            Task::Comparison => "comparison",
            Task::Complex => "complex",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: Task,
    /// Load this dataset file instead of generating one.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub n_entities: Option<u32>,
    pub n_relations: Option<u32>,
    pub out_degree: Option<u32>,
    pub graph_seed: Option<u64>,
    pub n_attributes: Option<u32>,
    pub n_values: Option<u32>,
    pub ood_fraction: Option<f64>,
    pub phi: Option<f64>,
    pub test_size: Option<usize>,
    pub min_ood_inferred: Option<usize>,
    pub comparison_sample_rate: Option<f64>,
    pub n_test_per_label: Option<usize>,
}

impl DataConfig {
    pub fn composition_options(&self) -> CompositionOptions {
        let d = CompositionOptions::default();
        CompositionOptions {
            ood_fraction: self.ood_fraction.unwrap_or(d.ood_fraction),
            phi: self.phi.unwrap_or(d.phi),
            test_size: self.test_size.unwrap_or(d.test_size),
            min_ood_inferred: self.min_ood_inferred.unwrap_or(d.min_ood_inferred),
        }
    }

    pub fn comparison_options(&self) -> ComparisonOptions {
        let d = ComparisonOptions::default();
        ComparisonOptions {
            n_entities: self.n_entities.unwrap_or(d.n_entities),
            n_attributes: self.n_attributes.unwrap_or(d.n_attributes),
            n_values: self.n_values.unwrap_or(d.n_values),
            ood_fraction: self.ood_fraction.unwrap_or(d.ood_fraction),
            phi: self.phi.unwrap_or(d.phi),
            test_size: self.test_size.unwrap_or(d.test_size),
        }
    }

    pub fn complex_options(&self) -> ComplexOptions {
        let d = ComplexOptions::default();
        ComplexOptions {
            n_entities: self.n_entities.unwrap_or(d.n_entities),
            n_attributes: self.n_attributes.unwrap_or(d.n_attributes),
            n_values: self.n_values.unwrap_or(d.n_values),
            ood_fraction: self.ood_fraction.unwrap_or(d.ood_fraction),
            comparison_sample_rate: self.comparison_sample_rate.unwrap_or(d.comparison_sample_rate),
            n_test_per_label: self.n_test_per_label.unwrap_or(d.n_test_per_label),
        }
    }

    /// Generate (or load) the dataset this section describes.
    pub fn build(&self, base: &Path) -> Result<Dataset> {
        if let Some(p) = &self.path {
            let p = if p.is_relative() { base.join(p) } else { p.clone() };
            if !p.exists() {
                return Err(Error::Data(format!("dataset file not found: expected {}", p.display())));
            }
            return load_dataset(&p);
        }
        Ok(match self.task {
            Task::Composition => {
                let g = gen_knowledge_graph(
                    self.n_entities.unwrap_or(2000),
                    self.n_relations.unwrap_or(200),
                    self.out_degree.unwrap_or(20),
                    self.graph_seed.unwrap_or(self.seed),
                )?;
                Dataset::Composition(build_composition_dataset(&g, self.composition_options(), self.seed)?)
            }
            Task::Comparison => Dataset::Comparison(build_comparison_dataset(self.comparison_options(), self.seed)?),
            Task::Complex => Dataset::Complex(build_complex_dataset(self.complex_options(), self.seed)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// "single" or "multi".
    pub mode: String,
    pub name_set_size: u32,
    pub seed: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            mode: "single".into(),
            name_set_size: 50,
            seed: 0,
        }
    }
}

impl VocabConfig {
    pub fn mode(&self) -> Result<VocabMode> {
        match self.mode.as_str() {
            "single" => Ok(VocabMode::Single),
            "multi" => Ok(VocabMode::Multi {
                name_set_size: self.name_set_size,
            }),
            m => Err(Error::Config(format!("vocab.mode must be \"single\" or \"multi\", got {m:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelScale {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Tie the lower half of the layers together and the upper half together.
    pub share_layers: bool,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 8,
            hidden_dim: 768,
            n_heads: 12,
            share_layers: false,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, max_seq_len: usize, vocab_size: usize) -> ModelConfig {
        let cfg = ModelConfig::new(self.n_layers, self.hidden_dim, self.n_heads, max_seq_len, vocab_size);
        if self.share_layers {
            cfg.with_halves_shared()
        } else {
            cfg
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimSection {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            warmup_steps: a.warmup_steps,
            grad_clip: a.grad_clip,
            batch_size: 512,
        }
    }
}

impl OptimSection {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_sample_size: usize,
    /// Must be a multiple of `eval_every`.
    pub checkpoint_every: u64,
    /// Seeds batch order and evaluation samples.
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            total_steps: 200_000,
            eval_every: 500,
            eval_sample_size: 3000,
            checkpoint_every: 5000,
            seed: 0,
        }
    }
}

/// Lists expanded into independent runs (cartesian product).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub phi: Vec<f64>,
    pub n_entities: Vec<u32>,
    pub weight_decay: Vec<f64>,
    pub model_scale: Vec<ModelScale>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpSection {
    pub n_examples: usize,
    pub seed: u64,
    pub tau: f64,
    pub probe_train_fraction: f64,
    pub probe_epochs: usize,
}

impl Default for InterpSection {
    fn default() -> Self {
        InterpSection {
            n_examples: 300,
            seed: 0,
            tau: 0.5,
            probe_train_fraction: 0.8,
            probe_epochs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    /// "direct" or "cot".
    pub prompting: String,
    pub retrieval: bool,
    /// "names" or "ids".
    pub naming: String,
    pub n_queries: usize,
    pub concurrency: usize,
    pub max_retries: u32,
    pub requests_per_second: f64,
    pub timeout_secs: u64,
    pub seed: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            prompting: "direct".into(),
            retrieval: false,
            naming: "names".into(),
            n_queries: 150,
            concurrency: 4,
            max_retries: 3,
            requests_per_second: 2.0,
            timeout_secs: 120,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub interp: InterpSection,
    pub llm: LlmSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.eval_every == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config("train.eval_every and train.checkpoint_every must be positive".into()));
        }
        if t.checkpoint_every % t.eval_every != 0 {
            return Err(Error::Config(format!(
                "train.checkpoint_every ({}) must be a multiple of train.eval_every ({})",
                t.checkpoint_every, t.eval_every
            )));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        self.vocab.mode()?;
        if !matches!(self.llm.prompting.as_str(), "direct" | "cot") {
            return Err(Error::Config(format!("llm.prompting must be \"direct\" or \"cot\", got {:?}", self.llm.prompting)));
        }
        if !matches!(self.llm.naming.as_str(), "names" | "ids") {
            return Err(Error::Config(format!("llm.naming must be \"names\" or \"ids\", got {:?}", self.llm.naming)));
        }
        Ok(())
    }

    /// Apply `section.key=value` overrides (value parsed as TOML).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let mut parts: Vec<&str> = path.trim().split('.').collect();
            let last = parts.pop().unwrap();
            let mut table = &mut doc;
            for p in parts {
                table = table
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override path {path} crosses a non-table")))?;
            }
            table.insert(last.to_string(), value);
        }
        Self::from_toml(&toml::to_string(&doc).expect("table serializes"))
    }

    /// Independent runs of a sweep with their directory names; a config
    /// without sweep lists yields itself under the name `run`.
    pub fn expand_sweep(&self) -> Vec<(String, RunConfig)> {
        let s = &self.sweep;
        let mut runs = vec![(Vec::<String>::new(), self.clone())];
        fn expand<T: Clone>(
            runs: Vec<(Vec<String>, RunConfig)>,
            values: &[T],
            label: impl Fn(&T) -> String,
            apply: impl Fn(&mut RunConfig, &T),
        ) -> Vec<(Vec<String>, RunConfig)> {
            if values.is_empty() {
                return runs;
            }
            let mut out = Vec::new();
            for (name, cfg) in runs {
                for v in values {
                    let mut c = cfg.clone();
                    apply(&mut c, v);
                    let mut n = name.clone();
                    n.push(label(v));
                    out.push((n, c));
                }
            }
            out
        }
        runs = expand(runs, &s.phi, |v| format!("phi={v}"), |c, v| c.data.phi = Some(*v));
        runs = expand(runs, &s.n_entities, |v| format!("entities={v}"), |c, v| c.data.n_entities = Some(*v));
        runs = expand(runs, &s.weight_decay, |v| format!("wd={v}"), |c, v| c.optim.weight_decay = *v);
        runs = expand(
            runs,
            &s.model_scale,
            |v| format!("model={}x{}x{}", v.n_layers, v.hidden_dim, v.n_heads),
            |c, v| {
                c.model.n_layers = v.n_layers;
                c.model.hidden_dim = v.hidden_dim;
                c.model.n_heads = v.n_heads;
            },
        );
        runs.into_iter()
            .map(|(name, mut c)| {
                c.sweep = SweepSection::default();
                let name = if name.is_empty() { "run".to_string() } else { name.join(",") };
                (name, c)
            })
            .collect()
    }
}

/// `(section, key, default, description)` for every configuration key.
pub const REFERENCE: &[(&str, &str, &str, &str)] = &[
    ("data", "task", "\"composition\"", "`composition`, `comparison` or `complex`."),
    ("data", "path", "unset", "Load this dataset file instead of generating one (relative to the config file)."),
    ("data", "seed", "0", "Generator seed; the dataset is a pure function of the data section."),
    ("data", "n_entities", "2000 / 1000", "Entity count (composition / comparison and complex)."),
    ("data", "n_relations", "200", "Relations of the knowledge graph (composition)."),
    ("data", "out_degree", "20", "Outgoing edges per entity, each with a distinct relation (composition)."),
    ("data", "graph_seed", "data.seed", "Seed of the knowledge graph (composition)."),
    ("data", "n_attributes", "20", "Attributes (comparison, complex)."),
    ("data", "n_values", "20", "Ordinal values per attribute (comparison, complex)."),
    ("data", "ood_fraction", "0.05 / 0.1", "Fraction of atomic facts held out as OOD (composition / others)."),
    ("data", "phi", "7.2", "Inferred-to-atomic ratio of the training set."),
    ("data", "test_size", "3000", "Sample size of the ID and OOD inferred test splits."),
    ("data", "min_ood_inferred", "1", "Fail if fewer OOD two-hop facts exist (composition)."),
    ("data", "comparison_sample_rate", "0.03", "Probability of each (ID,ID) / (ID,OOD) comparison entering training (complex)."),
    ("data", "n_test_per_label", "50", "Balanced OOD-OOD test queries per label (complex)."),
    ("vocab", "mode", "\"single\"", "`single`: one token per entity; `multi`: first/last name token pairs."),
    ("vocab", "name_set_size", "50", "Size of each name set in multi mode; must divide n_entities."),
    ("vocab", "seed", "0", "Seed of the name assignment."),
    ("model", "n_layers", "8", "Transformer blocks."),
    ("model", "hidden_dim", "768", "Residual stream width."),
    ("model", "n_heads", "12", "Attention heads; must divide hidden_dim."),
    ("model", "share_layers", "false", "Share parameters within the lower half and within the upper half of the layers."),
    ("model", "seed", "0", "Initialization seed."),
    ("optim", "lr", "1e-4", "Peak learning rate."),
    ("optim", "beta1", "0.9", "Adam first-moment decay."),
    ("optim", "beta2", "0.999", "Adam second-moment decay."),
    ("optim", "eps", "1e-8", "Adam denominator epsilon."),
    ("optim", "weight_decay", "0.1", "Decoupled weight decay on weight matrices (not embeddings, biases, norms)."),
    ("optim", "warmup_steps", "2000", "Linear warmup length; constant learning rate afterwards."),
    ("optim", "grad_clip", "unset", "Clip the global gradient norm to this value."),
    ("optim", "batch_size", "512", "Examples per optimization step."),
    ("train", "total_steps", "200000", "Optimization steps."),
    ("train", "eval_every", "500", "Evaluation cadence in steps."),
    ("train", "eval_sample_size", "3000", "Examples evaluated per split (uniform sample)."),
    ("train", "checkpoint_every", "5000", "Checkpoint cadence; a multiple of eval_every."),
    ("train", "seed", "0", "Seed of batch order and evaluation samples."),
    ("sweep", "phi", "[]", "Values of data.phi to run."),
    ("sweep", "n_entities", "[]", "Values of data.n_entities to run."),
    ("sweep", "weight_decay", "[]", "Values of optim.weight_decay to run."),
    ("sweep", "model_scale", "[]", "Tables `{n_layers, hidden_dim, n_heads}` to run."),
    ("interp", "n_examples", "300", "Training examples used for causal tracing and lens statistics."),
    ("interp", "seed", "0", "Seed of example selection and perturbations."),
    ("interp", "tau", "0.5", "Pruning threshold on causal strength."),
    ("interp", "probe_train_fraction", "0.8", "Share of probe data used for fitting."),
    ("interp", "probe_epochs", "200", "Full-batch gradient steps of the linear probe."),
    ("llm", "base_url", "\"https://api.openai.com/v1\"", "OpenAI-compatible endpoint root."),
    ("llm", "model", "\"gpt-4-turbo\"", "Model name sent with each request."),
    ("llm", "api_key_env", "\"OPENAI_API_KEY\"", "Environment variable holding the bearer token."),
    ("llm", "prompting", "\"direct\"", "`direct` or `cot`."),
    ("llm", "retrieval", "false", "Give only the two-hop neighborhood of the query entities as context."),
    ("llm", "naming", "\"names\"", "`names` (bundled person names) or `ids` (e.g. `entity_17`)."),
    ("llm", "n_queries", "150", "Balanced test queries to send."),
    ("llm", "concurrency", "4", "Requests in flight."),
    ("llm", "max_retries", "3", "Retries per request before the job is marked failed."),
    ("llm", "requests_per_second", "2.0", "Global request rate limit."),
    ("llm", "timeout_secs", "120", "Per-request timeout."),
    ("llm", "seed", "0", "Seed of query selection and context permutation."),
];

/// Markdown reference of every key, kept in `docs/CONFIG.md`.
pub fn reference_markdown() -> String {
    let mut out = String::from(
        "# Configuration reference\n\n\
         Runs are configured by one TOML file. Unknown keys are rejected. Every key is \
         optional; the defaults are listed below. `grok <cmd> --set section.key=value` \
         overrides single keys.\n",
    );
    let mut section = "";
    for (s, k, d, desc) in REFERENCE {
        if *s != section {
            section = s;
            out.push_str(&format!("\n## [{s}]\n\n| key | default | meaning |\n|---|---|---|\n"));
        }
        out.push_str(&format!("| `{k}` | `{d}` | {desc} |\n"));
    }
    out
}
