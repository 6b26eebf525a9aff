// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three operations exposed to `www/index.html`: preview a generated
//! dataset, trace a freshly initialised model, and render a baseline
//! prompt. Each takes the same TOML configuration the CLI reads.

use std::path::Path;

use grokking_core::analysis::{select_examples, prediction_site};
use grokking_core::config::RunConfig;
use grokking_core::datagen::Dataset;
use grokking_core::interp::{all_sites, causal_trace, TaskIndex};
use grokking_core::llm::jobs_from_config;
use grokking_core::model::init_model;
use grokking_core::plot::grid_heatmap;
use grokking_core::trainer::{task_facts, EvalSplit};
use grokking_core::vocab::{build_vocab, VocabSpec};
use wasm_bindgen::prelude::*;

// The browser has no file system; datasets are always generated.
fn load(config_toml: &str) -> Result<(RunConfig, Dataset), String> {
    let cfg = RunConfig::from_toml(config_toml).map_err(|e| e.to_string())?;
    if cfg.data.path.is_some() {
        return Err("data.path is not available in the browser".into());
    }
    let d = cfg.data.build(Path::new(".")).map_err(|e| e.to_string())?;
    Ok((cfg, d))
}

/// Header parameters, split sizes and a few facts of every split, as JSON.
pub fn dataset_summary(config_toml: &str) -> Result<String, String> {
    let (cfg, d) = load(config_toml)?;
    let vocab = build_vocab(VocabSpec::for_dataset(&d), cfg.vocab.mode().map_err(|e| e.to_string())?, cfg.vocab.seed)
        .map_err(|e| e.to_string())?;
    let facts = task_facts(&d);
    let mut splits = serde_json::Map::new();
    for (split, f) in &facts.eval {
        let sample: Vec<String> = f
            .iter()
            .take(5)
            .filter_map(|x| vocab.encode(x).ok())
            .map(|s| {
                let sym = |t: &[u32]| t.iter().map(|&k| vocab.token_symbol(k)).collect::<Vec<_>>().join(" ");
                format!("{} -> {}", sym(&s.input), sym(&s.target))
            })
            .collect();
        splits.insert(split.name().into(), serde_json::json!({ "size": f.len(), "sample": sample }));
    }
    let out = serde_json::json!({
        "task": d.task(),
        "parameters": d.parameters(),
        "vocab_size": vocab.size(),
        "splits": splits,
    });
    Ok(serde_json::to_string_pretty(&out).expect("json"))
}

/// Causal-tracing heatmap (SVG) of an untrained model of the configured
/// shape against its prediction state, over up to `n_examples` test facts.
pub fn trace_heatmap(config_toml: &str, n_examples: usize) -> Result<String, String> {
    let (cfg, d) = load(config_toml)?;
    let vocab = build_vocab(VocabSpec::for_dataset(&d), cfg.vocab.mode().map_err(|e| e.to_string())?, cfg.vocab.seed)
        .map_err(|e| e.to_string())?;
    let split = if matches!(d, Dataset::Complex(_)) { EvalSplit::TestOod } else { EvalSplit::TestId };
    let facts = task_facts(&d).eval.remove(&split).unwrap_or_default();
    let examples = select_examples(&vocab, &facts, n_examples, cfg.interp.seed).map_err(|e| e.to_string())?;
    let seq = vocab.encode(&examples[0]).map_err(|e| e.to_string())?;
    let model_cfg = cfg.model.model_config(seq.len().max(4), vocab.size());
    let model = init_model::<f32>(&model_cfg, cfg.model.seed).map_err(|e| e.to_string())?;
    let index = TaskIndex::new(&d);
    let target = prediction_site(model_cfg.n_layers, &vocab, &examples[0]).map_err(|e| e.to_string())?;
    let sites = all_sites(model_cfg.n_layers, seq.input.len());
    let grid = causal_trace(&model, &vocab, &index, &examples, &sites, target, cfg.interp.seed).map_err(|e| e.to_string())?;
    let title = format!("untrained model, target S[{},{}]", target.layer, seq.roles[target.position].name());
    Ok(grid_heatmap(&grid.to_csv(None), &title).map_err(|e| e.to_string())?.to_svg())
}

/// First prompt of the configured baseline (complex task only).
pub fn prompt_preview(config_toml: &str) -> Result<String, String> {
    let (cfg, d) = load(config_toml)?;
    let Dataset::Complex(d) = d else {
        return Err("prompts need data.task = \"complex\"".into());
    };
    let mut llm = cfg.llm.clone();
    llm.n_queries = 3;
    let jobs = jobs_from_config(&d, &llm).map_err(|e| e.to_string())?;
    let j = &jobs[0];
    Ok(format!("[{} | gold: {}]\n\n{}", j.id, j.query.label.name(), j.prompt))
}

#[wasm_bindgen(js_name = datasetSummary)]
pub fn dataset_summary_js(config_toml: &str) -> Result<String, JsValue> {
    dataset_summary(config_toml).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = traceHeatmap)]
pub fn trace_heatmap_js(config_toml: &str, n_examples: usize) -> Result<String, JsValue> {
    trace_heatmap(config_toml, n_examples).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = promptPreview)]
pub fn prompt_preview_js(config_toml: &str) -> Result<String, JsValue> {
    prompt_preview(config_toml).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "[data]\nn_entities = 40\nn_relations = 6\nout_degree = 4\nphi = 2.0\ntest_size = 20\n[model]\nn_layers = 2\nhidden_dim = 16\nn_heads = 2\n";

    #[test]
    fn summary_lists_splits() {
        let s: serde_json::Value = serde_json::from_str(&dataset_summary(SMALL).unwrap()).unwrap();
        assert_eq!(s["task"], "composition");
        assert_eq!(s["splits"]["test_id"]["size"], 20);
        assert!(dataset_summary("[data]\nbogus = 1\n").is_err());
    }

    #[test]
    fn page_default_config_works() {
        let html = include_str!("../www/index.html");
        let start = html.find("<textarea id=\"config\">").unwrap() + "<textarea id=\"config\">".len();
        let cfg = &html[start..html.find("</textarea>").unwrap()];
        dataset_summary(cfg).unwrap();
        assert!(trace_heatmap(cfg, 30).unwrap().starts_with("<svg"));
        for task in ["comparison", "complex"] {
            let c = cfg.replace("task = \"composition\"", &format!("task = \"{task}\""));
            dataset_summary(&c).unwrap();
            trace_heatmap(&c, 30).unwrap();
        }
        let complex = cfg.replace("task = \"composition\"", "task = \"complex\"");
        assert!(prompt_preview(&complex).is_ok());
    }

    #[test]
    fn heatmap_renders() {
        let svg = trace_heatmap(SMALL, 10).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("layer 2"));
    }

    #[test]
    fn prompt_for_complex_only() {
        assert!(prompt_preview(SMALL).is_err());
        let cfg = "[data]\ntask = \"complex\"\nseed = 3\nn_entities = 30\nn_attributes = 2\nn_values = 6\nood_fraction = 0.3\ncomparison_sample_rate = 0.1\nn_test_per_label = 2\n[llm]\nretrieval = true\n";
        let p = prompt_preview(cfg).unwrap();
        assert!(p.contains("Here are some facts:"));
    }
}
