// SPDX-License-Identifier: MIT OR Apache-2.0

//! `grok`: generate data, train, analyse checkpoints, run prompting
//! baselines and render plots.
//!
//! Exit status: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 numeric failure, 5 endpoint failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use grokking_core::analysis::{circuit_split, lens_split, probe_split, trace_split, Provenance, RunDir};
use grokking_core::config::{reference_markdown, RunConfig};
use grokking_core::datagen::{serialize_dataset_with_config, Dataset};
use grokking_core::interp::{lens_csv, LensTarget};
use grokking_core::llm::{jobs_from_config, run_baseline, BaselineOptions, ChatEndpoint, GoldEcho, RandomAnswer};
use grokking_core::plot::{grid_heatmap, plot_metrics};
use grokking_core::trainer::{accuracy, encode_all, task_facts, EvalSplit, Trainer};
use grokking_core::vocab::{build_vocab, save_vocab_with_config, Role, VocabSpec};
use grokking_core::{Error, Result};

#[derive(Parser)]
#[command(name = "grok", version, about = "Synthetic reasoning datasets, transformer training and circuit analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// `section.key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(&self.config)?.with_overrides(&self.set)?;
        let base = self.config.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok((cfg, base))
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run directory written by `grok train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint step (default: latest).
    #[arg(long)]
    step: Option<u64>,
    /// Analyse every checkpoint of the run.
    #[arg(long, conflicts_with = "step")]
    all_steps: bool,
    /// Evaluation split to draw examples from (default: test_id, or
    /// test_ood for the complex task).
    #[arg(long)]
    split: Option<String>,
    /// `interp.key=value` overrides of the run's analysis settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output file (default: under `<run>/analysis/`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its vocabulary.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) a run; sweep lists expand into one directory per member.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Sweep members trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Exact-match accuracy of a checkpoint on every split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Causal-tracing grid against a target state.
    Trace {
        #[command(flatten)]
        run: RunArgs,
        /// Target layer (default: top layer at the prediction position).
        #[arg(long, requires = "target_role")]
        target_layer: Option<usize>,
        /// Target input role (h, r1, r2, a, e1, e2, ...).
        #[arg(long, requires = "target_layer")]
        target_role: Option<String>,
    },
    /// Logit-lens MRR and Recall@3 per layer.
    Lens {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        role: String,
        /// bridge, head, r1, r2, answer, v1, v2 or label_space.
        #[arg(long)]
        target: String,
    },
    /// Linear probe of one state for a designated symbol.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        role: String,
        #[arg(long)]
        target: String,
    },
    /// Causal grids, pruned circuit and lens annotations.
    Circuit {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Prompting baseline on the complex task.
    LlmEval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// gold, random or http.
        #[arg(long, default_value = "http")]
        endpoint: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render CSV outputs as SVG.
    Plot {
        #[command(subcommand)]
        what: PlotCommand,
    },
    /// Print the configuration reference.
    ConfigDoc,
}

#[derive(Subcommand)]
enum PlotCommand {
    /// Accuracy curves from one or more metrics.csv files, plus a summary
    /// naming the saturation step.
    Metrics {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Linear x axis instead of log.
        #[arg(long)]
        linear: bool,
    },
    /// Heatmap of a causal-grid CSV.
    Grid {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn json(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn parse_role(s: &str) -> Result<Role> {
    Role::parse(s).ok_or_else(|| Error::Config(format!("unknown role {s:?}")))
}

fn parse_target(s: &str) -> Result<LensTarget> {
    LensTarget::parse(s).ok_or_else(|| {
        let names: Vec<&str> = LensTarget::ALL.iter().map(|t| t.name()).collect();
        Error::Config(format!("unknown lens target {s:?}; expected one of {}", names.join(", ")))
    })
}

struct Analysis {
    run: RunDir,
    steps: Vec<Option<u64>>,
    split: EvalSplit,
}

impl RunArgs {
    fn open(&self) -> Result<Analysis> {
        let mut run = RunDir::open(&self.run)?;
        if !self.set.is_empty() {
            if let Some(bad) = self.set.iter().find(|s| !s.trim_start().starts_with("interp.")) {
                return Err(Error::Config(format!("analysis overrides are limited to interp.*, got {bad:?}")));
            }
            run.config = run.config.with_overrides(&self.set)?;
        }
        let split = match &self.split {
            Some(s) => EvalSplit::parse(s).ok_or_else(|| Error::Config(format!("unknown split {s:?}")))?,
            None if matches!(run.dataset, Dataset::Complex(_)) => EvalSplit::TestOod,
            None => EvalSplit::TestId,
        };
        let steps = if self.all_steps {
            run.checkpoints().into_iter().map(|(s, _)| Some(s)).collect()
        } else {
            vec![self.step]
        };
        Ok(Analysis { run, steps, split })
    }

    fn out(&self, default: String) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.run.join("analysis").join(default))
    }
}

impl Analysis {
    fn provenance(&self, step: u64) -> Provenance {
        Provenance {
            run_dir: self.run.dir.display().to_string(),
            step,
            split: self.split.name().to_string(),
            n_examples: self.run.config.interp.n_examples,
            seed: self.run.config.interp.seed,
            config: self.run.config.clone(),
        }
    }
}

fn gen(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let (config, base) = cfg.load()?;
    let dataset = config.data.build(&base)?;
    let vocab = build_vocab(VocabSpec::for_dataset(&dataset), config.vocab.mode()?, config.vocab.seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let embedded = serde_json::to_value(&config).expect("config serializes");
    serialize_dataset_with_config(&dataset, &out.join("dataset.jsonl"), Some(embedded.clone()))?;
    save_vocab_with_config(&vocab, &out.join("vocab.jsonl"), Some(embedded))?;
    write(&out.join("config.toml"), &config.to_toml())?;
    println!("{}", dataset.parameters());
    println!("wrote {} and {}", out.join("dataset.jsonl").display(), out.join("vocab.jsonl").display());
    Ok(())
}

fn train_one(name: &str, config: RunConfig, dir: &Path, base: &Path) -> Result<()> {
    let mut t = Trainer::new(config, Some(dir), base)?;
    let split = t.generalization_split();
    let report = t.run_with(|r| {
        let accs: Vec<String> = r.accuracy.iter().map(|(k, v)| format!("{}={v:.3}", k.name())).collect();
        println!("[{name}] step {} loss {:.4} {}", r.step, r.loss, accs.join(" "));
        true
    })?;
    println!(
        "[{name}] done: {} steps, saturation {:?}, {} >= 0.9 at {:?}",
        report.steps,
        report.saturation_step,
        split.name(),
        report.generalization_step
    );
    Ok(())
}

fn train(cfg: &ConfigArgs, out: &Path, parallel: usize) -> Result<()> {
    let (config, base) = cfg.load()?;
    let members = config.expand_sweep();
    if members.len() == 1 && config.sweep == Default::default() {
        return train_one("run", members[0].1.clone(), out, &base);
    }
    for (_, c) in &members {
        c.validate()?;
    }
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(String, Error)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, members.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((name, c)) = members.get(i) else { break };
                if let Err(e) = train_one(name, c.clone(), &out.join(name), &base) {
                    eprintln!("[{name}] failed: {e}");
                    failures.lock().unwrap().push((name.clone(), e));
                }
            });
        }
    });
    let mut failures = failures.into_inner().unwrap();
    match failures.len() {
        0 => Ok(()),
        n => {
            let (name, e) = failures.remove(0);
            eprintln!("{n} of {} sweep members failed; first: {name}", members.len());
            Err(e)
        }
    }
}

fn eval(args: &RunArgs) -> Result<()> {
    let a = args.open()?;
    let facts = task_facts(&a.run.dataset);
    for step in &a.steps {
        let (model, step) = a.run.load_model(*step)?;
        let mut acc = serde_json::Map::new();
        for (split, f) in &facts.eval {
            if f.is_empty() {
                continue;
            }
            let v = accuracy(&model, &encode_all(&a.run.vocab, f)?)?;
            println!("step {step} {} {v:.4} ({} facts)", split.name(), f.len());
            acc.insert(split.name().to_string(), v.into());
        }
        let report = serde_json::json!({ "provenance": a.provenance(step), "accuracy": acc });
        write(&args.out(format!("eval_step{step}.json")), &json(&report))?;
    }
    Ok(())
}

fn trace(args: &RunArgs, target_layer: Option<usize>, target_role: Option<&str>) -> Result<()> {
    let a = args.open()?;
    let target = match (target_layer, target_role) {
        (Some(l), Some(r)) => Some((l, parse_role(r)?)),
        _ => None,
    };
    let ic = &a.run.config.interp;
    for step in &a.steps {
        let (model, step) = a.run.load_model(*step)?;
        let grid = trace_split(&a.run, &model, a.split, target, ic.n_examples, ic.seed)?;
        let role = grid.roles.get(grid.target.position).map_or("?", |r| r.name());
        let path = args.out(format!("trace_step{step}_S{}_{role}.csv", grid.target.layer));
        write(&path, &grid.to_csv(Some(&a.provenance(step).comment())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn lens(args: &RunArgs, role: &str, target: &str) -> Result<()> {
    let a = args.open()?;
    let (role, target) = (parse_role(role)?, parse_target(target)?);
    let ic = &a.run.config.interp;
    let mut rows = Vec::new();
    let mut last = 0;
    for step in &a.steps {
        let (model, step) = a.run.load_model(*step)?;
        last = step;
        for r in lens_split(&a.run, &model, a.split, role, target, ic.n_examples, ic.seed)? {
            println!("step {step} {} S[{},{}] {:.4}", r.metric, r.layer, r.role, r.value);
            rows.push((step, r));
        }
    }
    let path = args.out(format!("lens_{}_{}.csv", role.name(), target.name()));
    write(&path, &lens_csv(&rows, Some(&a.provenance(last).comment())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn probe(args: &RunArgs, layer: usize, role: &str, target: &str) -> Result<()> {
    let a = args.open()?;
    let (role, target) = (parse_role(role)?, parse_target(target)?);
    let ic = &a.run.config.interp;
    for step in &a.steps {
        let (model, step) = a.run.load_model(*step)?;
        let r = probe_split(&a.run, &model, a.split, layer, role, target, ic.n_examples, ic.seed)?;
        println!(
            "step {step} probe S[{layer},{}] -> {}: train {:.3} test {:.3} ({} classes)",
            role.name(),
            target.name(),
            r.train_accuracy,
            r.test_accuracy,
            r.n_classes
        );
        let report = serde_json::json!({ "provenance": a.provenance(step), "layer": layer, "role": role.name(), "target": target.name(), "result": r });
        write(&args.out(format!("probe_step{step}_S{layer}_{}_{}.json", role.name(), target.name())), &json(&report))?;
    }
    Ok(())
}

fn circuit(args: &RunArgs) -> Result<()> {
    let a = args.open()?;
    let ic = &a.run.config.interp;
    for step in &a.steps {
        let (model, step) = a.run.load_model(*step)?;
        let c = circuit_split(&a.run, &model, a.split, ic.n_examples, ic.seed, ic.tau)?;
        let base = args.out(format!("circuit_step{step}"));
        let report = serde_json::json!({ "provenance": a.provenance(step), "circuit": c });
        write(&base.with_extension("json"), &json(&report))?;
        write(&base.with_extension("dot"), &c.to_dot())?;
        write(&base.with_extension("txt"), &c.to_text())?;
        print!("{}", c.to_text());
    }
    Ok(())
}

fn llm_eval(cfg: &ConfigArgs, endpoint: &str, out: &Path) -> Result<()> {
    let (config, base) = cfg.load()?;
    let Dataset::Complex(d) = config.data.build(&base)? else {
        return Err(Error::Config("llm-eval needs data.task = \"complex\"".into()));
    };
    let l = &config.llm;
    let jobs = jobs_from_config(&d, l)?;
    let ep: Box<dyn ChatEndpoint> = match endpoint {
        "gold" => Box::new(GoldEcho),
        "random" => Box::new(RandomAnswer { seed: l.seed }),
        #[cfg(feature = "http")]
        "http" => Box::new(grokking_core::llm::HttpEndpoint::new(&l.base_url, &l.model, &l.api_key_env, l.timeout_secs)?),
        other => return Err(Error::Config(format!("unknown endpoint {other:?} (gold, random or http)"))),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let opts = BaselineOptions {
        concurrency: l.concurrency,
        max_retries: l.max_retries,
        requests_per_second: l.requests_per_second,
        transcript: Some(out.join("transcript.jsonl")),
        ..Default::default()
    };
    let (report, _) = run_baseline(&jobs, ep.as_ref(), &opts)?;
    write(&out.join("config.toml"), &config.to_toml())?;
    let full = serde_json::json!({ "endpoint": endpoint, "config": config, "report": report });
    write(&out.join("report.json"), &json(&full))?;
    println!(
        "accuracy {:.4} over {} answered ({} undecided, {} unparseable, {} failed)",
        report.accuracy,
        report.n_jobs - report.failed,
        report.undecided,
        report.unparseable,
        report.failed
    );
    Ok(())
}

fn plot(what: &PlotCommand) -> Result<()> {
    match what {
        PlotCommand::Metrics { files, out, linear } => {
            let paths: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            let (svg, summary) = plot_metrics(&paths, !linear)?;
            write(out, &svg)?;
            let text = summary.to_text();
            write(&out.with_extension("summary.txt"), &text)?;
            print!("{text}");
        }
        PlotCommand::Grid { file, out } => {
            let title = file.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            write(out, &grid_heatmap(&read(file)?, &title)?.to_svg())?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { cfg, out } => gen(&cfg, &out),
        Command::Train { cfg, out, parallel } => train(&cfg, &out, parallel),
        Command::Eval { run } => eval(&run),
        Command::Trace {
            run,
            target_layer,
            target_role,
        } => trace(&run, target_layer, target_role.as_deref()),
        Command::Lens { run, role, target } => lens(&run, &role, &target),
        Command::Probe {
            run,
            layer,
            role,
            target,
        } => probe(&run, layer, &role, &target),
        Command::Circuit { run } => circuit(&run),
        Command::LlmEval { cfg, endpoint, out } => llm_eval(&cfg, &endpoint, &out),
        Command::Plot { what } => plot(&what),
        Command::ConfigDoc => {
            print!("{}", reference_markdown());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
