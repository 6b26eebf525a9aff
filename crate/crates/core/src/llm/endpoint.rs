// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chat endpoints and the bounded-parallel baseline runner.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{attribute_words, parse_answer, Parsed, PromptJob};
use crate::datagen::{stream_rng, Cmp};
use crate::{Error, Result};

/// Anything that answers a prompt.
pub trait ChatEndpoint: Sync {
    fn complete(&self, job: &PromptJob) -> Result<String>;
}

/// Answers every job with the gold sentence.
pub struct GoldEcho;

impl ChatEndpoint for GoldEcho {
    fn complete(&self, job: &PromptJob) -> Result<String> {
        let w = attribute_words(job.query.attribute);
        Ok(format!("{} is {} {}.", job.names.0, w.relation(job.query.label), job.names.1))
    }
}

/// Answers uniformly at random, seeded per job.
pub struct RandomAnswer {
    pub seed: u64,
}

impl ChatEndpoint for RandomAnswer {
    fn complete(&self, job: &PromptJob) -> Result<String> {
        let mut rng = stream_rng(self.seed ^ job.seed, 23);
        let label = Cmp::ALL[rng.gen_range(0..3)];
        let w = attribute_words(job.query.attribute);
        Ok(format!("{} is {} {}.", job.names.0, w.relation(label), job.names.1))
    }
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
#[cfg(feature = "http")]
pub struct HttpEndpoint {
    pub base_url: String,
    pub model: String,
    api_key: String,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpEndpoint {
    /// The bearer token is read from the environment variable `api_key_env`.
    pub fn new(base_url: &str, model: &str, api_key_env: &str, timeout_secs: u64) -> Result<Self> {
        let api_key = std::env::var(api_key_env)
            .map_err(|_| Error::Config(format!("environment variable {api_key_env} (llm.api_key_env) is not set")))?;
        Ok(HttpEndpoint {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(timeout_secs)).build(),
        })
    }
}

#[cfg(feature = "http")]
impl ChatEndpoint for HttpEndpoint {
    fn complete(&self, job: &PromptJob) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": job.prompt}],
        });
        let resp: serde_json::Value = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Error::Endpoint(e.to_string()))?
            .into_json()
            .map_err(|e| Error::Endpoint(e.to_string()))?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Endpoint(format!("response without message content: {resp}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOptions {
    pub concurrency: usize,
    pub max_retries: u32,
    /// Global request rate; 0 disables the limit.
    pub requests_per_second: f64,
    /// Base delay between retries (doubled per attempt).
    pub retry_delay: Duration,
    /// Line-delimited transcript, appended as jobs finish.
    pub transcript: Option<PathBuf>,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            concurrency: 4,
            max_retries: 3,
            requests_per_second: 0.0,
            retry_delay: Duration::from_millis(500),
            transcript: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Wrong,
    Undecided,
    Unparseable,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub job_id: String,
    pub prompt: String,
    /// Raw response, verbatim.
    pub response: Option<String>,
    pub parsed: Option<Parsed>,
    pub gold: Cmp,
    pub verdict: Verdict,
    pub attempts: u32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub n_jobs: usize,
    pub correct: usize,
    pub wrong: usize,
    pub undecided: usize,
    pub unparseable: usize,
    pub failed: usize,
    /// `correct / (n_jobs - failed)`; undecided and unparseable answers
    /// count as wrong.
    pub accuracy: f64,
}

fn score(job: &PromptJob, result: Result<String>, attempts: u32) -> TranscriptRecord {
    let gold = job.query.label;
    let (response, parsed, verdict, error) = match result {
        Ok(text) => {
            let p = parse_answer(&text, job.query.attribute);
            let v = match p {
                Parsed::Label(l) if l == gold => Verdict::Correct,
                Parsed::Label(_) => Verdict::Wrong,
                Parsed::Undecided => Verdict::Undecided,
                Parsed::Unparseable => Verdict::Unparseable,
            };
            (Some(text), Some(p), v, None)
        }
        Err(e) => (None, None, Verdict::Failed, Some(e.to_string())),
    };
    TranscriptRecord {
        job_id: job.id.clone(),
        prompt: job.prompt.clone(),
        response,
        parsed,
        gold,
        verdict,
        attempts,
        error,
    }
}

/// Send every job with at most `concurrency` requests in flight, retrying
/// failures and respecting the global rate. Records come back in job order.
pub fn run_baseline(
    jobs: &[PromptJob],
    endpoint: &dyn ChatEndpoint,
    options: &BaselineOptions,
) -> Result<(BaselineReport, Vec<TranscriptRecord>)> {
    let transcript = match &options.transcript {
        Some(p) => Some(Mutex::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))),
        None => None,
    };
    let next = AtomicUsize::new(0);
    let slot = Mutex::new(Instant::now());
    let interval = (options.requests_per_second > 0.0).then(|| Duration::from_secs_f64(1.0 / options.requests_per_second));
    let records: Mutex<Vec<Option<TranscriptRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let write_error: Mutex<Option<Error>> = Mutex::new(None);

    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let mut attempts = 0;
        let result = loop {
            if let Some(iv) = interval {
                let wait = {
                    let mut s = slot.lock().unwrap();
                    let now = Instant::now();
                    let at = (*s).max(now);
                    *s = at + iv;
                    at - now
                };
                std::thread::sleep(wait);
            }
            attempts += 1;
            match endpoint.complete(job) {
                Ok(r) => break Ok(r),
                Err(e) if attempts > options.max_retries => break Err(e),
                Err(_) => std::thread::sleep(options.retry_delay * 2u32.pow(attempts - 1)),
            }
        };
        let rec = score(job, result, attempts);
        if let Some(t) = &transcript {
            let line = serde_json::to_string(&rec).expect("record serializes");
            let mut w = t.lock().unwrap();
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                write_error.lock().unwrap().get_or_insert(Error::io(options.transcript.clone().unwrap(), e));
            }
        }
        records.lock().unwrap()[i] = Some(rec);
    };
    std::thread::scope(|s| {
        for _ in 0..options.concurrency.max(1).min(jobs.len().max(1)) {
            s.spawn(worker);
        }
    });
    if let Some(e) = write_error.into_inner().unwrap() {
        return Err(e);
    }
    let records: Vec<TranscriptRecord> = records.into_inner().unwrap().into_iter().map(Option::unwrap).collect();
    let count = |v: Verdict| records.iter().filter(|r| r.verdict == v).count();
    let failed = count(Verdict::Failed);
    let answered = jobs.len() - failed;
    let correct = count(Verdict::Correct);
    Ok((
        BaselineReport {
            n_jobs: jobs.len(),
            correct,
            wrong: count(Verdict::Wrong),
            undecided: count(Verdict::Undecided),
            unparseable: count(Verdict::Unparseable),
            failed,
            accuracy: if answered == 0 { 0.0 } else { correct as f64 / answered as f64 },
        },
        records,
    ))
}
