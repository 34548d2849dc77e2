#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tooltraj::backend::{AttemptError, Backend, ChatRequest, MockTransport, RetryPolicy, Transport};
use tooltraj::config::RunConfig;
use tooltraj::core::corpus::TextSegment;
use tooltraj::core::mock::FaultConfig;

const VERBS: [&str; 12] = [
    "search", "create", "update", "book", "cancel", "check", "send", "submit", "schedule", "pay", "upload", "track",
];
const NOUNS: [&str; 12] = [
    "order",
    "account",
    "ticket",
    "booking",
    "device",
    "report",
    "payment",
    "profile",
    "file",
    "appointment",
    "shipment",
    "invoice",
];
const PLAIN: [&str; 4] = [
    "The museum reopened after a long renovation and drew large crowds.",
    "Autumn colours were especially vivid in the northern valleys this year.",
    "The novel follows two siblings who inherit a lighthouse.",
    "Local bakeries reported strong demand for rye bread.",
];

fn action(rng: &mut ChaCha8Rng) -> String {
    format!("{} the {}", VERBS.choose(rng).unwrap(), NOUNS.choose(rng).unwrap())
}

/// Procedural text in one of three layouts.
pub fn procedural_text(rng: &mut ChaCha8Rng, i: usize) -> String {
    let n = rng.gen_range(2..=5);
    let steps: Vec<String> = (0..n).map(|_| action(rng)).collect();
    let body = match rng.gen_range(0..3) {
        0 => {
            let mut s = format!("First {}.", steps[0]);
            for st in &steps[1..steps.len() - 1] {
                s.push_str(&format!(" Then {st}."));
            }
            s.push_str(&format!(" Finally {}.", steps[steps.len() - 1]));
            s
        }
        1 => steps
            .iter()
            .enumerate()
            .map(|(k, st)| format!("{}. {st}", k + 1))
            .collect::<Vec<_>>()
            .join("\n"),
        _ => {
            let mut s: String = steps.iter().map(|st| format!("- {st}\n")).collect();
            s.push_str("After that, send a message to support.");
            s
        }
    };
    format!("Guide {i}.\n{body}")
}

/// `n` segments; roughly one in `plain_every` is not procedural.
pub fn corpus(n: usize, seed: u64, plain_every: usize) -> Vec<TextSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text = if plain_every > 0 && i % plain_every == plain_every - 1 {
                format!("{} Note {i}.", PLAIN[i % PLAIN.len()])
            } else {
                procedural_text(&mut rng, i)
            };
            TextSegment::new(format!("seg-{i:04}"), text, "corpus").unwrap()
        })
        .collect()
}

pub fn write_corpus(path: &Path, segments: &[TextSegment]) {
    let mut out = String::new();
    for s in segments {
        out.push_str(&serde_json::json!({"id": s.id, "content": s.text}).to_string());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

pub fn config(seed: u64, fault_rate: f64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.mock.fault_rate = fault_rate;
    cfg
}

fn no_sleep() -> Box<dyn Fn(std::time::Duration) + Send + Sync> {
    Box::new(|_| {})
}

pub fn mock_backend(cfg: &RunConfig) -> Backend {
    Backend::from_config(cfg).unwrap().with_sleeper(no_sleep())
}

/// Mock transport that fails every call after the first `budget` with a
/// client error, simulating a crash partway through a run.
pub struct FailAfter {
    inner: MockTransport,
    budget: u64,
    calls: Arc<AtomicU64>,
}

impl Transport for FailAfter {
    fn send(&self, req: &ChatRequest, attempt: u32) -> Result<String, AttemptError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(AttemptError::Status {
                code: 400,
                body: "simulated outage".into(),
            });
        }
        self.inner.send(req, attempt)
    }
}

pub fn failing_backend(cfg: &RunConfig, budget: u64) -> Backend {
    let t = FailAfter {
        inner: MockTransport::new(cfg.seed, cfg.mock.faults()),
        budget,
        calls: Arc::new(AtomicU64::new(0)),
    };
    Backend::new(
        Box::new(t),
        RetryPolicy {
            max_retries: 0,
            base: Default::default(),
            max: Default::default(),
        },
        4,
    )
    .with_sleeper(no_sleep())
}

pub fn faults_only(cfg: &mut RunConfig, faults: FaultConfig) {
    cfg.mock.fault_rate = faults.rate;
    cfg.mock.fault_stages = faults.stages;
    cfg.mock.defects = faults.defects;
}

/// Every file of a run directory, by name.
pub fn dir_contents(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

/// Final artifacts only; checkpoint files depend on worker interleaving.
pub const FINAL_FILES: [&str; 8] = [
    "run.json",
    "segments.jsonl",
    "manifest.json",
    "retained.jsonl",
    "sft.jsonl",
    "synth.jsonl",
    "stats.json",
    "stats.csv",
];
