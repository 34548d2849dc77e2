//! Stage orchestration with per-record checkpoints and resumable runs.
//!
//! Each segment moves through annotate → extract, then fans out into one
//! record per extracted workflow, each of which moves through generate →
//! refine → validate. After every stage the record is appended to that
//! stage's checkpoint file; a later run over the same directory reuses any
//! checkpointed result instead of calling the backend again. Final
//! artifacts are rebuilt from record states in input order, so an
//! interrupted and resumed run writes the same bytes as an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tooltraj_core::corpus::{parse_annotation, FilterStats, SegmentAnnotation, TextSegment};
use tooltraj_core::export::{to_sft, to_synth_record, CallEncoding, SftRecord, SynthRecord};
use tooltraj_core::grounding::{
    ground_check, parse_judge_verdict, passes_validation_with, GroundingReport, JudgeVerdict,
};
use tooltraj_core::prompts::{render, PromptSet};
use tooltraj_core::toolschema::{check_call, serialize_toolset, CallDiagnostic, ToolDef};
use tooltraj_core::trajectory::{
    parse_trajectory, parse_with_toolset, serialize_trajectory, validate_turn_order, TurnDiagnostic,
};
use tooltraj_core::workflow::{parse_workflows, Workflow};
use tooltraj_core::{Stage, Trajectory};

use crate::backend::{Backend, BackendCounters, BackendError, ChatRequest};
use crate::config::{ConfigError, RunConfig};
use crate::io::{read_jsonl, write_json, write_jsonl, Appender, IoError};
use crate::report;

/// Pipeline steps, in order. `Validate` covers the rule checks and the
/// judge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Annotate,
    Extract,
    Generate,
    Refine,
    Validate,
}

impl Step {
    pub const ALL: [Step; 5] = [
        Step::Annotate,
        Step::Extract,
        Step::Generate,
        Step::Refine,
        Step::Validate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::Annotate => "annotate",
            Step::Extract => "extract",
            Step::Generate => "generate",
            Step::Refine => "refine",
            Step::Validate => "validate",
        }
    }

    /// Status a record has after passing this step.
    pub fn done_status(self) -> RecordStatus {
        match self {
            Step::Annotate => RecordStatus::Annotated,
            Step::Extract => RecordStatus::Extracted,
            Step::Generate => RecordStatus::Generated,
            Step::Refine => RecordStatus::Refined,
            Step::Validate => RecordStatus::Retained,
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Step::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown step `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Loaded,
    Annotated,
    Extracted,
    Generated,
    Refined,
    Retained,
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropInfo {
    pub step: Step,
    /// Distinct reason codes, sorted.
    pub codes: Vec<String>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub turn_order: Vec<TurnDiagnostic>,
    pub calls: Vec<CallDiagnostic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding: Option<GroundingReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<JudgeVerdict>,
    pub retained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    /// Segment id, or `<segment id>#<workflow index>` after fan-out.
    pub key: String,
    pub segment: TextSegment,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<SegmentAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflows: Option<Vec<Workflow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toolset: Option<Vec<ToolDef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<DropInfo>,
}

impl PipelineRecord {
    pub fn new(segment: TextSegment) -> Self {
        PipelineRecord {
            key: segment.id.clone(),
            segment,
            status: RecordStatus::Loaded,
            annotation: None,
            workflows: None,
            draft: None,
            refined: None,
            toolset: None,
            validation: None,
            dropped: None,
        }
    }

    pub fn is_dropped(&self) -> bool {
        self.status == RecordStatus::Dropped
    }

    /// The workflow this record was generated from (after fan-out).
    pub fn workflow(&self) -> Option<&Workflow> {
        self.workflows.as_ref().and_then(|w| w.first())
    }

    fn drop_at(mut self, step: Step, codes: impl IntoIterator<Item = String>, detail: impl Into<String>) -> Self {
        let codes: BTreeSet<String> = codes.into_iter().collect();
        self.status = RecordStatus::Dropped;
        self.dropped = Some(DropInfo {
            step,
            codes: codes.into_iter().collect(),
            detail: detail.into(),
        });
        self
    }

    /// Whether the record passed (`Some(true)`), failed (`Some(false)`) or
    /// never reached (`None`) `step`.
    pub fn outcome(&self, step: Step) -> Option<bool> {
        match &self.dropped {
            Some(d) if d.step == step => Some(false),
            Some(d) => (d.step > step).then_some(true),
            None => (self.status >= step.done_status()).then_some(true),
        }
    }

    /// One record per extracted workflow.
    pub fn fan_out(&self) -> Vec<PipelineRecord> {
        let workflows = self.workflows.as_deref().unwrap_or_default();
        workflows
            .iter()
            .enumerate()
            .map(|(i, w)| PipelineRecord {
                key: format!("{}#{}", self.segment.id, i),
                workflows: Some(vec![w.clone()]),
                ..self.clone()
            })
            .collect()
    }
}

fn derive_seed(seed: u64, key: &str, stage: Stage, attempt: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.update([0]);
    h.update(stage.as_str().as_bytes());
    h.update(attempt.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Renders the workflow block of the generation prompt.
pub fn workflow_brief(w: &Workflow) -> String {
    let mut s = format!("Description: {}\nSteps:\n", w.description);
    for step in &w.steps {
        s.push_str(step);
        s.push('\n');
    }
    s.push_str(&format!("Execution graph: {}", w.graph));
    s
}

/// Per-record stage functions shared by the pipeline and the CLI.
pub struct Stages<'a> {
    pub backend: &'a Backend,
    pub cfg: &'a RunConfig,
    pub prompts: &'a PromptSet,
}

impl Stages<'_> {
    fn ask(&self, stage: Stage, key: &str, prompt: String, attempt: u32) -> Result<String, BackendError> {
        let s = &self.cfg.sampling;
        let mut req = ChatRequest::user(stage, self.cfg.models.for_stage(stage), prompt);
        req.temperature = if stage == Stage::Judge {
            s.judge_temperature
        } else {
            s.temperature
        };
        req.max_tokens = s.max_tokens;
        req.seed = Some(derive_seed(self.cfg.seed, key, stage, attempt));
        self.backend.complete(&req)
    }

    fn attempts(&self) -> u32 {
        self.cfg.pipeline.stage_retries + 1
    }

    fn annotate_attempts(&self) -> u32 {
        self.cfg.pipeline.annotate_retries + 1
    }

    pub fn annotate(&self, mut rec: PipelineRecord) -> Result<PipelineRecord, BackendError> {
        let prompt = render(&self.prompts.annotate, &[("text", &rec.segment.text)]);
        let mut last = String::new();
        for attempt in 0..self.annotate_attempts() {
            let out = self.ask(Stage::Annotate, &rec.key, prompt.clone(), attempt)?;
            match parse_annotation(&out) {
                Ok(parsed) => {
                    for w in &parsed.warnings {
                        log::warn!("{}: label outside vocabulary: {:?}", rec.key, w);
                    }
                    let multi = parsed.annotation.multi_step;
                    rec.annotation = Some(parsed.annotation);
                    if !multi {
                        return Ok(rec.drop_at(
                            Step::Annotate,
                            ["NOT_MULTI_STEP".to_string()],
                            "not a multi-step procedure",
                        ));
                    }
                    rec.status = RecordStatus::Annotated;
                    return Ok(rec);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Ok(rec.drop_at(Step::Annotate, ["ANNOTATION_PARSE".to_string()], last))
    }

    pub fn extract(&self, mut rec: PipelineRecord) -> Result<PipelineRecord, BackendError> {
        let prompt = render(&self.prompts.extract, &[("text", &rec.segment.text)]);
        let mut codes = BTreeSet::new();
        let mut detail = String::new();
        for attempt in 0..self.attempts() {
            let out = self.ask(Stage::Extract, &rec.key, prompt.clone(), attempt)?;
            let batch = parse_workflows(&out);
            if !batch.workflows.is_empty() {
                for d in &batch.diagnostics {
                    log::debug!(
                        "{}: workflow block {} skipped: {} {}",
                        rec.key,
                        d.block,
                        d.code.as_str(),
                        d.detail
                    );
                }
                rec.workflows = Some(batch.workflows);
                rec.status = RecordStatus::Extracted;
                return Ok(rec);
            }
            codes = batch.diagnostics.iter().map(|d| d.code.as_str().to_string()).collect();
            detail = batch.diagnostics.first().map(|d| d.detail.clone()).unwrap_or_default();
        }
        if codes.is_empty() {
            codes.insert("NO_WORKFLOW".into());
        }
        Ok(rec.drop_at(Step::Extract, codes, detail))
    }

    pub fn generate(&self, mut rec: PipelineRecord) -> Result<PipelineRecord, BackendError> {
        let w = rec.workflow().expect("generate runs after fan-out").clone();
        let tools = serialize_toolset(&w.tools);
        let brief = workflow_brief(&w);
        let prompt = render(
            &self.prompts.generate,
            &[("tools", &tools), ("workflow", &brief), ("text", &rec.segment.text)],
        );
        let mut last = None;
        for attempt in 0..self.attempts() {
            let out = self.ask(Stage::Generate, &rec.key, prompt.clone(), attempt)?;
            match parse_trajectory(&out) {
                Ok(p) => {
                    let mut t = p.trajectory;
                    t.source_segment_id = rec.segment.id.clone();
                    t.toolset_ref = rec.key.clone();
                    rec.draft = Some(t);
                    rec.status = RecordStatus::Generated;
                    return Ok(rec);
                }
                Err(e) => last = Some(e),
            }
        }
        let e = last.expect("at least one attempt");
        Ok(rec.drop_at(Step::Generate, [e.code.as_str().to_string()], e.to_string()))
    }

    pub fn refine(&self, mut rec: PipelineRecord) -> Result<PipelineRecord, BackendError> {
        let w = rec.workflow().expect("refine runs after fan-out");
        let tools = serialize_toolset(&w.tools);
        let draft = rec.draft.as_ref().expect("refine runs after generate");
        let draft_text = serialize_trajectory(draft, false, None).unwrap_or_default();
        let prompt = render(&self.prompts.refine, &[("tools", &tools), ("trajectory", &draft_text)]);
        let mut last = None;
        for attempt in 0..self.attempts() {
            let out = self.ask(Stage::Refine, &rec.key, prompt.clone(), attempt)?;
            match parse_with_toolset(&out) {
                Ok((tools, p)) => {
                    let mut t = p.trajectory;
                    t.source_segment_id = rec.segment.id.clone();
                    t.toolset_ref = rec.key.clone();
                    rec.refined = Some(t);
                    rec.toolset = Some(tools);
                    rec.status = RecordStatus::Refined;
                    return Ok(rec);
                }
                Err(e) => last = Some(e),
            }
        }
        let e = last.expect("at least one attempt");
        Ok(rec.drop_at(Step::Refine, [e.code.as_str().to_string()], e.to_string()))
    }

    pub fn validate(&self, mut rec: PipelineRecord) -> Result<PipelineRecord, BackendError> {
        let t = rec.refined.clone().expect("validate runs after refine");
        let tools = rec.toolset.clone().unwrap_or_default();
        let checks = rule_checks(&t, &tools, self.cfg.pipeline.ground_check);
        let mut codes = checks.codes();
        let mut detail = checks.detail();
        let mut verdict = None;
        if codes.is_empty() && self.cfg.pipeline.judge {
            let text = serialize_trajectory(&t, true, Some(&tools)).unwrap_or_default();
            let prompt = render(&self.prompts.judge, &[("trajectory", &text)]);
            let mut parse_error = None;
            for attempt in 0..self.attempts() {
                let out = self.ask(Stage::Judge, &rec.key, prompt.clone(), attempt)?;
                match parse_judge_verdict(&out) {
                    Ok(v) => {
                        verdict = Some(v);
                        parse_error = None;
                        break;
                    }
                    Err(e) => parse_error = Some(e.to_string()),
                }
            }
            match (&verdict, parse_error) {
                (_, Some(e)) => {
                    codes.insert("JUDGE_PARSE".into());
                    detail = e;
                }
                (Some(v), None) if !v.passes(self.cfg.pipeline.judge_policy) => {
                    codes.insert("JUDGE_REJECTED".into());
                    detail = format!("judge scored 0 on {}", v.failed().join(", "));
                }
                _ => {}
            }
        }
        let structural: Vec<&String> = codes.iter().filter(|c| *c != "JUDGE_REJECTED").collect();
        let retained = passes_validation_with(
            structural.as_slice(),
            checks.calls.is_empty(),
            verdict.as_ref(),
            self.cfg.pipeline.judge_policy,
        );
        rec.validation = Some(ValidationRecord {
            turn_order: checks.turn_order,
            calls: checks.calls,
            grounding: checks.grounding,
            verdict,
            retained,
        });
        if retained {
            rec.status = RecordStatus::Retained;
            Ok(rec)
        } else {
            Ok(rec.drop_at(Step::Validate, codes, detail))
        }
    }

    pub fn run_step(&self, step: Step, rec: PipelineRecord) -> Result<PipelineRecord, BackendError> {
        match step {
            Step::Annotate => self.annotate(rec),
            Step::Extract => self.extract(rec),
            Step::Generate => self.generate(rec),
            Step::Refine => self.refine(rec),
            Step::Validate => self.validate(rec),
        }
    }
}

/// Rule-based findings for one trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleChecks {
    pub turn_order: Vec<TurnDiagnostic>,
    pub calls: Vec<CallDiagnostic>,
    pub grounding: Option<GroundingReport>,
}

impl RuleChecks {
    pub fn codes(&self) -> BTreeSet<String> {
        let mut codes: BTreeSet<String> = self.turn_order.iter().map(|d| d.code.as_str().to_string()).collect();
        codes.extend(self.calls.iter().map(|d| d.code.as_str().to_string()));
        if self.grounding.as_ref().is_some_and(|g| !g.is_clean()) {
            codes.insert("UNGROUNDED_VALUE".into());
        }
        codes
    }

    pub fn is_clean(&self) -> bool {
        self.codes().is_empty()
    }

    fn detail(&self) -> String {
        if let Some(d) = self.turn_order.first() {
            return d.to_string();
        }
        if let Some(d) = self.calls.first() {
            return d.to_string();
        }
        match self.grounding.as_ref().and_then(|g| g.ungrounded.first()) {
            Some(u) => format!(
                "message {}: {}.{} = {} not found in preceding context",
                u.index, u.tool, u.path, u.value
            ),
            None => String::new(),
        }
    }
}

/// Turn order, every call against the tool set, and optionally grounding.
pub fn rule_checks(t: &Trajectory, tools: &[ToolDef], ground: bool) -> RuleChecks {
    RuleChecks {
        turn_order: validate_turn_order(&t.messages),
        calls: t.calls().flat_map(|(_, c)| check_call(c, tools).diagnostics).collect(),
        grounding: ground.then(|| ground_check(t, tools)),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounter {
    pub attempted: usize,
    pub succeeded: usize,
    pub dropped: usize,
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub segments: usize,
    /// False when the run stopped early or was interrupted.
    pub complete: bool,
    pub filter: FilterStats,
    pub retained: usize,
    pub stage_counters: BTreeMap<Step, StageCounter>,
    /// All drop reasons across stages.
    pub drop_reasons: BTreeMap<String, usize>,
    /// Paths relative to the run directory.
    pub artifact_paths: BTreeMap<String, String>,
}

/// Per-stage counters from final record states. Annotate and extract count
/// segments; later steps count workflow records.
pub fn stage_counters(records: &[PipelineRecord]) -> BTreeMap<Step, StageCounter> {
    let mut out: BTreeMap<Step, StageCounter> = Step::ALL.into_iter().map(|s| (s, StageCounter::default())).collect();
    let mut seen_segments = BTreeSet::new();
    for rec in records {
        let first_of_segment = seen_segments.insert(rec.segment.id.clone());
        for step in Step::ALL {
            let segment_level = matches!(step, Step::Annotate | Step::Extract);
            if segment_level && !first_of_segment {
                continue;
            }
            let Some(passed) = rec.outcome(step) else { continue };
            let c = out.get_mut(&step).expect("all steps present");
            c.attempted += 1;
            if passed {
                c.succeeded += 1;
            } else {
                c.dropped += 1;
                for code in &rec.dropped.as_ref().expect("dropped").codes {
                    *c.reasons.entry(code.clone()).or_default() += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Storage(#[from] IoError),
    #[error("run directory {0} already holds a run; use resume")]
    RunExists(PathBuf),
    #[error("no run found in {0}")]
    NoRun(PathBuf),
    #[error("config hash {given} differs from the run's {stored}; refusing to resume")]
    ConfigChanged { stored: String, given: String },
    #[error("export failed for {key}: {detail}")]
    Export { key: String, detail: String },
}

/// Identity of a run, stored as `run.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Leave every record after this step.
    pub stop_after: Option<Step>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Final record states in input order.
    pub records: Vec<PipelineRecord>,
    pub backend: BackendCounters,
}

pub const RUN_FILE: &str = "run.json";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RETAINED_FILE: &str = "retained.jsonl";
pub const SFT_FILE: &str = "sft.jsonl";
pub const SYNTH_FILE: &str = "synth.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const STATS_TABLE_FILE: &str = "stats.csv";

pub fn run_id_for(config_hash: &str) -> String {
    format!("run-{}", &config_hash[..16])
}

pub fn read_run_meta(dir: &Path) -> Result<RunMeta, PipelineError> {
    let path = dir.join(RUN_FILE);
    if !path.exists() {
        return Err(PipelineError::NoRun(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&path).map_err(|source| IoError::Read {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        IoError::Corrupt {
            path,
            line: 1,
            detail: e.to_string(),
        }
        .into()
    })
}

/// Starts a run in an empty (or new) directory.
pub fn start_run(
    cfg: &RunConfig,
    segments: Vec<TextSegment>,
    dir: &Path,
    backend: &Backend,
    opts: RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let mut ids = BTreeSet::new();
    for s in &segments {
        if !ids.insert(s.id.as_str()) {
            return Err(PipelineError::Input(format!("duplicate segment id `{}`", s.id)));
        }
    }
    if dir.join(RUN_FILE).exists() {
        return Err(PipelineError::RunExists(dir.to_path_buf()));
    }
    std::fs::create_dir_all(dir).map_err(|source| IoError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let prompts = cfg.prompts()?;
    let config_hash = cfg.hash(&prompts);
    let meta = RunMeta {
        run_id: run_id_for(&config_hash),
        config_hash,
        config: cfg.clone(),
    };
    write_jsonl(&dir.join(SEGMENTS_FILE), &segments)?;
    write_json(&dir.join(RUN_FILE), &meta)?;
    execute(&meta, &prompts, &segments, dir, backend, opts)
}

/// Continues a run from its checkpoints. With `expected`, the run is
/// refused unless that config hashes to the stored one.
pub fn resume_run(
    dir: &Path,
    expected: Option<&RunConfig>,
    backend: &Backend,
    opts: RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let meta = read_run_meta(dir)?;
    let prompts = meta.config.prompts()?;
    if let Some(cfg) = expected {
        let given = cfg.hash(&cfg.prompts()?);
        if given != meta.config_hash {
            return Err(PipelineError::ConfigChanged {
                stored: meta.config_hash.clone(),
                given,
            });
        }
    }
    if meta.config.hash(&prompts) != meta.config_hash {
        return Err(PipelineError::ConfigChanged {
            stored: meta.config_hash.clone(),
            given: meta.config.hash(&prompts),
        });
    }
    let segments: Vec<TextSegment> = read_jsonl(&dir.join(SEGMENTS_FILE), false)?;
    execute(&meta, &prompts, &segments, dir, backend, opts)
}

/// Drops a partial last line left by an interrupted append.
fn repair_tail(path: &Path) -> Result<(), IoError> {
    let Ok(bytes) = std::fs::read(path) else { return Ok(()) };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    std::fs::write(path, &bytes[..keep]).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

struct Checkpoints {
    done: HashMap<Step, HashMap<String, PipelineRecord>>,
    writers: HashMap<Step, Appender>,
}

impl Checkpoints {
    fn open(dir: &Path) -> Result<Self, IoError> {
        let mut done = HashMap::new();
        let mut writers = HashMap::new();
        for step in Step::ALL {
            let path = dir.join(step.checkpoint_file());
            let mut map = HashMap::new();
            if path.exists() {
                let records: Vec<PipelineRecord> = read_jsonl(&path, true)?;
                for r in records {
                    map.insert(r.key.clone(), r);
                }
                repair_tail(&path)?;
            }
            done.insert(step, map);
            writers.insert(step, Appender::open(&path)?);
        }
        Ok(Checkpoints { done, writers })
    }

    fn cached(&self, step: Step, key: &str) -> Option<PipelineRecord> {
        self.done[&step].get(key).filter(|r| r.outcome(step).is_some()).cloned()
    }
}

fn execute(
    meta: &RunMeta,
    prompts: &PromptSet,
    segments: &[TextSegment],
    dir: &Path,
    backend: &Backend,
    opts: RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let cfg = &meta.config;
    let checkpoints = Checkpoints::open(dir)?;
    let stages = Stages { backend, cfg, prompts };
    let abort = AtomicBool::new(false);
    let first_error: Mutex<Option<PipelineError>> = Mutex::new(None);

    let step = |step: Step, rec: PipelineRecord| -> Result<PipelineRecord, PipelineError> {
        if let Some(done) = checkpoints.cached(step, &rec.key) {
            return Ok(done);
        }
        if abort.load(Ordering::Relaxed) {
            return Err(PipelineError::Input("aborted".into()));
        }
        let out = stages
            .run_step(step, rec)
            .inspect_err(|_| abort.store(true, Ordering::Relaxed))?;
        checkpoints.writers[&step].append(&out)?;
        Ok(out)
    };
    let stop = |s: Step, r: &PipelineRecord| r.is_dropped() || opts.stop_after == Some(s);

    let process = |seg: &TextSegment| -> Result<Vec<PipelineRecord>, PipelineError> {
        let rec = step(Step::Annotate, PipelineRecord::new(seg.clone()))?;
        if stop(Step::Annotate, &rec) {
            return Ok(vec![rec]);
        }
        let rec = step(Step::Extract, rec)?;
        if stop(Step::Extract, &rec) {
            return Ok(vec![rec]);
        }
        let mut out = Vec::new();
        'child: for mut child in rec.fan_out() {
            for s in [Step::Generate, Step::Refine, Step::Validate] {
                child = step(s, child)?;
                if stop(s, &child) {
                    out.push(child);
                    continue 'child;
                }
            }
            out.push(child);
        }
        Ok(out)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.pipeline.concurrency)
        .build()
        .map_err(|e| PipelineError::Input(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Option<Vec<PipelineRecord>>> = pool.install(|| {
        segments
            .par_iter()
            .map(|seg| match process(seg) {
                Ok(recs) => Some(recs),
                Err(e) => {
                    let mut slot = first_error.lock().unwrap_or_else(|p| p.into_inner());
                    let is_abort_echo = matches!(&e, PipelineError::Input(m) if m == "aborted");
                    if slot.is_none() && !is_abort_echo {
                        *slot = Some(e);
                    }
                    None
                }
            })
            .collect()
    });
    if let Some(e) = first_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    let records: Vec<PipelineRecord> = results.into_iter().flatten().flatten().collect();
    let manifest = finalize(meta, segments.len(), &records, dir, opts.stop_after.is_none())?;
    Ok(RunOutcome {
        manifest,
        records,
        backend: backend.counters(),
    })
}

/// SFT and synthesizer records for every retained record, in order.
pub fn export_records(
    records: &[PipelineRecord],
    run_id: &str,
    encoding: CallEncoding,
) -> Result<(Vec<SftRecord>, Vec<SynthRecord>), PipelineError> {
    let mut sft = Vec::new();
    let mut synth = Vec::new();
    for rec in records.iter().filter(|r| r.status == RecordStatus::Retained) {
        let err = |e: tooltraj_core::export::ExportError| PipelineError::Export {
            key: rec.key.clone(),
            detail: e.to_string(),
        };
        let t = rec.refined.as_ref().expect("retained records are refined");
        let tools = rec.toolset.as_deref().unwrap_or_default();
        sft.push(to_sft(t, tools, run_id, encoding).map_err(err)?);
        synth.push(to_synth_record(&rec.segment, tools, t, run_id).map_err(err)?);
    }
    Ok((sft, synth))
}

fn finalize(
    meta: &RunMeta,
    segments: usize,
    records: &[PipelineRecord],
    dir: &Path,
    complete: bool,
) -> Result<RunManifest, PipelineError> {
    let cfg = &meta.config;
    let encoding = if cfg.export.inline_markup {
        CallEncoding::InlineMarkup
    } else {
        CallEncoding::Structured
    };
    let (sft, synth) = export_records(records, &meta.run_id, encoding)?;
    let retained: Vec<&PipelineRecord> = records.iter().filter(|r| r.status == RecordStatus::Retained).collect();
    write_jsonl(&dir.join(RETAINED_FILE), &retained)?;
    write_jsonl(&dir.join(SFT_FILE), &sft)?;
    write_jsonl(&dir.join(SYNTH_FILE), &synth)?;
    let (stats, rows) = report::stats_report(records, cfg.stats.count_system, cfg.stats.bin_width);
    write_json(&dir.join(STATS_FILE), &stats)?;
    report::write_table(&dir.join(STATS_TABLE_FILE), &rows)?;

    let counters = stage_counters(records);
    let annotate = &counters[&Step::Annotate];
    let mut drop_reasons = BTreeMap::new();
    for c in counters.values() {
        for (code, n) in &c.reasons {
            *drop_reasons.entry(code.clone()).or_default() += n;
        }
    }
    let mut artifact_paths: BTreeMap<String, String> = Step::ALL
        .into_iter()
        .map(|s| (s.as_str().to_string(), s.checkpoint_file()))
        .collect();
    for (k, v) in [
        ("run", RUN_FILE),
        ("segments", SEGMENTS_FILE),
        ("retained", RETAINED_FILE),
        ("sft", SFT_FILE),
        ("synth", SYNTH_FILE),
        ("stats", STATS_FILE),
        ("stats_table", STATS_TABLE_FILE),
    ] {
        artifact_paths.insert(k.into(), v.into());
    }
    let manifest = RunManifest {
        run_id: meta.run_id.clone(),
        config_hash: meta.config_hash.clone(),
        segments,
        complete,
        filter: FilterStats::from_counts(annotate.attempted, annotate.succeeded),
        retained: retained.len(),
        stage_counters: counters,
        drop_reasons,
        artifact_paths,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Runs one step over already-loaded records (CLI stage commands). Dropped
/// input records pass through untouched; extraction output is fanned out.
pub fn run_step_over(
    stages: &Stages<'_>,
    step: Step,
    records: Vec<PipelineRecord>,
) -> Result<Vec<PipelineRecord>, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(stages.cfg.pipeline.concurrency)
        .build()
        .map_err(|e| PipelineError::Input(format!("cannot start worker pool: {e}")))?;
    let out: Result<Vec<Vec<PipelineRecord>>, PipelineError> = pool.install(|| {
        records
            .into_par_iter()
            .map(|rec| {
                if rec.is_dropped() {
                    return Ok(vec![rec]);
                }
                let expected = match step {
                    Step::Annotate => RecordStatus::Loaded,
                    Step::Extract => RecordStatus::Annotated,
                    Step::Generate => RecordStatus::Extracted,
                    Step::Refine => RecordStatus::Generated,
                    Step::Validate => RecordStatus::Refined,
                };
                if rec.status != expected {
                    return Err(PipelineError::Input(format!(
                        "record `{}` has status {:?}; {step} needs {:?}",
                        rec.key, rec.status, expected
                    )));
                }
                let done = stages.run_step(step, rec)?;
                Ok(match step {
                    Step::Extract if !done.is_dropped() => done.fan_out(),
                    _ => vec![done],
                })
            })
            .collect()
    });
    Ok(out?.into_iter().flatten().collect())
}
