use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use tooltraj::backend::{Backend, BackendError};
use tooltraj::config::RunConfig;
use tooltraj::core::corpus::TextSegment;
use tooltraj::core::export::CallEncoding;
use tooltraj::core::trajectory::parse_with_toolset;
use tooltraj::io::{load_segments, read_jsonl, write_json, write_jsonl, IoError};
use tooltraj::pipeline::{
    export_records, read_run_meta, resume_run, run_id_for, run_step_over, stage_counters, start_run, PipelineError,
    PipelineRecord, RecordStatus, RunOptions, Stages, Step,
};
use tooltraj::report;

#[derive(Parser)]
#[command(
    name = "tooltraj",
    version,
    about = "Synthesize multi-turn tool-use trajectories from text"
)]
struct Cli {
    /// More log output (repeat for debug); `RUST_LOG` takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label segments and keep the multi-step ones.
    Annotate(StageArgs),
    /// Extract workflows; one output record per workflow.
    Extract(StageArgs),
    /// Draft a conversation per workflow.
    Generate(StageArgs),
    /// Refine drafts and attach the final tool set.
    Refine(StageArgs),
    /// Rule checks plus the judge. Also accepts `{"id", "text"}` lines holding raw tagged output.
    Validate(StageArgs),
    /// Dataset statistics for retained records.
    Stats(StatsArgs),
    /// Write SFT and synthesizer records for retained records.
    Export(ExportArgs),
    /// Run every stage into a run directory.
    Run(RunArgs),
    /// Continue an interrupted run.
    Resume(ResumeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Args, Default)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads and in-flight request cap.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Mock backend fault probability.
    #[arg(long)]
    fault_rate: Option<f64>,
    #[arg(long, value_enum)]
    judge: Option<Switch>,
    #[arg(long)]
    limit: Option<usize>,
    /// Extra `key=value` config overrides, e.g. `pipeline.stage_retries=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(b) = self.backend {
            o.push(format!(
                "backend.kind={}",
                if matches!(b, BackendArg::Mock) {
                    "\"mock\""
                } else {
                    "\"http\""
                }
            ));
        }
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(c) = self.concurrency {
            o.push(format!("pipeline.concurrency={c}"));
            o.push(format!("backend.max_concurrency={c}"));
        }
        if let Some(r) = self.fault_rate {
            o.push(format!("mock.fault_rate={r:?}"));
        }
        if let Some(j) = self.judge {
            o.push(format!("pipeline.judge={}", matches!(j, Switch::On)));
        }
        if let Some(l) = self.limit {
            o.push(format!("limit={l}"));
        }
        o.extend(self.set.iter().cloned());
        o
    }

    fn has_overrides(&self) -> bool {
        !self.overrides().is_empty()
    }

    fn load(&self) -> Result<RunConfig, PipelineError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides())?)
    }
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    /// Report JSON; a CSV table is written next to it.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving `sft.jsonl` and `synth.jsonl`.
    #[arg(long)]
    output: PathBuf,
    /// Defaults to the id derived from the config.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    /// Run directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    stop_after: Option<Step>,
}

#[derive(Args)]
struct ResumeArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    stop_after: Option<Step>,
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) | PipelineError::ConfigChanged { .. } | PipelineError::RunExists(_) => 2,
        PipelineError::Backend(BackendError::MissingCredential(_)) => 2,
        PipelineError::Input(_) | PipelineError::NoRun(_) => 3,
        PipelineError::Backend(_) => 4,
        PipelineError::Storage(_) | PipelineError::Export { .. } => 1,
    }
}

fn input_error(e: IoError) -> PipelineError {
    PipelineError::Input(e.to_string())
}

fn print_json<T: Serialize>(value: &T) {
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer(&mut out, value);
    let _ = writeln!(out);
}

#[derive(Serialize)]
struct StageSummary {
    step: Step,
    input: usize,
    output: usize,
    retained: usize,
    dropped: usize,
    reasons: BTreeMap<String, usize>,
}

fn summarize(step: Step, input: usize, records: &[PipelineRecord]) -> StageSummary {
    let c = stage_counters(records).remove(&step).unwrap_or_default();
    StageSummary {
        step,
        input,
        output: records.len(),
        retained: records.iter().filter(|r| !r.is_dropped()).count(),
        dropped: c.dropped,
        reasons: c.reasons,
    }
}

fn read_segments(path: &Path, cfg: &RunConfig) -> Result<Vec<TextSegment>, PipelineError> {
    let reader = load_segments(path, &cfg.text_field, &cfg.id_field, cfg.limit).map_err(input_error)?;
    reader.collect::<Result<Vec<_>, _>>().map_err(input_error)
}

/// Pipeline records, or raw `{"id", "text"}` lines turned into refined
/// records awaiting validation.
fn read_validation_input(path: &Path) -> Result<Vec<PipelineRecord>, PipelineError> {
    let lines: Vec<Value> = read_jsonl(path, false).map_err(input_error)?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, v) in lines.into_iter().enumerate() {
        if v.get("status").is_some() {
            out.push(serde_json::from_value(v).map_err(|e| PipelineError::Input(format!("line {}: {e}", i + 1)))?);
            continue;
        }
        let id = match v.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("line:{}", i + 1),
        };
        let text = v
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| PipelineError::Input(format!("line {}: no `text` field", i + 1)))?;
        let segment = TextSegment::new(id.clone(), text, "validate")
            .ok_or_else(|| PipelineError::Input(format!("line {}: empty text", i + 1)))?;
        let mut rec = PipelineRecord::new(segment);
        match parse_with_toolset(text) {
            Ok((tools, parsed)) => {
                let mut t = parsed.trajectory;
                t.source_segment_id = id.clone();
                t.toolset_ref = id;
                rec.refined = Some(t);
                rec.toolset = Some(tools);
                rec.status = RecordStatus::Refined;
            }
            Err(e) => {
                rec.status = RecordStatus::Dropped;
                rec.dropped = Some(tooltraj::pipeline::DropInfo {
                    step: Step::Validate,
                    codes: vec![e.code.as_str().to_string()],
                    detail: e.to_string(),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn stage_command(step: Step, args: &StageArgs) -> Result<(), PipelineError> {
    let cfg = args.common.load()?;
    let records = match step {
        Step::Annotate => read_segments(&args.input, &cfg)?
            .into_iter()
            .map(PipelineRecord::new)
            .collect(),
        Step::Validate => read_validation_input(&args.input)?,
        _ => read_jsonl(&args.input, false).map_err(input_error)?,
    };
    let input = records.len();
    let prompts = cfg.prompts()?;
    let backend = Backend::from_config(&cfg)?;
    let stages = Stages {
        backend: &backend,
        cfg: &cfg,
        prompts: &prompts,
    };
    let out = run_step_over(&stages, step, records)?;
    write_jsonl(&args.output, &out)?;
    print_json(&summarize(step, input, &out));
    Ok(())
}

fn stats_command(args: &StatsArgs) -> Result<(), PipelineError> {
    let cfg = args.common.load()?;
    let records: Vec<PipelineRecord> = read_jsonl(&args.input, false).map_err(input_error)?;
    let (stats, rows) = report::stats_report(&records, cfg.stats.count_system, cfg.stats.bin_width);
    write_json(&args.output, &stats)?;
    report::write_table(&args.output.with_extension("csv"), &rows)?;
    print_json(&stats);
    Ok(())
}

fn export_command(args: &ExportArgs) -> Result<(), PipelineError> {
    let cfg = args.common.load()?;
    let records: Vec<PipelineRecord> = read_jsonl(&args.input, false).map_err(input_error)?;
    let run_id = match &args.run_id {
        Some(id) => id.clone(),
        None => run_id_for(&cfg.hash(&cfg.prompts()?)),
    };
    let encoding = if cfg.export.inline_markup {
        CallEncoding::InlineMarkup
    } else {
        CallEncoding::Structured
    };
    let (sft, synth) = export_records(&records, &run_id, encoding)?;
    std::fs::create_dir_all(&args.output).map_err(|source| IoError::Write {
        path: args.output.clone(),
        source,
    })?;
    write_jsonl(&args.output.join("sft.jsonl"), &sft)?;
    write_jsonl(&args.output.join("synth.jsonl"), &synth)?;
    print_json(&serde_json::json!({ "run_id": run_id, "exported": sft.len() }));
    Ok(())
}

fn run_command(args: &RunArgs) -> Result<(), PipelineError> {
    let cfg = args.common.load()?;
    let segments = read_segments(&args.input, &cfg)?;
    let backend = Backend::from_config(&cfg)?;
    let outcome = start_run(
        &cfg,
        segments,
        &args.output,
        &backend,
        RunOptions {
            stop_after: args.stop_after,
        },
    )?;
    print_json(&outcome.manifest);
    Ok(())
}

fn resume_command(args: &ResumeArgs) -> Result<(), PipelineError> {
    let meta = read_run_meta(&args.output)?;
    let expected = if args.common.config.is_some() || args.common.has_overrides() {
        let base = match &args.common.config {
            Some(_) => args.common.load()?,
            None => meta.config.with_overrides(&args.common.overrides())?,
        };
        Some(base)
    } else {
        None
    };
    // Worker and in-flight limits may change on resume; everything else must match.
    let backend_cfg = match &expected {
        Some(cfg) => cfg.clone(),
        None => meta.config.clone(),
    };
    let backend = Backend::from_config(&backend_cfg)?;
    let outcome = resume_run(
        &args.output,
        expected.as_ref(),
        &backend,
        RunOptions {
            stop_after: args.stop_after,
        },
    )?;
    print_json(&outcome.manifest);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Annotate(a) => stage_command(Step::Annotate, a),
        Command::Extract(a) => stage_command(Step::Extract, a),
        Command::Generate(a) => stage_command(Step::Generate, a),
        Command::Refine(a) => stage_command(Step::Refine, a),
        Command::Validate(a) => stage_command(Step::Validate, a),
        Command::Stats(a) => stats_command(a),
        Command::Export(a) => export_command(a),
        Command::Run(a) => run_command(a),
        Command::Resume(a) => resume_command(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
