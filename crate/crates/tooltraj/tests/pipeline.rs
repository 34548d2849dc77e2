mod common;

use common::*;
use tooltraj::audit::{audit_sft, audit_synth};
use tooltraj::core::export::{SftRecord, SynthRecord};
use tooltraj::core::mock::FaultConfig;
use tooltraj::core::Stage;
use tooltraj::io::read_jsonl;
use tooltraj::pipeline::{resume_run, start_run, PipelineError, RecordStatus, RunOptions, Step};

#[test]
fn clean_run_keeps_everything_valid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(1, 0.0);
    let segs = corpus(20, 1, 0);
    let out = start_run(&cfg, segs, dir.path(), &mock_backend(&cfg), RunOptions::default()).unwrap();
    let m = &out.manifest;
    assert_eq!(m.stage_counters[&Step::Annotate].attempted, 20);
    assert_eq!(m.filter.retained, 20);
    assert!(m.retained > 0);
    assert_eq!(m.retained, m.stage_counters[&Step::Generate].attempted);
    let synth: Vec<SynthRecord> = read_jsonl(&dir.path().join("synth.jsonl"), false).unwrap();
    let sft: Vec<SftRecord> = read_jsonl(&dir.path().join("sft.jsonl"), false).unwrap();
    assert_eq!(synth.len(), m.retained);
    assert!(synth.iter().all(|r| audit_synth(r, true).is_empty()));
    assert!(sft.iter().all(|r| audit_sft(r, true).is_empty()));
    for c in m.stage_counters.values() {
        assert_eq!(c.attempted, c.succeeded + c.dropped);
    }
}

#[test]
fn faulty_generation_is_filtered() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2, 0.0);
    faults_only(
        &mut cfg,
        FaultConfig {
            rate: 0.5,
            stages: vec![Stage::Generate],
            defects: Vec::new(),
        },
    );
    let out = start_run(
        &cfg,
        corpus(40, 2, 0),
        dir.path(),
        &mock_backend(&cfg),
        RunOptions::default(),
    )
    .unwrap();
    let dropped: usize = out.manifest.stage_counters.values().map(|c| c.dropped).sum();
    assert!(dropped > 0);
    let synth: Vec<SynthRecord> = read_jsonl(&dir.path().join("synth.jsonl"), false).unwrap();
    assert!(!synth.is_empty());
    for r in &synth {
        assert_eq!(audit_synth(r, true), Vec::<String>::new(), "{}", r.segment_id);
    }
}

#[test]
fn empty_input_gives_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3, 0.0);
    let out = start_run(&cfg, Vec::new(), dir.path(), &mock_backend(&cfg), RunOptions::default()).unwrap();
    assert_eq!(out.manifest.segments, 0);
    assert_eq!(out.manifest.filter.ratio, None);
    assert_eq!(std::fs::read(dir.path().join("sft.jsonl")).unwrap(), b"");
    assert!(out.manifest.stage_counters.values().all(|c| c.attempted == 0));
}

#[test]
fn duplicate_ids_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3, 0.0);
    let mut segs = corpus(3, 3, 0);
    segs[2].id = segs[0].id.clone();
    let err = start_run(&cfg, segs, dir.path(), &mock_backend(&cfg), RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Input(_)));
}

#[test]
fn resume_after_stop_matches_uninterrupted() {
    let cfg = config(7, 0.2);
    let segs = corpus(30, 7, 4);
    let full = tempfile::tempdir().unwrap();
    let full_backend = mock_backend(&cfg);
    start_run(&cfg, segs.clone(), full.path(), &full_backend, RunOptions::default()).unwrap();

    let part = tempfile::tempdir().unwrap();
    let stopped = start_run(
        &cfg,
        segs,
        part.path(),
        &mock_backend(&cfg),
        RunOptions {
            stop_after: Some(Step::Extract),
        },
    )
    .unwrap();
    assert!(!stopped.manifest.complete);
    assert!(stopped
        .records
        .iter()
        .all(|r| r.status <= RecordStatus::Extracted || r.is_dropped()));
    let backend = mock_backend(&cfg);
    resume_run(part.path(), None, &backend, RunOptions::default()).unwrap();
    let a = dir_contents(full.path());
    let b = dir_contents(part.path());
    for f in FINAL_FILES {
        assert_eq!(a[f], b[f], "{f} differs");
    }
    // Nothing from annotate or extract was recomputed.
    assert_eq!(
        stopped.backend.requests + backend.counters().requests,
        full_backend.counters().requests
    );
}

#[test]
fn resume_after_crash_matches_uninterrupted() {
    let cfg = config(11, 0.0);
    let segs = corpus(25, 11, 5);
    let full = tempfile::tempdir().unwrap();
    start_run(
        &cfg,
        segs.clone(),
        full.path(),
        &mock_backend(&cfg),
        RunOptions::default(),
    )
    .unwrap();

    let part = tempfile::tempdir().unwrap();
    let err = start_run(
        &cfg,
        segs,
        part.path(),
        &failing_backend(&cfg, 60),
        RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::Backend(_)));
    // A torn final line, as left by a kill during a write.
    let gen = part.path().join("generate.jsonl");
    let mut bytes = std::fs::read(&gen).unwrap_or_default();
    bytes.extend_from_slice(b"{\"key\":\"seg-00");
    std::fs::write(&gen, bytes).unwrap();

    resume_run(part.path(), Some(&cfg), &mock_backend(&cfg), RunOptions::default()).unwrap();
    let a = dir_contents(full.path());
    let b = dir_contents(part.path());
    for f in FINAL_FILES {
        assert_eq!(a[f], b[f], "{f} differs");
    }
}

#[test]
fn completed_run_resumes_without_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(5, 0.3);
    let first = start_run(
        &cfg,
        corpus(15, 5, 3),
        dir.path(),
        &mock_backend(&cfg),
        RunOptions::default(),
    )
    .unwrap();
    let backend = mock_backend(&cfg);
    let again = resume_run(dir.path(), None, &backend, RunOptions::default()).unwrap();
    assert_eq!(backend.counters().requests, 0);
    assert_eq!(first.manifest, again.manifest);
    assert_eq!(first.records, again.records);
}

#[test]
fn changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(5, 0.0);
    start_run(
        &cfg,
        corpus(3, 5, 0),
        dir.path(),
        &mock_backend(&cfg),
        RunOptions::default(),
    )
    .unwrap();
    let other = config(6, 0.0);
    let err = resume_run(dir.path(), Some(&other), &mock_backend(&other), RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::ConfigChanged { .. }));
    let mut wider = cfg.clone();
    wider.pipeline.concurrency = 9;
    resume_run(dir.path(), Some(&wider), &mock_backend(&wider), RunOptions::default()).unwrap();
    let err = start_run(
        &cfg,
        corpus(3, 5, 0),
        dir.path(),
        &mock_backend(&cfg),
        RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::RunExists(_)));
}

#[test]
fn concurrency_does_not_change_outputs() {
    let segs = corpus(24, 9, 6);
    let mut outputs = Vec::new();
    for workers in [1, 4, 8] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(9, 0.25);
        cfg.pipeline.concurrency = workers;
        cfg.backend.max_concurrency = workers;
        start_run(
            &cfg,
            segs.clone(),
            dir.path(),
            &mock_backend(&cfg),
            RunOptions::default(),
        )
        .unwrap();
        let c = dir_contents(dir.path());
        // run.json records the worker count itself.
        outputs.push(
            FINAL_FILES
                .iter()
                .filter(|f| **f != "run.json")
                .map(|f| c[*f].clone())
                .collect::<Vec<_>>(),
        );
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}
