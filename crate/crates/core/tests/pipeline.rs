//! Stage ordering, resumption, caching and filtering on small toy runs.

mod common;

use std::fs;

use common::runs::{quick_config, repo_root, toy_teacher, Counting};
use tracefix::corpus::{load_tasks, read_jsonl, ReasoningExample};
use tracefix::error::Error;
use tracefix::pipeline::{Pipeline, Stage, StageStatus, DSFT, TRACES, USAGE_COLLECT};
use tracefix::teacher::{CacheMode, UsageRecord};
use tracefix::toy::{adder_family, toy_task_set};
use tracefix::verifier::{SandboxConfig, Verifier};

#[test]
fn bundled_tasks_match_the_toy_family() {
    let file = load_tasks(&repo_root().join("data/toy/tasks.jsonl")).unwrap();
    assert_eq!(file.tasks(), toy_task_set().tasks());
}

#[test]
fn later_stage_needs_its_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = adder_family(8, "ord");
    let mut p = Pipeline::new(quick_config(dir.path(), &tasks), CacheMode::Record).unwrap();
    match p.run_stage(Stage::Ppo) {
        Err(Error::Ordering { stage, missing }) => assert_eq!((stage.as_str(), missing.as_str()), ("ppo", "collect")),
        other => panic!("expected an ordering error, got {other:?}"),
    }
    p.run_through(Stage::Judge).unwrap();
    match p.run_stage(Stage::Ppo) {
        Err(Error::Ordering { missing, .. }) => assert_eq!(missing, "train-rm"),
        other => panic!("expected an ordering error, got {other:?}"),
    }
}

#[test]
fn collect_resumes_where_it_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = adder_family(12, "res");
    let mut cfg = quick_config(dir.path(), &tasks);
    cfg.split.train_fraction = 1.0;
    cfg.split.val_fraction = 0.0;
    cfg.split.test_fraction = 0.0;
    cfg.teacher.max_in_flight = 2;

    // Live mode, so only resumption (not the cache) can skip tasks.
    let (mut flaky, _) = Counting::new(toy_teacher(&tasks, &[]));
    flaky.fail_after = Some(5);
    let mut p = Pipeline::new(cfg.clone(), CacheMode::Live)
        .unwrap()
        .with_backend(Box::new(flaky));
    let err = p.run_stage(Stage::Collect).unwrap_err();
    assert!(
        matches!(err, Error::Stage { ref stage, .. } if stage == "collect"),
        "{err}"
    );
    assert_eq!(p.manifest().unwrap().status(Stage::Collect), StageStatus::Failed);
    let partial: Vec<ReasoningExample> = read_jsonl(&p.output_dir().join(TRACES)).unwrap();
    // Chunks of two: the third chunk holds the fifth call, which succeeds,
    // and the sixth, which fails. Both earlier chunks and the success are kept.
    assert_eq!(partial.len(), 5);

    let (counting, tally) = Counting::new(toy_teacher(&tasks, &[]));
    let mut p = Pipeline::new(cfg, CacheMode::Live)
        .unwrap()
        .with_backend(Box::new(counting));
    let out = p.run_stage(Stage::Collect).unwrap();
    assert_eq!(tally.calls(), 12 - partial.len());
    let traces: Vec<ReasoningExample> = read_jsonl(&p.output_dir().join(TRACES)).unwrap();
    let mut ids: Vec<String> = traces.iter().map(|t| t.task_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 12);
    assert_eq!(out.summary["traces"], 12);
}

#[test]
fn replay_never_reaches_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = adder_family(10, "rep");
    let cfg = quick_config(dir.path(), &tasks);

    let (counting, recorded) = Counting::new(toy_teacher(&tasks, &[]));
    let mut p = Pipeline::new(cfg.clone(), CacheMode::Record)
        .unwrap()
        .with_backend(Box::new(counting));
    p.run_through(Stage::Judge).unwrap();
    assert!(recorded.calls() > 0);
    let first = fs::read(p.output_dir().join(TRACES)).unwrap();

    let mut cfg2 = cfg;
    cfg2.paths.output_dir = dir.path().join("replayed");
    let (counting, replayed) = Counting::new(toy_teacher(&tasks, &[]));
    let mut p = Pipeline::new(cfg2, CacheMode::Replay)
        .unwrap()
        .with_backend(Box::new(counting));
    p.run_through(Stage::Judge).unwrap();
    assert_eq!(replayed.calls(), 0);
    assert_eq!(fs::read(p.output_dir().join(TRACES)).unwrap(), first);
}

#[test]
fn usage_totals_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = adder_family(10, "use");
    let (counting, tally) = Counting::new(toy_teacher(&tasks, &[]));
    let mut p = Pipeline::new(quick_config(dir.path(), &tasks), CacheMode::Live)
        .unwrap()
        .with_backend(Box::new(counting));
    let out = p.run_stage(Stage::Collect).unwrap();
    let records: Vec<UsageRecord> = read_jsonl(&p.output_dir().join(USAGE_COLLECT)).unwrap();
    let usage = *tally.usage.lock().unwrap();
    assert_eq!(records.len(), tally.calls());
    assert_eq!(records.iter().map(|u| u.input_tokens).sum::<u64>(), usage.input_tokens);
    assert_eq!(
        records.iter().map(|u| u.output_tokens).sum::<u64>(),
        usage.output_tokens
    );
    assert_eq!(out.summary["input_tokens"], usage.input_tokens);
    assert_eq!(out.summary["output_tokens"], usage.output_tokens);
    assert!(usage.input_tokens > 0 && usage.output_tokens > 0);
}

#[test]
fn finished_stages_are_not_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = adder_family(8, "idem");
    let cfg = quick_config(dir.path(), &tasks);
    let mut p = Pipeline::new(cfg.clone(), CacheMode::Record).unwrap();
    let first = p.run_through(Stage::Sft).unwrap();
    assert!(first.iter().all(|o| !o.skipped));
    let manifest = fs::read(p.manifest_path()).unwrap();

    let (counting, tally) = Counting::new(toy_teacher(&tasks, &[]));
    let mut p = Pipeline::new(cfg.clone(), CacheMode::Record)
        .unwrap()
        .with_backend(Box::new(counting));
    let again = p.run_through(Stage::Sft).unwrap();
    assert!(again.iter().all(|o| o.skipped));
    assert_eq!(tally.calls(), 0);
    assert_eq!(fs::read(p.manifest_path()).unwrap(), manifest);

    // Rerunning filter makes sft stale.
    fs::write(p.output_dir().join(DSFT), "").unwrap();
    let out = p.run_stage(Stage::Filter).unwrap();
    assert!(!out.skipped);
    assert_eq!(p.manifest().unwrap().status(Stage::Sft), StageStatus::Pending);
    assert!(!p.run_stage(Stage::Sft).unwrap().skipped);

    // A different config starts over.
    let mut changed = cfg;
    changed.sft.epochs += 1;
    let p = Pipeline::new(changed, CacheMode::Record).unwrap();
    let m = p.manifest().unwrap();
    assert!(Stage::ALL.iter().all(|s| m.status(*s) == StageStatus::Pending));
    assert!(!p.output_dir().join(TRACES).exists());
}

#[test]
fn filter_keeps_a_fifth_of_fifty_verified_traces() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = adder_family(50, "flt");
    let mut cfg = quick_config(dir.path(), &tasks);
    cfg.split.train_fraction = 1.0;
    cfg.split.val_fraction = 0.0;
    cfg.split.test_fraction = 0.0;
    cfg.filter.cap_fraction = 0.2;
    cfg.toy_faulty.clear();
    let mut p = Pipeline::new(cfg, CacheMode::Record).unwrap();
    let out = p.run_through(Stage::Filter).unwrap();
    let summary = &out[1].summary;
    assert_eq!(
        (summary["verified"].as_u64(), summary["retained"].as_u64()),
        (Some(50), Some(10))
    );

    let kept: Vec<ReasoningExample> = read_jsonl(&p.output_dir().join(DSFT)).unwrap();
    assert_eq!(kept.len(), 10);
    let v = Verifier::new(SandboxConfig::default());
    let set = p.tasks().unwrap();
    for ex in &kept {
        let r = v.validate(set.get(&ex.task_id).unwrap(), &ex.solution).unwrap();
        assert!(r.valid && r.pass_fraction() == 1.0, "{}", ex.task_id);
    }
}

#[test]
fn faulty_traces_are_filtered_out() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = adder_family(6, "bad");
    let mut cfg = quick_config(dir.path(), &tasks);
    cfg.split.train_fraction = 1.0;
    cfg.split.val_fraction = 0.0;
    cfg.split.test_fraction = 0.0;
    cfg.filter.cap_fraction = 1.0;
    cfg.toy_faulty = vec!["bad-01".into(), "bad-04".into()];
    let mut p = Pipeline::new(cfg, CacheMode::Record).unwrap();
    p.run_through(Stage::Filter).unwrap();
    let kept: Vec<ReasoningExample> = read_jsonl(&p.output_dir().join(DSFT)).unwrap();
    let ids: Vec<&str> = kept.iter().map(|e| e.task_id.as_str()).collect();
    assert_eq!(ids, ["bad-00", "bad-02", "bad-03", "bad-05"]);
}
