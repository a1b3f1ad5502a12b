//! Pipeline configs rooted in temporary directories, and teacher wrappers
//! that count or fail calls.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use tracefix::corpus::{save_tasks, RepairTask, TaskSet};
use tracefix::error::{Error, Result};
use tracefix::pipeline::PipelineConfig;
use tracefix::teacher::{Teacher, TeacherReply, TeacherRequest, Usage};
use tracefix::toy::ToyTeacher;
use tracefix::verifier::{SandboxConfig, Verifier};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The bundled toy config with cache and outputs under `dir`.
pub fn toy_config(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::load(&repo_root().join("configs/toy.toml")).expect("toy config");
    c.paths.cache_dir = dir.join("cache");
    c.paths.output_dir = dir.join("out");
    c
}

/// A toy run shrunk to a few seconds. `tasks` are written to `dir`.
pub fn quick_config(dir: &Path, tasks: &[RepairTask]) -> PipelineConfig {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("tasks.jsonl");
    save_tasks(&path, &TaskSet::new(tasks.to_vec()).unwrap()).unwrap();
    let mut c = toy_config(dir);
    c.paths.tasks = path;
    c.model.window = 8;
    c.model.hidden1 = 8;
    c.model.hidden2 = 8;
    c.sft.epochs = 2;
    c.candidates.per_prompt = 3;
    c.candidates.max_response_tokens = 24;
    c.reward.epochs = 1;
    c.ppo.rounds = 1;
    c.ppo.candidates_per_prompt = 2;
    c.ppo.ppo_epochs_per_batch = 1;
    c.ppo.max_response_tokens = 24;
    c.eval.samples_per_task = 2;
    c.eval.max_response_tokens = 24;
    c
}

pub fn toy_teacher(tasks: &[RepairTask], faulty: &[&str]) -> ToyTeacher {
    ToyTeacher::with_faulty(
        TaskSet::new(tasks.to_vec()).unwrap(),
        Verifier::new(SandboxConfig::default()),
        faulty.iter().map(|s| s.to_string()).collect(),
    )
}

/// Shared tallies of a [`Counting`] teacher.
#[derive(Debug, Default)]
pub struct Tally {
    pub calls: AtomicUsize,
    pub usage: Mutex<Usage>,
}

impl Tally {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Passes requests through, counting calls and summing reported usage.
/// After `fail_after` calls every further call is a transport error.
pub struct Counting<T> {
    pub inner: T,
    pub tally: Arc<Tally>,
    pub fail_after: Option<usize>,
}

impl<T: Teacher> Counting<T> {
    pub fn new(inner: T) -> (Self, Arc<Tally>) {
        let tally = Arc::new(Tally::default());
        (
            Counting {
                inner,
                tally: tally.clone(),
                fail_after: None,
            },
            tally,
        )
    }
}

impl<T: Teacher> Teacher for Counting<T> {
    fn complete(&self, request: &TeacherRequest) -> Result<TeacherReply> {
        let n = self.tally.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|k| n >= k) {
            return Err(Error::Transport {
                attempts: 1,
                message: "connection refused".into(),
            });
        }
        let reply = self.inner.complete(request)?;
        *self.tally.usage.lock().unwrap() += reply.token_usage;
        Ok(reply)
    }
}
