//! Functional verification of candidate programs. Each call materialises
//! the candidate and the task's context files in a fresh temporary
//! directory, runs every test under its timeout with a cleared environment,
//! and removes the directory afterwards.

mod patch;

pub use patch::{apply_patch, looks_like_patch, reverse_patch, unified_diff, FileSet};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Component, Path};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wait_timeout::ChildExt;

use crate::corpus::{ReasoningExample, RepairTask, TaskSet, TestKind, TestSpec};
use crate::error::{Error, Result};

/// Exit code reported for a process that was killed at its timeout. No
/// real process can exit with it.
pub const TIMEOUT_EXIT_CODE: i32 = i32::MIN;

const SAFE_PATH: &str = "/usr/local/bin:/usr/bin:/bin";
const OUTPUT_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub wall_time_ms: f64,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub index: usize,
    pub pass: bool,
    pub result: ExecutionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub task_id: String,
    pub candidate_digest: String,
    pub per_test: Vec<TestOutcome>,
    pub valid: bool,
}

impl VerificationReport {
    pub fn passed(&self) -> usize {
        self.per_test.iter().filter(|t| t.pass).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.per_test.is_empty() {
            0.0
        } else {
            self.passed() as f64 / self.per_test.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileCheck {
    pub compiled: bool,
    pub result: ExecutionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// Program names (first word of a command) that may be executed.
    pub allowlist: Vec<String>,
    /// Per-language command used by io_pair tests that carry no command.
    pub run_commands: BTreeMap<String, String>,
    /// Per-language syntax or compile check.
    pub compile_commands: BTreeMap<String, String>,
    /// Per-language extension of the materialised candidate file.
    pub extensions: BTreeMap<String, String>,
    /// Timeout for compile checks.
    pub compile_timeout_seconds: f64,
    /// Maximum concurrent validations; 0 means one per logical core.
    pub parallelism: usize,
}

fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            allowlist: ["sh", "bash", "python3"].iter().map(|s| s.to_string()).collect(),
            run_commands: map(&[
                ("sh", "sh {file}"),
                ("bash", "bash {file}"),
                ("python", "python3 {file}"),
            ]),
            compile_commands: map(&[
                ("sh", "sh -n {file}"),
                ("bash", "bash -n {file}"),
                ("python", "python3 -m py_compile {file}"),
            ]),
            extensions: map(&[("sh", "sh"), ("bash", "sh"), ("python", "py")]),
            compile_timeout_seconds: 10.0,
            parallelism: 0,
        }
    }
}

/// SHA-256 of the candidate text, hex encoded.
pub fn candidate_digest(candidate: &str) -> String {
    hex::encode(Sha256::digest(candidate.as_bytes()))
}

/// Trailing whitespace removed from every line and from the end.
fn normalize_output(s: &str) -> String {
    let lines: Vec<&str> = s.lines().map(str::trim_end).collect();
    lines.join("\n").trim_end().to_owned()
}

#[derive(Debug, Clone, Default)]
pub struct Verifier {
    pub config: SandboxConfig,
}

impl Verifier {
    pub fn new(config: SandboxConfig) -> Self {
        Verifier { config }
    }

    /// Name of the candidate file for a language.
    pub fn candidate_file(&self, language_tag: &str) -> String {
        let ext = self
            .config
            .extensions
            .get(language_tag)
            .map(String::as_str)
            .unwrap_or("txt");
        format!("solution.{ext}")
    }

    fn argv(&self, template: &str, file: &Path, dir: &Path) -> Result<Vec<String>> {
        let words = shlex::split(template)
            .filter(|w| !w.is_empty())
            .ok_or_else(|| Error::Configuration(format!("cannot split command {template:?}")))?;
        let file = file.to_string_lossy();
        let dir = dir.to_string_lossy();
        let argv: Vec<String> = words
            .iter()
            .map(|w| w.replace("{file}", &file).replace("{dir}", &dir))
            .collect();
        let program = Path::new(&argv[0])
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !self.config.allowlist.contains(&program) {
            return Err(Error::Configuration(format!(
                "command `{program}` is not on the allowlist"
            )));
        }
        Ok(argv)
    }

    fn command_for(&self, task: &RepairTask, test: &TestSpec) -> Result<String> {
        if let Some(c) = &test.command {
            return Ok(c.clone());
        }
        match test.kind {
            TestKind::Command => Err(Error::Validation(format!(
                "task {}: command test without a command",
                task.id
            ))),
            TestKind::IoPair => self
                .config
                .run_commands
                .get(&task.language_tag)
                .cloned()
                .ok_or_else(|| {
                    Error::Configuration(format!(
                        "no run command configured for language `{}`",
                        task.language_tag
                    ))
                }),
        }
    }

    /// Runs every test of `task` against `candidate`.
    pub fn validate(&self, task: &RepairTask, candidate: &str) -> Result<VerificationReport> {
        if task.tests.is_empty() {
            return Err(Error::Validation(format!("task {} has no tests", task.id)));
        }
        let dir = tempfile::Builder::new()
            .prefix("tracefix-")
            .tempdir()
            .map_err(|e| Error::Environment(format!("cannot create sandbox directory: {e}")))?;
        for ctx in &task.context {
            write_inside(dir.path(), &ctx.name, &ctx.text)?;
        }
        let file_name = self.candidate_file(&task.language_tag);
        let file = write_inside(dir.path(), &file_name, candidate)?;

        let mut per_test = Vec::with_capacity(task.tests.len());
        for (index, test) in task.tests.iter().enumerate() {
            test.validate()?;
            let argv = self.argv(&self.command_for(task, test)?, &file, dir.path())?;
            let result = run(&argv, dir.path(), test.stdin.as_deref(), secs(test.timeout_seconds))?;
            let mut pass = !result.timed_out && result.exit_code == 0;
            if test.kind == TestKind::IoPair {
                let expected = test.expected_stdout.as_deref().unwrap_or("");
                pass &= normalize_output(&result.stdout) == normalize_output(expected);
            }
            per_test.push(TestOutcome { index, pass, result });
        }
        dir.close()
            .map_err(|e| Error::Environment(format!("cannot remove sandbox directory: {e}")))?;
        let valid = per_test.iter().all(|t| t.pass);
        Ok(VerificationReport {
            task_id: task.id.clone(),
            candidate_digest: candidate_digest(candidate),
            per_test,
            valid,
        })
    }

    /// Validates many (task, candidate) pairs concurrently, bounded by the
    /// configured parallelism. Reports come back in input order.
    pub fn validate_many(&self, jobs: &[(&RepairTask, &str)]) -> Result<Vec<VerificationReport>> {
        let work = || {
            jobs.par_iter()
                .map(|(t, c)| self.validate(t, c))
                .collect::<Result<Vec<_>>>()
        };
        if self.config.parallelism == 0 {
            return work();
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| Error::Environment(format!("cannot start verifier pool: {e}")))?
            .install(work)
    }

    /// The examples whose solutions pass all their task's tests, marked
    /// verified, in input order.
    pub fn filter_verified(&self, examples: &[ReasoningExample], tasks: &TaskSet) -> Result<Vec<ReasoningExample>> {
        let jobs = examples
            .iter()
            .map(|e| {
                tasks
                    .get(&e.task_id)
                    .map(|t| (t, e.solution.as_str()))
                    .ok_or_else(|| Error::Validation(format!("example refers to unknown task `{}`", e.task_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let reports = self.validate_many(&jobs)?;
        Ok(examples
            .iter()
            .zip(reports)
            .filter(|(_, r)| r.valid)
            .map(|(e, _)| ReasoningExample {
                verified: true,
                ..e.clone()
            })
            .collect())
    }

    /// Runs the compile command for `language_tag` (or `template` when
    /// given) on the candidate. A timeout counts as not compiled.
    pub fn compile_check(&self, candidate: &str, language_tag: &str, template: Option<&str>) -> Result<CompileCheck> {
        let template = match template {
            Some(t) => t.to_owned(),
            None => self.config.compile_commands.get(language_tag).cloned().ok_or_else(|| {
                Error::Configuration(format!("no compile command configured for language `{language_tag}`"))
            })?,
        };
        let dir = tempfile::Builder::new()
            .prefix("tracefix-")
            .tempdir()
            .map_err(|e| Error::Environment(format!("cannot create sandbox directory: {e}")))?;
        let file = write_inside(dir.path(), &self.candidate_file(language_tag), candidate)?;
        let argv = self.argv(&template, &file, dir.path())?;
        let result = run(&argv, dir.path(), None, secs(self.config.compile_timeout_seconds))?;
        Ok(CompileCheck {
            compiled: !result.timed_out && result.exit_code == 0,
            result,
        })
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

fn write_inside(dir: &Path, name: &str, text: &str) -> Result<std::path::PathBuf> {
    let rel = Path::new(name);
    if name.is_empty() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(Error::Validation(format!("file name `{name}` escapes the sandbox")));
    }
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::Environment(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(&path, text).map_err(|e| Error::Environment(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn read_capped<R: Read + Send + 'static>(mut r: R) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = OUTPUT_LIMIT.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        kept
    })
}

#[cfg(unix)]
fn kill_group(pid: u32) {
    // The child leads its own process group, so this also reaches
    // anything it spawned.
    unsafe {
        libc::kill(-(pid as i32), libc::SIGKILL);
    }
}

#[cfg(not(unix))]
fn kill_group(_pid: u32) {}

/// Runs `argv` in `dir` with a cleared environment.
pub fn run(argv: &[String], dir: &Path, stdin: Option<&str>, timeout: Duration) -> Result<ExecutionResult> {
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(dir)
        .env_clear()
        .env("PATH", SAFE_PATH)
        .env("HOME", dir)
        .env("LC_ALL", "C")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let start = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::Environment(format!("cannot start `{}`: {e}", argv[0])))?;
    let input = stdin.unwrap_or("").as_bytes().to_vec();
    let mut pipe = child.stdin.take();
    let writer = thread::spawn(move || {
        if let Some(p) = pipe.as_mut() {
            let _ = p.write_all(&input);
        }
    });
    let out = read_capped(child.stdout.take().expect("piped stdout"));
    let err = read_capped(child.stderr.take().expect("piped stderr"));

    let status = child
        .wait_timeout(timeout)
        .map_err(|e| Error::Environment(format!("cannot wait for `{}`: {e}", argv[0])))?;
    let (exit_code, timed_out) = match status {
        Some(s) => (exit_code_of(s), false),
        None => {
            kill_group(child.id());
            let _ = child.kill();
            let _ = child.wait();
            (TIMEOUT_EXIT_CODE, true)
        }
    };
    kill_group(child.id());
    let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let _ = writer.join();
    let stdout = String::from_utf8_lossy(&out.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();
    Ok(ExecutionResult {
        exit_code,
        stdout,
        stderr,
        wall_time_ms,
        timed_out,
    })
}

fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    if let Some(c) = status.code() {
        return c;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    -1
}
