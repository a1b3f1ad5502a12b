//! A bundled 20-task shell repair family and a scripted teacher that
//! answers trace, comparison and ranking requests about it.
//!
//! Every task reads two integers and should print their sum; the buggy
//! program uses `-` or `*` instead of `+`. Variable names are single
//! letters so all programs share one layout. For three tasks the scripted
//! teacher proposes a wrong fix, which verification must reject.

use serde_json::Map;

use crate::corpus::{RepairTask, TaskSet, TestSpec};
use crate::error::{Error, Result};
use crate::format::extract_solution;
use crate::teacher::{fenced, Teacher, TeacherReply, TeacherRequest, Usage, RANK_INSTRUCTION, TRACE_INSTRUCTION};
use crate::verifier::Verifier;

pub const TOY_BENCHMARK: &str = "toy-shell";
pub const TOY_PROMPT: &str = "Read two integers from standard input and print their sum.";

/// Tasks for which the scripted teacher answers with a wrong fix.
pub const FAULTY_TASKS: [&str; 3] = ["toy-03", "toy-10", "toy-17"];

const LETTERS: &[u8; 8] = b"abmnpqxy";

/// Task `i` uses variable pair `i / 2`; even tasks subtract, odd ones
/// multiply. Siblings `2k` and `2k + 1` share one fix.
fn layout(i: usize) -> (char, char, char) {
    let k = i / 2;
    let a = LETTERS[k % 8] as char;
    let b = LETTERS[(k + 1 + k / 8) % 8] as char;
    let op = if i.is_multiple_of(2) { '-' } else { '*' };
    (a, b, op)
}

fn program(a: char, b: char, op: char) -> String {
    format!("read {a} {b}\necho $(({a}{op}{b}))\n")
}

/// The 20 tasks `toy-00` .. `toy-19`.
pub fn toy_tasks() -> Vec<RepairTask> {
    adder_family(20, "toy")
}

/// Largest family size for which every task has distinct operands.
pub const MAX_FAMILY: usize = 112;

/// `n` adder repair tasks with ids `{prefix}-00`, `{prefix}-01`, ...
pub fn adder_family(n: usize, prefix: &str) -> Vec<RepairTask> {
    assert!(n <= MAX_FAMILY, "adder family holds at most {MAX_FAMILY} tasks");
    (0..n)
        .map(|i| {
            let (a, b, op) = layout(i);
            let tests = [(3i64, 4i64), (10, 5), (i as i64, i as i64 + 1)]
                .iter()
                .map(|(x, y)| TestSpec::io_pair(format!("{x} {y}\n"), format!("{}\n", x + y), 10.0))
                .collect();
            RepairTask {
                id: format!("{prefix}-{i:02}"),
                source_benchmark: TOY_BENCHMARK.into(),
                prompt: TOY_PROMPT.into(),
                buggy_code: program(a, b, op),
                context: Vec::new(),
                tests,
                ground_truth: Some(program(a, b, '+')),
                language_tag: "sh".into(),
                extra: Map::new(),
            }
        })
        .collect()
}

pub fn toy_task_set() -> TaskSet {
    TaskSet::new(toy_tasks()).expect("toy ids are unique")
}

/// The reasoning line the scripted teacher gives for a correct fix.
pub fn toy_reasoning(op: char) -> String {
    format!("The `{op}` should be `+` to sum.")
}

/// Answers requests rendered from the default templates. Traces are fixed
/// texts; rankings and verdicts order candidates by the share of tests
/// their code passes, then by edit distance to the ground truth, then by
/// position.
pub struct ToyTeacher {
    tasks: TaskSet,
    verifier: Verifier,
    faulty: Vec<String>,
}

impl ToyTeacher {
    /// Faulty on [`FAULTY_TASKS`].
    pub fn new(tasks: TaskSet, verifier: Verifier) -> Self {
        Self::with_faulty(tasks, verifier, FAULTY_TASKS.iter().map(|s| s.to_string()).collect())
    }

    pub fn with_faulty(tasks: TaskSet, verifier: Verifier, faulty: Vec<String>) -> Self {
        ToyTeacher {
            tasks,
            verifier,
            faulty,
        }
    }

    fn find_task(&self, text: &str) -> Result<&RepairTask> {
        // Candidates may quote other tasks' code; only look above them.
        let head = text.split("\n### Solution").next().unwrap_or(text);
        let mut hits = self.tasks.iter().filter(|t| head.contains(&fenced(&t.buggy_code)));
        match (hits.next(), hits.next()) {
            (Some(t), None) => Ok(t),
            _ => Err(Error::Input(
                "toy teacher cannot tell which task the request is about".into(),
            )),
        }
    }

    fn trace_reply(&self, task: &RepairTask) -> String {
        let i: usize = task.id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(0);
        let (a, b, op) = layout(i);
        if self.faulty.contains(&task.id) {
            format!(
                "The operands are in the wrong order.\n```sh\n{}```\n",
                program(b, a, op)
            )
        } else {
            format!("{}\n```sh\n{}```\n", toy_reasoning(op), program(a, b, '+'))
        }
    }

    /// Higher is better.
    fn score(&self, task: &RepairTask, candidate: &str) -> Result<(f64, i64)> {
        let Some(code) = extract_solution(candidate) else {
            return Ok((-1.0, i64::MIN));
        };
        let pass = if code.trim().is_empty() {
            0.0
        } else {
            self.verifier.validate(task, &code)?.pass_fraction()
        };
        let truth = task.ground_truth.as_deref().unwrap_or("");
        Ok((pass, -(strsim::levenshtein(&code, truth) as i64)))
    }

    fn rank_reply(&self, task: &RepairTask, text: &str) -> Result<String> {
        let candidates = split_sections(
            text,
            |i| format!("\n### Solution {}\n", i + 1),
            "\nJudge each solution on:",
        );
        if candidates.len() < 2 {
            return Err(Error::Input("ranking request lists fewer than two solutions".into()));
        }
        let mut scored = Vec::new();
        for (i, c) in candidates.iter().enumerate() {
            scored.push((self.score(task, c)?, i));
        }
        scored.sort_by(|(a, i), (b, j)| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(i.cmp(j)));
        let order: Vec<String> = scored.iter().map(|(_, i)| (i + 1).to_string()).collect();
        Ok(format!(
            "Solution {} passes the most tests with the smallest change.\n{}",
            order[0],
            order.join(",")
        ))
    }

    fn compare_reply(&self, task: &RepairTask, text: &str) -> Result<String> {
        let labels = ["A", "B"];
        let parts = split_sections(
            text,
            |i| format!("\n### Solution {}\n", labels.get(i).unwrap_or(&"?")),
            "\n\nCompare the two solutions",
        );
        if parts.len() != 2 {
            return Err(Error::Input("comparison request does not hold two solutions".into()));
        }
        let (a, b) = (self.score(task, &parts[0])?, self.score(task, &parts[1])?);
        let better_a = a.0 > b.0 || (a.0 == b.0 && a.1 >= b.1);
        Ok(format!(
            "Compared on tests and change size.\n{}",
            if better_a { "A" } else { "B" }
        ))
    }
}

/// Text between consecutive headers `header(0)`, `header(1)`, ...; the last
/// section ends at `end` (or the end of `text`).
fn split_sections(text: &str, header: impl Fn(usize) -> String, end: &str) -> Vec<String> {
    let mut starts = Vec::new();
    let mut from = 0;
    loop {
        let h = header(starts.len());
        match text[from..].find(&h) {
            Some(rel) => {
                starts.push((from + rel, from + rel + h.len()));
                from += rel + h.len();
            }
            None => break,
        }
    }
    let tail_end = text[from..].find(end).map_or(text.len(), |rel| from + rel);
    (0..starts.len())
        .map(|k| {
            let stop = starts.get(k + 1).map_or(tail_end, |s| s.0);
            text[starts[k].1..stop].trim_end().to_owned()
        })
        .collect()
}

impl Teacher for ToyTeacher {
    fn complete(&self, request: &TeacherRequest) -> Result<TeacherReply> {
        request.validate()?;
        let text = &request.messages.last().expect("validated non-empty").content;
        let task = self.find_task(text)?;
        let reply = if text.contains(TRACE_INSTRUCTION) {
            self.trace_reply(task)
        } else if text.contains(RANK_INSTRUCTION) {
            self.rank_reply(task, text)?
        } else if text.contains("### Solution A") {
            self.compare_reply(task, text)?
        } else {
            return Err(Error::Input("toy teacher does not recognise the request".into()));
        };
        let usage = Usage {
            input_tokens: text.len() as u64 / 4,
            output_tokens: reply.len() as u64 / 4,
        };
        Ok(TeacherReply::from_text(reply, usage))
    }
}
