use serde::{Deserialize, Serialize};

use crate::corpus::RepairTask;

/// Instruction appended to every trace request.
pub const TRACE_INSTRUCTION: &str = "Please fix the bug in this code. First analyze the problem, identify the bug, explain your reasoning, and then provide the corrected code.";

/// Opening of every ranking request.
pub const RANK_INSTRUCTION: &str = "I'll show you a programming task and multiple solution attempts. Your job is to evaluate each solution carefully, then rank them from best to worst.";

pub const CRITERIA: &str = "- Correctness: Does it properly fix the bug?
- Efficiency: Is the solution efficient and optimized?
- Readability: Is the code clean and easy to understand?
- Minimal change: Does it modify only what's necessary to fix the bug?";

/// Request texts sent to the teacher. Placeholders in braces are filled
/// in a single pass, so substituted text is never re-expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    /// Placeholders: `{prompt}`, `{buggy_code}`, `{context}`.
    pub trace_template: String,
    /// Placeholders: `{prompt}`, `{buggy_code}`, `{solution_a}`, `{solution_b}`.
    pub compare_template: String,
    /// Placeholders: `{prompt}`, `{buggy_code}`, `{solutions}`.
    pub rank_template: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            trace_template: format!("{{prompt}}\n\n{{buggy_code}}{{context}}\n{TRACE_INSTRUCTION}"),
            compare_template: format!(
                "Task:\n{{prompt}}\n\nBuggy code:\n{{buggy_code}}\nHere are two candidate repairs.\n\n### Solution A\n{{solution_a}}\n\n### Solution B\n{{solution_b}}\n\nCompare the two solutions on these criteria:\n{CRITERIA}\n\nExplain your assessment, then give your verdict on the final line as a single letter: A or B."
            ),
            rank_template: format!(
                "{RANK_INSTRUCTION}\n\nTask:\n{{prompt}}\n\nBuggy code:\n{{buggy_code}}\n{{solutions}}\nJudge each solution on:\n{CRITERIA}\n\nExplain your assessment, then end with one line listing the solution numbers from best to worst, separated by commas (for example: 2,1,3)."
            ),
        }
    }
}

/// Code wrapped in a bare fence, newline-terminated.
pub fn fenced(code: &str) -> String {
    let mut s = String::with_capacity(code.len() + 9);
    s.push_str("```\n");
    s.push_str(code);
    if !code.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("```\n");
    s
}

/// Replaces `{name}` placeholders listed in `values`; other braces stay.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = tail.find('}').and_then(|close| {
            let key = &tail[1..close];
            values.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn context_block(task: &RepairTask) -> String {
    task.context
        .iter()
        .map(|c| format!("\nFile {}:\n{}", c.name, fenced(&c.text)))
        .collect()
}

impl PromptTemplates {
    pub fn render_trace(&self, task: &RepairTask) -> String {
        fill(
            &self.trace_template,
            &[
                ("prompt", task.prompt.trim_end()),
                ("buggy_code", &fenced(&task.buggy_code)),
                ("context", &context_block(task)),
            ],
        )
    }

    pub fn render_compare(&self, task: &RepairTask, a: &str, b: &str) -> String {
        fill(
            &self.compare_template,
            &[
                ("prompt", task.prompt.trim_end()),
                ("buggy_code", &fenced(&task.buggy_code)),
                ("solution_a", a.trim_end()),
                ("solution_b", b.trim_end()),
            ],
        )
    }

    /// Candidates are numbered from 1 in the given order.
    pub fn render_rank(&self, task: &RepairTask, candidates: &[String]) -> String {
        let solutions: String = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("\n### Solution {}\n{}\n", i + 1, c.trim_end()))
            .collect();
        fill(
            &self.rank_template,
            &[
                ("prompt", task.prompt.trim_end()),
                ("buggy_code", &fenced(&task.buggy_code)),
                ("solutions", &solutions),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_instructions() {
        let t = PromptTemplates::default();
        assert!(t.trace_template.contains("Please fix the bug in this code."));
        assert!(t.rank_template.contains("rank them from best to worst"));
        for c in [
            "Does it properly fix the bug?",
            "efficient and optimized",
            "clean and easy",
            "only what's necessary",
        ] {
            assert!(t.compare_template.contains(c), "{c}");
        }
    }

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("{a}-{b}-{c}", &[("a", "{b}"), ("b", "2")]), "{b}-2-{c}");
        assert_eq!(fill("x{", &[]), "x{");
    }
}
