//! Text layouts shared by the teacher client, policy training and
//! evaluation: how a task becomes a policy prompt, how reasoning and code
//! are joined into one response, and how code is pulled back out.

use crate::corpus::RepairTask;
use crate::policy::{TokenId, Vocabulary, BOS, EOS};

/// Prompt text the policy conditions on.
pub fn policy_prompt(task: &RepairTask) -> String {
    let mut s = String::with_capacity(task.prompt.len() + task.buggy_code.len() + 16);
    s.push_str(task.prompt.trim_end());
    s.push_str("\n```\n");
    s.push_str(&task.buggy_code);
    if !task.buggy_code.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("```\n");
    s
}

/// `BOS` followed by the prompt bytes, keeping only the last
/// `max_prompt_tokens - 1` bytes when the prompt is longer.
pub fn encode_prompt(task: &RepairTask, max_prompt_tokens: usize) -> Vec<TokenId> {
    let bytes = policy_prompt(task).into_bytes();
    let keep = max_prompt_tokens.saturating_sub(1).min(bytes.len());
    let mut ids = vec![BOS];
    ids.extend(Vocabulary.encode_bytes(&bytes[bytes.len() - keep..]));
    ids
}

/// Reasoning followed by the solution in a fenced block. With empty
/// reasoning this is just the fenced block.
pub fn format_response(reasoning: &str, solution: &str) -> String {
    let mut s = String::new();
    let reasoning = reasoning.trim();
    if !reasoning.is_empty() {
        s.push_str(reasoning);
        s.push('\n');
    }
    s.push_str("```\n");
    s.push_str(solution);
    if !solution.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("```");
    s
}

/// Response text as target ids, terminated by `EOS`.
pub fn encode_response(text: &str) -> Vec<TokenId> {
    let mut ids = Vocabulary.encode(text);
    ids.push(EOS);
    ids
}

/// One fenced block found in a reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    /// Byte range of the whole block, fences included.
    pub span: std::ops::Range<usize>,
    pub content: String,
}

/// All complete ```-fenced blocks, in order. The info string after the
/// opening fence is dropped.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut search = 0;
    while let Some(rel) = text[search..].find("```") {
        let open = search + rel;
        let after_open = open + 3;
        let Some(nl) = text[after_open..].find('\n') else { break };
        let body_start = after_open + nl + 1;
        let Some(close_rel) = find_closing_fence(&text[body_start..]) else {
            break;
        };
        let close = body_start + close_rel;
        blocks.push(FencedBlock {
            span: open..close + 3,
            content: text[body_start..close].to_owned(),
        });
        search = close + 3;
    }
    blocks
}

fn find_closing_fence(body: &str) -> Option<usize> {
    let mut offset = 0;
    loop {
        let rel = body[offset..].find("```")?;
        let at = offset + rel;
        if at == 0 || body.as_bytes()[at - 1] == b'\n' {
            return Some(at);
        }
        offset = at + 3;
    }
}

/// Code in the last fenced block of a reply, if any.
pub fn extract_solution(text: &str) -> Option<String> {
    fenced_blocks(text).pop().map(|b| b.content)
}

/// Splits a reply into (reasoning, solution): the solution is the last
/// fenced block, the reasoning is every other byte of the reply, trimmed.
pub fn split_reply(text: &str) -> Option<(String, String)> {
    let last = fenced_blocks(text).pop()?;
    let mut reasoning = String::with_capacity(text.len());
    reasoning.push_str(text[..last.span.start].trim_end());
    let tail = text[last.span.end..].trim();
    if !tail.is_empty() {
        if !reasoning.is_empty() {
            reasoning.push('\n');
        }
        reasoning.push_str(tail);
    }
    Some((reasoning.trim().to_owned(), last.content))
}
