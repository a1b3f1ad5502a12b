//! Client for the teacher model: reasoning-trace elicitation, pairwise
//! judgments and rankings, with a digest-keyed record/replay cache.

mod cache;
mod http;
mod templates;

pub use cache::{cached_call, CacheMode, ResponseCache};
pub use http::{HttpTeacher, RetryPolicy, API_KEY_VAR};
pub use templates::{fenced, fill, PromptTemplates, CRITERIA, RANK_INSTRUCTION, TRACE_INSTRUCTION};

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Map;
use sha2::{Digest, Sha256};

use crate::corpus::{PreferencePair, ReasoningExample, RepairTask};
use crate::error::{Error, Result};
use crate::format::{fenced_blocks, split_reply};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// One chat request. Serialises to the wire body
/// `{model, messages, temperature, max_tokens}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRequest {
    #[serde(rename = "model")]
    pub model_name: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl TeacherRequest {
    pub fn user(model_name: &str, text: String, temperature: f64, max_tokens: u32) -> Self {
        TeacherRequest {
            model_name: model_name.to_owned(),
            messages: vec![Message {
                role: Role::User,
                content: text,
            }],
            temperature,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.messages.first() {
            None => return Err(Error::Input("teacher request has no messages".into())),
            Some(m) if m.role == Role::Assistant => {
                return Err(Error::Input(
                    "teacher request must open with a system or user message".into(),
                ))
            }
            _ => {}
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Input(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Input("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Compact JSON with fields in declaration order and shortest
    /// round-trip float formatting.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("request serialises")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReply {
    pub text: String,
    pub parsed_reasoning: Option<String>,
    /// Content of the last fenced block of `text`, if any.
    pub parsed_code: Option<String>,
    pub token_usage: Usage,
}

impl TeacherReply {
    pub fn from_text(text: String, token_usage: Usage) -> Self {
        let (parsed_reasoning, parsed_code) = match split_reply(&text) {
            Some((r, c)) => (Some(r), Some(c)),
            None => (None, None),
        };
        TeacherReply {
            text,
            parsed_reasoning,
            parsed_code,
            token_usage,
        }
    }
}

/// Anything that answers chat requests.
pub trait Teacher: Send + Sync {
    fn complete(&self, request: &TeacherRequest) -> Result<TeacherReply>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// One ranking call per task, expanded into all pairs.
    Ranking,
    /// One call per candidate pair.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSettings {
    pub model_name: String,
    pub endpoint: String,
    pub max_tokens: u32,
    pub trace_temperature: f64,
    pub judge_temperature: f64,
    pub judge_mode: JudgeMode,
    pub max_in_flight: usize,
    pub timeout_seconds: f64,
    /// Seeds the per-pair presentation order in pairwise judging.
    pub seed: u64,
    pub templates: PromptTemplates,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        TeacherSettings {
            model_name: "teacher".into(),
            endpoint: "http://127.0.0.1:8080/v1/chat".into(),
            max_tokens: 4096,
            trace_temperature: 0.0,
            judge_temperature: 0.2,
            judge_mode: JudgeMode::Ranking,
            max_in_flight: 4,
            timeout_seconds: 120.0,
            seed: crate::corpus::DEFAULT_SEED,
            templates: PromptTemplates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub task_id: String,
    pub kind: String,
    pub digest: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// `A` → `true` (first shown preferred), `B` → `false`, read from the last
/// non-empty line of the reply.
pub fn parse_verdict(text: &str) -> Result<bool> {
    let line = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::JudgmentParse("empty reply".into()))?;
    let mut saw_a = false;
    let mut saw_b = false;
    for word in line.split(|c: char| !c.is_ascii_alphanumeric()) {
        match word {
            "A" => saw_a = true,
            "B" => saw_b = true,
            _ => {}
        }
    }
    match (saw_a, saw_b) {
        (true, false) => Ok(true),
        (false, true) => Ok(false),
        _ => Err(Error::JudgmentParse(format!("no single verdict in {:?}", line.trim()))),
    }
}

/// Reads a best-to-worst list of 1-based solution numbers from the last
/// non-empty line and returns it as 0-based indices.
pub fn parse_ranking(text: &str, k: usize) -> Result<Vec<usize>> {
    let line = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::JudgmentParse("empty reply".into()))?;
    let nums: Vec<usize> = line
        .split(|c: char| !c.is_ascii_digit())
        .filter(|w| !w.is_empty())
        .map(|w| w.parse::<usize>().unwrap_or(0))
        .collect();
    let mut seen = vec![false; k];
    for &n in &nums {
        if n == 0 || n > k || seen[n - 1] {
            return Err(Error::JudgmentParse(format!(
                "{:?} is not a ranking of 1..{k}",
                line.trim()
            )));
        }
        seen[n - 1] = true;
    }
    if nums.len() != k {
        return Err(Error::JudgmentParse(format!(
            "{:?} is not a ranking of 1..{k}",
            line.trim()
        )));
    }
    Ok(nums.into_iter().map(|n| n - 1).collect())
}

/// All `k(k−1)/2` pairs implied by a best-to-worst ranking; in each pair
/// the better candidate is `candidate_a` and the label is 1.
pub fn ranking_to_pairs(
    task_id: &str,
    candidates: &[String],
    ranking: &[usize],
    judge_model: &str,
) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::with_capacity(ranking.len() * ranking.len().saturating_sub(1) / 2);
    for (i, &hi) in ranking.iter().enumerate() {
        for &lo in &ranking[i + 1..] {
            pairs.push(PreferencePair::new(
                task_id,
                &candidates[hi],
                &candidates[lo],
                1,
                judge_model,
            )?);
        }
    }
    Ok(pairs)
}

/// Byte-identical candidates merged, first occurrence kept.
pub fn dedup_candidates(candidates: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

/// Operations against one teacher backend, with optional caching and
/// per-call usage accounting.
pub struct TeacherClient<'a> {
    pub backend: &'a dyn Teacher,
    pub cache: Option<&'a ResponseCache>,
    pub mode: CacheMode,
    pub settings: TeacherSettings,
    usage: Mutex<Vec<UsageRecord>>,
}

impl<'a> TeacherClient<'a> {
    pub fn new(
        backend: &'a dyn Teacher,
        cache: Option<&'a ResponseCache>,
        mode: CacheMode,
        settings: TeacherSettings,
    ) -> Self {
        TeacherClient {
            backend,
            cache,
            mode,
            settings,
            usage: Mutex::new(Vec::new()),
        }
    }

    fn call(&self, task_id: &str, kind: &str, request: TeacherRequest) -> Result<TeacherReply> {
        let reply = cached_call(self.backend, self.cache, &request, self.mode)?;
        self.usage.lock().unwrap_or_else(|e| e.into_inner()).push(UsageRecord {
            task_id: task_id.to_owned(),
            kind: kind.to_owned(),
            digest: request.digest(),
            input_tokens: reply.token_usage.input_tokens,
            output_tokens: reply.token_usage.output_tokens,
        });
        Ok(reply)
    }

    /// Per-call usage recorded so far, cleared by the call.
    pub fn take_usage(&self) -> Vec<UsageRecord> {
        std::mem::take(&mut *self.usage.lock().unwrap_or_else(|e| e.into_inner()))
    }

    fn request(&self, text: String, temperature: f64) -> TeacherRequest {
        TeacherRequest::user(&self.settings.model_name, text, temperature, self.settings.max_tokens)
    }

    /// Asks for a reasoned fix and splits the reply. The result is not yet
    /// verified.
    pub fn elicit_trace(&self, task: &RepairTask) -> Result<ReasoningExample> {
        if task.prompt.trim().is_empty() || task.buggy_code.trim().is_empty() {
            return Err(Error::Input(format!(
                "task {} has an empty prompt or buggy code",
                task.id
            )));
        }
        let text = self.settings.templates.render_trace(task);
        let reply = self.call(&task.id, "trace", self.request(text, self.settings.trace_temperature))?;
        let (reasoning, solution) = match (reply.parsed_reasoning, reply.parsed_code) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(Error::Extraction(format!(
                    "task {}: reply has no fenced code block",
                    task.id
                )))
            }
        };
        Ok(ReasoningExample {
            task_id: task.id.clone(),
            reasoning,
            solution,
            teacher_model: self.settings.model_name.clone(),
            verified: false,
            extra: Map::new(),
        })
    }

    /// Whether `(a, b)` is shown to the judge as `(b, a)`. Fixed by the
    /// seed and the pair, so replays ask the same question.
    pub fn presentation_swapped(&self, task_id: &str, a: &str, b: &str) -> bool {
        let mut h = Sha256::new();
        h.update(self.settings.seed.to_le_bytes());
        h.update(task_id.as_bytes());
        h.update([0]);
        h.update(a.as_bytes());
        h.update([0]);
        h.update(b.as_bytes());
        h.finalize()[0] & 1 == 1
    }

    /// One pairwise judgment; label 1 means `a` is preferred.
    pub fn judge_pair(&self, task: &RepairTask, a: &str, b: &str) -> Result<PreferencePair> {
        if a == b {
            return Err(Error::Input("cannot judge a candidate against itself".into()));
        }
        let swapped = self.presentation_swapped(&task.id, a, b);
        let (first, second) = if swapped { (b, a) } else { (a, b) };
        let text = self.settings.templates.render_compare(task, first, second);
        let reply = self.call(&task.id, "compare", self.request(text, self.settings.judge_temperature))?;
        let first_wins = parse_verdict(&reply.text)?;
        let label = u8::from(first_wins != swapped);
        let mut pair = PreferencePair::new(&task.id, a, b, label, &self.settings.model_name)?;
        pair.swapped = Some(swapped);
        Ok(pair)
    }

    /// Best-to-worst 0-based indices into `candidates`.
    pub fn rank_candidates(&self, task: &RepairTask, candidates: &[String]) -> Result<Vec<usize>> {
        if candidates.len() < 2 || dedup_candidates(candidates).len() != candidates.len() {
            return Err(Error::Input("ranking needs at least two distinct candidates".into()));
        }
        let text = self.settings.templates.render_rank(task, candidates);
        let reply = self.call(&task.id, "rank", self.request(text, self.settings.judge_temperature))?;
        parse_ranking(&reply.text, candidates.len())
    }

    /// Preference pairs for one task's candidates in the configured mode.
    /// Candidates are deduplicated first. A judgment that fails to parse is
    /// retried once and then skipped; the second return value counts skips.
    pub fn judge_candidates(&self, task: &RepairTask, candidates: &[String]) -> Result<(Vec<PreferencePair>, usize)> {
        let unique = dedup_candidates(candidates);
        if unique.len() < 2 {
            return Ok((Vec::new(), 0));
        }
        match self.settings.judge_mode {
            JudgeMode::Ranking => {
                let ranked = retry_parse(&task.id, || self.rank_candidates(task, &unique))?;
                match ranked {
                    Some(r) => Ok((ranking_to_pairs(&task.id, &unique, &r, &self.settings.model_name)?, 0)),
                    None => Ok((Vec::new(), 1)),
                }
            }
            JudgeMode::Pairwise => {
                let mut pairs = Vec::new();
                let mut skipped = 0;
                for i in 0..unique.len() {
                    for j in i + 1..unique.len() {
                        match retry_parse(&task.id, || self.judge_pair(task, &unique[i], &unique[j]))? {
                            Some(p) => pairs.push(p),
                            None => skipped += 1,
                        }
                    }
                }
                Ok((pairs, skipped))
            }
        }
    }
}

fn retry_parse<T>(task_id: &str, mut f: impl FnMut() -> Result<T>) -> Result<Option<T>> {
    for _ in 0..2 {
        match f() {
            Ok(v) => return Ok(Some(v)),
            Err(Error::JudgmentParse(msg)) => log::warn!("task {task_id}: {msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Replies with fixed texts in order, cycling; for tests.
pub struct ScriptedTeacher {
    replies: Vec<String>,
    next: Mutex<usize>,
    pub calls: Mutex<Vec<TeacherRequest>>,
}

impl ScriptedTeacher {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        ScriptedTeacher {
            replies: replies.into_iter().map(Into::into).collect(),
            next: Mutex::new(0),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }
}

impl Teacher for ScriptedTeacher {
    fn complete(&self, request: &TeacherRequest) -> Result<TeacherReply> {
        self.calls.lock().unwrap().push(request.clone());
        let mut next = self.next.lock().unwrap();
        let text = self.replies[*next % self.replies.len()].clone();
        *next += 1;
        let usage = Usage {
            input_tokens: request.messages.iter().map(|m| m.content.len() as u64 / 4).sum(),
            output_tokens: text.len() as u64 / 4,
        };
        Ok(TeacherReply::from_text(text, usage))
    }
}

/// Code blocks of a reply; exposed for backends that read requests.
pub fn code_blocks(text: &str) -> Vec<String> {
    fenced_blocks(text).into_iter().map(|b| b.content).collect()
}
