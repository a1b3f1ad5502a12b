//! Evaluation metrics over verified samples, plus the score gap between
//! two models.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies the BLEU tokenisation rule in reports.
pub const BLEU_TOKENIZER: &str = "whitespace+punct/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub candidate: String,
    pub valid: bool,
    pub compiled: bool,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub task_id: String,
    /// The first sample is the designated one for single-sample metrics.
    pub samples: Vec<SampleOutcome>,
}

impl EvalOutcome {
    pub fn correct(&self) -> usize {
        self.samples.iter().filter(|s| s.valid).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub metric_name: String,
    pub model_a_score: f64,
    pub model_b_score: f64,
    pub delta: f64,
}

/// Unbiased pass@k: `1 − C(n−c, k) / C(n, k)`, evaluated as a product so
/// nothing overflows.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Input(format!("pass@k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::Input(format!("correct count {c} exceeds sample count {n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

fn designated_rate(outcomes: &[EvalOutcome], f: impl Fn(&SampleOutcome) -> bool) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Input("no outcomes to score".into()));
    }
    let mut hits = 0;
    for o in outcomes {
        let first = o
            .samples
            .first()
            .ok_or_else(|| Error::Input(format!("task {} has no samples", o.task_id)))?;
        hits += usize::from(f(first));
    }
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Fraction of tasks whose first sample passes all tests.
pub fn accuracy(outcomes: &[EvalOutcome]) -> Result<f64> {
    designated_rate(outcomes, |s| s.valid)
}

pub fn compilation_rate(outcomes: &[EvalOutcome]) -> Result<f64> {
    designated_rate(outcomes, |s| s.compiled)
}

/// Fraction of tasks whose first sample applies and passes.
pub fn resolved_rate(outcomes: &[EvalOutcome]) -> Result<f64> {
    designated_rate(outcomes, |s| s.applied && s.valid)
}

/// Mean over tasks of pass@k using every sample of each task.
pub fn mean_pass_at_k(outcomes: &[EvalOutcome], k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Input("no outcomes to score".into()));
    }
    let mut total = 0.0;
    for o in outcomes {
        total += pass_at_k(o.samples.len(), o.correct(), k)?;
    }
    Ok(total / outcomes.len() as f64)
}

/// Splits on whitespace after isolating every character that is neither
/// alphanumeric nor `_` as its own token.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram totals for `n = 1..=max_n`, plus
/// the candidate length and the closest reference length.
fn bleu_stats(candidate: &[String], references: &[Vec<String>], max_n: usize) -> (Vec<(usize, usize)>, usize, usize) {
    let stats = (1..=max_n)
        .map(|n| {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let clipped = cand.iter().map(|(g, c)| (*c).min(*max_ref.get(g).unwrap_or(&0))).sum();
            (clipped, candidate.len().saturating_sub(n - 1))
        })
        .collect();
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    (stats, c, r)
}

fn combine(stats: &[(usize, usize)], c: usize, r: usize) -> f64 {
    if c == 0 || stats.iter().any(|&(m, t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = stats.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum::<f64>() / stats.len() as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * log_p.exp()
}

/// Modified n-gram precision of order `n` (clipped matches over candidate
/// n-grams).
pub fn modified_precision(candidate: &str, references: &[&str], n: usize) -> f64 {
    let cand = bleu_tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| bleu_tokenize(r)).collect();
    let (stats, _, _) = bleu_stats(&cand, &refs, n);
    let (m, t) = stats[n - 1];
    if t == 0 {
        0.0
    } else {
        m as f64 / t as f64
    }
}

/// Sentence BLEU with uniform weights, no smoothing and the brevity
/// penalty against the closest reference length.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Result<f64> {
    if references.is_empty() || max_n == 0 {
        return Err(Error::Input("BLEU needs at least one reference and max_n >= 1".into()));
    }
    let cand = bleu_tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| bleu_tokenize(r)).collect();
    if refs.iter().all(Vec::is_empty) {
        return Err(Error::Input("all references are empty after tokenization".into()));
    }
    let (stats, c, r) = bleu_stats(&cand, &refs, max_n);
    Ok(combine(&stats, c, r))
}

/// Corpus BLEU: counts and lengths are summed over all segments before
/// combining.
pub fn corpus_bleu(segments: &[(&str, Vec<&str>)], max_n: usize) -> Result<f64> {
    if segments.is_empty() || max_n == 0 {
        return Err(Error::Input("corpus BLEU needs segments and max_n >= 1".into()));
    }
    let mut totals = vec![(0, 0); max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in segments {
        if refs.is_empty() {
            return Err(Error::Input("segment without references".into()));
        }
        let cand = bleu_tokenize(cand);
        let refs: Vec<Vec<String>> = refs.iter().map(|x| bleu_tokenize(x)).collect();
        let (stats, sc, sr) = bleu_stats(&cand, &refs, max_n);
        for (t, s) in totals.iter_mut().zip(stats) {
            t.0 += s.0;
            t.1 += s.1;
        }
        c += sc;
        r += sr;
    }
    Ok(combine(&totals, c, r))
}

/// `mean(a) − mean(b)` over per-task scores keyed by task id. Both sides
/// must cover the same tasks.
pub fn performance_gap(metric_name: &str, scores_a: &[(String, f64)], scores_b: &[(String, f64)]) -> Result<GapReport> {
    if scores_a.is_empty() || scores_a.len() != scores_b.len() {
        return Err(Error::Input("score vectors are empty or differ in length".into()));
    }
    let b: BTreeMap<&str, f64> = scores_b.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    if b.len() != scores_b.len() {
        return Err(Error::Input("duplicate task id in scores".into()));
    }
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut seen = BTreeMap::new();
    for (id, va) in scores_a {
        let vb = b
            .get(id.as_str())
            .ok_or_else(|| Error::Input(format!("task {id} has no score for the second model")))?;
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(Error::Input(format!("duplicate task id {id} in scores")));
        }
        sum_a += va;
        sum_b += vb;
    }
    let n = scores_a.len() as f64;
    let (a, b) = (sum_a / n, sum_b / n);
    Ok(GapReport {
        metric_name: metric_name.to_owned(),
        model_a_score: a,
        model_b_score: b,
        delta: a - b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub task_id: String,
    pub samples: usize,
    pub correct: usize,
    pub pass_at_1: f64,
    pub first_valid: bool,
    pub first_compiled: bool,
    pub first_applied: bool,
    pub bleu: Option<f64>,
}

/// Metrics for one model, keyed by metric name, with a per-task breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub metrics: BTreeMap<String, f64>,
    pub per_task: Vec<TaskBreakdown>,
}

impl ModelMetrics {
    /// `references` maps task ids to ground-truth text for BLEU; tasks
    /// without one are left out of the BLEU mean.
    pub fn compute(outcomes: &[EvalOutcome], references: &BTreeMap<String, String>) -> Result<Self> {
        let mut per_task = Vec::with_capacity(outcomes.len());
        let mut bleu_sum = 0.0;
        let mut bleu_n = 0;
        for o in outcomes {
            let first = o
                .samples
                .first()
                .ok_or_else(|| Error::Input(format!("task {} has no samples", o.task_id)))?;
            let b = match references.get(&o.task_id) {
                Some(r) if !bleu_tokenize(r).is_empty() => Some(bleu(&first.candidate, &[r], 4)?),
                _ => None,
            };
            if let Some(v) = b {
                bleu_sum += v;
                bleu_n += 1;
            }
            per_task.push(TaskBreakdown {
                task_id: o.task_id.clone(),
                samples: o.samples.len(),
                correct: o.correct(),
                pass_at_1: pass_at_k(o.samples.len(), o.correct(), 1)?,
                first_valid: first.valid,
                first_compiled: first.compiled,
                first_applied: first.applied,
                bleu: b,
            });
        }
        let mut metrics = BTreeMap::new();
        metrics.insert("pass@1".to_owned(), mean_pass_at_k(outcomes, 1)?);
        metrics.insert("accuracy".to_owned(), accuracy(outcomes)?);
        metrics.insert("compilation_rate".to_owned(), compilation_rate(outcomes)?);
        metrics.insert("resolved".to_owned(), resolved_rate(outcomes)?);
        if bleu_n > 0 {
            metrics.insert("bleu".to_owned(), bleu_sum / bleu_n as f64);
        }
        Ok(ModelMetrics { metrics, per_task })
    }

    pub fn per_task_scores(&self, metric: &str) -> Vec<(String, f64)> {
        self.per_task
            .iter()
            .map(|t| {
                let v = match metric {
                    "pass@1" => t.pass_at_1,
                    "accuracy" => f64::from(u8::from(t.first_valid)),
                    "compilation_rate" => f64::from(u8::from(t.first_compiled)),
                    "resolved" => f64::from(u8::from(t.first_applied && t.first_valid)),
                    _ => t.bleu.unwrap_or(0.0),
                };
                (t.task_id.clone(), v)
            })
            .collect()
    }
}
