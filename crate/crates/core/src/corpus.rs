//! Tasks, traces, candidates and preference pairs, plus the JSON-lines
//! files that carry them between pipeline stages.
//!
//! Every record type keeps fields it does not know about in an `extra` map so
//! that files written by newer tools survive a load/save cycle untouched.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Seed used wherever the caller does not supply one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFile {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Command,
    IoPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub kind: TestKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_stdout: Option<String>,
    pub timeout_seconds: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TestSpec {
    pub fn command(command: impl Into<String>, timeout_seconds: f64) -> Self {
        TestSpec {
            kind: TestKind::Command,
            command: Some(command.into()),
            stdin: None,
            expected_stdout: None,
            timeout_seconds,
            extra: Map::new(),
        }
    }

    pub fn io_pair(stdin: impl Into<String>, expected: impl Into<String>, timeout_seconds: f64) -> Self {
        TestSpec {
            kind: TestKind::IoPair,
            command: None,
            stdin: Some(stdin.into()),
            expected_stdout: Some(expected.into()),
            timeout_seconds,
            extra: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_seconds > 0.0) || !self.timeout_seconds.is_finite() {
            return Err(Error::Validation(format!(
                "timeout_seconds must be positive, got {}",
                self.timeout_seconds
            )));
        }
        match self.kind {
            TestKind::Command if self.command.is_none() => {
                Err(Error::Validation("command test without a command".into()))
            }
            TestKind::IoPair if self.stdin.is_none() || self.expected_stdout.is_none() => Err(Error::Validation(
                "io_pair test needs both stdin and expected_stdout".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One repair problem: the buggy program, its context and the tests that
/// decide whether a candidate fixes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTask {
    pub id: String,
    pub source_benchmark: String,
    pub prompt: String,
    pub buggy_code: String,
    #[serde(default)]
    pub context: Vec<ContextFile>,
    #[serde(default)]
    pub tests: Vec<TestSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    pub language_tag: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl RepairTask {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("task id is empty".into()));
        }
        for t in &self.tests {
            t.validate()
                .map_err(|e| Error::Validation(format!("task {}: {e}", self.id)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningExample {
    pub task_id: String,
    pub reasoning: String,
    pub solution: String,
    pub teacher_model: String,
    #[serde(default)]
    pub verified: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    pub candidate_a: String,
    pub candidate_b: String,
    /// 1 when `candidate_a` is preferred.
    pub label: u8,
    pub judge_model: String,
    /// Whether the pair was shown to the judge as (b, a).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swapped: Option<bool>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl PreferencePair {
    pub fn new(task_id: &str, a: &str, b: &str, label: u8, judge_model: &str) -> Result<Self> {
        let pair = PreferencePair {
            task_id: task_id.to_owned(),
            candidate_a: a.to_owned(),
            candidate_b: b.to_owned(),
            label,
            judge_model: judge_model.to_owned(),
            swapped: None,
            extra: Map::new(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Validation(format!("label must be 0 or 1, got {}", self.label)));
        }
        if self.candidate_a == self.candidate_b {
            return Err(Error::Validation(format!(
                "task {}: preference pair compares identical candidates",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// Policy samples for one task, as written by the candidate-generation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub task_id: String,
    pub candidates: Vec<String>,
    #[serde(default)]
    pub temperatures: Vec<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// An ordered collection of tasks with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskSet {
    tasks: Vec<RepairTask>,
    index: HashMap<String, usize>,
}

impl TaskSet {
    pub fn new(tasks: Vec<RepairTask>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate task id `{}`", t.id)));
            }
        }
        Ok(TaskSet { tasks, index })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RepairTask> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RepairTask> {
        self.tasks.iter()
    }

    pub fn tasks(&self) -> &[RepairTask] {
        &self.tasks
    }

    pub fn ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    /// Keeps the tasks whose id is in `ids`, preserving this set's order.
    pub fn subset(&self, ids: &[String]) -> TaskSet {
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        let tasks = self
            .tasks
            .iter()
            .filter(|t| wanted.contains(t.id.as_str()))
            .cloned()
            .collect();
        TaskSet::new(tasks).expect("subset of a valid set has unique ids")
    }
}

impl<'a> IntoIterator for &'a TaskSet {
    type Item = &'a RepairTask;
    type IntoIter = std::slice::Iter<'a, RepairTask>;
    fn into_iter(self) -> Self::IntoIter {
        self.tasks.iter()
    }
}

/// Reads one JSON object per line. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one record to a JSON-lines file, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Loads a tasks file, rejecting malformed records and duplicate ids.
pub fn load_tasks(path: &Path) -> Result<TaskSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks: Vec<RepairTask> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: lineno,
            message,
        };
        let task: RepairTask = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        task.validate().map_err(|e| parse_err(e.to_string()))?;
        if let Some(first) = seen.insert(task.id.clone(), lineno) {
            return Err(Error::Validation(format!(
                "{}: line {lineno}: duplicate task id `{}` (first seen on line {first})",
                path.display(),
                task.id
            )));
        }
        tasks.push(task);
    }
    TaskSet::new(tasks)
}

pub fn save_tasks(path: &Path, tasks: &TaskSet) -> Result<()> {
    write_jsonl(path, tasks.tasks())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.70,
            val_fraction: 0.15,
            test_fraction: 0.15,
            seed: DEFAULT_SEED,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fs = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Validation(format!("split fractions must lie in [0,1]: {fs:?}")));
        }
        let sum: f64 = fs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Task ids of the three partitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions `tasks` with a seeded permutation. Validation and test sizes
/// are `round(N * fraction)`; whatever is left goes to train. Each part keeps
/// the input order.
pub fn split_dataset(tasks: &TaskSet, spec: &SplitSpec) -> Result<(TaskSet, TaskSet, TaskSet)> {
    spec.validate()?;
    let n = tasks.len();
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let n_test = ((n as f64 * spec.test_fraction).round() as usize).min(n - n_val.min(n));
    let n_val = n_val.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let mut bucket = vec![0u8; n];
    for &i in &order[..n_val] {
        bucket[i] = 1;
    }
    for &i in &order[n_val..n_val + n_test] {
        bucket[i] = 2;
    }
    let mut parts: [Vec<RepairTask>; 3] = Default::default();
    for (i, t) in tasks.iter().enumerate() {
        parts[bucket[i] as usize].push(t.clone());
    }
    let [train, val, test] = parts;
    Ok((TaskSet::new(train)?, TaskSet::new(val)?, TaskSet::new(test)?))
}

pub fn split_ids(tasks: &TaskSet, spec: &SplitSpec) -> Result<SplitIds> {
    let (train, val, test) = split_dataset(tasks, spec)?;
    Ok(SplitIds {
        train: train.ids(),
        val: val.ids(),
        test: test.ids(),
    })
}

/// Keeps `ceil(fraction * N)` examples, allocating the budget across strata
/// in proportion to their sizes (largest remainder). Selection inside a
/// stratum is a seeded shuffle; the result keeps the input order.
pub fn cap_dataset<F>(
    examples: &[ReasoningExample],
    fraction: f64,
    stratum_of: F,
    seed: u64,
) -> Result<Vec<ReasoningExample>>
where
    F: Fn(&ReasoningExample) -> String,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "cap fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = examples.len();
    if fraction == 1.0 || n == 0 {
        return Ok(examples.to_vec());
    }
    // Guard against 0.2 * 50 = 10.000000000000002 style round-up.
    let target = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let target = target.min(n);

    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        strata.entry(stratum_of(ex)).or_default().push(i);
    }

    let mut alloc: Vec<(String, usize, f64)> = strata
        .iter()
        .map(|(k, members)| {
            let quota = target as f64 * members.len() as f64 / n as f64;
            (k.clone(), quota.floor() as usize, quota - quota.floor())
        })
        .collect();
    let mut remaining = target - alloc.iter().map(|a| a.1).sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..alloc.len()).collect();
    by_remainder.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
    for &i in by_remainder.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if alloc[i].1 < strata[&alloc[i].0].len() {
            alloc[i].1 += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; n];
    for (key, count, _) in &alloc {
        let mut members = strata[key].clone();
        members.shuffle(&mut rng);
        for &i in &members[..*count] {
            keep[i] = true;
        }
    }
    Ok(examples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(ex, _)| ex.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn task(id: &str, bench: &str) -> RepairTask {
        RepairTask {
            id: id.into(),
            source_benchmark: bench.into(),
            prompt: "p".into(),
            buggy_code: "c".into(),
            context: vec![],
            tests: vec![TestSpec::io_pair("1", "1", 1.0)],
            ground_truth: None,
            language_tag: "sh".into(),
            extra: Map::new(),
        }
    }

    fn example(id: &str) -> ReasoningExample {
        ReasoningExample {
            task_id: id.into(),
            reasoning: "r".into(),
            solution: "s".into(),
            teacher_model: "t".into(),
            verified: true,
            extra: Map::new(),
        }
    }

    fn task_set(n: usize) -> TaskSet {
        TaskSet::new((0..n).map(|i| task(&format!("t{i}"), "b")).collect()).unwrap()
    }

    #[test]
    fn empty_file_loads_empty_set() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_tasks(f.path()).unwrap().is_empty());
    }

    #[test]
    fn two_lines_load_two_tasks() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for id in ["a", "b"] {
            writeln!(f, "{}", serde_json::to_string(&task(id, "x")).unwrap()).unwrap();
        }
        let set = load_tasks(f.path()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.get("b").unwrap().id, "b");
    }

    #[test]
    fn duplicate_id_names_line_two() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for id in ["a", "a"] {
            writeln!(f, "{}", serde_json::to_string(&task(id, "x")).unwrap()).unwrap();
        }
        let err = load_tasks(f.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", serde_json::to_string(&task("a", "x")).unwrap()).unwrap();
        writeln!(f, "{{not json").unwrap();
        match load_tasks(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn invalid_test_spec_is_rejected() {
        let mut t = task("a", "x");
        t.tests = vec![TestSpec {
            kind: TestKind::Command,
            command: None,
            stdin: None,
            expected_stdout: None,
            timeout_seconds: 1.0,
            extra: Map::new(),
        }];
        assert!(t.validate().is_err());
        let mut t = task("a", "x");
        t.tests[0].timeout_seconds = 0.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"id":"a","source_benchmark":"b","prompt":"p","buggy_code":"c","tests":[{"kind":"io_pair","stdin":"1","expected_stdout":"2","timeout_seconds":0.1,"note":"x"}],"language_tag":"sh","difficulty":3.25}"#;
        let t: RepairTask = serde_json::from_str(line).unwrap();
        assert_eq!(t.extra["difficulty"], serde_json::json!(3.25));
        let back: RepairTask = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.tests[0].extra["note"], "x");
    }

    #[test]
    fn split_seventy_fifteen_fifteen() {
        let (a, b, c) = split_dataset(&task_set(100), &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 15, 15));
    }

    #[test]
    fn degenerate_split_puts_all_in_train() {
        let spec = SplitSpec {
            train_fraction: 1.0,
            val_fraction: 0.0,
            test_fraction: 0.0,
            seed: 7,
        };
        let (a, b, c) = split_dataset(&task_set(10), &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (10, 0, 0));
    }

    #[test]
    fn split_is_deterministic_and_rejects_bad_fractions() {
        let set = task_set(37);
        let s = SplitSpec::default();
        assert_eq!(split_ids(&set, &s).unwrap(), split_ids(&set, &s).unwrap());
        let bad = SplitSpec {
            train_fraction: 0.5,
            ..SplitSpec::default()
        };
        assert!(matches!(split_dataset(&set, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn cap_twenty_percent_of_five_hundred() {
        let ex: Vec<_> = (0..500).map(|i| example(&format!("t{i}"))).collect();
        let capped = cap_dataset(&ex, 0.2, |_| "all".into(), DEFAULT_SEED).unwrap();
        assert_eq!(capped.len(), 100);
    }

    #[test]
    fn cap_full_fraction_is_identity() {
        let ex: Vec<_> = (0..9).map(|i| example(&format!("t{i}"))).collect();
        assert_eq!(cap_dataset(&ex, 1.0, |_| "x".into(), 1).unwrap(), ex);
    }

    #[test]
    fn cap_is_proportional_across_strata() {
        // Direct count: 20% of 80 is 16, 20% of 20 is 4.
        let ex: Vec<_> = (0..100).map(|i| example(&format!("t{i}"))).collect();
        let stratum = |e: &ReasoningExample| {
            let i: usize = e.task_id[1..].parse().unwrap();
            if i < 80 {
                "big".to_string()
            } else {
                "small".to_string()
            }
        };
        let capped = cap_dataset(&ex, 0.2, stratum, DEFAULT_SEED).unwrap();
        let big = capped.iter().filter(|e| stratum(e) == "big").count();
        assert_eq!((big, capped.len() - big), (16, 4));
    }

    #[test]
    fn cap_rejects_out_of_range_fraction() {
        assert!(cap_dataset(&[], 0.0, |_| String::new(), 1).is_err());
        assert!(cap_dataset(&[], 1.5, |_| String::new(), 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_a_partition(n in 0usize..200, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let val = a * (1.0 - 0.0);
                let test = (1.0 - val) * b;
                let spec = SplitSpec { train_fraction: 1.0 - val - test, val_fraction: val, test_fraction: test, seed };
                let set = task_set(n);
                let (x, y, z) = split_dataset(&set, &spec).unwrap();
                let mut all: Vec<String> = x.ids().into_iter().chain(y.ids()).chain(z.ids()).collect();
                prop_assert_eq!(all.len(), n);
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len(), n);
            }

            #[test]
            fn cap_size_and_identity(n in 1usize..300, frac in 0.01f64..1.0, strata in 1usize..5) {
                let ex: Vec<_> = (0..n).map(|i| example(&format!("t{i}"))).collect();
                let key = |e: &ReasoningExample| (e.task_id[1..].parse::<usize>().unwrap() % strata).to_string();
                let capped = cap_dataset(&ex, frac, key, 3).unwrap();
                let expected = ((frac * n as f64) - 1e-9).ceil() as usize;
                prop_assert_eq!(capped.len(), expected.min(n));
                for c in &capped {
                    prop_assert!(ex.contains(c));
                }
                // Proportional within one per stratum.
                for s in 0..strata {
                    let total = ex.iter().filter(|e| key(e) == s.to_string()).count() as f64;
                    let got = capped.iter().filter(|e| key(e) == s.to_string()).count() as f64;
                    prop_assert!((got - capped.len() as f64 * total / n as f64).abs() <= 1.0 + 1e-9);
                }
            }

            #[test]
            fn records_round_trip(label in 0u8..2, text in ".*", t in 0.001f64..1e6) {
                let p = PreferencePair { task_id: text.clone(), candidate_a: format!("a{text}"), candidate_b: format!("b{text}"), label, judge_model: "j".into(), swapped: Some(true), extra: Map::new() };
                let back: PreferencePair = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
                prop_assert_eq!(back, p);
                let spec = TestSpec::io_pair(text.clone(), text, t);
                let back: TestSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
                prop_assert_eq!(back.timeout_seconds.to_bits(), spec.timeout_seconds.to_bits());
            }
        }
    }
}
