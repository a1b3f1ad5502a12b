//! Stage orchestration: configuration, the run manifest and the eight
//! stages from trace collection to evaluation.
//!
//! Every stage reads and writes files under `output_dir`. The manifest
//! records which stages are done together with the digests of the files
//! they read and wrote, so re-running a finished stage is a no-op and a
//! stage cannot start before its predecessors.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{
    append_jsonl, cap_dataset, load_tasks, read_jsonl, split_dataset, write_jsonl, CandidateSet, PreferencePair,
    ReasoningExample, RepairTask, SplitSpec, TaskSet, DEFAULT_SEED,
};
use crate::error::{Error, Result};
use crate::format::{encode_prompt, extract_solution};
use crate::metrics::{performance_gap, EvalOutcome, GapReport, ModelMetrics, SampleOutcome, BLEU_TOKENIZER};
use crate::policy::{
    load_checkpoint, new_policy, sample_with_rng, save_checkpoint, CheckpointKind, Decoding, ModelConfig, PolicyModel,
    SampleOptions, TokenId, Vocabulary, EOS,
};
use crate::reward::{train_reward_model, PairExample, RewardModel, RmConfig};
use crate::rllf::{mix, train_ppo, PpoConfig, PromptItem, RewardFn, ValueModel, VerifierReward};
use crate::sft::{train_sft, SftConfig, SftExample};
use crate::teacher::{
    CacheMode, HttpTeacher, ResponseCache, RetryPolicy, Teacher, TeacherClient, TeacherSettings, UsageRecord,
};
use crate::toy::{ToyTeacher, FAULTY_TASKS};
use crate::verifier::{apply_patch, looks_like_patch, FileSet, SandboxConfig, Verifier};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline steps in execution order. Each depends on all earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Collect,
    Filter,
    Sft,
    GenCandidates,
    Judge,
    TrainRm,
    Ppo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Collect,
        Stage::Filter,
        Stage::Sft,
        Stage::GenCandidates,
        Stage::Judge,
        Stage::TrainRm,
        Stage::Ppo,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Filter => "filter",
            Stage::Sft => "sft",
            Stage::GenCandidates => "gen-candidates",
            Stage::Judge => "judge",
            Stage::TrainRm => "train-rm",
            Stage::Ppo => "ppo",
            Stage::Eval => "eval",
        }
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).expect("listed")
    }

    /// Stages that must be done before this one may start.
    pub fn predecessors(self) -> &'static [Stage] {
        &Stage::ALL[..self.index()]
    }

    /// Files under the output directory the stage reads.
    fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Collect => &[],
            Stage::Filter => &[TRACES],
            Stage::Sft => &[DSFT],
            Stage::GenCandidates => &[SFT_CKPT],
            Stage::Judge => &[CANDIDATES],
            Stage::TrainRm => &[PREFS, SFT_CKPT],
            Stage::Ppo => &[SFT_CKPT, RM_CKPT],
            Stage::Eval => &[BASE_CKPT, SFT_CKPT, PPO_CKPT],
        }
    }

    /// Files under the output directory the stage writes.
    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Collect => &[TRACES, USAGE_COLLECT],
            Stage::Filter => &[DSFT],
            Stage::Sft => &[BASE_CKPT, SFT_CKPT, SFT_HISTORY],
            Stage::GenCandidates => &[CANDIDATES],
            Stage::Judge => &[PREFS, USAGE_JUDGE],
            Stage::TrainRm => &[RM_CKPT, RM_REPORT],
            Stage::Ppo => &[PPO_CKPT, VALUE_CKPT, PPO_REPORT],
            Stage::Eval => &[METRICS],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Configuration(format!("unknown stage `{s}`")))
    }
}

pub const TRACES: &str = "traces.jsonl";
pub const USAGE_COLLECT: &str = "usage_collect.jsonl";
pub const DSFT: &str = "dsft.jsonl";
pub const BASE_CKPT: &str = "base.ckpt";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const SFT_HISTORY: &str = "sft_history.jsonl";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const PREFS: &str = "prefs.jsonl";
pub const USAGE_JUDGE: &str = "usage_judge.jsonl";
pub const RM_CKPT: &str = "rm.ckpt";
pub const RM_REPORT: &str = "rm_report.json";
pub const PPO_CKPT: &str = "ppo.ckpt";
pub const VALUE_CKPT: &str = "value.ckpt";
pub const PPO_REPORT: &str = "ppo_report.jsonl";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherBackend {
    Http,
    /// The scripted teacher for the bundled shell adder family.
    Toy,
}

/// Which partition a stage draws its tasks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    TrainVal,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Copy embeddings and hidden layers from the SFT policy.
    Policy,
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpoRewardSource {
    RewardModel,
    /// Share of tests passed; bypasses the learned reward.
    Verifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub tasks: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            tasks: "tasks.jsonl".into(),
            cache_dir: "cache".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Share of the verified examples kept, stratified by source benchmark.
    pub cap_fraction: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { cap_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateConfig {
    pub per_prompt: usize,
    /// Candidate `j` is sampled at `temperatures[j % len]`.
    pub temperatures: Vec<f64>,
    pub max_response_tokens: usize,
    pub split: SplitChoice,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            per_prompt: 3,
            temperatures: vec![0.7, 0.8, 0.9],
            max_response_tokens: 128,
            split: SplitChoice::Val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmSetup {
    pub init: Init,
}

impl Default for RmSetup {
    fn default() -> Self {
        RmSetup { init: Init::Policy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoSetup {
    pub reward: PpoRewardSource,
    pub split: SplitChoice,
    pub value_init: Init,
}

impl Default for PpoSetup {
    fn default() -> Self {
        PpoSetup {
            reward: PpoRewardSource::RewardModel,
            split: SplitChoice::Train,
            value_init: Init::Policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples_per_task: usize,
    /// Zero or below decodes greedily.
    pub temperature: f64,
    pub max_response_tokens: usize,
    pub metrics: Vec<String>,
    pub split: SplitChoice,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_task: 5,
            temperature: 0.2,
            max_response_tokens: 128,
            metrics: ["pass@1", "accuracy", "compilation_rate", "resolved", "bleu"]
                .map(String::from)
                .to_vec(),
            split: SplitChoice::Test,
        }
    }
}

/// Everything a run needs. Relative paths resolve against the directory
/// of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Overrides the seeds of the split, teacher, SFT, reward and PPO
    /// settings and seeds model initialisation.
    pub seed: Option<u64>,
    pub teacher_backend: TeacherBackend,
    /// Tasks for which the toy backend answers with a wrong fix.
    pub toy_faulty: Vec<String>,
    pub max_prompt_tokens: usize,
    pub paths: Paths,
    pub teacher: TeacherSettings,
    pub model: ModelConfig,
    pub split: SplitSpec,
    pub sandbox: SandboxConfig,
    pub filter: FilterConfig,
    pub sft: SftConfig,
    pub candidates: CandidateConfig,
    pub rm_setup: RmSetup,
    pub reward: RmConfig,
    pub ppo_setup: PpoSetup,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            teacher_backend: TeacherBackend::Http,
            toy_faulty: FAULTY_TASKS.map(String::from).to_vec(),
            max_prompt_tokens: 128,
            paths: Paths::default(),
            teacher: TeacherSettings::default(),
            model: ModelConfig::default(),
            split: SplitSpec::default(),
            sandbox: SandboxConfig::default(),
            filter: FilterConfig::default(),
            sft: SftConfig::default(),
            candidates: CandidateConfig::default(),
            rm_setup: RmSetup::default(),
            reward: RmConfig::default(),
            ppo_setup: PpoSetup::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Configuration(format!("invalid config: {e}")))?;
        config.base_dir = base_dir.to_owned();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Pushes the global seed into every sub-config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.split.seed = seed;
        self.teacher.seed = seed;
        self.sft.seed = seed;
        self.reward.seed = seed;
        self.ppo.seed = seed;
        self
    }

    pub fn model_seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.sft.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        if !(self.filter.cap_fraction > 0.0 && self.filter.cap_fraction <= 1.0) {
            return Err(Error::Configuration("filter.cap_fraction must be in (0, 1]".into()));
        }
        if self.candidates.per_prompt < 2 {
            return Err(Error::Configuration("candidates.per_prompt must be at least 2".into()));
        }
        if self.candidates.temperatures.is_empty() || self.candidates.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Configuration(
                "candidates.temperatures must be positive and non-empty".into(),
            ));
        }
        if self.eval.samples_per_task == 0 {
            return Err(Error::Configuration("eval.samples_per_task must be at least 1".into()));
        }
        if self.max_prompt_tokens < 2 {
            return Err(Error::Configuration("max_prompt_tokens must be at least 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The cache mode is not part of
    /// the config, so record and replay runs share a digest.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    #[serde(default)]
    pub started_at: Option<u64>,
    #[serde(default)]
    pub finished_at: Option<u64>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub summary: Value,
}

impl Default for StageRecord {
    fn default() -> Self {
        StageRecord {
            status: StageStatus::Pending,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_at: None,
            finished_at: None,
            error: None,
            summary: Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(config_digest: &str) -> Self {
        RunManifest {
            run_id: format!("{}-{}", &config_digest[..12.min(config_digest.len())], now()),
            config_digest: config_digest.to_owned(),
            stages: Stage::ALL.into_iter().map(|s| (s, StageRecord::default())).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stages.get(&stage).map_or(StageStatus::Pending, |r| r.status)
    }

    /// The first predecessor of `stage` that is not done.
    pub fn missing_predecessor(&self, stage: Stage) -> Option<Stage> {
        stage
            .predecessors()
            .iter()
            .copied()
            .find(|p| self.status(*p) != StageStatus::Done)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when the stage was already done with the same inputs.
    pub skipped: bool,
    pub summary: Value,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu_tokenizer: String,
    pub split: SplitChoice,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub temperature: f64,
    pub models: BTreeMap<String, ModelMetrics>,
    /// `a` minus `b` for (sft, base), (ppo, sft) and (ppo, base).
    pub gaps: Vec<GapReport>,
}

/// Answers nothing; used in replay mode where every reply must come from
/// the cache.
struct OfflineTeacher;

impl Teacher for OfflineTeacher {
    fn complete(&self, _request: &crate::teacher::TeacherRequest) -> Result<crate::teacher::TeacherReply> {
        Err(Error::Configuration(
            "no teacher backend is available in replay mode".into(),
        ))
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    mode: CacheMode,
    backend: Option<Box<dyn Teacher>>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<Option<String>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(sha256_hex(&b))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn decode_response(tokens: &[TokenId]) -> String {
    let body = tokens.strip_suffix(&[EOS]).unwrap_or(tokens);
    Vocabulary.decode_lossy(body)
}

impl Pipeline {
    /// Applies the config's global seed, if any, before validating.
    pub fn new(mut config: PipelineConfig, mode: CacheMode) -> Result<Self> {
        if let Some(seed) = config.seed {
            config = config.with_seed(seed);
        }
        config.validate()?;
        Ok(Pipeline {
            config,
            mode,
            backend: None,
        })
    }

    /// Uses `backend` instead of the one named in the config.
    pub fn with_backend(mut self, backend: Box<dyn Teacher>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output_dir(&self) -> PathBuf {
        self.config.output_dir()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir().join(name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out(MANIFEST)
    }

    /// The stored manifest, or a fresh one when none exists or the config
    /// changed. A config change also removes the old artifacts.
    pub fn manifest(&self) -> Result<RunManifest> {
        let digest = self.config.digest()?;
        let path = self.manifest_path();
        if path.exists() {
            let m = RunManifest::load(&path)?;
            if m.config_digest == digest {
                return Ok(m);
            }
            log::info!("config changed since the last run; starting a new manifest");
            for stage in Stage::ALL {
                for name in stage.outputs() {
                    let p = self.out(name);
                    if p.exists() {
                        fs::remove_file(p)?;
                    }
                }
            }
        }
        Ok(RunManifest::new(&digest))
    }

    fn digests(&self, stage: Stage, names: &[&str], with_tasks: bool) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        if with_tasks {
            let tasks = self.config.resolve(&self.config.paths.tasks);
            let d = file_digest(&tasks)?
                .ok_or_else(|| Error::Input(format!("stage {stage}: tasks file {} is missing", tasks.display())))?;
            out.insert("tasks".to_owned(), d);
        }
        for name in names {
            if let Some(d) = file_digest(&self.out(name))? {
                out.insert((*name).to_owned(), d);
            }
        }
        Ok(out)
    }

    /// Runs one stage, or does nothing if it is already done with the same
    /// inputs and outputs.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        fs::create_dir_all(self.output_dir())?;
        let mut manifest = self.manifest()?;
        if let Some(missing) = manifest.missing_predecessor(stage) {
            return Err(Error::Ordering {
                stage: stage.name().to_owned(),
                missing: missing.name().to_owned(),
            });
        }
        let inputs = self.digests(stage, stage.inputs(), true)?;
        let previous = manifest.stages.get(&stage).cloned().unwrap_or_default();
        if previous.status == StageStatus::Done
            && previous.inputs == inputs
            && self.digests(stage, stage.outputs(), false)? == previous.outputs
        {
            log::info!("stage {stage} is up to date");
            return Ok(StageOutcome {
                stage,
                skipped: true,
                summary: previous.summary,
            });
        }

        // Everything downstream is stale once this stage runs again.
        for later in &Stage::ALL[stage.index() + 1..] {
            manifest.stages.insert(*later, StageRecord::default());
        }
        let fresh = previous.status == StageStatus::Done;
        manifest.stages.insert(
            stage,
            StageRecord {
                status: StageStatus::Pending,
                inputs: inputs.clone(),
                started_at: Some(now()),
                ..StageRecord::default()
            },
        );
        manifest.save(&self.manifest_path())?;

        log::info!("stage {stage}: starting");
        let result = self.execute(stage, fresh);
        let record = manifest.stages.get_mut(&stage).expect("inserted above");
        record.finished_at = Some(now());
        match result {
            Ok(summary) => {
                record.status = StageStatus::Done;
                record.outputs = self.digests(stage, stage.outputs(), false)?;
                record.summary = summary.clone();
                manifest.save(&self.manifest_path())?;
                log::info!("stage {stage}: done");
                Ok(StageOutcome {
                    stage,
                    skipped: false,
                    summary,
                })
            }
            Err(e) => {
                record.status = StageStatus::Failed;
                record.error = Some(e.to_string());
                manifest.save(&self.manifest_path())?;
                Err(Error::Stage {
                    stage: stage.name().to_owned(),
                    source: Box::new(e),
                })
            }
        }
    }

    /// Runs every stage up to and including `last`, in order.
    pub fn run_through(&mut self, last: Stage) -> Result<Vec<StageOutcome>> {
        Stage::ALL[..=last.index()].iter().map(|s| self.run_stage(*s)).collect()
    }

    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        self.run_through(Stage::Eval)
    }

    fn execute(&mut self, stage: Stage, fresh: bool) -> Result<Value> {
        match stage {
            Stage::Collect => self.collect(fresh),
            Stage::Filter => self.filter(),
            Stage::Sft => self.sft(),
            Stage::GenCandidates => self.gen_candidates(),
            Stage::Judge => self.judge(),
            Stage::TrainRm => self.train_rm(),
            Stage::Ppo => self.ppo(),
            Stage::Eval => self.eval(),
        }
    }

    pub fn tasks(&self) -> Result<TaskSet> {
        load_tasks(&self.config.resolve(&self.config.paths.tasks))
    }

    fn split(&self, tasks: &TaskSet, choice: SplitChoice) -> Result<TaskSet> {
        let (train, val, test) = split_dataset(tasks, &self.config.split)?;
        let ids = |sets: &[&TaskSet]| -> Vec<String> { sets.iter().flat_map(|s| s.ids()).collect() };
        Ok(match choice {
            SplitChoice::Train => train,
            SplitChoice::Val => val,
            SplitChoice::Test => test,
            SplitChoice::TrainVal => tasks.subset(&ids(&[&train, &val])),
            SplitChoice::All => tasks.clone(),
        })
    }

    fn verifier(&self) -> Verifier {
        Verifier::new(self.config.sandbox.clone())
    }

    fn backend(&self, tasks: &TaskSet) -> Result<Box<dyn Teacher>> {
        if self.mode == CacheMode::Replay {
            return Ok(Box::new(OfflineTeacher));
        }
        Ok(match self.config.teacher_backend {
            TeacherBackend::Http => Box::new(HttpTeacher::new(
                &self.config.teacher.endpoint,
                self.config.teacher.max_in_flight,
                RetryPolicy::default(),
                Duration::from_secs_f64(self.config.teacher.timeout_seconds),
            )?),
            TeacherBackend::Toy => Box::new(ToyTeacher::with_faulty(
                tasks.clone(),
                self.verifier(),
                self.config.toy_faulty.clone(),
            )),
        })
    }

    fn cache(&self) -> Result<Option<ResponseCache>> {
        match self.mode {
            CacheMode::Live => Ok(None),
            _ => Ok(Some(ResponseCache::open(
                &self.config.resolve(&self.config.paths.cache_dir),
            )?)),
        }
    }

    /// Runs `work` over `items` in chunks of the teacher's in-flight limit
    /// and hands each chunk's results to `sink` in input order.
    fn with_teacher<T, R>(
        &self,
        tasks: &TaskSet,
        items: &[T],
        work: impl Fn(&TeacherClient, &T) -> Result<R> + Sync,
        mut sink: impl FnMut(Vec<Result<R>>, Vec<UsageRecord>) -> Result<()>,
    ) -> Result<()>
    where
        T: Sync,
        R: Send,
    {
        let owned;
        let backend: &dyn Teacher = match &self.backend {
            Some(b) => b.as_ref(),
            None => {
                owned = self.backend(tasks)?;
                owned.as_ref()
            }
        };
        let cache = self.cache()?;
        let client = TeacherClient::new(backend, cache.as_ref(), self.mode, self.config.teacher.clone());
        for chunk in items.chunks(self.config.teacher.max_in_flight.max(1)) {
            let results: Vec<Result<R>> = chunk.par_iter().map(|item| work(&client, item)).collect();
            sink(results, client.take_usage())?;
        }
        Ok(())
    }

    fn collect(&mut self, fresh: bool) -> Result<Value> {
        let tasks = self.tasks()?;
        let train = self.split(&tasks, SplitChoice::Train)?;
        let traces_path = self.out(TRACES);
        let usage_path = self.out(USAGE_COLLECT);
        if fresh {
            for p in [&traces_path, &usage_path] {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
        let done: HashSet<String> = if traces_path.exists() {
            read_jsonl::<ReasoningExample>(&traces_path)?
                .into_iter()
                .map(|e| e.task_id)
                .collect()
        } else {
            HashSet::new()
        };
        let todo: Vec<&RepairTask> = train.iter().filter(|t| !done.contains(&t.id)).collect();
        log::info!("collect: {} of {} training tasks need a trace", todo.len(), train.len());
        // Both files exist even when nothing is left to do.
        fs::OpenOptions::new().create(true).append(true).open(&traces_path)?;
        fs::OpenOptions::new().create(true).append(true).open(&usage_path)?;

        let mut extraction_failures = 0usize;
        let mut first_error = None;
        self.with_teacher(
            &tasks,
            &todo,
            |client, task| client.elicit_trace(task),
            |results, usage| {
                for u in &usage {
                    append_jsonl(&usage_path, u)?;
                }
                for r in results {
                    match r {
                        Ok(ex) => append_jsonl(&traces_path, &ex)?,
                        Err(Error::Extraction(msg)) => {
                            log::warn!("collect: {msg}");
                            extraction_failures += 1;
                        }
                        Err(e) => {
                            first_error.get_or_insert(e);
                        }
                    }
                }
                // Progress so far is on disk; stop at the first hard error.
                match first_error.take() {
                    Some(e) => Err(e),
                    None => Ok(()),
                }
            },
        )?;

        let usage: Vec<UsageRecord> = read_jsonl(&usage_path)?;
        let input: u64 = usage.iter().map(|u| u.input_tokens).sum();
        let output: u64 = usage.iter().map(|u| u.output_tokens).sum();
        let traces = read_jsonl::<ReasoningExample>(&traces_path)?.len();
        log::info!("collect: {traces} traces, {input} input and {output} output tokens");
        Ok(json!({
            "train_tasks": train.len(),
            "traces": traces,
            "extraction_failures": extraction_failures,
            "calls": usage.len(),
            "input_tokens": input,
            "output_tokens": output,
        }))
    }

    fn filter(&mut self) -> Result<Value> {
        let tasks = self.tasks()?;
        let traces: Vec<ReasoningExample> = read_jsonl(&self.out(TRACES))?;
        let verified = self.verifier().filter_verified(&traces, &tasks)?;
        let benchmark = |e: &ReasoningExample| {
            tasks
                .get(&e.task_id)
                .map(|t| t.source_benchmark.clone())
                .unwrap_or_default()
        };
        let kept = cap_dataset(
            &verified,
            self.config.filter.cap_fraction,
            benchmark,
            self.config.split.seed,
        )?;
        if kept.is_empty() {
            log::warn!("filter: no trace passed verification; the SFT dataset is empty");
        }
        write_jsonl(&self.out(DSFT), &kept)?;
        Ok(json!({ "traces": traces.len(), "verified": verified.len(), "retained": kept.len() }))
    }

    fn policy_examples(&self, tasks: &TaskSet, examples: &[ReasoningExample]) -> Result<Vec<SftExample>> {
        examples
            .iter()
            .map(|e| {
                let task = tasks
                    .get(&e.task_id)
                    .ok_or_else(|| Error::Validation(format!("example refers to unknown task `{}`", e.task_id)))?;
                Ok(SftExample::new(task, e, self.config.max_prompt_tokens))
            })
            .collect()
    }

    fn sft(&mut self) -> Result<Value> {
        let tasks = self.tasks()?;
        let data: Vec<ReasoningExample> = read_jsonl(&self.out(DSFT))?;
        if data.is_empty() {
            return Err(Error::Input("the SFT dataset is empty".into()));
        }
        let examples = self.policy_examples(&tasks, &data)?;
        let base = new_policy(self.config.model.clone(), self.config.model_seed())?;
        save_checkpoint(&self.out(BASE_CKPT), &base, CheckpointKind::Policy)?;
        let mut policy = base.clone();
        let report = train_sft(&mut policy, &examples, &self.config.sft, None)?;
        save_checkpoint(&self.out(SFT_CKPT), &policy, CheckpointKind::Policy)?;
        write_jsonl(&self.out(SFT_HISTORY), &report.history)?;
        Ok(json!({
            "examples": examples.len(),
            "skipped": report.skipped,
            "steps": report.history.len(),
            "epoch_mean_loss": report.epoch_mean_loss,
        }))
    }

    fn load_policy(&self, name: &str) -> Result<PolicyModel> {
        load_checkpoint(&self.out(name), CheckpointKind::Policy)
    }

    fn gen_candidates(&mut self) -> Result<Value> {
        let tasks = self.tasks()?;
        let chosen = self.split(&tasks, self.config.candidates.split)?;
        let policy = self.load_policy(SFT_CKPT)?;
        let cfg = &self.config.candidates;
        let seed = self.config.model_seed();
        let jobs: Vec<(usize, usize)> = (0..chosen.len())
            .flat_map(|i| (0..cfg.per_prompt).map(move |j| (i, j)))
            .collect();
        let texts: Vec<String> = jobs
            .par_iter()
            .map(|&(i, j)| {
                let task = &chosen.tasks()[i];
                let prompt = encode_prompt(task, self.config.max_prompt_tokens);
                let t = cfg.temperatures[j % cfg.temperatures.len()];
                let options = SampleOptions {
                    decoding: Decoding::Temperature(t),
                    max_len: cfg.max_response_tokens,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xca4d, mix(i as u64, j as u64, 0)));
                Ok(decode_response(
                    &sample_with_rng(&policy, &prompt, options, &mut rng)?.tokens,
                ))
            })
            .collect::<Result<_>>()?;
        let sets: Vec<CandidateSet> = chosen
            .iter()
            .enumerate()
            .map(|(i, task)| CandidateSet {
                task_id: task.id.clone(),
                candidates: texts[i * cfg.per_prompt..(i + 1) * cfg.per_prompt].to_vec(),
                temperatures: (0..cfg.per_prompt)
                    .map(|j| cfg.temperatures[j % cfg.temperatures.len()])
                    .collect(),
                extra: Default::default(),
            })
            .collect();
        write_jsonl(&self.out(CANDIDATES), &sets)?;
        Ok(json!({ "tasks": sets.len(), "candidates": texts.len() }))
    }

    fn judge(&mut self) -> Result<Value> {
        let tasks = self.tasks()?;
        let sets: Vec<CandidateSet> = read_jsonl(&self.out(CANDIDATES))?;
        for s in &sets {
            if tasks.get(&s.task_id).is_none() {
                return Err(Error::Validation(format!(
                    "candidates refer to unknown task `{}`",
                    s.task_id
                )));
            }
        }
        let usage_path = self.out(USAGE_JUDGE);
        let mut pairs: Vec<PreferencePair> = Vec::new();
        let mut usage: Vec<UsageRecord> = Vec::new();
        let mut skipped = 0;
        self.with_teacher(
            &tasks,
            &sets,
            |client, set| {
                let task = tasks.get(&set.task_id).expect("checked above");
                client.judge_candidates(task, &set.candidates)
            },
            |results, u| {
                usage.extend(u);
                for r in results {
                    let (p, s) = r?;
                    pairs.extend(p);
                    skipped += s;
                }
                Ok(())
            },
        )?;
        write_jsonl(&self.out(PREFS), &pairs)?;
        write_jsonl(&usage_path, &usage)?;
        Ok(json!({
            "tasks": sets.len(),
            "pairs": pairs.len(),
            "unparsed_judgments": skipped,
            "calls": usage.len(),
            "input_tokens": usage.iter().map(|u| u.input_tokens).sum::<u64>(),
            "output_tokens": usage.iter().map(|u| u.output_tokens).sum::<u64>(),
        }))
    }

    fn train_rm(&mut self) -> Result<Value> {
        let tasks = self.tasks()?;
        let prefs: Vec<PreferencePair> = read_jsonl(&self.out(PREFS))?;
        let pairs: Vec<PairExample> = prefs
            .iter()
            .map(|p| {
                let task = tasks
                    .get(&p.task_id)
                    .ok_or_else(|| Error::Validation(format!("preference refers to unknown task `{}`", p.task_id)))?;
                Ok(PairExample::new(task, p, self.config.max_prompt_tokens))
            })
            .collect::<Result<_>>()?;
        if pairs.is_empty() {
            return Err(Error::Input("no preference pairs to train on".into()));
        }
        let seed = mix(self.config.model_seed(), 0x4e4d, 1);
        let mut rm = match self.config.rm_setup.init {
            Init::Policy => RewardModel::from_policy(&self.load_policy(SFT_CKPT)?, seed)?,
            Init::Fresh => RewardModel::new(self.config.model.clone(), seed)?,
        };
        let report = train_reward_model(&mut rm, &pairs, &self.config.reward)?;
        save_checkpoint(&self.out(RM_CKPT), &rm.net, CheckpointKind::Reward)?;
        fs::write(self.out(RM_REPORT), serde_json::to_vec_pretty(&report)?)?;
        Ok(serde_json::to_value(&report)?)
    }

    fn ppo(&mut self) -> Result<Value> {
        let tasks = self.tasks()?;
        let chosen = self.split(&tasks, self.config.ppo_setup.split)?;
        let reference = self.load_policy(SFT_CKPT)?;
        let mut policy = reference.clone();
        let seed = mix(self.config.model_seed(), 0x7a1e, 2);
        let mut value = match self.config.ppo_setup.value_init {
            Init::Policy => ValueModel::from_policy(&reference, seed)?,
            Init::Fresh => ValueModel::new(self.config.model.clone(), seed)?,
        };
        let prompts: Vec<PromptItem> = chosen
            .iter()
            .map(|t| PromptItem {
                task_id: t.id.clone(),
                ids: encode_prompt(t, self.config.max_prompt_tokens),
            })
            .collect();
        let verifier = self.verifier();
        let rm;
        let vr;
        let reward: &dyn RewardFn = match self.config.ppo_setup.reward {
            PpoRewardSource::RewardModel => {
                rm = RewardModel::from_network(load_checkpoint(&self.out(RM_CKPT), CheckpointKind::Reward)?)?;
                &rm
            }
            PpoRewardSource::Verifier => {
                vr = VerifierReward {
                    verifier: &verifier,
                    tasks: &chosen,
                };
                &vr
            }
        };
        let report = train_ppo(&mut policy, &reference, &mut value, reward, &prompts, &self.config.ppo)?;
        save_checkpoint(&self.out(PPO_CKPT), &policy, CheckpointKind::Policy)?;
        save_checkpoint(&self.out(VALUE_CKPT), &value.net, CheckpointKind::Value)?;
        write_jsonl(&self.out(PPO_REPORT), &report.rounds)?;
        let last = report.rounds.last();
        Ok(json!({
            "prompts": prompts.len(),
            "rounds": report.rounds.len(),
            "final_mean_reward": last.map(|r| r.mean_terminal_reward),
            "final_mean_kl": last.map(|r| r.mean_kl),
        }))
    }

    /// Samples and verifies `samples_per_task` responses per task. Sample
    /// `j` of task `i` uses the same random stream for every model.
    pub fn evaluate_model(&self, policy: &PolicyModel, tasks: &TaskSet) -> Result<Vec<EvalOutcome>> {
        let cfg = &self.config.eval;
        let decoding = if cfg.temperature > 0.0 {
            Decoding::Temperature(cfg.temperature)
        } else {
            Decoding::Greedy
        };
        let n = cfg.samples_per_task;
        let seed = self.config.model_seed();
        let verifier = self.verifier();
        let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let samples: Vec<SampleOutcome> = jobs
            .par_iter()
            .map(|&(i, j)| {
                let task = &tasks.tasks()[i];
                let prompt = encode_prompt(task, self.config.max_prompt_tokens);
                let options = SampleOptions {
                    decoding,
                    max_len: cfg.max_response_tokens,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xe7a1, mix(i as u64, j as u64, 0)));
                let text = decode_response(&sample_with_rng(policy, &prompt, options, &mut rng)?.tokens);
                self.judge_sample(&verifier, task, text)
            })
            .collect::<Result<_>>()?;
        Ok(tasks
            .iter()
            .enumerate()
            .map(|(i, t)| EvalOutcome {
                task_id: t.id.clone(),
                samples: samples[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }

    fn judge_sample(&self, verifier: &Verifier, task: &RepairTask, text: String) -> Result<SampleOutcome> {
        let Some(code) = extract_solution(&text).filter(|c| !c.trim().is_empty()) else {
            return Ok(SampleOutcome {
                candidate: text,
                valid: false,
                compiled: false,
                applied: false,
            });
        };
        let file = verifier.candidate_file(&task.language_tag);
        let (program, applied) = if looks_like_patch(&code) {
            let mut files: FileSet = task.context.iter().map(|c| (c.name.clone(), c.text.clone())).collect();
            files.insert(file.clone(), task.buggy_code.clone());
            match apply_patch(&files, &code) {
                Ok(patched) => (patched.get(&file).cloned().unwrap_or_default(), true),
                Err(Error::PatchApply { .. }) => (String::new(), false),
                Err(e) => return Err(e),
            }
        } else {
            (code.clone(), true)
        };
        let valid = applied && !program.trim().is_empty() && verifier.validate(task, &program)?.valid;
        let compiled = if !applied || program.trim().is_empty() {
            false
        } else if self.config.sandbox.compile_commands.contains_key(&task.language_tag) {
            verifier.compile_check(&program, &task.language_tag, None)?.compiled
        } else {
            // Nothing to compile with; a passing run is the best evidence.
            valid
        };
        Ok(SampleOutcome {
            candidate: code,
            valid,
            compiled,
            applied,
        })
    }

    fn eval(&mut self) -> Result<Value> {
        let tasks = self.tasks()?;
        let chosen = self.split(&tasks, self.config.eval.split)?;
        if chosen.is_empty() {
            return Err(Error::Input("the evaluation split is empty".into()));
        }
        let references: BTreeMap<String, String> = chosen
            .iter()
            .filter_map(|t| t.ground_truth.clone().map(|g| (t.id.clone(), g)))
            .collect();
        let wanted = &self.config.eval.metrics;
        let mut models = BTreeMap::new();
        for (name, ckpt) in [("base", BASE_CKPT), ("sft", SFT_CKPT), ("ppo", PPO_CKPT)] {
            let outcomes = self.evaluate_model(&self.load_policy(ckpt)?, &chosen)?;
            let mut m = ModelMetrics::compute(&outcomes, &references)?;
            m.metrics.retain(|k, _| wanted.contains(k));
            models.insert(name.to_owned(), m);
        }
        let mut gaps = Vec::new();
        for (a, b) in [("sft", "base"), ("ppo", "sft"), ("ppo", "base")] {
            for metric in wanted {
                if !models[a].metrics.contains_key(metric) {
                    continue;
                }
                let mut g = performance_gap(
                    metric,
                    &models[a].per_task_scores(metric),
                    &models[b].per_task_scores(metric),
                )?;
                g.metric_name = format!("{metric}:{a}-{b}");
                gaps.push(g);
            }
        }
        let report = MetricsReport {
            bleu_tokenizer: BLEU_TOKENIZER.to_owned(),
            split: self.config.eval.split,
            tasks: chosen.len(),
            samples_per_task: self.config.eval.samples_per_task,
            temperature: self.config.eval.temperature,
            models,
            gaps,
        };
        fs::write(self.out(METRICS), serde_json::to_vec_pretty(&report)?)?;
        let headline: BTreeMap<&str, &BTreeMap<String, f64>> =
            report.models.iter().map(|(k, v)| (k.as_str(), &v.metrics)).collect();
        Ok(serde_json::to_value(headline)?)
    }
}

/// Reads `metrics.json` from an output directory.
pub fn read_metrics(output_dir: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_slice(&fs::read(output_dir.join(METRICS))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("train_rm".parse::<Stage>().unwrap(), Stage::TrainRm);
        assert!("deploy".parse::<Stage>().is_err());
    }

    #[test]
    fn predecessors_follow_the_step_order() {
        assert!(Stage::Collect.predecessors().is_empty());
        assert_eq!(Stage::Filter.predecessors(), &[Stage::Collect]);
        assert_eq!(Stage::Eval.predecessors().len(), 7);
        let m = RunManifest::new("abc");
        assert_eq!(m.missing_predecessor(Stage::Ppo), Some(Stage::Collect));
    }

    #[test]
    fn default_config_survives_toml() {
        let c = PipelineConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back = PipelineConfig::from_toml(&text, Path::new(".")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn seed_reaches_every_sub_config() {
        let c = PipelineConfig::default().with_seed(7);
        assert_eq!(
            (c.split.seed, c.sft.seed, c.reward.seed, c.ppo.seed, c.teacher.seed),
            (7, 7, 7, 7, 7)
        );
        assert_ne!(c.digest().unwrap(), PipelineConfig::default().digest().unwrap());
    }
}
