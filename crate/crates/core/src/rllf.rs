//! PPO fine-tuning of the SFT policy against a learned reward with a KL
//! penalty toward the frozen reference: rollouts, per-token reward
//! shaping, a per-position value model, GAE and the clipped surrogate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskSet;
use crate::error::{Error, Result};
use crate::format::extract_solution;
use crate::policy::{
    sample_with_rng, Decoding, Head, ModelConfig, Network, Objective, PolicyModel, SampleOptions, TargetPass, TokenId,
    Vocabulary,
};
use crate::reward::{reward_score, RewardModel};
use crate::sft::{adamw_step, AdamState};
use crate::verifier::Verifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `−β(log π − log π_ref)` added to every token's reward.
    Shaping,
    /// `β · mean(log π − log π_ref)` subtracted from the objective.
    DirectPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub beta_kl: f64,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub lambda_gae: f64,
    pub ppo_epochs_per_batch: usize,
    pub rollout_temperature: f64,
    pub candidates_per_prompt: usize,
    pub value_loss_coefficient: f64,
    /// Rollout → update cycles.
    pub rounds: usize,
    /// Prompts drawn per round; 0 uses every prompt.
    pub prompts_per_round: usize,
    /// Trajectories per optimizer step; 0 uses the whole batch.
    pub minibatch: usize,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub max_response_tokens: usize,
    pub kl_ceiling: f64,
    pub normalize_advantages: bool,
    pub kl_mode: KlMode,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            beta_kl: 0.1,
            clip_epsilon: 0.2,
            gamma: 1.0,
            lambda_gae: 0.95,
            ppo_epochs_per_batch: 5,
            rollout_temperature: 1.0,
            candidates_per_prompt: 3,
            value_loss_coefficient: 0.5,
            rounds: 10,
            prompts_per_round: 0,
            minibatch: 0,
            learning_rate: 1e-5,
            value_learning_rate: 1e-4,
            max_response_tokens: 128,
            kl_ceiling: 10.0,
            normalize_advantages: true,
            kl_mode: KlMode::Shaping,
            seed: crate::corpus::DEFAULT_SEED,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.into()));
        if !(self.beta_kl >= 0.0) {
            return bad("beta_kl must be >= 0");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return bad("lambda_gae must be in [0, 1]");
        }
        if !(self.rollout_temperature > 0.0) {
            return bad("rollout_temperature must be > 0");
        }
        if self.candidates_per_prompt == 0 || self.max_response_tokens == 0 {
            return bad("candidates_per_prompt and max_response_tokens must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.value_learning_rate > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.value_loss_coefficient >= 0.0) {
            return bad("value_loss_coefficient must be >= 0");
        }
        Ok(())
    }
}

/// `V(s_t)` for every response position, from a scalar-head network.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub net: Network,
}

impl ValueModel {
    /// Adapters are dropped: the value head must be trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            adapter: None,
            ..config
        };
        Ok(ValueModel {
            net: Network::new(config, Head::Scalar, seed)?,
        })
    }

    /// Starts from the embedding and hidden layers of `policy`; the head
    /// starts at zero.
    pub fn from_policy(policy: &PolicyModel, seed: u64) -> Result<Self> {
        Ok(ValueModel {
            net: policy.scalar_from_body(seed)?,
        })
    }

    /// Values of the states before each response token.
    pub fn values(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        let act = value_pass(&self.net, prompt, response)?;
        Ok(act.output().to_vec())
    }
}

fn value_pass(net: &Network, prompt: &[TokenId], response: &[TokenId]) -> Result<crate::policy::Activations> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::Input("value pass needs a prompt and a response".into()));
    }
    let mut seq = Vec::with_capacity(prompt.len() + response.len() - 1);
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(&response[..response.len() - 1]);
    net.forward_rows(&seq, prompt.len() - 1, None)
}

/// One sampled response and everything PPO derives from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    /// Generation stopped at the length cap or the context window.
    pub truncated: bool,
    /// `log π_old(y_t | ·)`, recorded at rollout time.
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub terminal_reward: f64,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    fn check(&self) -> Result<()> {
        let t = self.response.len();
        for (name, v) in [
            ("logp_old", &self.logp_old),
            ("logp_ref", &self.logp_ref),
            ("rewards", &self.rewards),
            ("values", &self.values),
            ("advantages", &self.advantages),
            ("returns", &self.returns),
        ] {
            if !v.is_empty() && v.len() != t {
                return Err(Error::State(format!("{name} has {} entries for {t} tokens", v.len())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub samples: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn token_count(&self) -> usize {
        self.samples.iter().map(Trajectory::len).sum()
    }

    pub fn mean_terminal_reward(&self) -> f64 {
        crate::linalg::mean(&self.samples.iter().map(|s| s.terminal_reward).collect::<Vec<_>>())
    }

    /// Mean over sequences of the sampled-token KL estimate.
    pub fn mean_kl(&self) -> Result<f64> {
        let per: Vec<f64> = self
            .samples
            .iter()
            .map(|s| kl_estimate(&s.logp_old, &s.logp_ref))
            .collect::<Result<_>>()?;
        Ok(crate::linalg::mean(&per))
    }
}

/// A prompt the policy is trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptItem {
    pub task_id: String,
    pub ids: Vec<TokenId>,
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination.
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Samples `candidates_per_prompt` responses per prompt and records their
/// log-probabilities under the policy and the reference. Each sample's
/// random stream depends only on `(seed, prompt index, candidate index)`.
pub fn rollout(
    policy: &PolicyModel,
    reference: &PolicyModel,
    prompts: &[PromptItem],
    config: &PpoConfig,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let k = config.candidates_per_prompt;
    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let options = SampleOptions {
        decoding: Decoding::Temperature(config.rollout_temperature),
        max_len: config.max_response_tokens,
    };
    let samples: Vec<Option<Trajectory>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let p = &prompts[i];
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64, j as u64));
            let s = sample_with_rng(policy, &p.ids, options, &mut rng)?;
            if s.tokens.is_empty() {
                log::warn!("prompt for {} fills the context window; no response sampled", p.task_id);
                return Ok(None);
            }
            let logp_old = TargetPass::new(policy, &p.ids, &s.tokens, None)?.log_probs;
            let logp_ref = TargetPass::new(reference, &p.ids, &s.tokens, None)?.log_probs;
            Ok(Some(Trajectory {
                task_id: p.task_id.clone(),
                prompt: p.ids.clone(),
                response: s.tokens,
                truncated: s.truncated,
                logp_old,
                logp_ref,
                terminal_reward: 0.0,
                rewards: Vec::new(),
                values: Vec::new(),
                advantages: Vec::new(),
                returns: Vec::new(),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(TrajectoryBatch {
        samples: samples.into_iter().flatten().collect(),
    })
}

/// Source of the terminal reward `R(x, y)`.
pub trait RewardFn: Send + Sync {
    fn reward(&self, task_id: &str, prompt: &[TokenId], response: &[TokenId]) -> Result<f64>;
}

impl RewardFn for RewardModel {
    fn reward(&self, _task_id: &str, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        reward_score(self, prompt, response)
    }
}

/// Fraction of the task's tests passed by the code in the response; 0 when
/// the response has no code block.
pub struct VerifierReward<'a> {
    pub verifier: &'a Verifier,
    pub tasks: &'a TaskSet,
}

impl RewardFn for VerifierReward<'_> {
    fn reward(&self, task_id: &str, _prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::Validation(format!("unknown task {task_id}")))?;
        let text = Vocabulary.decode_lossy(response);
        match extract_solution(&text) {
            Some(code) => Ok(self.verifier.validate(task, &code)?.pass_fraction()),
            None => Ok(0.0),
        }
    }
}

/// Fills terminal and per-token rewards. In shaping mode every token pays
/// `−β(log π − log π_ref)`; the terminal reward lands on the last token.
pub fn shape_rewards(batch: &mut TrajectoryBatch, reward: &dyn RewardFn, config: &PpoConfig) -> Result<()> {
    let terminal: Vec<f64> = batch
        .samples
        .par_iter()
        .map(|s| reward.reward(&s.task_id, &s.prompt, &s.response))
        .collect::<Result<_>>()?;
    for (s, r) in batch.samples.iter_mut().zip(terminal) {
        if s.logp_old.len() != s.len() || s.logp_ref.len() != s.len() {
            return Err(Error::State(format!(
                "trajectory for {} lacks log-probabilities under both policies",
                s.task_id
            )));
        }
        if !r.is_finite() {
            return Err(Error::numeric("terminal_reward"));
        }
        let beta = match config.kl_mode {
            KlMode::Shaping => config.beta_kl,
            KlMode::DirectPenalty => 0.0,
        };
        s.terminal_reward = r;
        s.rewards = s
            .logp_old
            .iter()
            .zip(&s.logp_ref)
            .map(|(a, b)| -beta * (a - b))
            .collect();
        if let Some(last) = s.rewards.last_mut() {
            *last += r;
        }
    }
    Ok(())
}

/// `δ_t = r_t + γ V(s_{t+1}) − V(s_t)`; `values` has one more entry than
/// `rewards`, the last being the value after the final token.
pub fn td_errors(rewards: &[f64], values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Input(format!(
            "{} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    Ok(rewards
        .iter()
        .enumerate()
        .map(|(t, r)| r + gamma * values[t + 1] - values[t])
        .collect())
}

/// `Â_t = δ_t + γλ Â_{t+1}`.
pub fn gae(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut adv = vec![0.0; deltas.len()];
    let mut next = 0.0;
    for t in (0..deltas.len()).rev() {
        next = deltas[t] + gamma * lambda * next;
        adv[t] = next;
    }
    adv
}

fn clip_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// `∂/∂ratio` of `min(r Â, clip(r) Â)`: `Â` where the unclipped term is
/// the active one, else 0.
pub fn clip_ratio_derivative(ratio: f64, adv: f64, eps: f64) -> f64 {
    let active = if adv >= 0.0 {
        ratio <= 1.0 + eps
    } else {
        ratio >= 1.0 - eps
    };
    if active {
        adv
    } else {
        0.0
    }
}

/// Mean over tokens of `min(r_t Â_t, clip(r_t, 1−ε, 1+ε) Â_t)`.
pub fn ppo_clip_objective(ratios: &[f64], advantages: &[f64], epsilon: f64) -> Result<f64> {
    if ratios.len() != advantages.len() {
        return Err(Error::Input("ratios and advantages differ in length".into()));
    }
    if ratios.is_empty() {
        return Err(Error::Input("no tokens".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::Numeric {
            node: format!("ratio {r}"),
        });
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| clip_term(r, a, epsilon))
        .sum();
    Ok(total / ratios.len() as f64)
}

/// Mean over tokens of `log π − log π_ref` on the sampled tokens; 0 for an
/// empty sequence.
pub fn kl_estimate(logp_theta: &[f64], logp_ref: &[f64]) -> Result<f64> {
    if logp_theta.len() != logp_ref.len() {
        return Err(Error::Input("log-probability sequences differ in length".into()));
    }
    if logp_theta.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = logp_theta.iter().zip(logp_ref).map(|(a, b)| a - b).sum();
    Ok(s / logp_theta.len() as f64)
}

/// Runs the value model over every trajectory, then fills advantages and
/// returns. Terminal values are 0.
pub fn compute_advantages(batch: &mut TrajectoryBatch, value: &ValueModel, config: &PpoConfig) -> Result<()> {
    let values: Vec<Vec<f64>> = batch
        .samples
        .par_iter()
        .map(|s| value.values(&s.prompt, &s.response))
        .collect::<Result<_>>()?;
    for (s, v) in batch.samples.iter_mut().zip(values) {
        if s.rewards.len() != s.len() {
            return Err(Error::State(format!("rewards for {} were not shaped", s.task_id)));
        }
        let mut ext = v.clone();
        ext.push(0.0);
        let deltas = td_errors(&s.rewards, &ext, config.gamma)?;
        s.advantages = gae(&deltas, config.gamma, config.lambda_gae);
        s.returns = s.advantages.iter().zip(&v).map(|(a, b)| a + b).collect();
        s.values = v;
    }
    Ok(())
}

/// Rescales all advantages in the batch to zero mean and unit variance.
/// With (near) zero spread the advantages are only centred.
pub fn normalize_advantages(batch: &mut TrajectoryBatch) {
    let all: Vec<f64> = batch
        .samples
        .iter()
        .flat_map(|s| s.advantages.iter().copied())
        .collect();
    if all.is_empty() {
        return;
    }
    let mu = crate::linalg::mean(&all);
    let var = all.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / all.len() as f64;
    let sd = var.sqrt();
    let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
    for s in &mut batch.samples {
        s.advantages.iter_mut().for_each(|a| *a = (*a - mu) * scale);
    }
}

/// Negated clipped surrogate over every token of `samples`, plus the
/// direct KL penalty when `direct_beta` is set. Minimising this maximises
/// the surrogate.
pub struct PpoPolicyObjective<'a> {
    pub samples: &'a [Trajectory],
    pub epsilon: f64,
    pub direct_beta: Option<f64>,
}

impl PpoPolicyObjective<'_> {
    /// Loss plus the fraction of tokens whose ratio sat outside the active
    /// region.
    pub fn evaluate(&self, model: &Network, grad: Option<&mut [f64]>) -> Result<(f64, f64)> {
        let n: usize = self.samples.iter().map(Trajectory::len).sum();
        if n == 0 {
            return Err(Error::Input("no tokens in PPO batch".into()));
        }
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut clipped = 0usize;
        let mut grad = grad;
        for s in self.samples {
            s.check()?;
            if s.advantages.len() != s.len() || s.logp_ref.len() != s.len() {
                return Err(Error::State("trajectory has no advantages".into()));
            }
            let pass = TargetPass::new(model, &s.prompt, &s.response, None)?;
            let mut weights = Vec::with_capacity(s.len());
            for t in 0..s.len() {
                let lp = pass.log_probs[t];
                let ratio = (lp - s.logp_old[t]).exp();
                if !ratio.is_finite() {
                    return Err(Error::numeric("ratio"));
                }
                let a = s.advantages[t];
                loss -= clip_term(ratio, a, self.epsilon) * inv;
                let d = clip_ratio_derivative(ratio, a, self.epsilon);
                if d == 0.0 && a != 0.0 {
                    clipped += 1;
                }
                // ∂loss/∂logp = −∂min/∂ratio · ratio / n
                let mut w = -d * ratio * inv;
                if let Some(beta) = self.direct_beta {
                    loss += beta * (lp - s.logp_ref[t]) * inv;
                    w += beta * inv;
                }
                weights.push(w);
            }
            if let Some(g) = grad.as_deref_mut() {
                model.backward_into(&pass.act, &pass.logprob_output_grad(&weights), g)?;
            }
        }
        Ok((loss, clipped as f64 * inv))
    }
}

impl Objective for PpoPolicyObjective<'_> {
    fn accumulate(&self, model: &Network, grad: &mut [f64]) -> Result<f64> {
        self.evaluate(model, Some(grad)).map(|(l, _)| l)
    }
}

/// Mean squared error between predicted values and stored returns over
/// every token of `samples`.
pub struct ValueObjective<'a> {
    pub samples: &'a [Trajectory],
}

impl Objective for ValueObjective<'_> {
    fn accumulate(&self, model: &Network, grad: &mut [f64]) -> Result<f64> {
        let n: usize = self.samples.iter().map(Trajectory::len).sum();
        if n == 0 {
            return Err(Error::Input("no tokens in value batch".into()));
        }
        if model.head() != Head::Scalar {
            return Err(Error::Input("value objective needs a scalar head".into()));
        }
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        for s in self.samples {
            if s.returns.len() != s.len() {
                return Err(Error::State("trajectory has no returns".into()));
            }
            let act = value_pass(model, &s.prompt, &s.response)?;
            let dout: Vec<f64> = act
                .output()
                .iter()
                .zip(&s.returns)
                .map(|(v, r)| {
                    loss += (v - r) * (v - r) * inv;
                    2.0 * (v - r) * inv
                })
                .collect();
            model.backward_into(&act, &dout, grad)?;
        }
        Ok(loss)
    }
}

pub fn value_loss(value: &ValueModel, batch: &TrajectoryBatch) -> Result<f64> {
    ValueObjective {
        samples: &batch.samples,
    }
    .value(&value.net)
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoRound {
    pub round: usize,
    pub mean_terminal_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    /// Clipped surrogate at the end of the round's inner epochs.
    pub objective: f64,
    pub samples: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoReport {
    pub rounds: Vec<PpoRound>,
}

/// Alternates rollout, reward shaping, advantage estimation and
/// `ppo_epochs_per_batch` passes of clipped-surrogate and value updates.
///
/// If the KL estimate of a round's rollouts exceeds `kl_ceiling` the
/// policy is restored to its state at the start of that round and a
/// training error is returned.
pub fn train_ppo(
    policy: &mut PolicyModel,
    reference: &PolicyModel,
    value: &mut ValueModel,
    reward: &dyn RewardFn,
    prompts: &[PromptItem],
    config: &PpoConfig,
) -> Result<PpoReport> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Input("no prompts for PPO".into()));
    }
    if policy.registry() != reference.registry() {
        return Err(Error::Input("policy and reference differ in shape".into()));
    }
    let policy_mask = policy.trainable_mask();
    let value_mask = value.net.trainable_mask();
    let mut policy_state = AdamState::new(policy.parameter_count());
    let mut value_state = AdamState::new(value.net.parameter_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let direct_beta = (config.kl_mode == KlMode::DirectPenalty).then_some(config.beta_kl);
    let mut report = PpoReport::default();

    for round in 0..config.rounds {
        let mut chosen: Vec<PromptItem> = prompts.to_vec();
        if config.prompts_per_round > 0 && config.prompts_per_round < chosen.len() {
            chosen.shuffle(&mut rng);
            chosen.truncate(config.prompts_per_round);
        }
        let mut batch = rollout(
            policy,
            reference,
            &chosen,
            config,
            mix(config.seed, 0x5151, round as u64),
        )?;
        if batch.samples.is_empty() {
            return Err(Error::Training(format!("round {round} produced no trajectories")));
        }
        let mean_kl = batch.mean_kl()?;
        if mean_kl > config.kl_ceiling {
            return Err(Error::Training(format!(
                "KL estimate {mean_kl:.4} exceeds ceiling {} in round {round}; policy kept at its last good state",
                config.kl_ceiling
            )));
        }
        let snapshot = policy.parameters().to_vec();
        let value_snapshot = value.net.parameters().to_vec();
        shape_rewards(&mut batch, reward, config)?;
        compute_advantages(&mut batch, value, config)?;
        if config.normalize_advantages {
            normalize_advantages(&mut batch);
        }

        let mb = if config.minibatch == 0 {
            batch.samples.len()
        } else {
            config.minibatch
        };
        let mut order: Vec<usize> = (0..batch.samples.len()).collect();
        let mut clip_sum = 0.0;
        let mut clip_steps = 0;
        let step = (|| -> Result<()> {
            for _ in 0..config.ppo_epochs_per_batch {
                order.shuffle(&mut rng);
                for idx in order.chunks(mb) {
                    let part: Vec<Trajectory> = idx.iter().map(|&i| batch.samples[i].clone()).collect();
                    let mut g = vec![0.0; policy.parameter_count()];
                    let (_, clip) = PpoPolicyObjective {
                        samples: &part,
                        epsilon: config.clip_epsilon,
                        direct_beta,
                    }
                    .evaluate(policy, Some(&mut g))?;
                    clip_sum += clip;
                    clip_steps += 1;
                    adamw_step(
                        policy.parameters_mut(),
                        &g,
                        &mut policy_state,
                        config.learning_rate,
                        0.0,
                        Some(&policy_mask),
                    )?;
                    let mut gv = vec![0.0; value.net.parameter_count()];
                    ValueObjective { samples: &part }.accumulate(&value.net, &mut gv)?;
                    gv.iter_mut().for_each(|v| *v *= config.value_loss_coefficient);
                    adamw_step(
                        value.net.parameters_mut(),
                        &gv,
                        &mut value_state,
                        config.value_learning_rate,
                        0.0,
                        Some(&value_mask),
                    )?;
                    if !policy.is_finite() || !value.net.is_finite() {
                        return Err(Error::numeric("parameters"));
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = step {
            policy.set_parameters(&snapshot)?;
            value.net.set_parameters(&value_snapshot)?;
            return Err(Error::Training(format!("PPO diverged in round {round}: {e}")));
        }
        let (neg_obj, _) = PpoPolicyObjective {
            samples: &batch.samples,
            epsilon: config.clip_epsilon,
            direct_beta: None,
        }
        .evaluate(policy, None)?;
        let row = PpoRound {
            round,
            mean_terminal_reward: batch.mean_terminal_reward(),
            mean_kl,
            clip_fraction: if clip_steps > 0 {
                clip_sum / clip_steps as f64
            } else {
                0.0
            },
            value_loss: value_loss(value, &batch)?,
            objective: -neg_obj,
            samples: batch.samples.len(),
            truncated: batch.samples.iter().filter(|s| s.truncated).count(),
        };
        log::info!(
            "ppo round {round}: reward {:.4} kl {:.4} clip {:.3} value loss {:.4}",
            row.mean_terminal_reward,
            row.mean_kl,
            row.clip_fraction,
            row.value_loss
        );
        report.rounds.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{new_policy, BOS};
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            window: 4,
            hidden1: 8,
            hidden2: 8,
            context_window: 48,
            adapter: None,
        }
    }

    fn prompts() -> Vec<PromptItem> {
        vec![
            PromptItem {
                task_id: "a".into(),
                ids: vec![BOS, 97, 98],
            },
            PromptItem {
                task_id: "b".into(),
                ids: vec![BOS, 99],
            },
        ]
    }

    struct Const(f64);
    impl RewardFn for Const {
        fn reward(&self, _: &str, _: &[TokenId], _: &[TokenId]) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn small_rollout_config() -> PpoConfig {
        PpoConfig {
            max_response_tokens: 12,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let c = PpoConfig::default();
        assert_eq!((c.beta_kl, c.clip_epsilon, c.ppo_epochs_per_batch), (0.1, 0.2, 5));
        assert_eq!(
            (c.candidates_per_prompt, c.rollout_temperature, c.max_response_tokens),
            (3, 1.0, 128)
        );
        assert_eq!((c.gamma, c.lambda_gae, c.kl_ceiling), (1.0, 0.95, 10.0));
    }

    #[test]
    fn identical_policies_have_zero_shaping() {
        let p = new_policy(tiny(), 1).unwrap();
        let cfg = small_rollout_config();
        let mut batch = rollout(&p, &p.clone(), &prompts(), &cfg, 5).unwrap();
        assert_eq!(batch.samples.len(), 6);
        shape_rewards(&mut batch, &Const(2.0), &cfg).unwrap();
        for s in &batch.samples {
            assert!(s.logp_old.iter().zip(&s.logp_ref).all(|(a, b)| a - b == 0.0));
            let (last, rest) = s.rewards.split_last().unwrap();
            assert!(rest.iter().all(|&r| r == 0.0));
            assert_eq!(*last, 2.0);
        }
        assert_eq!(batch.mean_kl().unwrap(), 0.0);
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let p = new_policy(tiny(), 2).unwrap();
        let cfg = small_rollout_config();
        let a = rollout(&p, &p, &prompts(), &cfg, 9).unwrap();
        let b = rollout(&p, &p, &prompts(), &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|s| s.len() <= 12));
    }

    #[test]
    fn zero_beta_leaves_only_terminal_reward() {
        let p = new_policy(tiny(), 3).unwrap();
        let q = new_policy(tiny(), 4).unwrap();
        let cfg = PpoConfig {
            beta_kl: 0.0,
            ..small_rollout_config()
        };
        let mut batch = rollout(&p, &q, &prompts(), &cfg, 1).unwrap();
        shape_rewards(&mut batch, &Const(1.5), &cfg).unwrap();
        for s in &batch.samples {
            let (last, rest) = s.rewards.split_last().unwrap();
            assert!(rest.iter().all(|&r| r == 0.0));
            assert_eq!(*last, 1.5);
        }
    }

    #[test]
    fn missing_reference_logprobs_is_a_state_error() {
        let p = new_policy(tiny(), 3).unwrap();
        let cfg = small_rollout_config();
        let mut batch = rollout(&p, &p, &prompts(), &cfg, 1).unwrap();
        batch.samples[0].logp_ref.clear();
        assert!(matches!(
            shape_rewards(&mut batch, &Const(0.0), &cfg),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn td_examples() {
        assert_eq!(td_errors(&[0.0; 4], &[0.7; 5], 1.0).unwrap(), vec![0.0; 4]);
        assert_eq!(td_errors(&[2.0], &[0.5, 0.0], 0.9).unwrap(), vec![1.5]);
        let d = td_errors(&[1.0, -2.0], &[0.3, 0.4, 9.0], 0.0).unwrap();
        assert_eq!(d, vec![1.0 - 0.3, -2.0 - 0.4]);
        assert!(td_errors(&[1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn gae_boundaries() {
        let d = [0.5, -1.0, 2.0];
        assert_eq!(gae(&d, 0.9, 0.0), d.to_vec());
        let r = [1.0, 0.5, -0.25, 2.0];
        let v = [0.3, -0.2, 0.8, 0.1, 0.0];
        let adv = gae(&td_errors(&r, &v, 1.0).unwrap(), 1.0, 1.0);
        for t in 0..r.len() {
            let tail: f64 = r[t..].iter().sum();
            assert!((adv[t] - (tail - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(ppo_clip_objective(&[1.0, 1.0], &[2.0, -1.0], 0.2).unwrap(), 0.5);
        assert_eq!(ppo_clip_objective(&[1.5], &[2.0], 0.2).unwrap(), 2.4);
        assert_eq!(ppo_clip_objective(&[0.5], &[-1.0], 0.2).unwrap(), -0.8);
        assert!(ppo_clip_objective(&[0.0], &[1.0], 0.2).is_err());
    }

    #[test]
    fn value_loss_constant_prediction() {
        let vm = ValueModel::new(tiny(), 1).unwrap();
        let s = |ret: f64| Trajectory {
            task_id: "t".into(),
            prompt: vec![BOS],
            response: vec![65],
            truncated: false,
            logp_old: vec![0.0],
            logp_ref: vec![0.0],
            terminal_reward: 0.0,
            rewards: vec![0.0],
            values: vec![0.0],
            advantages: vec![0.0],
            returns: vec![ret],
        };
        // Zero head: prediction c = 0.
        let batch = TrajectoryBatch {
            samples: vec![s(0.0), s(2.0)],
        };
        assert_eq!(value_loss(&vm, &batch).unwrap(), 2.0);
        let mut vm1 = vm.clone();
        vm1.net.tensor_mut("output.bias").unwrap()[0] = 1.0;
        assert_eq!(value_loss(&vm1, &batch).unwrap(), 1.0);
        let exact = TrajectoryBatch { samples: vec![s(0.0)] };
        assert_eq!(value_loss(&vm, &exact).unwrap(), 0.0);
    }

    #[test]
    fn value_model_copies_policy_body() {
        let p = new_policy(tiny(), 8).unwrap();
        let vm = ValueModel::from_policy(&p, 1).unwrap();
        assert_eq!(vm.net.tensor("hidden2.weight"), p.tensor("hidden2.weight"));
        assert!(vm.values(&[BOS], &[1, 2, 3]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_estimate_examples() {
        assert_eq!(kl_estimate(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        assert!((kl_estimate(&[-1.0, -1.0], &[-2.0, -3.0]).unwrap() - 1.5).abs() < 1e-15);
        assert!(kl_estimate(&[0.0], &[]).is_err());
    }

    #[test]
    fn sampled_kl_recovers_two_point_divergence() {
        use rand::Rng;
        let p = [0.75, 0.25];
        let q = [0.5, 0.5];
        let exact = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let (mut lt, mut lr) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let i = usize::from(rng.gen::<f64>() >= p[0]);
            lt.push(f64::ln(p[i]));
            lr.push(f64::ln(q[i]));
        }
        let est = kl_estimate(&lt, &lr).unwrap();
        assert!((est - exact).abs() < 0.01, "{est} vs {exact}");
    }

    #[test]
    fn zero_steps_give_unit_ratios() {
        let p = new_policy(tiny(), 6).unwrap();
        let cfg = small_rollout_config();
        let mut batch = rollout(&p, &p, &prompts(), &cfg, 2).unwrap();
        shape_rewards(&mut batch, &Const(1.0), &cfg).unwrap();
        let vm = ValueModel::new(tiny(), 0).unwrap();
        compute_advantages(&mut batch, &vm, &cfg).unwrap();
        let (loss, clipped) = PpoPolicyObjective {
            samples: &batch.samples,
            epsilon: 0.2,
            direct_beta: None,
        }
        .evaluate(&p, None)
        .unwrap();
        let all: Vec<f64> = batch.samples.iter().flat_map(|s| s.advantages.clone()).collect();
        assert_eq!(clipped, 0.0);
        assert!((-loss - crate::linalg::mean(&all)).abs() < 1e-12);
    }

    #[test]
    fn training_moves_policy_toward_reward() {
        // Reward: 1 when the first response byte is 'x'.
        struct FirstX;
        impl RewardFn for FirstX {
            fn reward(&self, _: &str, _: &[TokenId], y: &[TokenId]) -> Result<f64> {
                Ok(f64::from(u8::from(y[0] == u32::from(b'x'))))
            }
        }
        let mut policy = new_policy(tiny(), 11).unwrap();
        // Start with a mild preference so rollouts see some rewards.
        policy.tensor_mut("output.bias").unwrap()[usize::from(b'x')] = 3.0;
        let reference = policy.clone();
        let mut vm = ValueModel::from_policy(&policy, 1).unwrap();
        let cfg = PpoConfig {
            rounds: 8,
            candidates_per_prompt: 8,
            learning_rate: 3e-2,
            value_learning_rate: 1e-2,
            max_response_tokens: 4,
            beta_kl: 0.01,
            ..PpoConfig::default()
        };
        let report = train_ppo(&mut policy, &reference, &mut vm, &FirstX, &prompts(), &cfg).unwrap();
        let first = report.rounds[0].mean_terminal_reward;
        let last = report.rounds.last().unwrap().mean_terminal_reward;
        assert!(last > first, "{first} -> {last}");
    }

    #[test]
    fn kl_ceiling_stops_training() {
        let reference = new_policy(tiny(), 12).unwrap();
        let mut policy = reference.clone();
        policy.tensor_mut("output.bias").unwrap()[usize::from(b'x')] = 40.0;
        let before = policy.clone();
        let mut vm = ValueModel::new(tiny(), 0).unwrap();
        let cfg = PpoConfig {
            rounds: 2,
            kl_ceiling: 1.0,
            max_response_tokens: 4,
            ..PpoConfig::default()
        };
        let err = train_ppo(&mut policy, &reference, &mut vm, &Const(1.0), &prompts(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(policy, before);
    }

    fn direct_gae(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        (0..deltas.len())
            .map(|t| {
                (t..deltas.len())
                    .map(|k| (gamma * lambda).powi((k - t) as i32) * deltas[k])
                    .sum()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gae_matches_double_sum(
            deltas in prop::collection::vec(-5.0f64..5.0, 0..=12),
            gamma in prop::sample::select(vec![0.9, 0.99, 1.0]),
            lambda in prop::sample::select(vec![0.0, 0.5, 0.95, 1.0]),
        ) {
            let fast = gae(&deltas, gamma, lambda);
            let slow = direct_gae(&deltas, gamma, lambda);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn clip_flat_outside_band(adv in 0.01f64..5.0, excess in 1e-3f64..3.0, eps in 0.05f64..0.5) {
            let hi = 1.0 + eps + excess;
            prop_assert_eq!(clip_ratio_derivative(hi, adv, eps), 0.0);
            prop_assert_eq!(clip_term(hi, adv, eps), clip_term(hi + 0.5, adv, eps));
            let lo = (1.0 - eps - excess).max(1e-6);
            if lo < 1.0 - eps {
                prop_assert_eq!(clip_ratio_derivative(lo, -adv, eps), 0.0);
                prop_assert_eq!(clip_term(lo, -adv, eps), clip_term(lo * 0.5, -adv, eps));
            }
        }

        #[test]
        fn shaping_sums_to_beta_times_kl(
            pairs in prop::collection::vec((-6.0f64..0.0, -6.0f64..0.0), 1..20),
            beta in 0.0f64..1.0,
        ) {
            let (lt, lr): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let n = lt.len();
            let mut batch = TrajectoryBatch { samples: vec![Trajectory {
                task_id: "t".into(),
                prompt: vec![BOS],
                response: vec![1; n],
                truncated: false,
                logp_old: lt.clone(),
                logp_ref: lr.clone(),
                terminal_reward: 0.0,
                rewards: vec![],
                values: vec![],
                advantages: vec![],
                returns: vec![],
            }]};
            let cfg = PpoConfig { beta_kl: beta, ..PpoConfig::default() };
            shape_rewards(&mut batch, &Const(0.0), &cfg).unwrap();
            let shaped: f64 = batch.samples[0].rewards.iter().sum();
            let kl_sum = kl_estimate(&lt, &lr).unwrap() * n as f64;
            prop_assert!((shaped + beta * kl_sum).abs() <= 1e-12);
        }

        #[test]
        fn normalization_keeps_advantage_order(advs in prop::collection::vec(-10.0f64..10.0, 2..30)) {
            let mut batch = TrajectoryBatch { samples: vec![Trajectory {
                task_id: "t".into(),
                prompt: vec![BOS],
                response: vec![1; advs.len()],
                truncated: false,
                logp_old: vec![],
                logp_ref: vec![],
                terminal_reward: 0.0,
                rewards: vec![],
                values: vec![],
                advantages: advs.clone(),
                returns: vec![],
            }]};
            normalize_advantages(&mut batch);
            let after = &batch.samples[0].advantages;
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&advs), argmax(after));
        }
    }
}
