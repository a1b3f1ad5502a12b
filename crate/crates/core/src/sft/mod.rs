//! Supervised fine-tuning on verified reasoning traces, the direct-output
//! ablation, the optional distillation loss, and the optimizer machinery
//! reused by the reward and PPO stages.

mod optim;

pub use optim::{adamw_step, lr_schedule, AdamState, BETA1, BETA2, EPSILON};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ReasoningExample, RepairTask};
use crate::error::{Error, Result};
use crate::format::{encode_prompt, encode_response, format_response};
use crate::linalg::{log_softmax, softmax};
use crate::policy::{Network, Objective, PolicyModel, TargetPass, TokenId, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftMode {
    /// Targets are reasoning followed by code.
    Trace,
    /// Targets are the code alone.
    DirectOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub alpha: f64,
    pub temperature_tau: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: 0.5,
            temperature_tau: 2.0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.temperature_tau > 0.0) {
            return Err(Error::Configuration(format!("invalid distillation settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Length of the cosine schedule; 0 means "epochs × batches per epoch".
    pub total_steps: usize,
    pub micro_batch: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    pub mode: SftMode,
    pub seed: u64,
    /// Adds the distillation term when a teacher network is supplied.
    pub kd: Option<KdConfig>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            learning_rate: 1e-5,
            weight_decay: 0.01,
            warmup_steps: 0,
            total_steps: 0,
            micro_batch: 1,
            grad_accum_steps: 8,
            epochs: 3,
            mode: SftMode::Trace,
            seed: crate::corpus::DEFAULT_SEED,
            kd: None,
        }
    }
}

impl SftConfig {
    /// The large-scale recipe: lr 5e-6, 4 sequences × 8 accumulation steps.
    pub fn reference_recipe() -> Self {
        SftConfig {
            learning_rate: 5e-6,
            micro_batch: 4,
            grad_accum_steps: 8,
            ..SftConfig::default()
        }
    }

    /// Same as the default with five passes over the data.
    pub fn five_epochs() -> Self {
        SftConfig {
            epochs: 5,
            ..SftConfig::default()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Configuration("learning_rate must be positive".into()));
        }
        if self.grad_accum_steps == 0 || self.micro_batch == 0 {
            return Err(Error::Configuration(
                "micro_batch and grad_accum_steps must be at least 1".into(),
            ));
        }
        if self.total_steps != 0 && self.warmup_steps > self.total_steps {
            return Err(Error::Configuration("warmup_steps exceeds total_steps".into()));
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        lr_schedule(step, self.learning_rate, self.warmup_steps, total_steps)
    }
}

/// A training triple with its prompt already encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub task_id: String,
    pub prompt: Vec<TokenId>,
    pub reasoning: String,
    pub solution: String,
}

impl SftExample {
    pub fn new(task: &RepairTask, example: &ReasoningExample, max_prompt_tokens: usize) -> Self {
        SftExample {
            task_id: task.id.clone(),
            prompt: encode_prompt(task, max_prompt_tokens),
            reasoning: example.reasoning.clone(),
            solution: example.solution.clone(),
        }
    }

    /// Target ids for `mode`, ending with `EOS`.
    pub fn target(&self, mode: SftMode) -> Vec<TokenId> {
        match mode {
            SftMode::Trace => encode_response(&format_response(&self.reasoning, &self.solution)),
            SftMode::DirectOutput => encode_response(&format_response("", &self.solution)),
        }
    }

    pub fn fits(&self, mode: SftMode, context_window: usize) -> bool {
        self.prompt.len() + self.target(mode).len() <= context_window
    }
}

/// `−log P(r ⊕ ŷ | x)`; the prompt contributes no terms.
pub fn sft_loss(model: &PolicyModel, example: &SftExample) -> Result<f64> {
    let pass = TargetPass::new(model, &example.prompt, &example.target(SftMode::Trace), None)?;
    Ok(-pass.log_probs.iter().sum::<f64>())
}

/// `−log P(ŷ | x)` with the reasoning removed from input and target.
pub fn direct_output_loss(model: &PolicyModel, example: &SftExample) -> Result<f64> {
    let pass = TargetPass::new(model, &example.prompt, &example.target(SftMode::DirectOutput), None)?;
    Ok(-pass.log_probs.iter().sum::<f64>())
}

/// Distillation loss for one position and its gradient with respect to the
/// student logits:
/// `α·CE(label, softmax(s)) + (1−α)·τ²·KL(softmax(t/τ) ‖ softmax(s/τ))`.
pub fn kd_loss_and_grad(student: &[f64], teacher: &[f64], label: usize, config: &KdConfig) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() || label >= student.len() {
        return Err(Error::Input(
            "distillation logits differ in length or label is out of range".into(),
        ));
    }
    let (alpha, tau) = (config.alpha, config.temperature_tau);
    let ls = log_softmax(student);
    let ce = -ls[label];
    let lt_tau = log_softmax(&teacher.iter().map(|v| v / tau).collect::<Vec<_>>());
    let ls_tau = log_softmax(&student.iter().map(|v| v / tau).collect::<Vec<_>>());
    let kl: f64 = lt_tau
        .iter()
        .zip(&ls_tau)
        .map(|(lp, lq)| {
            if *lp == f64::NEG_INFINITY {
                0.0
            } else {
                lp.exp() * (lp - lq)
            }
        })
        .sum();
    let loss = alpha * ce + (1.0 - alpha) * tau * tau * kl;
    if !loss.is_finite() {
        return Err(Error::numeric("kd_loss"));
    }
    let p = softmax(student);
    let grad = (0..student.len())
        .map(|i| {
            let onehot = if i == label { 1.0 } else { 0.0 };
            alpha * (p[i] - onehot) + (1.0 - alpha) * tau * (ls_tau[i].exp() - lt_tau[i].exp())
        })
        .collect();
    Ok((loss, grad))
}

pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64], true_label: usize, config: &KdConfig) -> Result<f64> {
    kd_loss_and_grad(student_logits, teacher_logits, true_label, config).map(|(l, _)| l)
}

/// Mean per-example loss over a batch.
pub struct SftObjective<'a> {
    pub examples: &'a [SftExample],
    pub mode: SftMode,
    /// Optional distillation teacher with its settings.
    pub kd: Option<(&'a Network, &'a KdConfig)>,
}

impl SftObjective<'_> {
    fn accumulate_with(&self, model: &Network, grad: &mut [f64], mut dropout: Option<&mut ChaCha8Rng>) -> Result<f64> {
        if self.examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let scale = 1.0 / self.examples.len() as f64;
        let mut total = 0.0;
        for ex in self.examples {
            let target = ex.target(self.mode);
            let pass = TargetPass::new(model, &ex.prompt, &target, dropout.as_deref_mut())?;
            let dout = match self.kd {
                None => {
                    total += -pass.log_probs.iter().sum::<f64>() * scale;
                    pass.logprob_output_grad(&vec![-scale; target.len()])
                }
                Some((teacher, cfg)) => {
                    let tpass = TargetPass::new(teacher, &ex.prompt, &target, None)?;
                    let mut dout = vec![0.0; pass.act.rows() * VOCAB_SIZE];
                    for (r, &y) in target.iter().enumerate() {
                        let (l, g) =
                            kd_loss_and_grad(pass.act.output_row(r), tpass.act.output_row(r), y as usize, cfg)?;
                        total += l * scale;
                        for (d, gv) in dout[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE].iter_mut().zip(g) {
                            *d = gv * scale;
                        }
                    }
                    dout
                }
            };
            model.backward_into(&pass.act, &dout, grad)?;
        }
        Ok(total)
    }
}

impl Objective for SftObjective<'_> {
    fn accumulate(&self, model: &Network, grad: &mut [f64]) -> Result<f64> {
        self.accumulate_with(model, grad, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mode: SftMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub history: Vec<LossRecord>,
    pub epoch_mean_loss: Vec<f64>,
    /// Examples dropped because they do not fit the context window.
    pub skipped: usize,
}

/// Computes one optimizer step's gradient over `batch`, split into
/// micro-batches of `micro_batch` examples. The result is the gradient of
/// the batch-mean loss regardless of the split.
pub fn accumulated_gradient(
    model: &PolicyModel,
    batch: &[SftExample],
    micro_batch: usize,
    mode: SftMode,
    kd: Option<(&Network, &KdConfig)>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.parameter_count()];
    let mut loss = 0.0;
    for chunk in batch.chunks(micro_batch.max(1)) {
        let mut g = vec![0.0; grad.len()];
        let obj = SftObjective {
            examples: chunk,
            mode,
            kd,
        };
        let l = obj.accumulate_with(model, &mut g, dropout.as_deref_mut())?;
        let w = chunk.len() as f64 / batch.len() as f64;
        loss += l * w;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b * w;
        }
    }
    Ok((loss, grad))
}

/// Runs `epochs` shuffled passes over `data`. On divergence the model is
/// restored to its last finite parameters and an error is returned.
pub fn train_sft(
    model: &mut PolicyModel,
    data: &[SftExample],
    config: &SftConfig,
    teacher: Option<&PolicyModel>,
) -> Result<SftReport> {
    config.validate()?;
    let ctx = model.config().context_window;
    let usable: Vec<SftExample> = data.iter().filter(|e| e.fits(config.mode, ctx)).cloned().collect();
    let skipped = data.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Input("no training examples fit the context window".into()));
    }
    let kd = match (teacher, config.kd.as_ref()) {
        (Some(t), Some(cfg)) => Some((t, cfg)),
        _ => None,
    };
    let eff = config.effective_batch();
    let steps_per_epoch = usable.len().div_ceil(eff);
    let total = if config.total_steps > 0 {
        config.total_steps
    } else {
        steps_per_epoch * config.epochs
    };
    let mask = model.trainable_mask();
    let mut state = AdamState::new(model.parameter_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let uses_dropout = model.config().adapter.as_ref().is_some_and(|a| a.dropout > 0.0);

    let mut history = Vec::new();
    let mut epoch_mean_loss = Vec::new();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        for idx in order.chunks(eff) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<SftExample> = idx.iter().map(|&i| usable[i].clone()).collect();
            let snapshot = model.parameters().to_vec();
            let lr = config.lr_at(step, total);
            let result = accumulated_gradient(
                model,
                &batch,
                config.micro_batch,
                config.mode,
                kd,
                uses_dropout.then_some(&mut dropout_rng),
            )
            .and_then(|(loss, grad)| {
                if !loss.is_finite() {
                    return Err(Error::numeric("loss"));
                }
                adamw_step(
                    model.parameters_mut(),
                    &grad,
                    &mut state,
                    lr,
                    config.weight_decay,
                    Some(&mask),
                )?;
                if !model.is_finite() {
                    return Err(Error::numeric("parameters"));
                }
                Ok(loss)
            });
            let loss = match result {
                Ok(l) => l,
                Err(e) => {
                    model.set_parameters(&snapshot)?;
                    return Err(Error::Training(format!("diverged at step {step}: {e}")));
                }
            };
            history.push(LossRecord {
                step,
                lr,
                loss,
                mode: config.mode,
            });
            epoch_loss += loss * batch.len() as f64;
            epoch_count += batch.len();
            step += 1;
        }
        if epoch_count > 0 {
            epoch_mean_loss.push(epoch_loss / epoch_count as f64);
        }
    }
    Ok(SftReport {
        history,
        epoch_mean_loss,
        skipped,
    })
}
