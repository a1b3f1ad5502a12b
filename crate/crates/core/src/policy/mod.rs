//! The tiny autoregressive policy: a byte-level causal network with exact
//! gradients, sequence log-probabilities, seeded sampling and an optional
//! low-rank adapter on its two hidden transforms.

mod adapter;
mod checkpoint;
mod network;
mod vocab;

pub use adapter::{apply_adapter, AdapterConfig, LowRankAdapter};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_into, save_checkpoint, CheckpointKind,
    FORMAT_VERSION,
};
pub use network::{Activations, Head, ModelConfig, Network, TensorSpec};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, VOCAB_SIZE};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, softmax, Matrix};

/// The policy is a network with a vocabulary head.
pub type PolicyModel = Network;

/// Builds a policy with a vocabulary head.
pub fn new_policy(config: ModelConfig, seed: u64) -> Result<PolicyModel> {
    Network::new(config, Head::Vocab, seed)
}

/// `T × V` logits, one row per input position.
pub fn forward(model: &PolicyModel, tokens: &[TokenId]) -> Result<Matrix> {
    if model.head() != Head::Vocab {
        return Err(Error::Input("forward expects a vocabulary-head model".into()));
    }
    let act = model.forward(tokens)?;
    Ok(Matrix::from_vec(act.rows(), VOCAB_SIZE, act.output().to_vec()))
}

/// A forward pass whose rows are exactly the positions that predict
/// `targets` given `prompt`.
#[derive(Debug, Clone)]
pub struct TargetPass {
    pub act: Activations,
    pub targets: Vec<TokenId>,
    /// `log π(target_t | prefix)` per target token.
    pub log_probs: Vec<f64>,
}

impl TargetPass {
    pub fn new(
        model: &PolicyModel,
        prompt: &[TokenId],
        targets: &[TokenId],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must contain at least one token".into()));
        }
        if targets.is_empty() {
            return Err(Error::Input("target sequence is empty".into()));
        }
        let total = prompt.len() + targets.len();
        if total > model.config().context_window {
            return Err(Error::Input(format!(
                "prompt plus target ({total} tokens) exceeds context window {}",
                model.config().context_window
            )));
        }
        let mut tokens = Vec::with_capacity(total - 1);
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(&targets[..targets.len() - 1]);
        let act = model.forward_rows(&tokens, prompt.len() - 1, dropout)?;
        let log_probs = targets
            .iter()
            .enumerate()
            .map(|(r, &y)| log_softmax(act.output_row(r))[y as usize])
            .collect();
        Ok(TargetPass {
            act,
            targets: targets.to_vec(),
            log_probs,
        })
    }

    /// Output gradient for a loss whose derivative with respect to
    /// `log_probs[t]` is `weights[t]`.
    pub fn logprob_output_grad(&self, weights: &[f64]) -> Vec<f64> {
        let mut dout = vec![0.0; self.act.rows() * VOCAB_SIZE];
        for (r, (&y, &w)) in self.targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let p = softmax(self.act.output_row(r));
            let row = &mut dout[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
            for (g, pv) in row.iter_mut().zip(&p) {
                *g = -w * pv;
            }
            row[y as usize] += w;
        }
        dout
    }
}

/// Returns `(Σ log π(y_t | x, y_<t), per-token terms)`. Prompt positions
/// carry no terms; an empty `y` gives `(0, [])`.
pub fn sequence_logprob(model: &PolicyModel, x: &[TokenId], y: &[TokenId]) -> Result<(f64, Vec<f64>)> {
    if y.is_empty() {
        if x.len() > model.config().context_window {
            return Err(Error::Input("prompt exceeds the context window".into()));
        }
        return Ok((0.0, Vec::new()));
    }
    let pass = TargetPass::new(model, x, y, None)?;
    Ok((pass.log_probs.iter().sum(), pass.log_probs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax at every step; the zero-temperature limit.
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub decoding: Decoding,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Generated ids; ends with `EOS` when the model stopped on its own.
    pub tokens: Vec<TokenId>,
    /// True when generation hit `max_len` or the context window.
    pub truncated: bool,
}

pub fn sample(model: &PolicyModel, prompt: &[TokenId], options: SampleOptions, seed: u64) -> Result<Sample> {
    sample_with_rng(model, prompt, options, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_with_rng(
    model: &PolicyModel,
    prompt: &[TokenId],
    options: SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    if let Decoding::Temperature(t) = options.decoding {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Input(format!("sampling temperature must be positive, got {t}")));
        }
    }
    let ctx = model.config().context_window;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    loop {
        if out.len() >= options.max_len || seq.len() >= ctx {
            return Ok(Sample {
                tokens: out,
                truncated: true,
            });
        }
        let act = model.forward_rows(&seq, seq.len() - 1, None)?;
        let logits = act.output_row(0);
        let next = match options.decoding {
            Decoding::Greedy => argmax(logits),
            Decoding::Temperature(t) => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
                draw(&softmax(&scaled), rng.gen::<f64>())
            }
        };
        out.push(next);
        if next == EOS {
            return Ok(Sample {
                tokens: out,
                truncated: false,
            });
        }
        seq.push(next);
    }
}

fn argmax(xs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as TokenId
}

fn draw(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    // Rounding left a sliver above the last cumulative value.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
}

/// A scalar loss over a network's parameters, differentiable through the
/// primitives in this module.
pub trait Objective {
    /// Adds `∂loss/∂θ` into `grad` and returns the loss.
    fn accumulate(&self, model: &Network, grad: &mut [f64]) -> Result<f64>;

    fn value(&self, model: &Network) -> Result<f64> {
        let mut scratch = vec![0.0; model.parameter_count()];
        self.accumulate(model, &mut scratch)
    }
}

/// Evaluates `objective` and returns its loss and full gradient.
pub fn backprop(model: &Network, objective: &dyn Objective) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.parameter_count()];
    let loss = objective.accumulate(model, &mut grad)?;
    if !loss.is_finite() {
        return Err(Error::numeric("loss"));
    }
    Ok((loss, grad))
}

/// A loss that ignores the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConstantObjective(pub f64);

impl Objective for ConstantObjective {
    fn accumulate(&self, _model: &Network, _grad: &mut [f64]) -> Result<f64> {
        Ok(self.0)
    }
}

/// `½‖θ‖²` over the trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct HalfSquaredNorm;

impl Objective for HalfSquaredNorm {
    fn accumulate(&self, model: &Network, grad: &mut [f64]) -> Result<f64> {
        let mut loss = 0.0;
        for ((g, &p), trainable) in grad.iter_mut().zip(model.parameters()).zip(model.trainable_mask()) {
            if trainable {
                loss += 0.5 * p * p;
                *g += p;
            }
        }
        Ok(loss)
    }
}
