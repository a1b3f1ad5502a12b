//! Bradley-Terry reward model: a scalar-head network scoring a response
//! in the context of its prompt, trained on judged preference pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PreferencePair, RepairTask};
use crate::error::{Error, Result};
use crate::format::{encode_prompt, encode_response};
use crate::linalg::{log_sigmoid, sigmoid};
use crate::policy::{Head, ModelConfig, Network, Objective, TokenId};
use crate::sft::{adamw_step, AdamState};

/// `R(x, y)`: the scalar output at the last position of `x ⊕ y`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: Network,
}

impl RewardModel {
    /// Scalar head starts at zero, so every score starts at 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(RewardModel {
            net: Network::new(config, Head::Scalar, seed)?,
        })
    }

    /// Starts from the embedding and hidden layers of a policy.
    pub fn from_policy(policy: &Network, seed: u64) -> Result<Self> {
        Ok(RewardModel {
            net: policy.scalar_from_body(seed)?,
        })
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.head() != Head::Scalar {
            return Err(Error::Input("reward model needs a scalar head".into()));
        }
        Ok(RewardModel { net })
    }
}

fn joined(x: &[TokenId], y: &[TokenId], ctx: usize) -> Result<Vec<TokenId>> {
    if x.len() + y.len() > ctx {
        return Err(Error::Input(format!(
            "prompt plus response ({} tokens) exceeds context window {ctx}",
            x.len() + y.len()
        )));
    }
    if x.is_empty() && y.is_empty() {
        return Err(Error::Input("cannot score an empty sequence".into()));
    }
    let mut seq = Vec::with_capacity(x.len() + y.len());
    seq.extend_from_slice(x);
    seq.extend_from_slice(y);
    Ok(seq)
}

pub fn reward_score(rm: &RewardModel, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    score(&rm.net, x, y)
}

fn score(net: &Network, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    let seq = joined(x, y, net.config().context_window)?;
    let act = net.forward_rows(&seq, seq.len() - 1, None)?;
    Ok(act.output_row(0)[0])
}

/// Adds `weight · ∂R(x, y)/∂θ` into `grad` and returns `R(x, y)`.
pub fn reward_score_grad(rm: &RewardModel, x: &[TokenId], y: &[TokenId], weight: f64, grad: &mut [f64]) -> Result<f64> {
    score_grad(&rm.net, x, y, weight, grad)
}

fn score_grad(net: &Network, x: &[TokenId], y: &[TokenId], weight: f64, grad: &mut [f64]) -> Result<f64> {
    let seq = joined(x, y, net.config().context_window)?;
    let act = net.forward_rows(&seq, seq.len() - 1, None)?;
    net.backward_into(&act, &[weight], grad)?;
    Ok(act.output_row(0)[0])
}

/// `σ(score_a − score_b)`.
pub fn pref_prob(score_a: f64, score_b: f64) -> f64 {
    sigmoid(score_a - score_b)
}

/// Negative log-likelihood of one observed label given scores.
pub fn pair_nll(score_a: f64, score_b: f64, label: f64) -> f64 {
    let d = score_a - score_b;
    -(label * log_sigmoid(d) + (1.0 - label) * log_sigmoid(-d))
}

/// A judged pair with prompt and both responses encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub task_id: String,
    pub prompt: Vec<TokenId>,
    pub a: Vec<TokenId>,
    pub b: Vec<TokenId>,
    /// 1 when `a` is preferred.
    pub label: f64,
}

impl PairExample {
    pub fn new(task: &RepairTask, pair: &PreferencePair, max_prompt_tokens: usize) -> Self {
        PairExample {
            task_id: pair.task_id.clone(),
            prompt: encode_prompt(task, max_prompt_tokens),
            a: encode_response(&pair.candidate_a),
            b: encode_response(&pair.candidate_b),
            label: f64::from(pair.label),
        }
    }

    pub fn fits(&self, context_window: usize) -> bool {
        self.prompt.len() + self.a.len().max(self.b.len()) <= context_window
    }
}

/// Mean pair NLL over a batch.
pub struct RmObjective<'a> {
    pub pairs: &'a [PairExample],
}

impl Objective for RmObjective<'_> {
    fn accumulate(&self, model: &Network, grad: &mut [f64]) -> Result<f64> {
        if self.pairs.is_empty() {
            return Err(Error::Input("empty preference batch".into()));
        }
        if model.head() != Head::Scalar {
            return Err(Error::Input("reward objective needs a scalar head".into()));
        }
        let n = self.pairs.len() as f64;
        let mut loss = 0.0;
        for p in self.pairs {
            let ra = score(model, &p.prompt, &p.a)?;
            let rb = score(model, &p.prompt, &p.b)?;
            let l = pair_nll(ra, rb, p.label);
            if !l.is_finite() {
                return Err(Error::numeric("rm_loss"));
            }
            loss += l / n;
            // ∂l/∂(ra − rb) = σ(ra − rb) − label
            let g = (pref_prob(ra, rb) - p.label) / n;
            score_grad(model, &p.prompt, &p.a, g, grad)?;
            score_grad(model, &p.prompt, &p.b, -g, grad)?;
        }
        Ok(loss)
    }
}

pub fn rm_loss(rm: &RewardModel, batch: &[PairExample]) -> Result<f64> {
    RmObjective { pairs: batch }.value(&rm.net)
}

/// Share of pairs where the score order agrees with the label; exact ties
/// count one half.
pub fn pairwise_accuracy(rm: &RewardModel, pairs: &[PairExample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to score".into()));
    }
    let mut hits = 0.0;
    for p in pairs {
        let d = reward_score(rm, &p.prompt, &p.a)? - reward_score(rm, &p.prompt, &p.b)?;
        hits += if d == 0.0 {
            0.5
        } else if (d > 0.0) == (p.label > 0.5) {
            1.0
        } else {
            0.0
        };
    }
    Ok(hits / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub grad_accum_steps: usize,
    pub weight_decay: f64,
    /// Share of pairs held out for accuracy.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            learning_rate: 5e-5,
            epochs: 3,
            micro_batch: 4,
            grad_accum_steps: 4,
            weight_decay: 0.0,
            heldout_fraction: 0.2,
            seed: crate::corpus::DEFAULT_SEED,
        }
    }
}

impl RmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Configuration("reward learning_rate must be positive".into()));
        }
        if self.micro_batch == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Configuration(
                "micro_batch and grad_accum_steps must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Configuration("heldout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub epochs: Vec<RmEpoch>,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    /// `None` when nothing was held out.
    pub heldout_accuracy: Option<f64>,
    pub skipped: usize,
}

/// Splits off a seeded held-out share, trains with AdamW at a constant
/// learning rate, and reports held-out accuracy.
pub fn train_reward_model(rm: &mut RewardModel, pairs: &[PairExample], config: &RmConfig) -> Result<RmReport> {
    config.validate()?;
    let ctx = rm.net.config().context_window;
    let usable: Vec<&PairExample> = pairs.iter().filter(|p| p.fits(ctx)).collect();
    let skipped = pairs.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Input("no preference pairs fit the context window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let n_held = (usable.len() as f64 * config.heldout_fraction).round() as usize;
    let n_held = n_held.min(usable.len() - 1);
    let (held_idx, train_idx) = order.split_at(n_held);
    let held: Vec<PairExample> = held_idx.iter().map(|&i| usable[i].clone()).collect();
    let mut train: Vec<PairExample> = train_idx.iter().map(|&i| usable[i].clone()).collect();

    let mask = rm.net.trainable_mask();
    let mut state = AdamState::new(rm.net.parameter_count());
    let eff = config.micro_batch * config.grad_accum_steps;
    let mut epochs = Vec::new();
    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(eff) {
            let snapshot = rm.net.parameters().to_vec();
            let step = (|| {
                let mut grad = vec![0.0; rm.net.parameter_count()];
                let mut loss = 0.0;
                for micro in batch.chunks(config.micro_batch) {
                    let w = micro.len() as f64 / batch.len() as f64;
                    let mut g = vec![0.0; grad.len()];
                    loss += RmObjective { pairs: micro }.accumulate(&rm.net, &mut g)? * w;
                    grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * w);
                }
                adamw_step(
                    rm.net.parameters_mut(),
                    &grad,
                    &mut state,
                    config.learning_rate,
                    config.weight_decay,
                    Some(&mask),
                )?;
                if !rm.net.is_finite() {
                    return Err(Error::numeric("parameters"));
                }
                Ok(loss)
            })();
            match step {
                Ok(l) => total += l * batch.len() as f64,
                Err(e) => {
                    rm.net.set_parameters(&snapshot)?;
                    return Err(Error::Training(format!("reward model diverged in epoch {epoch}: {e}")));
                }
            }
        }
        epochs.push(RmEpoch {
            epoch,
            train_loss: total / train.len() as f64,
        });
    }
    let heldout_accuracy = if held.is_empty() {
        None
    } else {
        Some(pairwise_accuracy(rm, &held)?)
    };
    Ok(RmReport {
        epochs,
        train_pairs: train.len(),
        heldout_pairs: held.len(),
        heldout_accuracy,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Vocabulary, BOS};
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            window: 6,
            hidden1: 8,
            hidden2: 8,
            context_window: 64,
            adapter: None,
        }
    }

    fn pair(a: &str, b: &str, label: f64) -> PairExample {
        PairExample {
            task_id: "t".into(),
            prompt: vec![BOS],
            a: Vocabulary.encode(a),
            b: Vocabulary.encode(b),
            label,
        }
    }

    #[test]
    fn zero_head_scores_zero_and_is_deterministic() {
        let rm = RewardModel::new(tiny(), 3).unwrap();
        let y = Vocabulary.encode("echo 1");
        assert_eq!(reward_score(&rm, &[BOS], &y).unwrap(), 0.0);
        assert_eq!(rm_loss(&rm, &[pair("a", "b", 1.0)]).unwrap(), std::f64::consts::LN_2);
        let mut rm2 = rm.clone();
        rm2.net.parameters_mut().iter_mut().for_each(|p| *p += 0.01);
        let s1 = reward_score(&rm2, &[BOS], &y).unwrap();
        assert_eq!(s1, reward_score(&rm2, &[BOS], &y).unwrap());
        assert_ne!(s1, 0.0);
    }

    #[test]
    fn overflow_is_an_input_error() {
        let rm = RewardModel::new(tiny(), 3).unwrap();
        let y = vec![65; 64];
        assert!(matches!(reward_score(&rm, &[BOS], &y), Err(Error::Input(_))));
    }

    #[test]
    fn pref_prob_values() {
        assert_eq!(pref_prob(1.3, 1.3), 0.5);
        assert!((pref_prob(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        assert!((pref_prob(0.3, -1.1) + pref_prob(-1.1, 0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nll_limits() {
        assert!(pair_nll(40.0, 0.0, 1.0) < 1e-15);
        assert_eq!(pair_nll(2.0, 2.0, 1.0), std::f64::consts::LN_2);
        assert_eq!(pair_nll(2.0, 2.0, 0.0), std::f64::consts::LN_2);
    }

    proptest! {
        #[test]
        fn nll_shift_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -50.0f64..50.0, p in 0u8..2) {
            let p = f64::from(p);
            prop_assert!((pair_nll(a, b, p) - pair_nll(a + c, b + c, p)).abs() < 1e-12);
        }

        #[test]
        fn nll_decreasing_in_margin(m in -30.0f64..30.0, step in 0.01f64..5.0) {
            prop_assert!(pair_nll(m + step, 0.0, 1.0) < pair_nll(m, 0.0, 1.0));
        }

        #[test]
        fn preference_direction_survives_affine_maps(a in -10.0f64..10.0, b in -10.0f64..10.0, s in 0.01f64..10.0, t in -10.0f64..10.0) {
            prop_assume!((a - b).abs() > 1e-6);
            prop_assert_eq!(pref_prob(a, b) > 0.5, pref_prob(s * a + t, s * b + t) > 0.5);
        }
    }

    #[test]
    fn accuracy_flips_with_labels() {
        let mut rm = RewardModel::new(tiny(), 5).unwrap();
        rm.net
            .parameters_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p += 0.05 * ((i * 7919) % 13) as f64 / 13.0);
        let pairs: Vec<PairExample> = (0..20)
            .map(|i| pair(&format!("x{i}"), &format!("y{}", i * 3), (i % 2) as f64))
            .collect();
        let flipped: Vec<PairExample> = pairs
            .iter()
            .map(|p| PairExample {
                label: 1.0 - p.label,
                ..p.clone()
            })
            .collect();
        let a = pairwise_accuracy(&rm, &pairs).unwrap();
        let b = pairwise_accuracy(&rm, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_count_half() {
        let rm = RewardModel::new(tiny(), 5).unwrap();
        assert_eq!(
            pairwise_accuracy(&rm, &[pair("a", "b", 1.0), pair("c", "d", 0.0)]).unwrap(),
            0.5
        );
    }
}
