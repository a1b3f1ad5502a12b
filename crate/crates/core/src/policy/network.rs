//! The causal byte-level network shared by the policy, reward and value
//! models.
//!
//! Row `t` of the output reads the last `window` token embeddings ending at
//! position `t` together with the running mean of all embeddings up to `t`,
//! then applies two `tanh` layers and a linear head. Row `t` therefore never
//! depends on tokens after `t`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{effective_weight_into, AdapterConfig};
use super::vocab::{TokenId, PAD, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::linalg::{affine, axpy, dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One logit per vocabulary entry.
    Vocab,
    /// One real number per position.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub context_window: usize,
    pub adapter: Option<AdapterConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 8,
            window: 48,
            hidden1: 64,
            hidden2: 64,
            context_window: 256,
            adapter: None,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.window * self.embed_dim + self.embed_dim
    }

    fn validate(&self) -> Result<()> {
        if [
            self.embed_dim,
            self.window,
            self.hidden1,
            self.hidden2,
            self.context_window,
        ]
        .contains(&0)
        {
            return Err(Error::Configuration(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
    #[serde(skip)]
    pub trainable: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Lora {
    a1: usize,
    b1: usize,
    a2: usize,
    b2: usize,
    rank: usize,
    scale: f64,
    dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wo: usize,
    bo: usize,
    lora: Option<Lora>,
}

/// Parameters plus the named-shape registry that describes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    head: Head,
    registry: Vec<TensorSpec>,
    params: Vec<f64>,
    layout: Layout,
}

/// Cached intermediates of a forward pass over rows `start..tokens.len()`.
#[derive(Debug, Clone)]
pub struct Activations {
    start: usize,
    tokens: Vec<TokenId>,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    output: Vec<f64>,
    out_dim: usize,
    adapted: Option<AdaptedWeights>,
}

#[derive(Debug, Clone)]
struct AdaptedWeights {
    w1: Vec<f64>,
    w2: Vec<f64>,
    col_scale1: Vec<f64>,
    col_scale2: Vec<f64>,
}

impl Activations {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn rows(&self) -> usize {
        self.tokens.len() - self.start
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Output row `r`, which belongs to absolute position `start + r`.
    pub fn output_row(&self, r: usize) -> &[f64] {
        &self.output[r * self.out_dim..(r + 1) * self.out_dim]
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out {
        *v = rng.gen_range(-a..a);
    }
}

impl Network {
    pub fn new(config: ModelConfig, head: Head, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let input = config.input_dim();
        let (h1, h2) = (config.hidden1, config.hidden2);
        let out = match head {
            Head::Vocab => VOCAB_SIZE,
            Head::Scalar => 1,
        };
        let base_trainable = config.adapter.is_none();

        let mut registry = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, trainable: bool| {
            registry.push(TensorSpec {
                name: name.to_owned(),
                shape,
                offset: 0,
                trainable,
            });
            registry.len() - 1
        };
        let emb = push("embedding", vec![VOCAB_SIZE, d], base_trainable);
        let w1 = push("hidden1.weight", vec![h1, input], base_trainable);
        let b1 = push("hidden1.bias", vec![h1], base_trainable);
        let w2 = push("hidden2.weight", vec![h2, h1], base_trainable);
        let b2 = push("hidden2.bias", vec![h2], base_trainable);
        let wo = push("output.weight", vec![out, h2], base_trainable);
        let bo = push("output.bias", vec![out], base_trainable);
        let lora = config.adapter.as_ref().map(|a| Lora {
            a1: push("hidden1.lora_a", vec![a.rank, input], true),
            b1: push("hidden1.lora_b", vec![h1, a.rank], true),
            a2: push("hidden2.lora_a", vec![a.rank, h1], true),
            b2: push("hidden2.lora_b", vec![h2, a.rank], true),
            rank: a.rank,
            scale: a.scale(),
            dropout: a.dropout,
        });
        let mut offset = 0;
        for spec in &mut registry {
            spec.offset = offset;
            offset += spec.len();
        }

        let mut net = Network {
            config,
            head,
            registry,
            params: vec![0.0; offset],
            layout: Layout {
                emb,
                w1,
                b1,
                w2,
                b2,
                wo,
                bo,
                lora,
            },
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = net.registry[emb].range();
        for v in &mut net.params[r] {
            *v = rng.gen_range(-0.8..0.8);
        }
        let r = net.registry[w1].range();
        xavier(&mut rng, input, h1, &mut net.params[r]);
        let r = net.registry[w2].range();
        xavier(&mut rng, h1, h2, &mut net.params[r]);
        if head == Head::Vocab {
            let r = net.registry[wo].range();
            xavier(&mut rng, h2, out, &mut net.params[r]);
        }
        if let Some(l) = lora {
            let a = 1.0 / (input as f64).sqrt();
            let r = net.registry[l.a1].range();
            for v in &mut net.params[r] {
                *v = rng.gen_range(-a..a);
            }
            let a = 1.0 / (h1 as f64).sqrt();
            let r = net.registry[l.a2].range();
            for v in &mut net.params[r] {
                *v = rng.gen_range(-a..a);
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            Head::Vocab => VOCAB_SIZE,
            Head::Scalar => 1,
        }
    }

    pub fn registry(&self) -> &[TensorSpec] {
        &self.registry
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Per-element flag: true when the optimizer may change the entry.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for spec in &self.registry {
            if spec.trainable {
                mask[spec.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.registry
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.registry.iter().find(|s| s.name == name)?.range();
        Some(&mut self.params[range])
    }

    /// Replaces all parameters; lengths must agree.
    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "parameter vector has {} entries, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// A scalar-head network carrying this network's embedding and hidden
    /// layers, with any adapter folded into the hidden weights. The head
    /// starts at zero and every tensor is trainable.
    pub fn scalar_from_body(&self, seed: u64) -> Result<Network> {
        let config = ModelConfig {
            adapter: None,
            ..self.config.clone()
        };
        let mut out = Network::new(config, Head::Scalar, seed)?;
        let adapted = self.adapted_weights(None);
        let layout = out.layout;
        let w1 = adapted.as_ref().map_or(self.t(self.layout.w1), |a| &a.w1[..]);
        let w2 = adapted.as_ref().map_or(self.t(self.layout.w2), |a| &a.w2[..]);
        for (idx, src) in [
            (layout.emb, self.t(self.layout.emb)),
            (layout.w1, w1),
            (layout.b1, self.t(self.layout.b1)),
            (layout.w2, w2),
            (layout.b2, self.t(self.layout.b2)),
        ] {
            let r = out.registry[idx].range();
            out.params[r].copy_from_slice(src);
        }
        Ok(out)
    }

    fn t(&self, idx: usize) -> &[f64] {
        &self.params[self.registry[idx].range()]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_window {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds context window {}",
                tokens.len(),
                self.config.context_window
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Input(format!("token id {bad} is outside the vocabulary")));
        }
        Ok(())
    }

    fn adapted_weights(&self, dropout: Option<&mut ChaCha8Rng>) -> Option<AdaptedWeights> {
        let l = self.layout.lora?;
        let input = self.config.input_dim();
        let (h1, h2) = (self.config.hidden1, self.config.hidden2);
        let scales = |n: usize, rng: &mut Option<&mut ChaCha8Rng>| -> Vec<f64> {
            match rng {
                Some(rng) if l.dropout > 0.0 => (0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < l.dropout {
                            0.0
                        } else {
                            1.0 / (1.0 - l.dropout)
                        }
                    })
                    .collect(),
                _ => vec![1.0; n],
            }
        };
        let mut dropout = dropout;
        let col_scale1 = scales(input, &mut dropout);
        let col_scale2 = scales(h1, &mut dropout);
        let mut w1 = vec![0.0; h1 * input];
        effective_weight_into(
            self.t(self.layout.w1),
            self.t(l.a1),
            self.t(l.b1),
            h1,
            input,
            l.rank,
            l.scale,
            &col_scale1,
            &mut w1,
        );
        let mut w2 = vec![0.0; h2 * h1];
        effective_weight_into(
            self.t(self.layout.w2),
            self.t(l.a2),
            self.t(l.b2),
            h2,
            h1,
            l.rank,
            l.scale,
            &col_scale2,
            &mut w2,
        );
        Some(AdaptedWeights {
            w1,
            w2,
            col_scale1,
            col_scale2,
        })
    }

    /// Full forward pass: one output row per token.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Activations> {
        self.forward_rows(tokens, 0, None)
    }

    /// Forward pass computing only rows `start..tokens.len()`. Passing a
    /// random source switches adapter dropout on (training mode).
    pub fn forward_rows(
        &self,
        tokens: &[TokenId],
        start: usize,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Activations> {
        self.check_tokens(tokens)?;
        if start >= tokens.len() {
            return Err(Error::Input(format!(
                "first output row {start} is past the sequence end {}",
                tokens.len()
            )));
        }
        let cfg = &self.config;
        let (d, win, input_dim) = (cfg.embed_dim, cfg.window, cfg.input_dim());
        let (h1n, h2n, out_dim) = (cfg.hidden1, cfg.hidden2, self.out_dim());
        let rows = tokens.len() - start;
        let emb = self.t(self.layout.emb);
        let adapted = self.adapted_weights(dropout);
        let w1 = adapted.as_ref().map_or(self.t(self.layout.w1), |a| &a.w1[..]);
        let w2 = adapted.as_ref().map_or(self.t(self.layout.w2), |a| &a.w2[..]);
        let (b1, b2) = (self.t(self.layout.b1), self.t(self.layout.b2));
        let (wo, bo) = (self.t(self.layout.wo), self.t(self.layout.bo));

        let mut input = vec![0.0; rows * input_dim];
        let mut h1 = vec![0.0; rows * h1n];
        let mut h2 = vec![0.0; rows * h2n];
        let mut output = vec![0.0; rows * out_dim];

        let mut running = vec![0.0; d];
        for tok in &tokens[..start] {
            axpy(1.0, &emb[*tok as usize * d..(*tok as usize + 1) * d], &mut running);
        }
        for r in 0..rows {
            let pos = start + r;
            let tok = tokens[pos] as usize;
            axpy(1.0, &emb[tok * d..(tok + 1) * d], &mut running);
            let u = &mut input[r * input_dim..(r + 1) * input_dim];
            for k in 0..win {
                let t = if pos >= k {
                    tokens[pos - k] as usize
                } else {
                    PAD as usize
                };
                u[k * d..(k + 1) * d].copy_from_slice(&emb[t * d..(t + 1) * d]);
            }
            let inv = 1.0 / (pos + 1) as f64;
            for (dst, s) in u[win * d..].iter_mut().zip(&running) {
                *dst = s * inv;
            }
            let a1 = &mut h1[r * h1n..(r + 1) * h1n];
            affine(w1, b1, u, a1);
            a1.iter_mut().for_each(|v| *v = v.tanh());
            let a2 = &mut h2[r * h2n..(r + 1) * h2n];
            affine(w2, b2, &h1[r * h1n..(r + 1) * h1n], a2);
            a2.iter_mut().for_each(|v| *v = v.tanh());
            affine(
                wo,
                bo,
                &h2[r * h2n..(r + 1) * h2n],
                &mut output[r * out_dim..(r + 1) * out_dim],
            );
        }
        for (name, buf) in [
            ("input", &input),
            ("hidden1", &h1),
            ("hidden2", &h2),
            ("output", &output),
        ] {
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(name));
            }
        }
        Ok(Activations {
            start,
            tokens: tokens.to_vec(),
            input,
            h1,
            h2,
            output,
            out_dim,
            adapted,
        })
    }

    /// Adds the gradient of `Σ dout · output` with respect to every
    /// parameter into `grad`. Frozen tensors receive nothing.
    pub fn backward_into(&self, act: &Activations, dout: &[f64], grad: &mut [f64]) -> Result<()> {
        let cfg = &self.config;
        let (d, win, input_dim) = (cfg.embed_dim, cfg.window, cfg.input_dim());
        let (h1n, h2n, out_dim) = (cfg.hidden1, cfg.hidden2, act.out_dim);
        let rows = act.rows();
        if dout.len() != rows * out_dim || grad.len() != self.params.len() {
            return Err(Error::Input(
                "gradient buffer shapes do not match the activations".into(),
            ));
        }
        if let Some(i) = dout.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("output-gradient[row {}]", i / out_dim)));
        }
        let l = &self.layout;
        let spec = |i: usize| &self.registry[i];
        let w1 = act.adapted.as_ref().map_or(self.t(l.w1), |a| &a.w1[..]);
        let w2 = act.adapted.as_ref().map_or(self.t(l.w2), |a| &a.w2[..]);
        let wo = self.t(l.wo);

        let mut dw1 = vec![0.0; h1n * input_dim];
        let mut dw2 = vec![0.0; h2n * h1n];
        let mut dwo = vec![0.0; out_dim * h2n];
        let mut db1 = vec![0.0; h1n];
        let mut db2 = vec![0.0; h2n];
        let mut dbo = vec![0.0; out_dim];
        let mut demb = vec![0.0; VOCAB_SIZE * d];
        let mut dmean = vec![0.0; act.tokens.len() * d];

        let mut dh2 = vec![0.0; h2n];
        let mut dh1 = vec![0.0; h1n];
        let mut du = vec![0.0; input_dim];
        for r in 0..rows {
            let g = &dout[r * out_dim..(r + 1) * out_dim];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let pos = act.start + r;
            let a2 = &act.h2[r * h2n..(r + 1) * h2n];
            let a1 = &act.h1[r * h1n..(r + 1) * h1n];
            let u = &act.input[r * input_dim..(r + 1) * input_dim];

            dh2.iter_mut().for_each(|v| *v = 0.0);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                dbo[o] += go;
                axpy(go, a2, &mut dwo[o * h2n..(o + 1) * h2n]);
                axpy(go, &wo[o * h2n..(o + 1) * h2n], &mut dh2);
            }
            dh1.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..h2n {
                let dz = dh2[j] * (1.0 - a2[j] * a2[j]);
                db2[j] += dz;
                axpy(dz, a1, &mut dw2[j * h1n..(j + 1) * h1n]);
                axpy(dz, &w2[j * h1n..(j + 1) * h1n], &mut dh1);
            }
            du.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..h1n {
                let dz = dh1[j] * (1.0 - a1[j] * a1[j]);
                db1[j] += dz;
                axpy(dz, u, &mut dw1[j * input_dim..(j + 1) * input_dim]);
                axpy(dz, &w1[j * input_dim..(j + 1) * input_dim], &mut du);
            }
            for k in 0..win {
                let t = if pos >= k {
                    act.tokens[pos - k] as usize
                } else {
                    PAD as usize
                };
                axpy(1.0, &du[k * d..(k + 1) * d], &mut demb[t * d..(t + 1) * d]);
            }
            let inv = 1.0 / (pos + 1) as f64;
            axpy(inv, &du[win * d..], &mut dmean[pos * d..(pos + 1) * d]);
        }
        // The running mean at position t sums embeddings 0..=t, so token s
        // collects the mean-gradients of every row at or after s.
        let mut acc = vec![0.0; d];
        for s in (0..act.tokens.len()).rev() {
            axpy(1.0, &dmean[s * d..(s + 1) * d], &mut acc);
            let t = act.tokens[s] as usize;
            axpy(1.0, &acc, &mut demb[t * d..(t + 1) * d]);
        }

        let mut add = |idx: usize, g: &[f64]| {
            let s = spec(idx);
            if s.trainable {
                axpy(1.0, g, &mut grad[s.range()]);
            }
        };
        add(l.emb, &demb);
        add(l.w1, &dw1);
        add(l.b1, &db1);
        add(l.w2, &dw2);
        add(l.b2, &db2);
        add(l.wo, &dwo);
        add(l.bo, &dbo);
        if let (Some(lora), Some(adapted)) = (l.lora, act.adapted.as_ref()) {
            let (da1, db1l) = lora_grads(
                &dw1,
                self.t(lora.a1),
                self.t(lora.b1),
                h1n,
                input_dim,
                lora.rank,
                lora.scale,
                &adapted.col_scale1,
            );
            let (da2, db2l) = lora_grads(
                &dw2,
                self.t(lora.a2),
                self.t(lora.b2),
                h2n,
                h1n,
                lora.rank,
                lora.scale,
                &adapted.col_scale2,
            );
            add(lora.a1, &da1);
            add(lora.b1, &db1l);
            add(lora.a2, &da2);
            add(lora.b2, &db2l);
        }
        for s in &self.registry {
            if s.trainable && grad[s.range()].iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("grad:{}", s.name)));
            }
        }
        Ok(())
    }
}

/// Gradients of `W_eff = W + s·B·A·diag(c)` with respect to `A` and `B`,
/// given `dW_eff`.
#[allow(clippy::too_many_arguments)]
fn lora_grads(
    dw: &[f64],
    a: &[f64],
    b: &[f64],
    rows: usize,
    cols: usize,
    rank: usize,
    scale: f64,
    col_scale: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    // dA[k, i] = s · c[i] · Σ_o B[o, k] · dW[o, i]
    let mut da = vec![0.0; rank * cols];
    for o in 0..rows {
        let drow = &dw[o * cols..(o + 1) * cols];
        for k in 0..rank {
            let bok = b[o * rank + k];
            if bok != 0.0 {
                axpy(bok, drow, &mut da[k * cols..(k + 1) * cols]);
            }
        }
    }
    for k in 0..rank {
        for i in 0..cols {
            da[k * cols + i] *= scale * col_scale[i];
        }
    }
    // dB[o, k] = s · Σ_i dW[o, i] · A[k, i] · c[i]
    let scaled_a: Vec<f64> = (0..rank * cols).map(|j| a[j] * col_scale[j % cols]).collect();
    let mut db = vec![0.0; rows * rank];
    for o in 0..rows {
        for k in 0..rank {
            db[o * rank + k] = scale * dot(&dw[o * cols..(o + 1) * cols], &scaled_a[k * cols..(k + 1) * cols]);
        }
    }
    (da, db)
}
