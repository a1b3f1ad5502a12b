//! Small models and data shared by the gradient and reward tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracefix::policy::{ModelConfig, Network, TargetPass, Vocabulary, BOS, EOS};
use tracefix::reward::PairExample;
use tracefix::rllf::Trajectory;
use tracefix::sft::SftExample;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 2,
        window: 3,
        hidden1: 4,
        hidden2: 4,
        context_window: 48,
        adapter: None,
    }
}

pub fn examples() -> Vec<SftExample> {
    vec![
        SftExample {
            task_id: "a".into(),
            prompt: vec![BOS, 120, 45, 121],
            reasoning: "use +".into(),
            solution: "x+y\n".into(),
        },
        SftExample {
            task_id: "b".into(),
            prompt: vec![BOS, 97],
            reasoning: String::new(),
            solution: "ok".into(),
        },
    ]
}

/// Deterministic small offsets so no parameter sits at an initial zero.
pub fn jitter(net: &mut Network, scale: f64) {
    for (i, v) in net.parameters_mut().iter_mut().enumerate() {
        *v += scale * (((i * 7919) % 23) as f64 / 23.0 - 0.5);
    }
}

pub fn pairs() -> Vec<PairExample> {
    let p = |a: &[u32], b: &[u32], label| PairExample {
        task_id: "t".into(),
        prompt: vec![BOS, 120],
        a: a.to_vec(),
        b: b.to_vec(),
        label,
    };
    vec![
        p(&[43, 121, 10], &[45, 121], 1.0),
        p(&[97], &[98, 99, 100], 0.0),
        p(&[1, 2], &[2, 1], 1.0),
    ]
}

/// Trajectories whose stored log-probabilities come from `old`, so ratios
/// under a different policy spread across and beyond the clip band.
pub fn trajectories(old: &Network) -> Vec<Trajectory> {
    let seqs: [(&[u32], &[u32]); 2] = [(&[BOS, 97, 98], &[43, 10, 120, 257]), (&[BOS], &[121, 45, 121])];
    seqs.iter()
        .enumerate()
        .map(|(k, (x, y))| {
            let logp_old = TargetPass::new(old, x, y, None).unwrap().log_probs;
            let n = y.len();
            let advantages: Vec<f64> = (0..n).map(|t| ((t + k) as f64 - 1.5) * 0.8).collect();
            let returns: Vec<f64> = (0..n).map(|t| 0.5 - 0.3 * (t + k) as f64).collect();
            Trajectory {
                task_id: format!("t{k}"),
                prompt: x.to_vec(),
                response: y.to_vec(),
                truncated: false,
                logp_ref: logp_old.iter().map(|l| l - 0.1).collect(),
                logp_old,
                terminal_reward: 0.0,
                rewards: vec![0.0; n],
                values: vec![0.0; n],
                advantages,
                returns,
            }
        })
        .collect()
}

fn words(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..5);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..6);
            (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn response(body: &str, verdict: &str) -> Vec<u32> {
    let mut ids = Vocabulary.encode(&format!("{body} {verdict}"));
    ids.push(EOS);
    ids
}

/// One side contains PASS, the other FAIL; the PASS side is preferred.
pub fn separable_pairs(n: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut prompt = vec![BOS];
            prompt.extend(Vocabulary.encode(&format!("case {i}: ")));
            let good = response(&words(&mut rng), "PASS");
            let bad = response(&words(&mut rng), "FAIL");
            let pass_first = rng.gen_bool(0.5);
            let (a, b) = if pass_first { (good, bad) } else { (bad, good) };
            PairExample {
                task_id: format!("s{i}"),
                prompt,
                a,
                b,
                label: if pass_first { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

pub fn shuffled_labels(mut pairs: Vec<PairExample>, seed: u64) -> Vec<PairExample> {
    let mut labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (p, l) in pairs.iter_mut().zip(labels) {
        p.label = l;
    }
    pairs
}
