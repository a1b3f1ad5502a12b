//! Analytic gradients against central finite differences for every
//! trainable objective.

mod common;

use common::fixtures::{examples, jitter, pairs, small_config, trajectories};
use common::max_relative_error;
use tracefix::policy::{backprop, new_policy, AdapterConfig, ModelConfig, Objective};
use tracefix::reward::{RewardModel, RmObjective};
use tracefix::rllf::{PpoPolicyObjective, ValueModel, ValueObjective};
use tracefix::sft::{KdConfig, SftMode, SftObjective};

fn check(objective: &dyn Objective, config: ModelConfig, seed: u64) -> f64 {
    let net = new_policy(config, seed).unwrap();
    assert!(net.parameter_count() <= 5_000, "{} parameters", net.parameter_count());
    let (_, grad) = backprop(&net, objective).unwrap();
    max_relative_error(&net, objective, &grad, 1e-5)
}

#[test]
fn sft_trace_gradient() {
    let ex = examples();
    let obj = SftObjective {
        examples: &ex,
        mode: SftMode::Trace,
        kd: None,
    };
    let err = check(&obj, small_config(), 1);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn direct_output_gradient() {
    let ex = examples();
    let obj = SftObjective {
        examples: &ex,
        mode: SftMode::DirectOutput,
        kd: None,
    };
    let err = check(&obj, small_config(), 2);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn kd_gradient() {
    let ex = examples();
    let teacher = new_policy(small_config(), 99).unwrap();
    let kd = KdConfig {
        alpha: 0.4,
        temperature_tau: 2.0,
    };
    let obj = SftObjective {
        examples: &ex,
        mode: SftMode::Trace,
        kd: Some((&teacher, &kd)),
    };
    let err = check(&obj, small_config(), 3);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn adapter_gradient() {
    let ex = examples();
    let cfg = ModelConfig {
        adapter: Some(AdapterConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.0,
        }),
        ..small_config()
    };
    let mut net = new_policy(cfg, 4).unwrap();
    // Give B non-zero entries so both adapter factors receive gradient.
    for name in ["hidden1.lora_b", "hidden2.lora_b"] {
        for (i, v) in net.tensor_mut(name).unwrap().iter_mut().enumerate() {
            *v = 0.1 * ((i % 5) as f64 - 2.0);
        }
    }
    let obj = SftObjective {
        examples: &ex,
        mode: SftMode::Trace,
        kd: None,
    };
    let (_, grad) = backprop(&net, &obj).unwrap();
    let mask = net.trainable_mask();
    assert!(grad.iter().zip(&mask).all(|(g, m)| *m || *g == 0.0));
    let err = max_relative_error(&net, &obj, &grad, 1e-5);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn reward_model_gradient() {
    let mut rm = RewardModel::new(small_config(), 5).unwrap();
    jitter(&mut rm.net, 0.3);
    let ps = pairs();
    let obj = RmObjective { pairs: &ps };
    let (_, grad) = backprop(&rm.net, &obj).unwrap();
    let err = max_relative_error(&rm.net, &obj, &grad, 1e-5);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn ppo_clip_gradient() {
    let mut old = new_policy(small_config(), 6).unwrap();
    jitter(&mut old, 0.6);
    let net = new_policy(small_config(), 6).unwrap();
    let samples = trajectories(&old);
    for direct_beta in [None, Some(0.1)] {
        let obj = PpoPolicyObjective {
            samples: &samples,
            epsilon: 0.2,
            direct_beta,
        };
        let (_, clipped) = obj.evaluate(&net, None).unwrap();
        assert!(clipped > 0.0 && clipped < 1.0, "clip fraction {clipped}");
        let (_, grad) = backprop(&net, &obj).unwrap();
        let err = max_relative_error(&net, &obj, &grad, 1e-5);
        assert!(err <= 1e-4, "max relative error {err} (direct {direct_beta:?})");
    }
}

#[test]
fn value_loss_gradient() {
    let policy = new_policy(small_config(), 7).unwrap();
    let mut vm = ValueModel::from_policy(&policy, 7).unwrap();
    jitter(&mut vm.net, 0.3);
    let samples = trajectories(&policy);
    let obj = ValueObjective { samples: &samples };
    let (_, grad) = backprop(&vm.net, &obj).unwrap();
    let err = max_relative_error(&vm.net, &obj, &grad, 1e-5);
    assert!(err <= 1e-4, "max relative error {err}");
}
