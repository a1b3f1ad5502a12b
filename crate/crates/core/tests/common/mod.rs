#![allow(dead_code)]

use tracefix::policy::{Network, Objective};

pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Largest elementwise relative error between `analytic` and a central
/// finite-difference estimate of `objective`'s gradient.
///
/// Relative error is `|a - f| / max(|a|, |f|, floor)`; the floor keeps
/// entries whose gradient sits at the finite-difference noise level
/// (about `eps * |loss| / step`) from dominating.
pub fn max_relative_error(net: &Network, objective: &dyn Objective, analytic: &[f64], step: f64) -> f64 {
    let mask = net.trainable_mask();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.parameter_count() {
        if !mask[i] {
            continue;
        }
        let orig = probe.parameters()[i];
        probe.parameters_mut()[i] = orig + step;
        let up = objective.value(&probe).expect("loss at +h");
        probe.parameters_mut()[i] = orig - step;
        let down = objective.value(&probe).expect("loss at -h");
        probe.parameters_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(GRADIENT_FLOOR);
        worst = worst.max((a - fd).abs() / denom);
    }
    worst
}

pub mod fixtures;
pub mod runs;
