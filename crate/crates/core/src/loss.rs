//! Classification losses over 2-class logits, with analytic gradients, and
//! embedding-level mixup.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_raw, Vector};

/// Loss used on scan-level logits.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec {
    Focal { gamma: f64, alpha: [f64; 2] },
    CeLabelSmoothing { eps: f64 },
}

impl LossSpec {
    pub fn value(&self, logits: &Vector, target: usize) -> f64 {
        match *self {
            LossSpec::Focal { gamma, alpha } => focal_loss(logits, target, gamma, &alpha),
            LossSpec::CeLabelSmoothing { eps } => ce_label_smoothing(logits, target, eps),
        }
    }

    pub fn grad(&self, logits: &Vector, target: usize) -> (f64, Vector) {
        match *self {
            LossSpec::Focal { gamma, alpha } => focal_loss_grad(logits, target, gamma, &alpha),
            LossSpec::CeLabelSmoothing { eps } => ce_label_smoothing_grad(logits, target, eps),
        }
    }
}

/// FL(p_t) = −α_t (1−p_t)^γ log(p_t), with p from softmax(logits).
pub fn focal_loss(logits: &Vector, target: usize, gamma: f64, alpha: &[f64; 2]) -> f64 {
    debug_assert!(target < logits.len());
    let lse = log_sum_exp(logits.as_slice());
    let log_pt = logits[target] - lse;
    let pt = log_pt.exp();
    -alpha[target] * (1.0 - pt).powf(gamma) * log_pt
}

/// Returns (loss, dL/dlogits).
pub fn focal_loss_grad(
    logits: &Vector,
    target: usize,
    gamma: f64,
    alpha: &[f64; 2],
) -> (f64, Vector) {
    let p = softmax_raw(logits.as_slice());
    let lse = log_sum_exp(logits.as_slice());
    let log_pt = logits[target] - lse;
    let pt = p[target];
    let one_minus = 1.0 - pt;
    let loss = -alpha[target] * one_minus.powf(gamma) * log_pt;
    // dL/dp_t = α_t γ (1−p_t)^(γ−1) log p_t − α_t (1−p_t)^γ / p_t
    let dl_dpt = if one_minus == 0.0 {
        // p_t = 1: loss is exactly 0 and flat for γ > 0; for γ = 0 the
        // cross-entropy limit −α_t/p_t applies.
        if gamma == 0.0 {
            -alpha[target] / pt
        } else {
            0.0
        }
    } else {
        alpha[target] * gamma * one_minus.powf(gamma - 1.0) * log_pt
            - alpha[target] * one_minus.powf(gamma) / pt
    };
    let grad = Vector(
        (0..logits.len())
            .map(|j| {
                let delta = if j == target { 1.0 } else { 0.0 };
                dl_dpt * pt * (delta - p[j])
            })
            .collect(),
    );
    (loss, grad)
}

/// (1−ε)·CE(target) + ε·(mean over classes of CE).
pub fn ce_label_smoothing(logits: &Vector, target: usize, eps: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&eps));
    let lse = log_sum_exp(logits.as_slice());
    let c = logits.len() as f64;
    let mut loss = 0.0;
    for (j, &l) in logits.as_slice().iter().enumerate() {
        let q = (1.0 - eps) * if j == target { 1.0 } else { 0.0 } + eps / c;
        loss -= q * (l - lse);
    }
    loss
}

pub fn ce_label_smoothing_grad(logits: &Vector, target: usize, eps: f64) -> (f64, Vector) {
    let p = softmax_raw(logits.as_slice());
    let c = logits.len() as f64;
    let loss = ce_label_smoothing(logits, target, eps);
    let grad = Vector(
        (0..logits.len())
            .map(|j| {
                let q = (1.0 - eps) * if j == target { 1.0 } else { 0.0 } + eps / c;
                p[j] - q
            })
            .collect(),
    );
    (loss, grad)
}

/// z_mix = λ z_a + (1−λ) z_b. The downstream loss is the convex combination
/// λ·L(ŷ(z_mix), y_a) + (1−λ)·L(ŷ(z_mix), y_b).
pub fn mixup_embeddings(z_a: &Vector, z_b: &Vector, lambda: f64) -> Result<Vector> {
    if z_a.len() != z_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixup: {} vs {}",
            z_a.len(),
            z_b.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParam(format!("mixup lambda {lambda}")));
    }
    let mut z = z_a.clone();
    z.scale(lambda);
    z.add_scaled(z_b, 1.0 - lambda);
    Ok(z)
}
