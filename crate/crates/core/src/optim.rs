//! AdamW with decoupled weight decay, per-group learning rates, and the
//! cosine schedule with linear warmup.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate and decay for one parameter group.
#[derive(Clone, Copy, Debug)]
pub struct GroupCfg {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Moment accumulators keyed by tensor name.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One decoupled-decay update over named parameter tensors. `group_of`
    /// resolves a tensor name to its learning rate and decay; returning None
    /// skips the tensor entirely (frozen parameters keep stale moments).
    pub fn step(
        &mut self,
        params: Vec<(&'static str, &mut [f64])>,
        grads: &[(&'static str, &[f64])],
        group_of: &dyn Fn(&str) -> Option<GroupCfg>,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(
                "adamw: param/grad tensor count mismatch".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((name, p), (gname, g)) in params.into_iter().zip(grads) {
            if name != *gname {
                return Err(Error::InvalidParam(format!(
                    "adamw: tensor order mismatch ({name} vs {gname})"
                )));
            }
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "adamw: tensor {name}: {} vs {}",
                    p.len(),
                    g.len()
                )));
            }
            let Some(cfg) = group_of(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Linear ramp 0 → lr_max over `warmup` epochs, then cosine decay
/// 0.5·lr_max·(1 + cos(π·progress)) down to 0 at `total`.
pub fn cosine_warmup_lr(epoch: f64, total: f64, warmup: f64, lr_max: f64) -> Result<f64> {
    if !(epoch >= 0.0 && epoch < total) {
        return Err(Error::InvalidParam(format!(
            "epoch {epoch} outside [0, {total})"
        )));
    }
    if warmup >= total {
        return Err(Error::InvalidParam(format!(
            "warmup {warmup} >= total {total}"
        )));
    }
    if warmup > 0.0 && epoch < warmup {
        return Ok(lr_max * epoch / warmup);
    }
    let progress = (epoch - warmup) / (total - warmup);
    Ok(0.5 * lr_max * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_group(lr: f64, wd: f64) -> impl Fn(&str) -> Option<GroupCfg> {
        move |_| Some(GroupCfg { lr, weight_decay: wd })
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut state = AdamWState::new();
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        state
            .step(
                vec![("p", p.as_mut_slice())],
                &[("p", g.as_slice())],
                &uniform_group(1e-3, 0.0),
            )
            .unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn single_step_closed_form() {
        // One step from zero moments with g = 1: after bias correction
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
        let mut state = AdamWState::new();
        let mut p = vec![0.0];
        let g = vec![1.0];
        state
            .step(
                vec![("p", p.as_mut_slice())],
                &[("p", g.as_slice())],
                &uniform_group(1e-3, 0.0),
            )
            .unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + ADAM_EPS));
        assert!((p[0] - expected).abs() < 1e-10 * 1e-3 + 1e-18, "p = {}", p[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let mut state = AdamWState::new();
        let mut p = vec![2.0];
        let g = vec![0.0];
        let (lr, wd) = (0.01, 0.05);
        state
            .step(
                vec![("p", p.as_mut_slice())],
                &[("p", g.as_slice())],
                &uniform_group(lr, wd),
            )
            .unwrap();
        assert!((p[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn frozen_group_untouched() {
        let mut state = AdamWState::new();
        let mut p = vec![1.0];
        let mut q = vec![1.0];
        let g = vec![1.0];
        let group = |name: &str| {
            if name == "frozen" {
                None
            } else {
                Some(GroupCfg { lr: 0.1, weight_decay: 0.1 })
            }
        };
        state
            .step(
                vec![("frozen", p.as_mut_slice()), ("live", q.as_mut_slice())],
                &[("frozen", g.as_slice()), ("live", g.as_slice())],
                &group,
            )
            .unwrap();
        assert_eq!(p[0], 1.0);
        assert!(q[0] < 1.0);
    }

    #[test]
    fn adamw_matches_reference_sequence() {
        // Straight-line reimplementation of the decoupled update for a few
        // steps on a scalar parameter.
        let mut state = AdamWState::new();
        let mut p = vec![0.5];
        let (lr, wd) = (0.01, 0.1);
        let grads = [0.3, -0.7, 1.2, 0.05];

        let mut p_ref = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            state
                .step(
                    vec![("p", p.as_mut_slice())],
                    &[("p", [g].as_slice())],
                    &uniform_group(lr, wd),
                )
                .unwrap();
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let mh = m / (1.0 - ADAM_BETA1.powi(t as i32 + 1));
            let vh = v / (1.0 - ADAM_BETA2.powi(t as i32 + 1));
            p_ref -= lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * p_ref);
            assert!((p[0] - p_ref).abs() < 1e-15, "step {t}");
        }
    }

    #[test]
    fn cosine_warmup_endpoints() {
        let lr = cosine_warmup_lr(2.0, 30.0, 2.0, 1e-3).unwrap();
        assert_eq!(lr, 1e-3);
        assert_eq!(cosine_warmup_lr(0.0, 30.0, 2.0, 1e-3).unwrap(), 0.0);
        assert_eq!(cosine_warmup_lr(1.0, 30.0, 2.0, 1e-3).unwrap(), 5e-4);
        // Near the end of training the rate is ~0.
        let tail = cosine_warmup_lr(29.999, 30.0, 2.0, 1e-3).unwrap();
        assert!(tail >= 0.0 && tail < 1e-8);
        // Midpoint of the decay: cos(π/2) = 0 → lr_max/2.
        let mid = cosine_warmup_lr(16.0, 30.0, 2.0, 1e-3).unwrap();
        assert!((mid - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn cosine_warmup_rejects_bad_args() {
        assert!(cosine_warmup_lr(5.0, 5.0, 1.0, 1e-3).is_err());
        assert!(cosine_warmup_lr(0.0, 5.0, 5.0, 1e-3).is_err());
    }
}
