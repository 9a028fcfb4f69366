//! AdamW with decoupled weight decay, and the warmup-plus-cosine learning
//! rate schedule.

use crate::config::AdamWConfig;
use crate::error::Result;
use crate::params::ParamGroup;
use std::collections::HashMap;

/// First and second moment estimates per parameter, keyed by dotted name.
/// Frozen parameters (no `requires_grad`, or no gradient) are skipped and
/// their moments stay untouched.
pub struct AdamW {
    cfg: AdamWConfig,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    /// Step count used for bias correction.
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter with a stored gradient:
    /// `w -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)`.
    pub fn step(&mut self, group: &mut dyn ParamGroup, lr: f64) -> Result<()> {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.cfg.eps;
        let wd = self.cfg.weight_decay;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        group.visit_mut("", &mut |name, tensor| {
            if !tensor.requires_grad() {
                return;
            }
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                return;
            };
            let n = grad.len();
            let m = m_all.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = v_all.entry(name).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        });
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total` steps: linear warmup from
/// zero over the first `warmup_ratio` of steps, then cosine decay from the
/// peak toward zero.
pub fn cosine_warmup_lr(peak: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    assert!(total > 0);
    let warmup = (total as f64 * warmup_ratio).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let denom = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / denom;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{harvest_grads, Binder, ParamGroup};
    use crate::tensor::{Tape, Tensor};

    struct OneParam {
        w: Tensor,
    }

    impl ParamGroup for OneParam {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
            f(format!("{prefix}w"), &self.w);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(format!("{prefix}w"), &mut self.w);
        }
    }

    #[test]
    fn first_two_steps_match_hand_derivation() {
        // Constant gradient 1.0, lr 0.1, no weight decay. Replicates the
        // update equations in straight-line arithmetic.
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut group = OneParam {
            w: Tensor::scalar(1.0).with_requires_grad(),
        };
        let mut opt = AdamW::new(cfg.clone());

        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut w_ref = 1.0f64;
        for t in 1..=2u32 {
            group.w.clear_grad();
            group.w.accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut group, 0.1).unwrap();

            m = cfg.beta1 * m + (1.0 - cfg.beta1) * 1.0;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * 1.0;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
            w_ref -= 0.1 * m_hat / (v_hat.sqrt() + cfg.eps);
            assert!((group.w.data()[0] - w_ref).abs() < 1e-15, "step {t}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_moment_update() {
        // With zero gradient and nonzero decay, the update is pure shrink
        // toward zero by lr * wd * w; the moments see no gradient signal.
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut group = OneParam {
            w: Tensor::scalar(2.0).with_requires_grad(),
        };
        group.w.accumulate_grad(&[0.0]).unwrap();
        let mut opt = AdamW::new(cfg);
        opt.step(&mut group, 0.1).unwrap();
        assert!((group.w.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_and_gradless_params_are_untouched() {
        let mut group = OneParam {
            w: Tensor::scalar(3.0),
        };
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut group, 0.1).unwrap(); // not requires_grad
        assert_eq!(group.w.data()[0], 3.0);
        group.w.set_requires_grad(true);
        opt.step(&mut group, 0.1).unwrap(); // no grad stored
        assert_eq!(group.w.data()[0], 3.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Minimize (w - 3)^2 through the tape.
        let mut group = OneParam {
            w: Tensor::scalar(-1.0).with_requires_grad(),
        };
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..400 {
            group.w.clear_grad();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let w = binder.bind("w", &group.w);
            let bound = binder.bound().to_vec();
            let c = tape.constant(&[1], vec![-3.0]).unwrap();
            let d = tape.add(w, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            harvest_grads(&mut group, &bound, &tape).unwrap();
            opt.step(&mut group, 0.05).unwrap();
        }
        assert!((group.w.data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let total = 100;
        let peak = 2.0;
        let lr = |s| cosine_warmup_lr(peak, s, total, 0.1);
        assert_eq!(lr(0), 0.0);
        assert!(lr(5) > 0.0 && lr(5) < peak);
        assert!((lr(10) - peak).abs() < 1e-12); // warmup ends at step 10
        for s in 11..total {
            assert!(lr(s) < lr(s - 1), "decay must be monotonic at {s}");
        }
        assert!(lr(99) < 0.01 * peak);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let lr = cosine_warmup_lr(1.0, 0, 50, 0.0);
        assert!((lr - 1.0).abs() < 1e-12);
    }
}
