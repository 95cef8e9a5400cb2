//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// First/second moment accumulators, aligned with the canonical parameter
/// order of [`crate::model::ModelParams::named_tensors`].
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &[(String, Tensor)]) -> OptimState {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam step over `params`, reading each tensor's grad
/// slot. Decay is decoupled: `p *= 1 - lr*wd` before the moment update.
///
/// Any non-finite gradient rejects the whole step; no parameter or moment
/// is touched and an error describing the tensor is returned.
pub fn adam_step(params: &[(String, Tensor)], state: &mut OptimState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "optimizer state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let mut grads = Vec::with_capacity(params.len());
    for (name, t) in params {
        let g = t
            .grad()
            .ok_or_else(|| Error::invalid(format!("parameter {name} has no gradient")))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::runtime(format!("non-finite gradient in {name}; step rejected")));
        }
        grads.push(g);
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((_, p), g), (m, v)) in params
        .iter()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let mut data = p.to_vec();
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((pi, &gi), (mi, vi)) in data.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
            *pi *= decay;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        p.set_data(&data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::from_vec(vec![n], values).unwrap().requires_grad(true)
    }

    fn set_grad(t: &Tensor, g: &[f64]) {
        t.zero_grad();
        t.accumulate_grad(g);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let p = leaf(vec![1.0, -2.0]);
        set_grad(&p, &[0.0, 0.0]);
        let mut st = OptimState::new(
            OptimConfig { weight_decay: 0.0, ..OptimConfig::default() },
            &[("p".into(), p.clone())],
        );
        adam_step(&[("p".into(), p.clone())], &mut st).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let p = leaf(vec![0.5, 0.5]);
        set_grad(&p, &[3.0, -0.02]);
        let cfg = OptimConfig { lr: 1e-3, weight_decay: 0.0, ..OptimConfig::default() };
        let mut st = OptimState::new(cfg, &[("p".into(), p.clone())]);
        adam_step(&[("p".into(), p.clone())], &mut st).unwrap();
        let d = p.to_vec();
        assert!((d[0] - (0.5 - 1e-3)).abs() < 1e-8);
        assert!((d[1] - (0.5 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let p = leaf(vec![2.0]);
        set_grad(&p, &[123.0]);
        let cfg = OptimConfig { lr: 0.0, ..OptimConfig::default() };
        let mut st = OptimState::new(cfg, &[("p".into(), p.clone())]);
        adam_step(&[("p".into(), p.clone())], &mut st).unwrap();
        assert_eq!(p.to_vec(), vec![2.0]);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let p = leaf(vec![1.0]);
        set_grad(&p, &[f64::NAN]);
        let mut st = OptimState::new(OptimConfig::default(), &[("p".into(), p.clone())]);
        let before = p.to_vec();
        let err = adam_step(&[("p".into(), p.clone())], &mut st).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert_eq!(p.to_vec(), before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn update_direction_invariant_to_gradient_scale() {
        // After 100 warmup steps, updates with grads g and 10g agree within
        // 1e-6 elementwise (the large-v-hat limit).
        let cfg = OptimConfig { lr: 1e-3, weight_decay: 0.0, ..OptimConfig::default() };
        let p1 = leaf(vec![0.0, 0.0, 0.0]);
        let p2 = leaf(vec![0.0, 0.0, 0.0]);
        let mut s1 = OptimState::new(cfg, &[("p".into(), p1.clone())]);
        let mut s2 = OptimState::new(cfg, &[("p".into(), p2.clone())]);
        let mut seq = 0.7_f64;
        for step in 0..101 {
            seq = (seq * 1103515245.0 + 12345.0) % 1.0 + 0.1;
            let g = [seq, -0.5 * seq, 0.25 + seq];
            let before1 = p1.to_vec();
            let before2 = p2.to_vec();
            set_grad(&p1, &g);
            set_grad(&p2, &[10.0 * g[0], 10.0 * g[1], 10.0 * g[2]]);
            adam_step(&[("p".into(), p1.clone())], &mut s1).unwrap();
            adam_step(&[("p".into(), p2.clone())], &mut s2).unwrap();
            if step == 100 {
                let u1: Vec<f64> = p1.to_vec().iter().zip(&before1).map(|(a, b)| a - b).collect();
                let u2: Vec<f64> = p2.to_vec().iter().zip(&before2).map(|(a, b)| a - b).collect();
                for (a, b) in u1.iter().zip(&u2) {
                    assert!((a - b).abs() < 1e-6, "updates diverged: {a} vs {b}");
                }
            }
        }
    }
}
