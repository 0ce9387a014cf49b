//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::float::Float;
use super::matrix::Matrix;
use super::params::{GradientTree, ParameterTree};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Float = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Matrix<T>>,
    v: BTreeMap<String, Matrix<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &ParameterTree<T>) -> Self {
        let zeros = |p: &ParameterTree<T>| {
            p.params()
                .map(|(k, m)| (k.clone(), Matrix::zeros(m.rows, m.cols)))
                .collect::<BTreeMap<_, _>>()
        };
        OptimizerState {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// One update at learning rate `lr`:
/// `p <- p - lr*wd*p`, then `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<T: Float>(
    params: &mut ParameterTree<T>,
    grads: &GradientTree<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.params() {
        let ok = grads.get(name).is_some_and(|g| g.shape() == p.shape())
            && state.m.get(name).is_some_and(|m| m.shape() == p.shape());
        if !ok {
            return Err(Error::contract(format!(
                "optimizer: {name} missing or shape mismatch"
            )));
        }
    }
    if grads.iter().count() != params.len() {
        return Err(Error::contract(
            "optimizer: gradient tree has extra entries",
        ));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let decay = T::lit(1.0 - lr * c.weight_decay);
    let step = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(c.eps);
    for (name, p) in params.params_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + one_b1 * gi;
            v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
            let denom = (v.data[i] * inv_bc2).sqrt() + eps;
            p.data[i] = p.data[i] * decay - step * m.data[i] / denom;
        }
    }
    Ok(())
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Float>(grads: &mut GradientTree<T>, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(T::lit(max_norm / n));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::value_and_grad;

    fn tree(v: &[f64]) -> ParameterTree<f64> {
        let mut p = ParameterTree::new(0);
        p.insert("x", Matrix::from_vec(1, v.len(), v.to_vec()))
            .unwrap();
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = tree(&[1.0, -2.0]);
        let g = GradientTree::zeros_like(&p);
        let mut s = OptimizerState::new(AdamWConfig::default(), &p);
        adamw_step(&mut p, &g, &mut s, 0.001).unwrap();
        assert_eq!(p.get("x").unwrap().data, vec![1.0, -2.0]);
    }

    #[test]
    fn decay_shrinks_norm_monotonically() {
        let mut p = tree(&[1.0, -2.0, 0.5]);
        let g = GradientTree::zeros_like(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut s = OptimizerState::new(cfg, &p);
        let mut last = p.get("x").unwrap().norm();
        for _ in 0..20 {
            adamw_step(&mut p, &g, &mut s, 0.01).unwrap();
            let n = p.get("x").unwrap().norm();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn quadratic_descends() {
        let mut p = tree(&[1.0]);
        let mut s = OptimizerState::new(AdamWConfig::default(), &p);
        let (_, g, ()) = value_and_grad(&p, |g, b| {
            let x = b.get("x")?;
            let sq = g.square(x);
            Ok((g.sum(sq), ()))
        })
        .unwrap();
        adamw_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!(p.get("x").unwrap().data[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = tree(&[1.0]);
        let g = GradientTree::zeros_like(&tree(&[1.0, 2.0]));
        let mut s = OptimizerState::new(AdamWConfig::default(), &p);
        assert!(adamw_step(&mut p, &g, &mut s, 0.1).is_err());
    }
}
