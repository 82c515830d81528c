use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;
use crate::weights::{ModelWeights, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let zeros = Params::zeros(weights.config(), weights.num_labels());
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &Params<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(state.t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let grad_tensors = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    weights.update(|p| {
        for (i, w) in p.tensors_mut().into_iter().enumerate() {
            let g = grad_tensors[i].1;
            let m = &mut *ms[i].data;
            let v = &mut *vs[i].data;
            for j in 0..w.data.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn setup() -> (ModelWeights<f64>, AdamState<f64>) {
        let w = ModelWeights::<f64>::init(&ModelConfig::tiny(1, 0, 4, 1, 4), 2, 3).unwrap();
        let s = AdamState::new(&w);
        (w, s)
    }

    fn constant_grads(w: &ModelWeights<f64>, f: impl Fn(usize) -> f64) -> Params<f64> {
        let mut g = Params::zeros(w.config(), w.num_labels());
        let mut k = 0;
        for t in g.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = f(k);
                k += 1;
            }
        }
        g
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let (mut w, mut s) = setup();
        let before = w.clone();
        let g = constant_grads(&w, |_| 0.0);
        adam_step(&mut w, &g, &mut s, &AdamConfig::default());
        assert_eq!(w.params(), before.params());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut w, mut s) = setup();
        let before = w.clone();
        let g = constant_grads(&w, |k| if k % 2 == 0 { 0.3 } else { -2.0 });
        let cfg = AdamConfig::default();
        adam_step(&mut w, &g, &mut s, &cfg);
        for ((_, a), ((_, b), (_, gt))) in w
            .params()
            .tensors()
            .iter()
            .zip(before.params().tensors().iter().zip(g.tensors()))
        {
            for j in 0..a.len() {
                let expected = -cfg.lr * gt[j].signum();
                assert!((a[j] - b[j] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_gradient_drives_monotone_descent() {
        let (mut w, mut s) = setup();
        let g = constant_grads(&w, |_| 0.5);
        let mut prev = w.params().head.b[0];
        for _ in 0..20 {
            adam_step(&mut w, &g, &mut s, &AdamConfig::default());
            let cur = w.params().head.b[0];
            assert!(cur < prev);
            prev = cur;
        }
    }
}
