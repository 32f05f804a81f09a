//! AdamW: Adam with decoupled weight decay.
//!
//! ```text
//! p <- p * (1 - lr * wd)
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update to every tensor in `params`.
    pub fn step(
        &self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        state: &mut AdamState,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != state.m[i].len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {i}: {} params, {} grads, {} moments",
                    p.len(),
                    g.len(),
                    state.m[i].len()
                )));
            }
        }

        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for k in 0..p.len() {
                let gk = g[k];
                p[k] *= decay;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(&[3]);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], &mut st)
                .unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // g = 1: m_hat = 1, v_hat = 1, step = lr / (1 + eps)
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![0.5];
        let mut st = AdamState::new(&[1]);
        opt.step(&mut [&mut p], &[&[1.0]], &mut st).unwrap();
        assert!((p[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((0.5 - p[0] - 0.1).abs() < 1e-8);
    }

    /// Scalar AdamW written out term by term.
    fn scalar_oracle(p0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            p -= lr * wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let p0: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let opt = AdamW {
            lr: 0.05,
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut p = p0.clone();
        let mut st = AdamState::new(&[4]);
        opt.step(&mut [&mut p], &[&g1], &mut st).unwrap();
        opt.step(&mut [&mut p], &[&g2], &mut st).unwrap();
        for k in 0..4 {
            let want = scalar_oracle(p0[k], &[g1[k], g2[k]], 0.05, 0.1);
            assert!((p[k] - want).abs() < 1e-14, "{k}: {} vs {want}", p[k]);
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let opt = AdamW::default();
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(&[3]);
        assert!(opt.step(&mut [&mut p], &[&[0.0, 0.0]], &mut st).is_err());
    }
}
