//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn moments(&self) -> (Vec<Tensor>, Vec<Tensor>) {
        let wrap = |xs: &[Vec<f64>]| xs.iter().map(|x| Tensor::new(&[x.len()], x.clone()).expect("shape")).collect();
        (wrap(&self.m), wrap(&self.v))
    }

    pub fn set_moments(&mut self, m: &[Tensor], v: &[Tensor], step: u64) -> Result<()> {
        let fits = |src: &[Tensor], dst: &[Vec<f64>]| {
            src.len() == dst.len() && src.iter().zip(dst).all(|(s, d)| s.len() == d.len())
        };
        if !fits(m, &self.m) || !fits(v, &self.v) {
            return Err(Error::Format { what: "optimizer state", msg: "moment shapes do not match parameters".into() });
        }
        self.m = m.iter().map(|t| t.data().to_vec()).collect();
        self.v = v.iter().map(|t| t.data().to_vec()).collect();
        self.step = step;
        Ok(())
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::new(&[2], vec![0.3, -5.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = vec![Tensor::full(&[1], 2.0)];
        let mut opt = AdamW::new(&p, 0.5);
        opt.update(&mut p, &[Tensor::zeros(&[1])], 0.1);
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::full(&[4], 3.0)];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 6.0);
        let n: f64 = g[0].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
