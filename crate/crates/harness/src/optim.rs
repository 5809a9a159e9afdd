//! AdamW with decoupled weight decay and global-norm gradient clipping.

use transdiff_core::{Element, Error, ParamStore, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates taken so far.
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients held in `store`. Weight decay applies
    /// to matrices only, not to biases, norms or vectors.
    pub fn step(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.value.shape().len() == 2 && p.value.rows() > 1 {
                (1.0 - self.lr * self.weight_decay) as f32
            } else {
                1.0
            };
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *x = *x * decay - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<E: Element>(store: &mut ParamStore<E>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let s = E::from_f64(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64], grad: &[f64]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64(&[vals.len()], vals).unwrap()).unwrap();
        s.get_mut(id).grad = Tensor::from_f64(&[grad.len()], grad).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is lr * g / |g|.
        let mut s = store(&[1.0, -1.0], &[0.5, -2.0]);
        let mut opt = AdamW::new(&s, 0.1, (0.9, 0.999), 0.0);
        opt.step(&mut s).unwrap();
        let w = s.by_name("w").unwrap().value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn decay_applies_to_matrices() {
        let mut s = ParamStore::new();
        s.add("m", Tensor::<f32>::full(&[2, 2], 1.0)).unwrap();
        s.add("b", Tensor::<f32>::full(&[2], 1.0)).unwrap();
        let mut opt = AdamW::new(&s, 0.1, (0.9, 0.999), 0.5);
        opt.step(&mut s).unwrap();
        assert!((s.by_name("m").unwrap().value.data()[0] - 0.95).abs() < 1e-6);
        assert_eq!(s.by_name("b").unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut s = store(&[0.0, 0.0], &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-6);
        assert!((clip_grad_norm(&mut s, 10.0) - 1.0).abs() < 1e-6);
        assert!((s.grad_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = store(&[5.0, -3.0], &[0.0, 0.0]);
        let mut opt = AdamW::new(&s, 0.05, (0.9, 0.999), 0.0);
        for _ in 0..2000 {
            let p = s.iter_mut().next().unwrap();
            p.grad = p.value.scale(2.0);
            opt.step(&mut s).unwrap();
        }
        assert!(s.by_name("w").unwrap().value.data().iter().all(|v| v.abs() < 1e-2));
    }
}
