//! Adam with decoupled weight decay.

use crate::autodiff::Tensor;
use ndarray::ArrayD;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params` (a fixed, ordered list). Parameters whose
    /// gradient slot is empty are skipped, matching the usual convention.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| ArrayD::zeros(p.data().shape()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer/param list mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, param)) in params.iter().enumerate() {
            let Some(grad) = param.grad() else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&grad, |mv, g| *mv = self.beta1 * *mv + (1.0 - self.beta1) * g);
            v.zip_mut_with(&grad, |vv, g| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g
            });
            let lr = self.lr;
            let eps = self.eps;
            let wd = self.weight_decay;
            param.update_data(|data| {
                ndarray::Zip::from(&mut *data)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &mv, &vv| {
                        let m_hat = mv / bc1;
                        let v_hat = vv / bc2;
                        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                    });
            });
        }
    }

    pub fn zero_grads(params: &[(String, Tensor)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn converges_on_a_quadratic() {
        let x = Tensor::param(arr1(&[5.0, -3.0]).into_dyn());
        let params = vec![("x".to_string(), x.clone())];
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..300 {
            AdamW::zero_grads(&params);
            let loss = x.mul(&x).sum_all();
            loss.backward();
            opt.step(&params);
        }
        let data = x.to_array();
        assert!(data.iter().all(|v| v.abs() < 1e-2), "did not converge: {data:?}");
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradients_only_when_stepped() {
        // A parameter with zero gradient still decays once it has a grad
        // slot filled; with no backward at all it is skipped.
        let x = Tensor::param(arr1(&[1.0]).into_dyn());
        let params = vec![("x".to_string(), x.clone())];
        let mut opt = AdamW::new(0.01, 0.1);
        opt.step(&params); // no gradient -> untouched
        assert_eq!(x.to_array()[[0]], 1.0);

        let loss = x.mul_scalar(0.0).sum_all();
        loss.backward();
        opt.step(&params);
        let v = x.to_array()[[0]];
        assert!(v < 1.0 && v > 0.99, "expected pure decay, got {v}");
    }
}
