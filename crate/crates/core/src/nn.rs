//! Small neural-net building blocks on top of the autodiff tape.

use crate::autodiff::Tensor;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense layer `x . W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = ArrayD::from_shape_fn(vec![d_in, d_out], |_| rng.gen_range(-limit..limit));
        Self {
            weight: Tensor::param(weight),
            bias: Some(Tensor::param(ArrayD::zeros(vec![d_out]))),
        }
    }

    pub fn new_no_bias(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::new(d_in, d_out, rng);
        l.bias = None;
        l
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add_bias_rows(b),
            None => y,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Layer normalization over the last axis with learnable affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::param(ArrayD::ones(vec![dim])),
            beta: Tensor::param(ArrayD::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm_rows(&self.gamma, &self.beta, self.eps)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Two-layer MLP with a smooth GELU between.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(d_in, d_hidden, rng),
            fc2: Linear::new(d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.fc1.forward(x).gelu())
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries and keys/values may live in different input widths; all heads
/// operate in `d_model` and the output projection keeps `d_model`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        d_query_in: usize,
        d_kv_in: usize,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d_model % heads == 0, "d_model must divide into heads");
        Self {
            wq: Linear::new(d_query_in, d_model, rng),
            wk: Linear::new(d_kv_in, d_model, rng),
            wv: Linear::new(d_kv_in, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
            heads,
        }
    }

    /// `queries: [n_q, d_query_in]`, `keys_values: [n_k, d_kv_in]`.
    pub fn forward(&self, queries: &Tensor, keys_values: &Tensor) -> Tensor {
        let q = self.wq.forward(queries);
        let k = self.wk.forward(keys_values);
        let v = self.wv.forward(keys_values);
        let d_model = self.wq.out_dim();
        let dh = d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow_cols(h * dh, dh);
            let kh = k.narrow_cols(h * dh, dh);
            let vh = v.narrow_cols(h * dh, dh);
            let scores = qh.matmul(&kh.transpose2()).mul_scalar(scale);
            let attn = scores.softmax_rows();
            head_outputs.push(attn.matmul(&vh));
        }
        let merged = Tensor::concat_cols(&head_outputs);
        self.wo.forward(&merged)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::probe_gradients;
    use ndarray::ArrayD;
    use rand::SeedableRng;

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = MultiHeadAttention::new(6, 4, 8, 2, &mut rng);
        let q = Tensor::param(ArrayD::from_shape_fn(vec![3, 6], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let kv = Tensor::param(ArrayD::from_shape_fn(vec![5, 4], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let mut params = vec![q.clone(), kv.clone()];
        let mut module_params = Vec::new();
        attn.params("attn", &mut module_params);
        params.extend(module_params.into_iter().map(|(_, t)| t));
        let loss = || {
            let out = attn.forward(&q, &kv);
            out.mul(&out).sum_all()
        };
        let err = probe_gradients(&params, loss, 20, 1e-5, &mut rng);
        assert!(err < 1e-6, "attention grad error {err}");
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        // One key: softmax weight is 1 regardless of the query.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut attn = MultiHeadAttention::new(4, 4, 4, 1, &mut rng);
        attn.wv = identity_linear(4);
        attn.wo = identity_linear(4);
        let q = Tensor::constant(ArrayD::from_shape_fn(vec![1, 4], |_| rng.gen_range(-1.0..1.0)));
        let kv_data = ArrayD::from_shape_fn(vec![1, 4], |_| rng.gen_range(-1.0..1.0));
        let kv = Tensor::constant(kv_data.clone());
        let out = attn.forward(&q, &kv);
        for (a, b) in out.data().iter().zip(kv_data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn identity_linear(n: usize) -> Linear {
        Linear {
            weight: Tensor::param(ndarray::Array2::<f64>::eye(n).into_dyn()),
            bias: Some(Tensor::param(ArrayD::zeros(vec![n]))),
        }
    }

    #[test]
    fn mlp_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp2::new(5, 7, 3, &mut rng);
        let ln = LayerNorm::new(3);
        let x = Tensor::param(ArrayD::from_shape_fn(vec![4, 5], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let mut params = vec![x.clone()];
        let mut mp = Vec::new();
        mlp.params("mlp", &mut mp);
        ln.params("ln", &mut mp);
        params.extend(mp.into_iter().map(|(_, t)| t));
        let loss = || {
            let y = ln.forward(&mlp.forward(&x));
            y.mul(&y).sum_all()
        };
        let err = probe_gradients(&params, loss, 25, 1e-5, &mut rng);
        assert!(err < 1e-4, "mlp grad error {err}");
    }
}
