//! Differentiable operations on [`Tensor`].
//!
//! Binary elementwise ops require exactly matching shapes; shape plumbing
//! (broadcasts, bias rows, column splits) is provided by dedicated ops so
//! backward passes stay unambiguous.

use super::Tensor;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3};

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d tensor")
        .to_owned()
}

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected 1-d tensor")
        .to_owned()
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let data = &*self.data() + &*rhs.data();
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let data = &*self.data() - &*rhs.data();
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(-g)]),
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let data = &*self.data() * &*rhs.data();
        let a = self.clone();
        let b = rhs.clone();
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| vec![Some(g * &*b.data()), Some(g * &*a.data())]),
        )
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "div: shape mismatch");
        let data = &*self.data() / &*rhs.data();
        let a = self.clone();
        let b = rhs.clone();
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let bd = b.data();
                let ga = g / &*bd;
                let gb = -(g * &*a.data()) / (&*bd * &*bd);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        let data = -&*self.data();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(-g)]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = &*self.data() + c;
        Tensor::from_op(data, vec![self.clone()], Box::new(|g| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = &*self.data() * c;
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * c)]),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = as2(&self.data());
        let b = as2(&rhs.data());
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims disagree");
        let data = a.dot(&b).into_dyn();
        let lhs_t = self.clone();
        let rhs_t = rhs.clone();
        // Skip gradient GEMMs into constant operands.
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let ga = need_a.then(|| g2.dot(&as2(&rhs_t.data()).t()).into_dyn());
                let gb = need_b.then(|| as2(&lhs_t.data()).t().dot(&g2).into_dyn());
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose2(&self) -> Tensor {
        let data = as2(&self.data()).t().to_owned().into_dyn();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(as2(g).t().to_owned().into_dyn())]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let orig: Vec<usize> = self.shape();
        let data = self
            .data()
            .clone()
            .into_shape_with_order(shape)
            .expect("reshape: element count mismatch");
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.clone()
                        .into_shape_with_order(orig.as_slice())
                        .expect("reshape backward"),
                )]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let shape = self.shape();
        let data = ndarray::arr1(&[self.data().sum()]).into_dyn();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g0 = g[[0]];
                vec![Some(ArrayD::from_elem(shape.as_slice(), g0))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over axis 1 of a `[m, n]` tensor, producing `[m]`.
    pub fn sum_cols(&self) -> Tensor {
        let x = as2(&self.data());
        let (m, n) = x.dim();
        let data = x.sum_axis(Axis(1)).into_dyn();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g1 = as1(g);
                let mut out = Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    out.row_mut(i).fill(g1[i]);
                }
                vec![Some(out.into_dyn())]
            }),
        )
    }

    /// Mean over axis 1 of a `[m, n]` tensor, producing `[m]`.
    pub fn mean_cols(&self) -> Tensor {
        let x = as2(&self.data());
        let n = x.ncols();
        let data = x.mean_axis(Axis(1)).expect("non-empty").into_dyn();
        let (m, ncols) = (x.nrows(), n);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g1 = as1(g);
                let mut out = Array2::<f64>::zeros((m, ncols));
                for i in 0..m {
                    let v = g1[i] / ncols as f64;
                    out.row_mut(i).fill(v);
                }
                vec![Some(out.into_dyn())]
            }),
        )
    }

    /// Row-wise softmax of a `[m, n]` tensor.
    pub fn softmax_rows(&self) -> Tensor {
        let x = as2(&self.data());
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let saved = y.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    let yi = saved.row(i);
                    let gi = g2.row(i);
                    let dot: f64 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..g2.ncols() {
                        dx[[i, j]] = yi[j] * (gi[j] - dot);
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Row-wise log-softmax of a `[m, n]` tensor.
    pub fn log_softmax_rows(&self) -> Tensor {
        let x = as2(&self.data());
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        let saved = y.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    let gsum: f64 = g2.row(i).sum();
                    for j in 0..g2.ncols() {
                        dx[[i, j]] = g2[[i, j]] - saved[[i, j]].exp() * gsum;
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Layer normalization over the last axis of a `[m, n]` tensor with
    /// learnable `gamma`/`beta` of shape `[n]`.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = as2(&self.data());
        let gm = as1(&gamma.data());
        let bt = as1(&beta.data());
        let (m, n) = x.dim();
        assert_eq!(gm.len(), n, "layer_norm: gamma width");
        assert_eq!(bt.len(), n, "layer_norm: beta width");

        let mut xhat = Array2::<f64>::zeros((m, n));
        let mut inv_std = Array1::<f64>::zeros(m);
        let mut y = Array2::<f64>::zeros((m, n));
        for i in 0..m {
            let row = x.row(i);
            let mu = row.mean().expect("non-empty row");
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                let xh = (row[j] - mu) * s;
                xhat[[i, j]] = xh;
                y[[i, j]] = xh * gm[j] + bt[j];
            }
        }
        let gm_saved = gm.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let (m, n) = g2.dim();
                let mut dx = Array2::<f64>::zeros((m, n));
                let mut dgamma = Array1::<f64>::zeros(n);
                let mut dbeta = Array1::<f64>::zeros(n);
                for i in 0..m {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = g2[[i, j]] * gm_saved[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[[i, j]];
                        dgamma[j] += g2[[i, j]] * xhat[[i, j]];
                        dbeta[j] += g2[[i, j]];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let dxh = g2[[i, j]] * gm_saved[j];
                        dx[[i, j]] =
                            inv_std[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let y = self.data().mapv(f64::tanh);
        let saved = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * &saved.mapv(|t| 1.0 - t * t))]),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let y = self.data().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let saved = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * &saved.mapv(|s| s * (1.0 - s)))]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.to_array();
        let y = x.mapv(|v| v.max(0.0));
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))]),
        )
    }

    /// Smooth GELU (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.to_array();
        let y = x.mapv(|v| {
            let u = C * (v + A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let dy = x.mapv(|v| {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
                });
                vec![Some(g * &dy)]
            }),
        )
    }

    /// L2-normalize each row of a `[m, n]` tensor. Rows with norm below
    /// `eps` are divided by `eps` instead, so zero rows stay zero.
    pub fn normalize_rows(&self, eps: f64) -> Tensor {
        let x = as2(&self.data());
        let (m, n) = x.dim();
        let mut y = Array2::<f64>::zeros((m, n));
        let mut norms = Array1::<f64>::zeros(m);
        for i in 0..m {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            norms[i] = norm;
            for j in 0..n {
                y[[i, j]] = x[[i, j]] / denom;
            }
        }
        let y_saved = y.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let (m, n) = g2.dim();
                let mut dx = Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    if norms[i] > eps {
                        let dot: f64 = (0..n).map(|j| y_saved[[i, j]] * g2[[i, j]]).sum();
                        for j in 0..n {
                            dx[[i, j]] = (g2[[i, j]] - y_saved[[i, j]] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..n {
                            dx[[i, j]] = g2[[i, j]] / eps;
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Gather rows of a `[m, n]` tensor; duplicate indices accumulate in the
    /// backward scatter.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let x = as2(&self.data());
        let (m, n) = x.dim();
        let mut out = Array2::<f64>::zeros((indices.len(), n));
        for (k, &idx) in indices.iter().enumerate() {
            assert!(idx < m, "select_rows: index {idx} out of range {m}");
            out.row_mut(k).assign(&x.row(idx));
        }
        let idx: Vec<usize> = indices.to_vec();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((m, n));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(k);
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Contiguous column slice `[m, len]` of a `[m, n]` tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Tensor {
        let x = as2(&self.data());
        let (m, n) = x.dim();
        assert!(start + len <= n, "narrow_cols out of range");
        let out = x.slice(ndarray::s![.., start..start + len]).to_owned();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((m, n));
                dx.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Concatenate `[m, n_i]` tensors along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let mats: Vec<Array2<f64>> = parts.iter().map(|p| as2(&p.data())).collect();
        let m = mats[0].nrows();
        let widths: Vec<usize> = mats.iter().map(|a| a.ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::<f64>::zeros((m, total));
        let mut off = 0;
        for a in &mats {
            out.slice_mut(ndarray::s![.., off..off + a.ncols()]).assign(a);
            off += a.ncols();
        }
        Tensor::from_op(
            out.into_dyn(),
            parts.to_vec(),
            Box::new(move |g| {
                let g2 = as2(g);
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    grads.push(Some(
                        g2.slice(ndarray::s![.., off..off + w]).to_owned().into_dyn(),
                    ));
                    off += w;
                }
                grads
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of a `[d, h, w]` tensor.
    pub fn upsample2_nearest(&self) -> Tensor {
        let x = self
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected 3-d tensor")
            .to_owned();
        let (d, h, w) = x.dim();
        let mut out = ndarray::Array3::<f64>::zeros((d, 2 * h, 2 * w));
        for c in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[c, y, xx]];
                    out[[c, 2 * y, 2 * xx]] = v;
                    out[[c, 2 * y + 1, 2 * xx]] = v;
                    out[[c, 2 * y, 2 * xx + 1]] = v;
                    out[[c, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let mut dx = ndarray::Array3::<f64>::zeros((d, h, w));
                for c in 0..d {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[[c, y, xx]] = g3[[c, 2 * y, 2 * xx]]
                                + g3[[c, 2 * y + 1, 2 * xx]]
                                + g3[[c, 2 * y, 2 * xx + 1]]
                                + g3[[c, 2 * y + 1, 2 * xx + 1]];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Add a `[n]` bias to every row of a `[m, n]` tensor.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Tensor {
        let x = as2(&self.data());
        let b = as1(&bias.data());
        assert_eq!(x.ncols(), b.len(), "add_bias_rows width");
        let data = (&x + &b).into_dyn();
        Tensor::from_op(
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                vec![Some(g2.clone().into_dyn()), Some(g2.sum_axis(Axis(0)).into_dyn())]
            }),
        )
    }

    /// Class-weighted cross entropy from logits `[m, n]` against integer
    /// targets; the mean is weighted by `class_weights[target]`.
    pub fn cross_entropy_logits(&self, targets: &[usize], class_weights: &[f64]) -> Tensor {
        let x = as2(&self.data());
        let (m, n) = x.dim();
        assert_eq!(targets.len(), m, "cross_entropy: one target per row");
        assert_eq!(class_weights.len(), n, "cross_entropy: one weight per class");
        let mut probs = Array2::<f64>::zeros((m, n));
        let mut loss = 0.0;
        let mut weight_sum = 0.0;
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..n {
                probs[[i, j]] = (row[j] - lse).exp();
            }
            let w = class_weights[targets[i]];
            loss += w * (lse - row[targets[i]]);
            weight_sum += w;
        }
        let loss = loss / weight_sum;
        let tgt: Vec<usize> = targets.to_vec();
        let wts: Vec<f64> = class_weights.to_vec();
        Tensor::from_op(
            ndarray::arr1(&[loss]).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g0 = g[[0]];
                let mut dx = probs.clone();
                for i in 0..dx.nrows() {
                    let w = wts[tgt[i]];
                    for j in 0..dx.ncols() {
                        let onehot = if j == tgt[i] { 1.0 } else { 0.0 };
                        dx[[i, j]] = g0 * w * (dx[[i, j]] - onehot) / weight_sum;
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Numerically stable binary cross entropy with logits, averaged over
    /// entries where `mask > 0`. `targets` and `mask` are constants.
    pub fn bce_with_logits_masked(&self, targets: &ArrayD<f64>, mask: &ArrayD<f64>) -> Tensor {
        let x = self.to_array();
        assert_eq!(x.shape(), targets.shape(), "bce: target shape");
        assert_eq!(x.shape(), mask.shape(), "bce: mask shape");
        let count: f64 = mask.sum();
        assert!(count > 0.0, "bce: empty mask");
        let mut loss = 0.0;
        for ((xv, tv), mv) in x.iter().zip(targets.iter()).zip(mask.iter()) {
            if *mv > 0.0 {
                loss += xv.max(0.0) - xv * tv + (1.0 + (-xv.abs()).exp()).ln();
            }
        }
        loss /= count;
        let t = targets.clone();
        let m = mask.clone();
        Tensor::from_op(
            ndarray::arr1(&[loss]).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g0 = g[[0]];
                let mut dx = x.clone();
                for ((dv, tv), mv) in dx.iter_mut().zip(t.iter()).zip(m.iter()) {
                    let sig = 1.0 / (1.0 + (-*dv).exp());
                    *dv = if *mv > 0.0 { g0 * (sig - tv) / count } else { 0.0 };
                }
                vec![Some(dx)]
            }),
        )
    }
}
