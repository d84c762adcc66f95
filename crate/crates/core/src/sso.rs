//! Style synergy optimization: a learnable domain bank, a style
//! contrastive loss, a style aggregation loss, and the adaptive rule that
//! cross-weights the two by each other's recent change.

use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::prompts::TextEncoder;
use ndarray::{Array2, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Learnable style anchors, one per conditional domain phrase.
#[derive(Debug, Clone)]
pub struct DomainBank {
    /// `[K, D_style]`, re-normalized after every optimizer step.
    pub vectors: Tensor,
    pub condition_names: Vec<String>,
}

impl DomainBank {
    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Project every row back onto the unit sphere.
    pub fn renormalize(&self) {
        self.vectors.update_data(|data| {
            let mut rows = data.view_mut().into_dimensionality::<Ix2>().expect("2-d");
            for mut row in rows.rows_mut() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.mapv_inplace(|v| v / norm);
                }
            }
        });
    }
}

/// Per-layer linear heads into the shared style space.
#[derive(Debug, Clone)]
pub struct StyleProjector {
    /// One head per styled layer, `D_l -> D_style`.
    pub heads: Vec<Linear>,
}

impl StyleProjector {
    pub fn new(layer_channels: &[usize], d_style: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            heads: layer_channels
                .iter()
                .map(|&d_l| Linear::new(d_l, d_style, rng))
                .collect(),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, head) in self.heads.iter().enumerate() {
            head.params(&format!("{prefix}.head{i}"), out);
        }
    }
}

/// Hyperparameters of the synergy rule and the contrastive temperature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SsoConfig {
    pub tau: f64,
    pub lambda: f64,
    pub w_init: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Smoothing applied to the reference losses before differencing;
    /// 0 keeps raw previous-step values.
    pub ema_decay: f64,
}

impl Default for SsoConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.3,
            w_init: 1.0,
            w_min: 0.1,
            w_max: 2.0,
            ema_decay: 0.9,
        }
    }
}

/// Rolling reference values for the loss-change estimates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynergyState {
    pub config: SsoConfig,
    pub ref_sc: Option<f64>,
    pub ref_sa: Option<f64>,
}

impl SynergyState {
    pub fn new(config: SsoConfig) -> Self {
        Self {
            config,
            ref_sc: None,
            ref_sa: None,
        }
    }

    /// Combine the two style losses with cross-assigned weights:
    /// the contrastive loss is scaled by the aggregation loss's weight and
    /// vice versa. Weights are plain scalars; no gradient flows through
    /// them. Returns the combined loss and `(w_sc, w_sa)`.
    pub fn total_style_loss(&mut self, l_sc: &Tensor, l_sa: &Tensor) -> (Tensor, (f64, f64)) {
        let raw_sc = l_sc.value();
        let raw_sa = l_sa.value();
        let delta_sc = self.ref_sc.map_or(0.0, |r| raw_sc - r);
        let delta_sa = self.ref_sa.map_or(0.0, |r| raw_sa - r);
        let c = &self.config;
        let w_sc = synergy_weight(delta_sc, c.w_init, c.lambda, c.w_min, c.w_max);
        let w_sa = synergy_weight(delta_sa, c.w_init, c.lambda, c.w_min, c.w_max);
        let total = l_sc.mul_scalar(w_sa).add(&l_sa.mul_scalar(w_sc));
        let decay = c.ema_decay;
        self.ref_sc = Some(self.ref_sc.map_or(raw_sc, |r| decay * r + (1.0 - decay) * raw_sc));
        self.ref_sa = Some(self.ref_sa.map_or(raw_sa, |r| decay * r + (1.0 - decay) * raw_sa));
        (total, (w_sc, w_sa))
    }
}

/// Piecewise weight update: growth when the tracked loss fell, shrink when
/// it rose, clamped to `[w_min, w_max]`.
pub fn synergy_weight(delta_loss: f64, w_init: f64, lambda: f64, w_min: f64, w_max: f64) -> f64 {
    let w = if delta_loss > 0.0 {
        w_init * (1.0 - lambda * delta_loss)
    } else {
        w_init * (1.0 + lambda * delta_loss.abs())
    };
    w.clamp(w_min, w_max)
}

/// Bank rows start as projected conditional-prompt embeddings and are free
/// parameters afterwards. The empty phrase is anchored by a bare photo
/// prompt so every row has a concrete text seed.
pub fn init_domain_bank(
    conditions: &[String],
    encoder: &dyn TextEncoder,
    text_head: &Linear,
) -> Result<DomainBank> {
    if conditions.len() < 2 {
        return Err(Error::invalid(
            "domain bank needs at least two conditions (one positive, one negative)",
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for c in conditions {
        if !seen.insert(c.as_str()) {
            return Err(Error::invalid(format!("duplicate condition: {c:?}")));
        }
    }
    let d_style = text_head.out_dim();
    let mut rows = Array2::<f64>::zeros((conditions.len(), d_style));
    for (k, condition) in conditions.iter().enumerate() {
        let prompt = if condition.is_empty() {
            "a photo".to_string()
        } else {
            format!("a photo {condition}")
        };
        let embedded = encoder.encode(&prompt)?;
        let projected = no_grad(|| {
            text_head.forward(&Tensor::constant(
                embedded.insert_axis(ndarray::Axis(0)).into_dyn(),
            ))
        });
        let flat = projected.to_array();
        let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..d_style {
            rows[[k, j]] = flat[[0, j]] / norm;
        }
    }
    Ok(DomainBank {
        vectors: Tensor::param(rows.into_dyn()),
        condition_names: conditions.to_vec(),
    })
}

/// Layer-averaged InfoNCE between pooled, projected styled features and the
/// bank: positives attract, the other `K - 1` rows repel.
///
/// `styled` holds one `[D_l, H_l, W_l]` tensor per styled layer, aligned
/// with `projector.heads`.
pub fn style_contrastive_loss(
    styled: &[Tensor],
    bank: &DomainBank,
    projector: &StyleProjector,
    positive_index: usize,
    tau: f64,
) -> Result<Tensor> {
    if styled.is_empty() {
        return Err(Error::invalid("need at least one styled layer"));
    }
    if styled.len() != projector.heads.len() {
        return Err(Error::invalid(format!(
            "{} styled layers but {} projector heads",
            styled.len(),
            projector.heads.len()
        )));
    }
    if bank.len() < 2 {
        return Err(Error::invalid("contrastive loss needs negatives: K >= 2"));
    }
    if positive_index >= bank.len() {
        return Err(Error::invalid(format!(
            "positive index {positive_index} out of range [0, {})",
            bank.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut total: Option<Tensor> = None;
    for (feat, head) in styled.iter().zip(&projector.heads) {
        let shape = feat.shape();
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let pooled = feat.reshape(&[d, h * w]).mean_cols().reshape(&[1, d]);
        let projected = head.forward(&pooled).normalize_rows(1e-12);
        let sims = projected.matmul(&bank.vectors.transpose2());
        let logits = sims.mul_scalar(1.0 / tau);
        let log_probs = logits.log_softmax_rows();
        let layer_loss = log_probs.narrow_cols(positive_index, 1).sum_all().neg();
        total = Some(match total {
            Some(t) => t.add(&layer_loss),
            None => layer_loss,
        });
    }
    Ok(total.expect("non-empty").mul_scalar(1.0 / styled.len() as f64))
}

/// Weighted mean squared distance between per-pixel normalized styled
/// features and projected specific-domain style features.
///
/// `styled[l]` is `[D_l, H_l, W_l]`; `specific[l]` is `[(H_l*W_l), D_l]`
/// in row-major spatial order. Both sides are unit-normalized per spatial
/// vector inside the loss (zero vectors stay zero).
pub fn style_aggregation_loss(
    styled: &[Tensor],
    specific: &[Tensor],
    layer_weights: &[f64],
) -> Result<Tensor> {
    if styled.is_empty() {
        return Err(Error::invalid("need at least one styled layer"));
    }
    if styled.len() != specific.len() || styled.len() != layer_weights.len() {
        return Err(Error::invalid(format!(
            "layer count mismatch: {} styled, {} specific, {} weights",
            styled.len(),
            specific.len(),
            layer_weights.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((feat, spec), &w_l) in styled.iter().zip(specific).zip(layer_weights) {
        let shape = feat.shape();
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let spec_shape = spec.shape();
        if spec_shape != vec![h * w, d] {
            return Err(Error::shape(
                &[h * w, d],
                &spec_shape,
                "style_aggregation_loss specific features",
            ));
        }
        let v = feat.reshape(&[d, h * w]).transpose2().normalize_rows(1e-12);
        let f_s = spec.normalize_rows(1e-12);
        let diff = v.sub(&f_s);
        let layer_loss = diff
            .mul(&diff)
            .sum_all()
            .mul_scalar(w_l / (h * w) as f64);
        total = Some(match total {
            Some(t) => t.add(&layer_loss),
            None => layer_loss,
        });
    }
    Ok(total.expect("non-empty").mul_scalar(1.0 / styled.len() as f64))
}

/// The full style-synergy unit owned by the training pipeline.
#[derive(Debug, Clone)]
pub struct SsoModule {
    pub bank: DomainBank,
    pub projector: StyleProjector,
    /// Per-layer maps from embedding width into each layer's feature
    /// space (`D_emb -> D_l`, bias-free so ignore pixels stay zero).
    pub specific_projs: Vec<Linear>,
    /// Text-to-style-space head used to seed the bank.
    pub text_head: Linear,
    pub config: SsoConfig,
}

impl SsoModule {
    pub fn new(
        conditions: &[String],
        encoder: &dyn TextEncoder,
        layer_channels: &[usize],
        d_emb: usize,
        d_style: usize,
        config: SsoConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let text_head = Linear::new(d_emb, d_style, rng);
        let bank = init_domain_bank(conditions, encoder, &text_head)?;
        let projector = StyleProjector::new(layer_channels, d_style, rng);
        let specific_projs = layer_channels
            .iter()
            .map(|&d_l| Linear::new_no_bias(d_emb, d_l, rng))
            .collect();
        Ok(Self {
            bank,
            projector,
            specific_projs,
            text_head,
            config,
        })
    }

    /// Specific-embedding rows resized to each styled layer's grid.
    pub fn specific_rows(
        specific: &ndarray::Array3<f64>,
        layer_dims: &[(usize, usize)],
    ) -> Vec<ndarray::ArrayD<f64>> {
        layer_dims
            .iter()
            .map(|&(h, w)| crate::tdst::embedding_rows(specific, h, w))
            .collect()
    }

    /// Project pre-resized specific-embedding rows into each layer's
    /// feature space.
    pub fn project_specific_rows(
        &self,
        rows: &[ndarray::ArrayD<f64>],
    ) -> Result<Vec<Tensor>> {
        if rows.len() != self.specific_projs.len() {
            return Err(Error::invalid("one row block per styled layer required"));
        }
        Ok(self
            .specific_projs
            .iter()
            .zip(rows)
            .map(|(proj, r)| proj.forward(&Tensor::constant(r.clone())))
            .collect())
    }

    /// Project a specific-embedding map (`H x W x D_emb`, full resolution)
    /// into each layer's feature space at that layer's grid.
    pub fn project_specific(
        &self,
        specific: &ndarray::Array3<f64>,
        layer_dims: &[(usize, usize)],
    ) -> Result<Vec<Tensor>> {
        if layer_dims.len() != self.specific_projs.len() {
            return Err(Error::invalid("one (H, W) per styled layer required"));
        }
        self.project_specific_rows(&Self::specific_rows(specific, layer_dims))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.bank"), self.bank.vectors.clone()));
        self.projector.params(&format!("{prefix}.projector"), out);
        for (i, p) in self.specific_projs.iter().enumerate() {
            p.params(&format!("{prefix}.specific_proj{i}"), out);
        }
        self.text_head.params(&format!("{prefix}.text_head"), out);
    }
}
