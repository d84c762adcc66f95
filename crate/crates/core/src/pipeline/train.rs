//! Training loop: per-image condition sampling, feature restyling, query
//! boosting, deep-supervised set losses, synergy-weighted style losses,
//! one optimizer step per batch.

use super::dataset::Sample;
use super::losses::{segmentation_losses, targets_from_label_map};
use super::model::{ForwardMode, ForwardOutput, SegModel};
use super::optim::AdamW;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::prompts::IGNORE_LABEL;
use crate::sso::{style_aggregation_loss, style_contrastive_loss, SynergyState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Loss components and synergy weights for one step; serialized as one
/// JSON line per step in the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    #[serde(rename = "L_sc")]
    pub l_sc: f64,
    #[serde(rename = "L_sa")]
    pub l_sa: f64,
    pub w_sc: f64,
    pub w_sa: f64,
    pub total: f64,
    #[serde(rename = "mIoU", skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

/// Nearest (block-center) downsampling of a label map to the loss grid.
pub fn downsample_labels(labels: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((2 * y + 1) * h) / (2 * out_h);
        let sx = ((2 * x + 1) * w) / (2 * out_w);
        labels[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

pub struct Trainer {
    pub model: SegModel,
    pub optimizer: AdamW,
    pub synergy: SynergyState,
    pub train_samples: Vec<Sample>,
    pub rng: ChaCha8Rng,
    pub rng_seed: u64,
    pub step: u64,
    params: Vec<(String, Tensor)>,
    /// Backbone outputs per sample; the backbone is frozen, so these never
    /// change across steps.
    features: Vec<super::backbone::MultiScaleFeatures>,
    /// Lazily filled embedding rows per (sample, condition).
    style_cache: Vec<Vec<Option<super::model::StyleRows>>>,
    /// Loss-grid label downsamples per sample.
    labels16: Vec<ndarray::Array2<u8>>,
}

impl Trainer {
    pub fn new(model: SegModel, train_samples: Vec<Sample>) -> Result<Self> {
        if train_samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let cfg = &model.config.train;
        let optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
        let synergy = model.fresh_synergy_state();
        let rng_seed = cfg.seed;
        let rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let params = model.params();
        let features: Vec<_> = train_samples
            .iter()
            .map(|s| model.backbone.forward(&s.image))
            .collect();
        let labels16: Vec<_> = train_samples
            .iter()
            .zip(&features)
            .map(|(s, f)| {
                let (_, h, w) = f.f2.dim();
                downsample_labels(&s.labels, h, w)
            })
            .collect();
        let num_conditions = model.config.prompts.conditions.len();
        let style_cache = vec![vec![None; num_conditions]; train_samples.len()];
        Ok(Self {
            model,
            optimizer,
            synergy,
            train_samples,
            rng,
            rng_seed,
            step: 0,
            params,
            features,
            style_cache,
            labels16,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// One optimizer step over a batch sampled with replacement.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch_size = self.model.config.train.batch_size;
        let num_conditions = self.model.config.prompts.conditions.len();
        let flags = self.model.flags;

        let mut l_cls_sum: Option<Tensor> = None;
        let mut l_seg_sum: Option<Tensor> = None;
        let mut l_sc_sum: Option<Tensor> = None;
        let mut l_sa_sum: Option<Tensor> = None;

        for _ in 0..batch_size {
            let sample_idx = self.rng.gen_range(0..self.train_samples.len());
            let condition_index = self.rng.gen_range(0..num_conditions);

            let needs_style = flags.tdst || flags.sso;
            if needs_style && self.style_cache[sample_idx][condition_index].is_none() {
                let rows = self
                    .model
                    .style_rows(&self.train_samples[sample_idx].labels, condition_index)?;
                self.style_cache[sample_idx][condition_index] = Some(rows);
            }
            let style = self.style_cache[sample_idx][condition_index].as_ref();

            let ForwardOutput {
                predictions,
                styled,
            } = self.model.forward_prepared(
                &self.features[sample_idx],
                style,
                &ForwardMode::Train { condition_index },
            )?;

            let (targets, valid) = targets_from_label_map(
                &self.labels16[sample_idx],
                self.model.mask_decoder.num_classes,
            );
            if valid.sum() == 0.0 {
                return Err(Error::Runtime(
                    "sample has no valid pixels at the loss grid".into(),
                ));
            }
            let (l_cls, l_seg) = segmentation_losses(&predictions, &targets, &valid)?;
            l_cls_sum = accumulate(l_cls_sum, l_cls);
            l_seg_sum = accumulate(l_seg_sum, l_seg);

            if flags.sso {
                let rows = style.expect("style rows exist when sso is on");
                let l_sc = style_contrastive_loss(
                    &styled,
                    &self.model.sso.bank,
                    &self.model.sso.projector,
                    condition_index,
                    self.model.config.sso.tau,
                )?;
                let specific = self.model.sso.project_specific_rows(&rows.spec)?;
                let l_sa = style_aggregation_loss(
                    &styled,
                    &specific,
                    &self.model.config.sa_layer_weights,
                )?;
                l_sc_sum = accumulate(l_sc_sum, l_sc);
                l_sa_sum = accumulate(l_sa_sum, l_sa);
            }
        }

        let scale = 1.0 / batch_size as f64;
        let l_cls = l_cls_sum.expect("non-empty batch").mul_scalar(scale);
        let l_seg = l_seg_sum.expect("non-empty batch").mul_scalar(scale);
        let mut total = l_cls.add(&l_seg);

        let (mut l_sc_v, mut l_sa_v, mut w_sc, mut w_sa) = (0.0, 0.0, 1.0, 1.0);
        if flags.sso {
            let l_sc = l_sc_sum.expect("sso on").mul_scalar(scale);
            let l_sa = l_sa_sum.expect("sso on").mul_scalar(scale);
            l_sc_v = l_sc.value();
            l_sa_v = l_sa.value();
            let (l_s, weights) = self.synergy.total_style_loss(&l_sc, &l_sa);
            w_sc = weights.0;
            w_sa = weights.1;
            total = total.add(&l_s);
        }

        let total_v = total.value();
        if !total_v.is_finite() {
            return Err(Error::Runtime(format!(
                "non-finite loss at step {}: {total_v}",
                self.step
            )));
        }

        AdamW::zero_grads(&self.params);
        total.backward();
        self.optimizer.step(&self.params);
        if flags.sso {
            self.model.sso.bank.renormalize();
        }
        self.step += 1;

        Ok(StepMetrics {
            step: self.step,
            l_cls: l_cls.value(),
            l_seg: l_seg.value(),
            l_sc: l_sc_v,
            l_sa: l_sa_v,
            w_sc,
            w_sa,
            total: total_v,
            miou: None,
        })
    }

    /// Run `steps` training steps, invoking `on_step` after each.
    pub fn run(
        &mut self,
        steps: usize,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<()> {
        for _ in 0..steps {
            let metrics = self.train_step()?;
            on_step(&metrics);
        }
        Ok(())
    }
}

fn accumulate(acc: Option<Tensor>, v: Tensor) -> Option<Tensor> {
    Some(match acc {
        Some(a) => a.add(&v),
        None => v,
    })
}

/// Training samples whose labels are entirely ignore would break the loss;
/// filter them out up front.
pub fn usable_samples(samples: Vec<Sample>) -> Vec<Sample> {
    samples
        .into_iter()
        .filter(|s| s.labels.iter().any(|&l| l != IGNORE_LABEL))
        .collect()
}
