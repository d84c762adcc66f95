//! The assembled segmentation model: frozen backbone, query booster,
//! feature restyling, pixel/mask decoders, and the style-loss unit.

use super::backbone::{MultiScaleFeatures, StubBackbone};
use super::dataset::{Sample, CLASS_NAMES, NUM_CLASSES};
use super::decoder::{MaskDecoder, PixelDecoder};
use super::losses::PredictionSet;
use crate::autodiff::{no_grad, Tensor};
use crate::config::{AblationFlags, RunConfig};
use crate::error::{Error, Result};
use crate::prompts::{build_class_embeddings, PromptCache, StubTextEncoder, TextEmbedTable};
use crate::sqb::SqbModule;
use crate::sso::{SsoModule, SynergyState};
use crate::tdst::TdstModule;
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub enum ForwardMode {
    Eval,
    /// Training with the sampled conditional-prompt index.
    Train { condition_index: usize },
}

pub struct ForwardOutput {
    pub predictions: PredictionSet,
    /// Styled-layer tensors in `tdst.control.styled_layers` order
    /// (unstyled constants when the transform is off or in eval mode).
    pub styled: Vec<Tensor>,
}

/// Per-(sample, condition) embedding rows at each styled layer's grid.
/// Computing these is condition-dependent but parameter-free, so the
/// trainer caches them across steps.
#[derive(Debug, Clone)]
pub struct StyleRows {
    pub diff: Vec<ArrayD<f64>>,
    pub spec: Vec<ArrayD<f64>>,
}

pub struct SegModel {
    pub backbone: StubBackbone,
    pub queries: Tensor,
    pub sqb: SqbModule,
    pub tdst: TdstModule,
    pub sso: SsoModule,
    pub pixel_decoder: PixelDecoder,
    pub mask_decoder: MaskDecoder,
    pub text_table: TextEmbedTable,
    pub prompt_cache: PromptCache,
    pub flags: AblationFlags,
    pub config: RunConfig,
}

impl SegModel {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed.wrapping_add(0xC0FFEE));
        let encoder = StubTextEncoder::new(m.d_emb, m.encoder_seed);
        let class_names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        let text_table = build_class_embeddings(&class_names, &config.prompts.templates, &encoder)?;
        let prompt_cache = PromptCache::build(
            &class_names,
            &config.prompts.templates,
            &config.prompts.conditions,
            &encoder,
        )?;

        let channels = m.backbone_channels;
        let styled_channels: Vec<usize> = config
            .tdst
            .styled_layers
            .iter()
            .map(|&layer| channels[layer - 2])
            .collect();

        let backbone = StubBackbone::new(channels, m.backbone_seed);
        let queries = Tensor::param(ArrayD::from_shape_fn(
            vec![m.num_queries, m.d_q],
            |_| rng.gen_range(-0.1..0.1),
        ));
        let sqb = SqbModule::new(channels[3], m.d_emb, m.d_q, NUM_CLASSES, m.heads, &mut rng);
        let tdst = TdstModule::new(m.d_emb, &styled_channels, config.tdst.clone(), &mut rng)?;
        let sso = SsoModule::new(
            &config.prompts.conditions,
            &encoder,
            &styled_channels,
            m.d_emb,
            m.d_style,
            config.sso.clone(),
            &mut rng,
        )?;
        let pixel_decoder = PixelDecoder::new(channels, m.d_q, &mut rng);
        let mask_decoder = MaskDecoder::new(
            [channels[1], channels[2], channels[3]],
            m.d_q,
            NUM_CLASSES,
            m.heads,
            &mut rng,
        );
        Ok(Self {
            backbone,
            queries,
            sqb,
            tdst,
            sso,
            pixel_decoder,
            mask_decoder,
            text_table,
            prompt_cache,
            flags: config.ablation,
            config: config.clone(),
        })
    }

    /// Trainable parameters for the active component set. The backbone is
    /// frozen and the text table is constant, so neither appears.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("queries".to_string(), self.queries.clone())];
        if self.flags.sqb {
            self.sqb.params("sqb", &mut out);
        }
        if self.flags.tdst {
            out.extend(self.tdst.params());
        }
        if self.flags.sso {
            self.sso.params("sso", &mut out);
        }
        self.pixel_decoder.params("pixel_decoder", &mut out);
        self.mask_decoder.params("mask_decoder", &mut out);
        out
    }

    /// Every parameter regardless of ablation flags (checkpoint surface).
    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("queries".to_string(), self.queries.clone())];
        self.sqb.params("sqb", &mut out);
        out.extend(self.tdst.params());
        self.sso.params("sso", &mut out);
        self.pixel_decoder.params("pixel_decoder", &mut out);
        self.mask_decoder.params("mask_decoder", &mut out);
        out
    }

    /// Embedding rows for one (labels, condition) pair at the styled
    /// layers' grids.
    pub fn style_rows(
        &self,
        labels: &ndarray::Array2<u8>,
        condition_index: usize,
    ) -> Result<StyleRows> {
        let e_d = self.prompt_cache.pixel_embeddings(labels, condition_index)?;
        let dims = self.styled_layer_dims_for(labels.dim());
        Ok(StyleRows {
            diff: self.tdst.difference_rows(&e_d, &dims),
            spec: SsoModule::specific_rows(&e_d.specific, &dims),
        })
    }

    pub fn forward(&self, sample: &Sample, mode: ForwardMode) -> Result<ForwardOutput> {
        let feats = self.backbone.forward(&sample.image);
        let style = match &mode {
            ForwardMode::Train { condition_index } => {
                Some(self.style_rows(&sample.labels, *condition_index)?)
            }
            ForwardMode::Eval => None,
        };
        self.forward_prepared(&feats, style.as_ref(), &mode)
    }

    /// Forward over precomputed backbone features and (for training)
    /// precomputed embedding rows.
    pub fn forward_prepared(
        &self,
        feats: &MultiScaleFeatures,
        style: Option<&StyleRows>,
        mode: &ForwardMode,
    ) -> Result<ForwardOutput> {
        let styled_layers = &self.tdst.control.styled_layers;

        // Style the configured scales during training; everything else
        // passes through as constants.
        let styled = match mode {
            ForwardMode::Train { .. } if self.flags.tdst => {
                let rows = &style
                    .ok_or_else(|| Error::invalid("training forward requires style rows"))?
                    .diff;
                let inputs: Vec<ndarray::Array3<f64>> = styled_layers
                    .iter()
                    .map(|&l| feats.scale(l).clone())
                    .collect();
                self.tdst.apply_rows_cached(&inputs, rows, true)?
            }
            _ => styled_layers
                .iter()
                .map(|&l| Tensor::constant(feats.scale(l).clone().into_dyn()))
                .collect(),
        };

        let tensor_for = |scale: usize| -> Tensor {
            match styled_layers.iter().position(|&l| l == scale) {
                Some(slot) => styled[slot].clone(),
                None => Tensor::constant(feats.scale(scale).clone().into_dyn()),
            }
        };
        let t2 = tensor_for(2);
        let t3 = tensor_for(3);
        let t4 = tensor_for(4);
        let t5 = tensor_for(5);

        let queries = if self.flags.sqb {
            self.sqb.boost(&self.queries, &t5, &self.text_table)?
        } else {
            self.queries.clone()
        };

        let pixel_embeddings = self
            .pixel_decoder
            .forward(&[t2, t3.clone(), t4.clone(), t5.clone()])?;
        let (mask_h, mask_w) = (feats.f2.dim().1, feats.f2.dim().2);
        let predictions = self.mask_decoder.forward(
            &queries,
            &[t3, t4, t5],
            &pixel_embeddings,
            mask_h,
            mask_w,
        )?;

        Ok(ForwardOutput {
            predictions,
            styled,
        })
    }

    /// Inference forward: no tape, no styling, no style losses.
    pub fn eval_forward(&self, sample: &Sample) -> Result<PredictionSet> {
        no_grad(|| self.forward(sample, ForwardMode::Eval).map(|o| o.predictions))
    }

    pub fn fresh_synergy_state(&self) -> SynergyState {
        SynergyState::new(self.config.sso.clone())
    }

    /// Spatial dims of each styled layer for an image of the configured
    /// size.
    pub fn styled_layer_dims(&self) -> Vec<(usize, usize)> {
        let size = self.config.dataset.image_size;
        self.styled_layer_dims_for((size, size))
    }

    pub fn styled_layer_dims_for(&self, image_dims: (usize, usize)) -> Vec<(usize, usize)> {
        self.tdst
            .control
            .styled_layers
            .iter()
            .map(|&l| (image_dims.0 >> l, image_dims.1 >> l))
            .collect()
    }

    /// Overwrite parameters by name (checkpoint restore).
    pub fn load_params(&self, stored: &[(String, ArrayD<f64>)]) -> Result<()> {
        let live = self.all_params();
        let mut by_name: std::collections::HashMap<&str, &Tensor> =
            live.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, data) in stored {
            let tensor = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {name:?} not in model"))
            })?;
            if tensor.shape() != data.shape() {
                return Err(Error::shape(
                    &tensor.shape(),
                    data.shape(),
                    &format!("checkpoint parameter {name}"),
                ));
            }
            tensor.set_data(data.clone());
        }
        if !by_name.is_empty() {
            let missing: Vec<&str> = by_name.keys().cloned().collect();
            return Err(Error::Config(format!(
                "checkpoint is missing parameters: {missing:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::generate_dataset;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.num_queries = 8;
        cfg.model.d_q = 32;
        cfg.model.d_emb = 16;
        cfg.model.d_style = 16;
        cfg.model.heads = 2;
        cfg.model.backbone_channels = [8, 12, 16, 24];
        cfg.dataset.n_per_domain = 2;
        cfg
    }

    fn one_sample(cfg: &RunConfig) -> Sample {
        let domains = cfg.ordered_domains();
        generate_dataset(
            &domains[..1],
            1,
            cfg.dataset.layout_seed,
            cfg.dataset.image_size,
        )
        .unwrap()
        .remove(0)
    }

    #[test]
    fn forward_shapes_line_up() {
        let cfg = tiny_config();
        let model = SegModel::new(&cfg).unwrap();
        let sample = one_sample(&cfg);
        let out = model
            .forward(&sample, ForwardMode::Train { condition_index: 1 })
            .unwrap();
        assert_eq!(out.predictions.layers.len(), 6);
        assert_eq!(out.predictions.mask_h, 16);
        for layer in &out.predictions.layers {
            assert_eq!(layer.class_logits.shape(), vec![8, NUM_CLASSES + 1]);
            assert_eq!(layer.mask_logits.shape(), vec![8, 256]);
        }
        assert_eq!(out.styled.len(), 3);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let model = SegModel::new(&cfg).unwrap();
        let sample = one_sample(&cfg);
        let a = model.eval_forward(&sample).unwrap();
        let b = model.eval_forward(&sample).unwrap();
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            assert_eq!(la.class_logits.to_array(), lb.class_logits.to_array());
            assert_eq!(la.mask_logits.to_array(), lb.mask_logits.to_array());
        }
    }

    #[test]
    fn eval_predictions_ignore_tdst_and_sso_flags() {
        let cfg_on = tiny_config();
        let mut cfg_off = tiny_config();
        cfg_off.ablation.tdst = false;
        cfg_off.ablation.sso = false;
        let model_on = SegModel::new(&cfg_on).unwrap();
        let model_off = SegModel::new(&cfg_off).unwrap();
        let sample = one_sample(&cfg_on);
        let a = model_on.eval_forward(&sample).unwrap();
        let b = model_off.eval_forward(&sample).unwrap();
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            let ca = la.class_logits.to_array();
            let cb = lb.class_logits.to_array();
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            let ma = la.mask_logits.to_array();
            let mb = lb.mask_logits.to_array();
            for (x, y) in ma.iter().zip(mb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = tiny_config();
        let a = SegModel::new(&cfg).unwrap();
        let b = SegModel::new(&cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.all_params().iter().zip(b.all_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_array(), tb.to_array());
        }
    }

    #[test]
    fn load_params_roundtrip_and_rejects_unknown() {
        let cfg = tiny_config();
        let model = SegModel::new(&cfg).unwrap();
        let stored: Vec<(String, ArrayD<f64>)> = model
            .all_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_array().mapv(|v| v + 1.0)))
            .collect();
        model.load_params(&stored).unwrap();
        assert_eq!(model.queries.to_array(), stored[0].1);

        let bogus = vec![("nope".to_string(), ArrayD::zeros(vec![1]))];
        assert!(model.load_params(&bogus).is_err());
    }
}
