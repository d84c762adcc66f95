//! Pixel decoder (lateral projections + top-down fusion) and the
//! query-based mask decoder with per-layer prediction heads.

use super::losses::{LayerPrediction, PredictionSet};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp2, MultiHeadAttention};
use rand_chacha::ChaCha8Rng;

/// Tokens-as-rows view of a `[D, H, W]` tensor: `[(H*W), D]`.
fn to_tokens(feature: &Tensor) -> Tensor {
    let shape = feature.shape();
    feature.reshape(&[shape[0], shape[1] * shape[2]]).transpose2()
}

/// FPN-style fusion of four scales into stride-4 per-pixel embeddings.
pub struct PixelDecoder {
    /// One `D_l -> D_q` projection per scale, coarse to fine: f5..f2.
    pub laterals: Vec<Linear>,
    pub output: Linear,
}

impl PixelDecoder {
    pub fn new(channels: [usize; 4], d_q: usize, rng: &mut ChaCha8Rng) -> Self {
        // channels = [c2, c3, c4, c5]; laterals stored coarse-first.
        let laterals = vec![
            Linear::new(channels[3], d_q, rng),
            Linear::new(channels[2], d_q, rng),
            Linear::new(channels[1], d_q, rng),
            Linear::new(channels[0], d_q, rng),
        ];
        Self {
            laterals,
            output: Linear::new(d_q, d_q, rng),
        }
    }

    /// `scales` are `[f2, f3, f4, f5]` as `[D, H, W]` tensors with dyadic
    /// spatial dims. Returns stride-4 pixel embeddings `[(H2*W2), D_q]`.
    pub fn forward(&self, scales: &[Tensor; 4]) -> Result<Tensor> {
        let dims: Vec<(usize, usize)> = scales
            .iter()
            .map(|s| {
                let sh = s.shape();
                (sh[1], sh[2])
            })
            .collect();
        for i in 0..3 {
            if dims[i].0 != 2 * dims[i + 1].0 || dims[i].1 != 2 * dims[i + 1].1 {
                return Err(Error::invalid(format!(
                    "scale {} dims {:?} are not double of scale {} dims {:?}",
                    i + 2,
                    dims[i],
                    i + 3,
                    dims[i + 1]
                )));
            }
        }
        let d_q = self.output.out_dim();
        // Top-down: start at f5, upsample, add the lateral of the next
        // finer scale.
        let mut current: Option<Tensor> = None;
        for (level, scale_idx) in [3usize, 2, 1, 0].iter().enumerate() {
            let lateral = self.laterals[level].forward(&to_tokens(&scales[*scale_idx]));
            let (h, w) = dims[*scale_idx];
            let lateral_spatial = lateral.transpose2().reshape(&[d_q, h, w]);
            current = Some(match current {
                None => lateral_spatial,
                Some(coarse) => coarse.upsample2_nearest().add(&lateral_spatial),
            });
        }
        let fused = current.expect("four scales");
        let (h2, w2) = dims[0];
        let tokens = fused.reshape(&[d_q, h2 * w2]).transpose2();
        Ok(self.output.forward(&tokens))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.laterals.iter().enumerate() {
            l.params(&format!("{prefix}.lateral{}", 5 - i), out);
        }
        self.output.params(&format!("{prefix}.output"), out);
    }
}

/// One decoder block: cross-attention to a feature scale, self-attention
/// among queries, feed-forward; residual + layer norm after each.
pub struct DecoderLayer {
    pub cross: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub ffn: Mlp2,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    fn new(d_q: usize, ffn_hidden: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cross: MultiHeadAttention::new(d_q, d_q, d_q, heads, rng),
            norm_cross: LayerNorm::new(d_q),
            self_attn: MultiHeadAttention::new(d_q, d_q, d_q, heads, rng),
            norm_self: LayerNorm::new(d_q),
            ffn: Mlp2::new(d_q, ffn_hidden, d_q, rng),
            norm_ffn: LayerNorm::new(d_q),
        }
    }

    fn forward(&self, queries: &Tensor, tokens: &Tensor) -> Tensor {
        let x = self
            .norm_cross
            .forward(&queries.add(&self.cross.forward(queries, tokens)));
        let x = self
            .norm_self
            .forward(&x.add(&self.self_attn.forward(&x, &x)));
        self.norm_ffn.forward(&x.add(&self.ffn.forward(&x)))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.cross.params(&format!("{prefix}.cross"), out);
        self.norm_cross.params(&format!("{prefix}.norm_cross"), out);
        self.self_attn.params(&format!("{prefix}.self_attn"), out);
        self.norm_self.params(&format!("{prefix}.norm_self"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
        self.norm_ffn.params(&format!("{prefix}.norm_ffn"), out);
    }
}

/// Six decoder layers cycling round-robin over the three coarser scales,
/// with class and mask heads applied after every layer.
pub struct MaskDecoder {
    /// `D_l -> D_q` input projections for f3, f4, f5.
    pub input_projs: Vec<Linear>,
    pub layers: Vec<DecoderLayer>,
    pub class_head: Linear,
    pub mask_embed: Mlp2,
    pub num_classes: usize,
}

pub const DECODER_LAYERS: usize = 6;

impl MaskDecoder {
    pub fn new(
        scale_channels: [usize; 3],
        d_q: usize,
        num_classes: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input_projs = scale_channels
            .iter()
            .map(|&c| Linear::new(c, d_q, rng))
            .collect();
        let layers = (0..DECODER_LAYERS)
            .map(|_| DecoderLayer::new(d_q, 2 * d_q, heads, rng))
            .collect();
        Self {
            input_projs,
            layers,
            class_head: Linear::new(d_q, num_classes + 1, rng),
            mask_embed: Mlp2::new(d_q, d_q, d_q, rng),
            num_classes,
        }
    }

    /// `queries: [N, D_q]`; `scales` are `[f3, f4, f5]` as `[D, H, W]`
    /// tensors; `pixel_embeddings: [P, D_q]` at stride 4.
    pub fn forward(
        &self,
        queries: &Tensor,
        scales: &[Tensor; 3],
        pixel_embeddings: &Tensor,
        mask_h: usize,
        mask_w: usize,
    ) -> Result<PredictionSet> {
        if pixel_embeddings.shape()[0] != mask_h * mask_w {
            return Err(Error::shape(
                &[mask_h * mask_w],
                &[pixel_embeddings.shape()[0]],
                "mask grid vs pixel embeddings",
            ));
        }
        let tokens: Vec<Tensor> = scales
            .iter()
            .zip(&self.input_projs)
            .map(|(s, proj)| proj.forward(&to_tokens(s)))
            .collect();
        let pixel_t = pixel_embeddings.transpose2();

        let mut x = queries.clone();
        let mut layer_predictions = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, &tokens[i % tokens.len()]);
            let class_logits = self.class_head.forward(&x);
            let mask_logits = self.mask_embed.forward(&x).matmul(&pixel_t);
            layer_predictions.push(LayerPrediction {
                class_logits,
                mask_logits,
            });
        }
        Ok(PredictionSet {
            layers: layer_predictions,
            mask_h,
            mask_w,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, p) in self.input_projs.iter().enumerate() {
            p.params(&format!("{prefix}.input_proj{}", i + 3), out);
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("{prefix}.layer{i}"), out);
        }
        self.class_head.params(&format!("{prefix}.class_head"), out);
        self.mask_embed.params(&format!("{prefix}.mask_embed"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::constant(ArrayD::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0)))
    }

    fn toy_scales(rng: &mut ChaCha8Rng) -> [Tensor; 4] {
        [
            rand_tensor(&[4, 8, 8], rng),
            rand_tensor(&[6, 4, 4], rng),
            rand_tensor(&[8, 2, 2], rng),
            rand_tensor(&[10, 1, 1], rng),
        ]
    }

    #[test]
    fn pixel_decoder_emits_stride4_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let decoder = PixelDecoder::new([4, 6, 8, 10], 12, &mut rng);
        let scales = toy_scales(&mut rng);
        let out = decoder.forward(&scales).unwrap();
        assert_eq!(out.shape(), vec![64, 12]);
    }

    #[test]
    fn pixel_decoder_rejects_non_dyadic_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let decoder = PixelDecoder::new([4, 6, 8, 10], 12, &mut rng);
        let scales = [
            rand_tensor(&[4, 8, 8], &mut rng),
            rand_tensor(&[6, 4, 4], &mut rng),
            rand_tensor(&[8, 3, 2], &mut rng),
            rand_tensor(&[10, 1, 1], &mut rng),
        ];
        assert!(decoder.forward(&scales).is_err());
    }

    #[test]
    fn decoder_emits_six_layer_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let decoder = MaskDecoder::new([6, 8, 10], 16, 5, 4, &mut rng);
        let queries = rand_tensor(&[20, 16], &mut rng);
        let scales = [
            rand_tensor(&[6, 4, 4], &mut rng),
            rand_tensor(&[8, 2, 2], &mut rng),
            rand_tensor(&[10, 1, 1], &mut rng),
        ];
        let pixel = rand_tensor(&[64, 16], &mut rng);
        let preds = decoder.forward(&queries, &scales, &pixel, 8, 8).unwrap();
        assert_eq!(preds.layers.len(), 6);
        for layer in &preds.layers {
            assert_eq!(layer.class_logits.shape(), vec![20, 6]);
            assert_eq!(layer.mask_logits.shape(), vec![20, 64]);
        }
        // Layer refinements must actually change the predictions.
        let first = preds.layers[0].class_logits.to_array();
        let last = preds.layers[5].class_logits.to_array();
        let diff = first
            .iter()
            .zip(last.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-6, "layer 1 and 6 predictions identical");
    }

    #[test]
    fn zero_pixel_embeddings_zero_the_mask_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let decoder = MaskDecoder::new([6, 8, 10], 16, 3, 4, &mut rng);
        let queries = rand_tensor(&[7, 16], &mut rng);
        let scales = [
            rand_tensor(&[6, 4, 4], &mut rng),
            rand_tensor(&[8, 2, 2], &mut rng),
            rand_tensor(&[10, 1, 1], &mut rng),
        ];
        let pixel = Tensor::constant(ArrayD::zeros(vec![64, 16]));
        let preds = decoder.forward(&queries, &scales, &pixel, 8, 8).unwrap();
        for layer in &preds.layers {
            assert!(layer.mask_logits.to_array().iter().all(|&v| v == 0.0));
        }
    }
}
