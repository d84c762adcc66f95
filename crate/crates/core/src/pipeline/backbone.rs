//! Frozen convolutional stub backbone.
//!
//! A small randomly initialized (then fixed) stack of stride-2 convolutions
//! emitting four feature scales at strides 4, 8, 16 and 32. Deterministic
//! for a given seed; a real pretrained encoder can replace it behind the
//! same output contract.

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One scale per stride: `f2` at stride 4 through `f5` at stride 32.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub f2: Array3<f64>,
    pub f3: Array3<f64>,
    pub f4: Array3<f64>,
    pub f5: Array3<f64>,
}

impl MultiScaleFeatures {
    pub fn scale(&self, index: usize) -> &Array3<f64> {
        match index {
            2 => &self.f2,
            3 => &self.f3,
            4 => &self.f4,
            5 => &self.f5,
            _ => panic!("scale index {index} out of range 2..=5"),
        }
    }

    pub fn channel_dims(&self) -> [usize; 4] {
        [
            self.f2.dim().0,
            self.f3.dim().0,
            self.f4.dim().0,
            self.f5.dim().0,
        ]
    }
}

struct ConvLayer {
    /// `[out, in, 3, 3]`
    weight: Array4<f64>,
    bias: Array1<f64>,
}

impl ConvLayer {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
        let weight =
            Array4::from_shape_fn((c_out, c_in, 3, 3), |_| rng.gen_range(-1.0..1.0) * std * 1.7);
        let bias = Array1::from_shape_fn(c_out, |_| rng.gen_range(-0.05..0.05));
        Self { weight, bias }
    }

    /// 3x3 convolution, stride 2, padding 1, ReLU.
    fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = input.dim();
        let c_out = self.weight.dim().0;
        debug_assert_eq!(c_in, self.weight.dim().1);
        let out_h = (h + 1) / 2;
        let out_w = (w + 1) / 2;
        let mut out = Array3::<f64>::zeros((c_out, out_h, out_w));
        for oc in 0..c_out {
            for oy in 0..out_h {
                let cy = (2 * oy) as isize;
                for ox in 0..out_w {
                    let cx = (2 * ox) as isize;
                    let mut acc = self.bias[oc];
                    for ic in 0..c_in {
                        for ky in 0..3isize {
                            let y = cy + ky - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..3isize {
                                let x = cx + kx - 1;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc += self.weight[[oc, ic, ky as usize, kx as usize]]
                                    * input[[ic, y as usize, x as usize]];
                            }
                        }
                    }
                    out[[oc, oy, ox]] = acc.max(0.0);
                }
            }
        }
        out
    }
}

/// Frozen four-stage feature extractor.
pub struct StubBackbone {
    stem: ConvLayer,
    stages: [ConvLayer; 4],
    pub channels: [usize; 4],
    pub seed: u64,
}

impl StubBackbone {
    pub fn new(channels: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_out = 16;
        let stem = ConvLayer::new(3, stem_out, &mut rng);
        let stages = [
            ConvLayer::new(stem_out, channels[0], &mut rng),
            ConvLayer::new(channels[0], channels[1], &mut rng),
            ConvLayer::new(channels[1], channels[2], &mut rng),
            ConvLayer::new(channels[2], channels[3], &mut rng),
        ];
        Self {
            stem,
            stages,
            channels,
            seed,
        }
    }

    /// `image` is `3 x H x W` in `[0, 1]`.
    pub fn forward(&self, image: &Array3<f64>) -> MultiScaleFeatures {
        let centered = image.mapv(|v| (v - 0.5) * 2.0);
        let x = self.stem.forward(&centered);
        let f2 = self.stages[0].forward(&x);
        let f3 = self.stages[1].forward(&f2);
        let f4 = self.stages[2].forward(&f3);
        let f5 = self.stages[3].forward(&f4);
        MultiScaleFeatures { f2, f3, f4, f5 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_match_contract() {
        let backbone = StubBackbone::new([8, 12, 16, 24], 0);
        let image = Array3::<f64>::from_elem((3, 64, 64), 0.3);
        let feats = backbone.forward(&image);
        assert_eq!(feats.f2.dim(), (8, 16, 16));
        assert_eq!(feats.f3.dim(), (12, 8, 8));
        assert_eq!(feats.f4.dim(), (16, 4, 4));
        assert_eq!(feats.f5.dim(), (24, 2, 2));
    }

    #[test]
    fn frozen_and_deterministic() {
        let backbone = StubBackbone::new([8, 12, 16, 24], 7);
        let image = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((c + 2 * y + 3 * x) % 11) as f64 / 11.0
        });
        let a = backbone.forward(&image);
        let b = backbone.forward(&image);
        assert_eq!(a.f2, b.f2);
        assert_eq!(a.f5, b.f5);
        let again = StubBackbone::new([8, 12, 16, 24], 7);
        let c = again.forward(&image);
        assert_eq!(a.f5, c.f5);
    }

    #[test]
    fn single_pixel_change_propagates() {
        let backbone = StubBackbone::new([8, 12, 16, 24], 3);
        let image = Array3::<f64>::from_elem((3, 64, 64), 0.5);
        let mut tweaked = image.clone();
        tweaked[[1, 20, 20]] = 1.0;
        let a = backbone.forward(&image);
        let b = backbone.forward(&tweaked);
        let diff = a
            .f5
            .iter()
            .zip(b.f5.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 0.0, "a pixel change must reach the last scale");
    }
}
