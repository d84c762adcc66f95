//! Text-driven style transform: modulates the low-frequency amplitude
//! spectrum of feature maps with tanh-bounded style difference features.
//!
//! The transform is training-only. Each styled feature scale is decomposed
//! per channel into a centered amplitude and phase spectrum; inside a
//! centered low-frequency window the amplitude is scaled by
//! `1 + beta * tanh(F_d)` (clamped at zero so the phase never flips sign),
//! and the result is recomposed with the original phase. Gradients flow to
//! the style adapters through a dedicated spectral op whose backward pass
//! is itself a Fourier transform.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fft::{fft2, fftshift2, ifft2, ifftshift2};
use crate::prompts::PixelDomainEmbeddings;
use crate::resample::{bilinear_resize_hwd, nearest_index, nearest_resize_dhw};
use ndarray::{Array2, Array3, ArrayD, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Centered amplitude and phase spectra of a `D x H x W` feature map.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Nonnegative, zero frequency at `(floor(H/2), floor(W/2))`.
    pub amplitude: Array3<f64>,
    /// In `(-pi, pi]`, same centering as the amplitude.
    pub phase: Array3<f64>,
}

/// Centered rectangular indicator selecting the low-frequency band.
#[derive(Debug, Clone)]
pub struct LowFreqMask {
    /// `H x W` of zeros and ones.
    pub mask: Array2<f64>,
    pub alpha: f64,
}

/// Which scales get styled and how strongly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StyleControl {
    /// Low-frequency ratio shared by all styled layers.
    pub alpha: f64,
    /// Per-layer style intensity, aligned with `styled_layers`.
    pub betas: Vec<f64>,
    /// Scale indices receiving the transform (e.g. `[3, 4, 5]`).
    pub styled_layers: Vec<usize>,
}

impl Default for StyleControl {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            betas: vec![1.0, 2.0, 4.0],
            styled_layers: vec![3, 4, 5],
        }
    }
}

impl StyleControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.betas.len() != self.styled_layers.len() {
            return Err(Error::invalid(format!(
                "betas ({}) and styled_layers ({}) must have equal length",
                self.betas.len(),
                self.styled_layers.len()
            )));
        }
        if self.betas.iter().any(|&b| b <= 0.0) {
            return Err(Error::invalid("betas must be positive"));
        }
        Ok(())
    }
}

/// Per-channel 2-D DFT split into centered amplitude and phase.
pub fn fft_decompose(features: &Array3<f64>) -> Result<SpectralDecomposition> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    let (d, h, w) = features.dim();
    let mut amplitude = Array3::<f64>::zeros((d, h, w));
    let mut phase = Array3::<f64>::zeros((d, h, w));
    for c in 0..d {
        let plane = features.index_axis(ndarray::Axis(0), c).to_owned();
        let spec = fftshift2(&fft2(&plane));
        for y in 0..h {
            for x in 0..w {
                let v = spec[[y, x]];
                amplitude[[c, y, x]] = v.norm();
                phase[[c, y, x]] = v.im.atan2(v.re);
            }
        }
    }
    Ok(SpectralDecomposition { amplitude, phase })
}

/// Recompose features from a (possibly modified) centered amplitude and the
/// original centered phase. The imaginary residue is discarded.
pub fn ifft_compose(amplitude: &Array3<f64>, phase: &Array3<f64>) -> Result<Array3<f64>> {
    if amplitude.dim() != phase.dim() {
        return Err(Error::shape(
            &[amplitude.dim().0, amplitude.dim().1, amplitude.dim().2],
            &[phase.dim().0, phase.dim().1, phase.dim().2],
            "ifft_compose amplitude vs phase",
        ));
    }
    let (d, h, w) = amplitude.dim();
    let mut out = Array3::<f64>::zeros((d, h, w));
    for c in 0..d {
        let mut spec = Array2::<Complex64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let a = amplitude[[c, y, x]];
                let p = phase[[c, y, x]];
                spec[[y, x]] = Complex64::new(a * p.cos(), a * p.sin());
            }
        }
        let plane = ifft2(&ifftshift2(&spec));
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = plane[[y, x]].re;
            }
        }
    }
    Ok(out)
}

/// Centered low-frequency indicator: ones on rows
/// `[ceil(H/2 * (1-alpha)), floor(H/2 * (1+alpha))]` (inclusive, clamped to
/// the grid) and the analogous column range.
pub fn low_freq_mask(h: usize, w: usize, alpha: f64) -> Result<LowFreqMask> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("mask dimensions must be positive"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let bounds = |n: usize| -> (usize, usize) {
        let half = n as f64 / 2.0;
        let lo = (half * (1.0 - alpha)).ceil() as usize;
        let hi = ((half * (1.0 + alpha)).floor() as usize).min(n - 1);
        (lo, hi)
    };
    let (y0, y1) = bounds(h);
    let (x0, x1) = bounds(w);
    let mut mask = Array2::<f64>::zeros((h, w));
    for y in y0..=y1 {
        for x in x0..=x1 {
            mask[[y, x]] = 1.0;
        }
    }
    Ok(LowFreqMask { mask, alpha })
}

fn modulation_factor(t: f64, beta: f64) -> f64 {
    (1.0 + beta * t).max(0.0)
}

/// Composite amplitude: inside the mask each bin is scaled by
/// `1 + beta * tanh(F_d)` (clamped at zero), outside it is untouched.
/// `f_d` is nearest-resampled to the frequency grid when dims differ.
pub fn modulate_amplitude(
    amplitude: &Array3<f64>,
    mask: &LowFreqMask,
    f_d: &Array3<f64>,
    beta: f64,
) -> Result<Array3<f64>> {
    if beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let (d, h, w) = amplitude.dim();
    if f_d.dim().0 != d {
        return Err(Error::shape(
            &[d],
            &[f_d.dim().0],
            "modulate_amplitude channel count",
        ));
    }
    if mask.mask.dim() != (h, w) {
        return Err(Error::shape(
            &[h, w],
            &[mask.mask.dim().0, mask.mask.dim().1],
            "modulate_amplitude mask dims",
        ));
    }
    let f_d = nearest_resize_dhw(f_d, h, w);
    let mut out = amplitude.clone();
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.mask[[y, x]] > 0.0 {
                    out[[c, y, x]] =
                        amplitude[[c, y, x]] * modulation_factor(f_d[[c, y, x]].tanh(), beta);
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable restyle: `Re(ifft2(ratio . fft2(f)))` per channel, where
/// the real ratio field is the masked, clamped `1 + beta * tanh(F_d)`.
///
/// `f` is a constant (the backbone is frozen); gradients flow to `f_d`,
/// laid out as `[(H*W), D]` rows in row-major spatial order. `f_d` spatial
/// dims may differ from the frequency grid; nearest-neighbor resampling is
/// applied, and the backward pass scatters through the same resampling.
pub fn restyle_features(
    features: &Array3<f64>,
    f_d: &Tensor,
    mask: &LowFreqMask,
    beta: f64,
) -> Result<Tensor> {
    if beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let (d, h, w) = features.dim();
    let fd_shape = f_d.shape();
    if fd_shape.len() != 2 || fd_shape[1] != d {
        return Err(Error::shape(
            &[h * w, d],
            &fd_shape,
            "restyle_features f_d layout",
        ));
    }
    let fd_pixels = fd_shape[0];
    // Infer the adapter's spatial grid: it must tile as rows of a 2-d map
    // whose aspect matches the feature map (the pipeline always passes the
    // layer's own H x W).
    let (fh, fw) = infer_grid(fd_pixels, h, w)?;

    // Forward spectra of the (frozen) input, cached for the backward pass.
    let mut spectra: Vec<Array2<Complex64>> = Vec::with_capacity(d);
    for c in 0..d {
        spectra.push(fft2(&features.index_axis(ndarray::Axis(0), c).to_owned()));
    }

    let fd_data = f_d
        .to_array()
        .into_dimensionality::<Ix2>()
        .expect("2-d f_d");
    let tanh_vals = fd_data.mapv(f64::tanh);

    // Centered ratio field per channel, then un-centered for the multiply.
    let mut ratios: Vec<Array2<f64>> = Vec::with_capacity(d);
    let mut out = Array3::<f64>::zeros((d, h, w));
    for c in 0..d {
        let mut factor = Array2::<f64>::ones((h, w));
        for y in 0..h {
            for x in 0..w {
                if mask.mask[[y, x]] > 0.0 {
                    let sy = nearest_index(y, h, fh);
                    let sx = nearest_index(x, w, fw);
                    factor[[y, x]] = modulation_factor(tanh_vals[[sy * fw + sx, c]], beta);
                }
            }
        }
        let ratio = ifftshift2(&factor);
        let mut spec = spectra[c].clone();
        for (s, r) in spec.iter_mut().zip(ratio.iter()) {
            *s *= *r;
        }
        let plane = ifft2(&spec);
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = plane[[y, x]].re;
            }
        }
        ratios.push(ratio);
    }
    drop(ratios);

    let mask_saved = mask.mask.clone();
    let out_dyn: ArrayD<f64> = out.into_dyn();
    Ok(Tensor::from_op(
        out_dyn,
        vec![f_d.clone()],
        Box::new(move |g| {
            let scale = 1.0 / (h * w) as f64;
            let mut dfd = Array2::<f64>::zeros((fd_pixels, d));
            for c in 0..d {
                // dL/dratio(u) = Re(S(u) * conj(FFT(g)(u))) / (H*W)
                let mut gplane = Array2::<f64>::zeros((h, w));
                for y in 0..h {
                    for x in 0..w {
                        gplane[[y, x]] = g[[c, y, x]];
                    }
                }
                let gspec = fft2(&gplane);
                let mut dratio = Array2::<f64>::zeros((h, w));
                for y in 0..h {
                    for x in 0..w {
                        dratio[[y, x]] = (spectra[c][[y, x]] * gspec[[y, x]].conj()).re * scale;
                    }
                }
                let dfactor = fftshift2(&dratio);
                for y in 0..h {
                    for x in 0..w {
                        if mask_saved[[y, x]] > 0.0 {
                            let sy = nearest_index(y, h, fh);
                            let sx = nearest_index(x, w, fw);
                            let t = tanh_vals[[sy * fw + sx, c]];
                            if 1.0 + beta * t > 0.0 {
                                dfd[[sy * fw + sx, c]] +=
                                    dfactor[[y, x]] * beta * (1.0 - t * t);
                            }
                        }
                    }
                }
            }
            vec![Some(dfd.into_dyn())]
        }),
    ))
}

fn infer_grid(pixels: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if pixels == h * w {
        return Ok((h, w));
    }
    // Accept any grid with the feature map's aspect ratio (e.g. the
    // full-resolution embedding map before downsampling).
    let mut best = None;
    for fh in 1..=pixels {
        if pixels % fh != 0 {
            continue;
        }
        let fw = pixels / fh;
        if fh * w == fw * h {
            best = Some((fh, fw));
            break;
        }
    }
    best.ok_or_else(|| {
        Error::invalid(format!(
            "cannot align {pixels} style-difference rows with a {h}x{w} grid"
        ))
    })
}

/// Pointwise, bias-free linear map from text-embedding width to one
/// layer's channel width.
#[derive(Debug, Clone)]
pub struct StyleAdapter {
    /// `[D_emb, D_l]`
    pub weight: Tensor,
}

impl StyleAdapter {
    pub fn new(d_emb: usize, d_l: usize, init_std: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = ArrayD::from_shape_fn(vec![d_emb, d_l], |_| {
            rng.gen_range(-1.0..1.0) * init_std * 3f64.sqrt()
        });
        Self {
            weight: Tensor::param(weight),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Graph path over pre-resized embedding rows `[(h_l*w_l), D_emb]`.
    pub fn apply_rows(&self, rows: &ArrayD<f64>) -> Tensor {
        Tensor::constant(rows.clone()).matmul(&self.weight)
    }

    /// Graph path: difference map (`H x W x D_emb`) resized to the layer
    /// grid, then mapped pointwise. Output rows are `[(h_l*w_l), D_l]`.
    pub fn apply_tensor(&self, difference: &Array3<f64>, h_l: usize, w_l: usize) -> Tensor {
        self.apply_rows(&embedding_rows(difference, h_l, w_l))
    }

    /// Contract surface: same map evaluated to a plain `D_l x H x W` array.
    pub fn apply(&self, e_d: &PixelDomainEmbeddings, h_l: usize, w_l: usize) -> Array3<f64> {
        let out = crate::autodiff::no_grad(|| self.apply_tensor(&e_d.difference, h_l, w_l));
        let data = out.to_array().into_dimensionality::<Ix2>().expect("2-d");
        let d_l = data.ncols();
        let mut arr = Array3::<f64>::zeros((d_l, h_l, w_l));
        for y in 0..h_l {
            for x in 0..w_l {
                for c in 0..d_l {
                    arr[[c, y, x]] = data[[y * w_l + x, c]];
                }
            }
        }
        arr
    }
}

/// The style-transform unit for all styled layers.
#[derive(Debug, Clone)]
pub struct TdstModule {
    pub control: StyleControl,
    pub adapters: Vec<StyleAdapter>,
}

impl TdstModule {
    /// `layer_channels` aligns with `control.styled_layers`.
    pub fn new(
        d_emb: usize,
        layer_channels: &[usize],
        control: StyleControl,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        control.validate()?;
        if layer_channels.len() != control.styled_layers.len() {
            return Err(Error::invalid(
                "one channel count per styled layer is required",
            ));
        }
        let adapters = layer_channels
            .iter()
            .map(|&d_l| StyleAdapter::new(d_emb, d_l, 1.0 / (d_emb as f64).sqrt(), rng))
            .collect();
        Ok(Self { control, adapters })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.adapters
            .iter()
            .zip(&self.control.styled_layers)
            .map(|(a, layer)| (format!("tdst.adapter{layer}.weight"), a.weight.clone()))
            .collect()
    }

    fn adapter_slot(&self, layer: usize) -> Result<usize> {
        self.control
            .styled_layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not a styled layer")))
    }

    /// Style difference features for one styled layer at the layer's grid.
    pub fn style_adapter(
        &self,
        e_d: &PixelDomainEmbeddings,
        layer: usize,
        h_l: usize,
        w_l: usize,
    ) -> Result<Array3<f64>> {
        let slot = self.adapter_slot(layer)?;
        Ok(self.adapters[slot].apply(e_d, h_l, w_l))
    }

    /// Difference-embedding rows resized to each styled layer's grid,
    /// ready for [`Self::apply_rows`].
    pub fn difference_rows(
        &self,
        e_d: &PixelDomainEmbeddings,
        layer_dims: &[(usize, usize)],
    ) -> Vec<ArrayD<f64>> {
        layer_dims
            .iter()
            .map(|&(h, w)| embedding_rows(&e_d.difference, h, w))
            .collect()
    }

    /// Apply the transform to the styled feature scales.
    ///
    /// `features` aligns with `control.styled_layers`. In evaluation mode
    /// the input passes through bitwise unchanged.
    pub fn apply(
        &self,
        features: &[Array3<f64>],
        e_d: &PixelDomainEmbeddings,
        training: bool,
    ) -> Result<Vec<Tensor>> {
        let dims: Vec<(usize, usize)> = features.iter().map(|f| (f.dim().1, f.dim().2)).collect();
        let rows = self.difference_rows(e_d, &dims);
        self.apply_rows_cached(features, &rows, training)
    }

    /// Same as [`Self::apply`] with precomputed difference rows.
    pub fn apply_rows_cached(
        &self,
        features: &[Array3<f64>],
        diff_rows: &[ArrayD<f64>],
        training: bool,
    ) -> Result<Vec<Tensor>> {
        if features.len() != self.control.styled_layers.len() {
            return Err(Error::invalid(format!(
                "expected {} styled feature scales, got {}",
                self.control.styled_layers.len(),
                features.len()
            )));
        }
        if !training {
            return Ok(features
                .iter()
                .map(|f| Tensor::constant(f.clone().into_dyn()))
                .collect());
        }
        if diff_rows.len() != features.len() {
            return Err(Error::invalid(
                "one difference-row block per styled layer is required",
            ));
        }
        let mut out = Vec::with_capacity(features.len());
        for (slot, feat) in features.iter().enumerate() {
            let (_, h, w) = feat.dim();
            let mask = low_freq_mask(h, w, self.control.alpha)?;
            let f_d = self.adapters[slot].apply_rows(&diff_rows[slot]);
            out.push(restyle_features(
                feat,
                &f_d,
                &mask,
                self.control.betas[slot],
            )?);
        }
        Ok(out)
    }
}

/// Bilinear-resize an `H x W x D` map to `(h, w)` and flatten to
/// `[(h*w), D]` rows in row-major spatial order.
pub fn embedding_rows(map: &Array3<f64>, h: usize, w: usize) -> ArrayD<f64> {
    let resized = bilinear_resize_hwd(map, h, w);
    let d = resized.dim().2;
    resized
        .into_shape_with_order((h * w, d))
        .expect("contiguous")
        .into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::probe_gradients;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn rand_features(d: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((d, h, w), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn constant_map_concentrates_at_center() {
        let f = Array3::from_elem((1, 4, 4), 0.75);
        let spec = fft_decompose(&f).unwrap();
        let center = (2usize, 2usize);
        assert!((spec.amplitude[[0, center.0, center.1]] - 16.0 * 0.75).abs() < 1e-10);
        assert!(spec.phase[[0, center.0, center.1]].abs() < 1e-12);
        let off: f64 = spec
            .amplitude
            .indexed_iter()
            .filter(|((_, y, x), _)| !(*y == center.0 && *x == center.1))
            .map(|(_, v)| *v)
            .sum();
        assert!(off < 1e-9);
    }

    #[test]
    fn impulse_has_flat_amplitude() {
        let mut f = Array3::<f64>::zeros((1, 4, 4));
        f[[0, 0, 0]] = 1.0;
        let spec = fft_decompose(&f).unwrap();
        for v in spec.amplitude.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decompose_compose_roundtrip() {
        for &(d, h, w) in &[(2usize, 4usize, 4usize), (1, 5, 3), (3, 7, 13)] {
            let f = rand_features(d, h, w, 42 + h as u64);
            let spec = fft_decompose(&f).unwrap();
            let back = ifft_compose(&spec.amplitude, &spec.phase).unwrap();
            let max = f
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-10, "roundtrip error {max}");
        }
    }

    #[test]
    fn amplitude_scaling_scales_features() {
        let f = rand_features(1, 6, 6, 5);
        let spec = fft_decompose(&f).unwrap();
        let doubled = ifft_compose(&spec.amplitude.mapv(|v| 2.0 * v), &spec.phase).unwrap();
        for (a, b) in f.iter().zip(doubled.iter()) {
            assert!((2.0 * a - b).abs() < 1e-10);
        }
        let zeroed = ifft_compose(&Array3::zeros(spec.amplitude.dim()), &spec.phase).unwrap();
        assert!(zeroed.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mask_bounds_match_hand_arithmetic() {
        // 8x8, alpha 0.15: bounds 3.4..4.6 -> single bin at index 4.
        let m = low_freq_mask(8, 8, 0.15).unwrap();
        assert_eq!(m.mask.sum(), 1.0);
        assert_eq!(m.mask[[4, 4]], 1.0);

        // 8x8, alpha 0.5: bounds 2..6 inclusive -> 5x5 block.
        let m = low_freq_mask(8, 8, 0.5).unwrap();
        assert_eq!(m.mask.sum(), 25.0);
        for y in 2..=6 {
            for x in 2..=6 {
                assert_eq!(m.mask[[y, x]], 1.0);
            }
        }

        // alpha = 1: everything.
        let m = low_freq_mask(8, 8, 1.0).unwrap();
        assert_eq!(m.mask.sum(), 64.0);

        // 9x7, alpha 0.15: rows ceil(3.825)..floor(5.175) = 4..=5,
        // cols ceil(2.975)..floor(4.025) = 3..=4.
        let m = low_freq_mask(9, 7, 0.15).unwrap();
        assert_eq!(m.mask.sum(), 4.0);
        for y in 4..=5 {
            for x in 3..=4 {
                assert_eq!(m.mask[[y, x]], 1.0);
            }
        }
    }

    #[test]
    fn mask_rejects_bad_alpha() {
        assert!(low_freq_mask(8, 8, 0.0).is_err());
        assert!(low_freq_mask(8, 8, 1.2).is_err());
        assert!(low_freq_mask(8, 8, -0.1).is_err());
    }

    #[test]
    fn zero_style_difference_leaves_amplitude_unchanged() {
        let f = rand_features(2, 8, 8, 1);
        let spec = fft_decompose(&f).unwrap();
        let mask = low_freq_mask(8, 8, 0.5).unwrap();
        let f_d = Array3::<f64>::zeros((2, 8, 8));
        let out = modulate_amplitude(&spec.amplitude, &mask, &f_d, 2.0).unwrap();
        assert_eq!(out, spec.amplitude);
    }

    #[test]
    fn saturated_modulation_doubles_amplitude() {
        let f = rand_features(1, 4, 4, 2);
        let spec = fft_decompose(&f).unwrap();
        let mask = low_freq_mask(4, 4, 1.0).unwrap();
        let f_d = Array3::<f64>::from_elem((1, 4, 4), 50.0);
        let out = modulate_amplitude(&spec.amplitude, &mask, &f_d, 1.0).unwrap();
        for (a, b) in spec.amplitude.iter().zip(out.iter()) {
            assert!((2.0 * a - b).abs() < 1e-4 * a.abs().max(1.0));
        }
    }

    #[test]
    fn negative_factors_clamp_to_zero() {
        // beta = 4 with tanh(F_d) = -0.5 gives factor -1, clamped to 0.
        let t = (-0.5f64).atanh();
        let amplitude = Array3::<f64>::from_elem((1, 4, 4), 3.0);
        let mask = low_freq_mask(4, 4, 1.0).unwrap();
        let f_d = Array3::<f64>::from_elem((1, 4, 4), t);
        let out = modulate_amplitude(&amplitude, &mask, &f_d, 4.0).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn modulate_rejects_nonpositive_beta() {
        let amplitude = Array3::<f64>::ones((1, 4, 4));
        let mask = low_freq_mask(4, 4, 0.5).unwrap();
        let f_d = Array3::<f64>::zeros((1, 4, 4));
        assert!(modulate_amplitude(&amplitude, &mask, &f_d, 0.0).is_err());
        assert!(modulate_amplitude(&amplitude, &mask, &f_d, -1.0).is_err());
    }

    #[test]
    fn restyle_agrees_with_decompose_modulate_compose() {
        let f = rand_features(3, 8, 8, 7);
        let mask = low_freq_mask(8, 8, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fd_rows =
            ArrayD::from_shape_fn(vec![64, 3], |_| rng.gen_range(-1.0..1.0));
        // Reference path through the contract ops.
        let mut fd_dhw = Array3::<f64>::zeros((3, 8, 8));
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    fd_dhw[[c, y, x]] = fd_rows[[y * 8 + x, c]];
                }
            }
        }
        let spec = fft_decompose(&f).unwrap();
        let ac = modulate_amplitude(&spec.amplitude, &mask, &fd_dhw, 2.0).unwrap();
        let reference = ifft_compose(&ac, &spec.phase).unwrap();

        let fd = Tensor::constant(fd_rows);
        let styled = restyle_features(&f, &fd, &mask, 2.0).unwrap();
        let got = styled.to_array();
        for (a, b) in reference.iter().zip(got.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn restyle_gradients_match_finite_differences() {
        let f = rand_features(2, 6, 6, 3);
        let mask = low_freq_mask(6, 6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fd = Tensor::param(ArrayD::from_shape_fn(vec![36, 2], |_| {
            rng.gen_range(-0.8..0.8)
        }));
        let probe = Tensor::constant(ArrayD::from_shape_fn(vec![2, 6, 6], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let loss = || {
            restyle_features(&f, &fd, &mask, 2.0)
                .unwrap()
                .mul(&probe)
                .sum_all()
        };
        let err = probe_gradients(std::slice::from_ref(&fd), loss, 40, 1e-5, &mut rng);
        assert!(err < 1e-6, "restyle grad error {err}");
    }

    #[test]
    fn module_eval_mode_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let module = TdstModule::new(8, &[2, 3], StyleControl {
            alpha: 0.5,
            betas: vec![1.0, 2.0],
            styled_layers: vec![4, 5],
        }, &mut rng)
        .unwrap();
        let feats = vec![rand_features(2, 8, 8, 1), rand_features(3, 4, 4, 2)];
        let e_d = dummy_embeddings(16, 16, 8, 0.0);
        let out = module.apply(&feats, &e_d, false).unwrap();
        for (f, o) in feats.iter().zip(out.iter()) {
            let o = o.to_array();
            for (a, b) in f.iter().zip(o.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_difference_roundtrips_through_training_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let module = TdstModule::new(
            8,
            &[2],
            StyleControl {
                alpha: 0.15,
                betas: vec![4.0],
                styled_layers: vec![3],
            },
            &mut rng,
        )
        .unwrap();
        let feats = vec![rand_features(2, 8, 8, 9)];
        let e_d = dummy_embeddings(32, 32, 8, 0.0);
        let out = module.apply(&feats, &e_d, true).unwrap();
        let o = out[0].to_array();
        for (a, b) in feats[0].iter().zip(o.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn styling_preserves_phase_and_high_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctl = StyleControl {
            alpha: 0.5,
            betas: vec![2.0],
            styled_layers: vec![3],
        };
        let module = TdstModule::new(8, &[2], ctl, &mut rng).unwrap();
        let feats = vec![rand_features(2, 8, 8, 4)];
        let e_d = dummy_embeddings(32, 32, 8, 0.6);
        let out = module.apply(&feats, &e_d, true).unwrap();
        let styled3 = out[0]
            .to_array()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();

        let before = fft_decompose(&feats[0]).unwrap();
        let after = fft_decompose(&styled3).unwrap();
        let mask = low_freq_mask(8, 8, 0.5).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let a0 = before.amplitude[[c, y, x]];
                    let a1 = after.amplitude[[c, y, x]];
                    if mask.mask[[y, x]] == 0.0 {
                        assert!((a0 - a1).abs() < 1e-5, "high-freq bin changed");
                    } else if a0 > 1e-6 {
                        let ratio = a1 / a0;
                        assert!(ratio >= -1e-9 && ratio <= 3.0 + 1e-9);
                    }
                    if a0 > 1e-6 && a1 > 1e-6 {
                        let dp = wrap_angle(before.phase[[c, y, x]] - after.phase[[c, y, x]]);
                        assert!(dp.abs() < 1e-4, "phase drifted by {dp}");
                    }
                }
            }
        }
    }

    fn wrap_angle(a: f64) -> f64 {
        let mut a = a % (2.0 * std::f64::consts::PI);
        if a > std::f64::consts::PI {
            a -= 2.0 * std::f64::consts::PI;
        }
        if a < -std::f64::consts::PI {
            a += 2.0 * std::f64::consts::PI;
        }
        a
    }

    fn dummy_embeddings(h: usize, w: usize, d: usize, magnitude: f64) -> PixelDomainEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let difference = if magnitude == 0.0 {
            Array3::<f64>::zeros((h, w, d))
        } else {
            Array3::from_shape_fn((h, w, d), |_| rng.gen_range(-magnitude..magnitude))
        };
        PixelDomainEmbeddings {
            specific: difference.clone(),
            general: Array3::zeros((h, w, d)),
            difference,
            condition_index: 0,
        }
    }

    #[test]
    fn unstyled_layer_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let module =
            TdstModule::new(8, &[2, 3, 4], StyleControl::default(), &mut rng).unwrap();
        let e_d = dummy_embeddings(8, 8, 8, 0.1);
        assert!(module.style_adapter(&e_d, 2, 4, 4).is_err());
        assert!(module.style_adapter(&e_d, 4, 4, 4).is_ok());
    }

    #[test]
    fn identity_adapter_broadcasts_constant_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut adapter = StyleAdapter::new(3, 3, 0.1, &mut rng);
        adapter.weight = Tensor::param(ndarray::Array2::<f64>::eye(3).into_dyn());
        let mut e_d = dummy_embeddings(6, 6, 3, 0.0);
        for y in 0..6 {
            for x in 0..6 {
                e_d.difference[[y, x, 0]] = 0.25;
                e_d.difference[[y, x, 1]] = -0.5;
                e_d.difference[[y, x, 2]] = 1.0;
            }
        }
        let out = adapter.apply(&e_d, 3, 3);
        for y in 0..3 {
            for x in 0..3 {
                assert!((out[[0, y, x]] - 0.25).abs() < 1e-12);
                assert!((out[[1, y, x]] + 0.5).abs() < 1e-12);
                assert!((out[[2, y, x]] - 1.0).abs() < 1e-12);
            }
        }
    }
}
