//! Static visualization renderers: decoder-layer masks, similarity maps,
//! amplitude spectra with the low-frequency window, and a 2-D embedding
//! scatter of pooled features.

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Array3};
use scsd_core::error::{Error, Result};
use scsd_core::pipeline::dataset::Sample;
use scsd_core::pipeline::eval::semantic_inference;
use scsd_core::pipeline::train::downsample_labels;
use scsd_core::pipeline::SegModel;
use scsd_core::prompts::IGNORE_LABEL;
use scsd_core::sqb::similarity_map;
use scsd_core::tdst::{fft_decompose, low_freq_mask, restyle_features};

/// Fixed colors per class index; ignore pixels render dark gray.
pub fn class_color(class: u8) -> [u8; 3] {
    match class {
        0 => [96, 112, 90],
        1 => [200, 60, 56],
        2 => [56, 87, 194],
        3 => [217, 189, 64],
        4 => [143, 77, 168],
        IGNORE_LABEL => [40, 40, 40],
        other => {
            let h = other as u32 * 2654435761 % 255;
            [h as u8, (h * 7 % 255) as u8, (h * 13 % 255) as u8]
        }
    }
}

pub fn domain_color(index: usize) -> [u8; 3] {
    const COLORS: [[u8; 3]; 6] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
    ];
    COLORS[index % COLORS.len()]
}

fn label_panel(labels: &Array2<u8>, scale: usize) -> RgbImage {
    let (h, w) = labels.dim();
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for y in 0..h * scale {
        for x in 0..w * scale {
            let c = class_color(labels[[y / scale, x / scale]]);
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    img
}

fn hstack(panels: &[RgbImage], gap: u32) -> RgbImage {
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let width: u32 =
        panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32 - 1);
    let mut out = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut x0 = 0u32;
    for p in panels {
        for y in 0..p.height() {
            for x in 0..p.width() {
                out.put_pixel(x0 + x, y, *p.get_pixel(x, y));
            }
        }
        x0 += p.width() + gap;
    }
    out
}

/// Predictions at the first and last decoder layer, side by side.
pub fn layer_masks(model: &SegModel, sample: &Sample) -> Result<RgbImage> {
    let preds = model.eval_forward(sample)?;
    let (h, w) = sample.labels.dim();
    let first = semantic_inference(&preds, 0, h, w)?;
    let last = semantic_inference(&preds, preds.layers.len() - 1, h, w)?;
    Ok(hstack(&[label_panel(&first, 2), label_panel(&last, 2)], 4))
}

fn grayscale_panel(map: &Array2<f64>, scale: usize) -> RgbImage {
    let (h, w) = map.dim();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo).max(1e-12);
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = ((map[[y / scale, x / scale]] - lo) / range * 255.0) as u8;
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }
    img
}

/// One grayscale panel per class channel of the similarity map.
pub fn similarity_panels(model: &SegModel, sample: &Sample) -> Result<RgbImage> {
    let feats = model.backbone.forward(&sample.image);
    let f_v = model.sqb.pool.forward(&feats.f5)?;
    let sim = similarity_map(&f_v, &model.text_table)?;
    let (h, w, c) = sim.values.dim();
    let scale = (64 / h.max(w)).max(1);
    let panels: Vec<RgbImage> = (0..c)
        .map(|k| {
            let chan = Array2::from_shape_fn((h, w), |(y, x)| sim.values[[y, x, k]]);
            grayscale_panel(&chan, scale)
        })
        .collect();
    Ok(hstack(&panels, 4))
}

/// Inclusive bounds `(y0, y1, x0, x1)` of the low-frequency window.
pub fn mask_bounds(h: usize, w: usize, alpha: f64) -> Result<(usize, usize, usize, usize)> {
    let mask = low_freq_mask(h, w, alpha)?;
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.mask[[y, x]] > 0.0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    Ok((y0, y1, x0, x1))
}

fn draw_rect(img: &mut RgbImage, y0: u32, y1: u32, x0: u32, x1: u32, color: [u8; 3]) {
    for x in x0..=x1.min(img.width() - 1) {
        img.put_pixel(x, y0.min(img.height() - 1), Rgb(color));
        img.put_pixel(x, y1.min(img.height() - 1), Rgb(color));
    }
    for y in y0..=y1.min(img.height() - 1) {
        img.put_pixel(x0.min(img.width() - 1), y, Rgb(color));
        img.put_pixel(x1.min(img.width() - 1), y, Rgb(color));
    }
}

fn log_amplitude_mean(features: &Array3<f64>) -> Result<Array2<f64>> {
    let spec = fft_decompose(features)?;
    let (d, h, w) = spec.amplitude.dim();
    let mut mean = Array2::<f64>::zeros((h, w));
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                mean[[y, x]] += (1.0 + spec.amplitude[[c, y, x]]).ln() / d as f64;
            }
        }
    }
    Ok(mean)
}

/// Channel-mean log amplitude of the first styled layer before and after
/// the style transform, with the low-frequency window outlined.
pub fn spectrum_panels(
    model: &SegModel,
    sample: &Sample,
    condition_index: usize,
) -> Result<RgbImage> {
    let feats = model.backbone.forward(&sample.image);
    let layer = *model
        .tdst
        .control
        .styled_layers
        .first()
        .ok_or_else(|| Error::invalid("no styled layers configured"))?;
    let features = feats.scale(layer).clone();
    let (_, h, w) = features.dim();

    let rows = model.style_rows(&sample.labels, condition_index)?;
    let f_d = model.tdst.adapters[0].apply_rows(&rows.diff[0]);
    let mask = low_freq_mask(h, w, model.tdst.control.alpha)?;
    let styled = restyle_features(&features, &f_d, &mask, model.tdst.control.betas[0])?;
    let styled3 = styled
        .to_array()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("3-d");

    let before = log_amplitude_mean(&features)?;
    let after = log_amplitude_mean(&styled3)?;
    let scale = (64 / h.max(w)).max(1);
    let mut panel_before = grayscale_panel(&before, scale);
    let mut panel_after = grayscale_panel(&after, scale);
    let (y0, y1, x0, x1) = mask_bounds(h, w, model.tdst.control.alpha)?;
    for panel in [&mut panel_before, &mut panel_after] {
        draw_rect(
            panel,
            (y0 * scale) as u32,
            (y1 * scale + scale - 1) as u32,
            (x0 * scale) as u32,
            (x1 * scale + scale - 1) as u32,
            [220, 40, 40],
        );
    }
    Ok(hstack(&[panel_before, panel_after], 4))
}

/// Per-(sample, class) pooled features projected to 2-D by PCA.
pub struct EmbeddingScatter {
    pub image: RgbImage,
    pub legend: serde_json::Value,
}

pub fn embedding_scatter(model: &SegModel, samples: &[Sample]) -> Result<EmbeddingScatter> {
    if samples.is_empty() {
        return Err(Error::invalid("embedding plot needs at least one sample"));
    }
    let mut domains: Vec<String> = Vec::new();
    let mut points: Vec<(Array1<f64>, u8, usize)> = Vec::new();
    for sample in samples {
        let domain_idx = match domains.iter().position(|d| d == &sample.domain) {
            Some(i) => i,
            None => {
                domains.push(sample.domain.clone());
                domains.len() - 1
            }
        };
        let feats = model.backbone.forward(&sample.image);
        let (d, h, w) = feats.f3.dim();
        let labels_lo = downsample_labels(&sample.labels, h, w);
        for class in 0..scsd_core::pipeline::NUM_CLASSES as u8 {
            let mut acc = Array1::<f64>::zeros(d);
            let mut count = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if labels_lo[[y, x]] == class {
                        for c in 0..d {
                            acc[c] += feats.f3[[c, y, x]];
                        }
                        count += 1;
                    }
                }
            }
            if count > 0 {
                points.push((acc / count as f64, class, domain_idx));
            }
        }
    }
    if points.len() < 3 {
        return Err(Error::invalid("too few labeled regions for an embedding plot"));
    }

    let coords = pca_2d(&points.iter().map(|(v, _, _)| v.clone()).collect::<Vec<_>>());

    let (pw, ph) = (220u32, 220u32);
    let mut by_class = RgbImage::from_pixel(pw, ph, Rgb([255, 255, 255]));
    let mut by_domain = RgbImage::from_pixel(pw, ph, Rgb([255, 255, 255]));
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &coords {
        lo_x = lo_x.min(x);
        hi_x = hi_x.max(x);
        lo_y = lo_y.min(y);
        hi_y = hi_y.max(y);
    }
    let sx = (pw as f64 - 20.0) / (hi_x - lo_x).max(1e-9);
    let sy = (ph as f64 - 20.0) / (hi_y - lo_y).max(1e-9);
    for ((_, class, domain_idx), &(x, y)) in points.iter().zip(&coords) {
        let px = (10.0 + (x - lo_x) * sx) as i64;
        let py = (10.0 + (y - lo_y) * sy) as i64;
        draw_disc(&mut by_class, px, py, 3, class_color(*class));
        draw_disc(&mut by_domain, px, py, 3, domain_color(*domain_idx));
    }
    let image = hstack(&[by_class, by_domain], 8);

    let legend = serde_json::json!({
        "classes": (0..scsd_core::pipeline::NUM_CLASSES).map(|c| serde_json::json!({
            "name": scsd_core::pipeline::CLASS_NAMES[c],
            "color": class_color(c as u8),
        })).collect::<Vec<_>>(),
        "domains": domains.iter().enumerate().map(|(i, d)| serde_json::json!({
            "name": d,
            "color": domain_color(i),
        })).collect::<Vec<_>>(),
    });
    Ok(EmbeddingScatter { image, legend })
}

fn draw_disc(img: &mut RgbImage, cx: i64, cy: i64, r: i64, color: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                let x = cx + dx;
                let y = cy + dy;
                if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
}

/// First two principal components via power iteration with deflation.
fn pca_2d(vectors: &[Array1<f64>]) -> Vec<(f64, f64)> {
    let n = vectors.len();
    let d = vectors[0].len();
    let mut mean = Array1::<f64>::zeros(d);
    for v in vectors {
        mean += v;
    }
    mean /= n as f64;
    let centered: Vec<Array1<f64>> = vectors.iter().map(|v| v - &mean).collect();

    let mut cov = Array2::<f64>::zeros((d, d));
    for v in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += v[i] * v[j];
            }
        }
    }

    let mut components = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut v = Array1::<f64>::from_elem(d, 1.0 / (d as f64).sqrt());
        for _ in 0..200 {
            let mut next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-12 {
                break;
            }
            next /= norm;
            v = next;
        }
        let lambda = v.dot(&cov.dot(&v));
        // Deflate.
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
    }
    centered
        .iter()
        .map(|v| (v.dot(&components[0]), v.dot(&components[1])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_bounds_match_low_freq_window() {
        // alpha 0.15 on 8x8: the single bin at (4, 4).
        assert_eq!(mask_bounds(8, 8, 0.15).unwrap(), (4, 4, 4, 4));
        // alpha 0.5 on 8x8: the 5x5 block spanning 2..=6.
        assert_eq!(mask_bounds(8, 8, 0.5).unwrap(), (2, 6, 2, 6));
        // full band
        assert_eq!(mask_bounds(8, 8, 1.0).unwrap(), (0, 7, 0, 7));
    }

    #[test]
    fn pca_projects_to_dominant_axis() {
        // Points along (1, 1, 0): the first component must capture it.
        let vectors: Vec<Array1<f64>> = (0..10)
            .map(|i| {
                let t = i as f64 - 4.5;
                Array1::from_vec(vec![t, t, 0.01 * (i % 2) as f64])
            })
            .collect();
        let coords = pca_2d(&vectors);
        let spread_1: f64 = coords.iter().map(|(x, _)| x * x).sum();
        let spread_2: f64 = coords.iter().map(|(_, y)| y * y).sum();
        assert!(spread_1 > 100.0 * spread_2);
    }

    #[test]
    fn hstack_concatenates_widths() {
        let a = RgbImage::new(4, 6);
        let b = RgbImage::new(3, 6);
        let out = hstack(&[a, b], 2);
        assert_eq!(out.width(), 9);
        assert_eq!(out.height(), 6);
    }
}
