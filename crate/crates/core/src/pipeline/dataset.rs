//! Synthetic multi-domain shape benchmark.
//!
//! Every sample shares a layout (label map) across domains: the scene is
//! drawn once from the layout seed, then each domain renders it through its
//! own palette rotation, saturation, illumination and texture noise. Label
//! maps carry a thin ignore band along shape boundaries, mirroring the
//! void-boundary convention of real segmentation datasets (and absorbing
//! the stride-4 mask grid's quantization).

use crate::error::{Error, Result};
use crate::prompts::IGNORE_LABEL;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "rectangle", "triangle", "stripes"];
pub const NUM_CLASSES: usize = 5;

/// Rendering recipe for one domain. Same spec + seed -> identical pixels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Palette rotation about the gray axis, radians.
    pub hue_shift: f64,
    /// 1.0 keeps colors, 0.0 collapses to luminance.
    pub saturation: f64,
    /// Illumination transfer `v * gain + bias`.
    pub illum_gain: f64,
    pub illum_bias: f64,
    /// Amplitude of the smooth texture noise, in pixel-value units.
    pub noise_amp: f64,
    /// Approximate blob size of the coarse noise, in pixels.
    pub noise_scale: f64,
    pub seed: u64,
}

/// One rendered image with its (domain-invariant) label map.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// `H x W` class indices with 255 = ignore.
    pub labels: Array2<u8>,
    pub domain: String,
}

/// A painted scene before domain rendering.
struct Layout {
    /// Labels with the boundary ignore band.
    labels: Array2<u8>,
    /// Per-pixel base colors.
    colors: Array3<f64>,
}

const BASE_COLORS: [[f64; 3]; 5] = [
    [0.38, 0.45, 0.36], // background
    [0.78, 0.24, 0.22], // circle
    [0.22, 0.34, 0.76], // rectangle
    [0.85, 0.74, 0.25], // triangle
    [0.56, 0.30, 0.66], // stripes (primary)
];
const STRIPE_ALT: [f64; 3] = [0.82, 0.78, 0.86];

fn sample_rng(base_seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        base_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(salt),
    )
}

fn generate_layout(layout_seed: u64, index: u64, size: usize) -> Layout {
    let mut rng = sample_rng(layout_seed, index, 0);
    let mut painted = Array2::<u8>::zeros((size, size));
    let mut colors = Array3::<f64>::zeros((3, size, size));

    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3]| -> [f64; 3] {
        [
            (base[0] + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0),
            (base[1] + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0),
            (base[2] + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0),
        ]
    };

    let bg = jitter(&mut rng, BASE_COLORS[0]);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                colors[[c, y, x]] = bg[c];
            }
        }
    }

    // Deterministically shuffled z-order.
    let mut order = [1u8, 2, 3, 4];
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let s = size as f64;
    for &class in &order {
        match class {
            1 => {
                let cx = rng.gen_range(0.22 * s..0.78 * s);
                let cy = rng.gen_range(0.22 * s..0.78 * s);
                let r = rng.gen_range(0.12 * s..0.22 * s);
                let color = jitter(&mut rng, BASE_COLORS[1]);
                paint(&mut painted, &mut colors, 1, color, |x, y| {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    dx * dx + dy * dy <= r * r
                });
            }
            2 => {
                let w = rng.gen_range(0.18 * s..0.36 * s);
                let h = rng.gen_range(0.18 * s..0.36 * s);
                let x0 = rng.gen_range(0.05 * s..(0.93 * s - w));
                let y0 = rng.gen_range(0.05 * s..(0.93 * s - h));
                let color = jitter(&mut rng, BASE_COLORS[2]);
                paint(&mut painted, &mut colors, 2, color, |x, y| {
                    let xf = x as f64;
                    let yf = y as f64;
                    xf >= x0 && xf < x0 + w && yf >= y0 && yf < y0 + h
                });
            }
            3 => {
                // A triangle with a guaranteed minimum area.
                let (ax, ay, bx, by, cx, cy) = loop {
                    let ax = rng.gen_range(0.1 * s..0.9 * s);
                    let ay = rng.gen_range(0.1 * s..0.9 * s);
                    let bx = rng.gen_range(0.1 * s..0.9 * s);
                    let by = rng.gen_range(0.1 * s..0.9 * s);
                    let cx = rng.gen_range(0.1 * s..0.9 * s);
                    let cy = rng.gen_range(0.1 * s..0.9 * s);
                    let area =
                        0.5 * ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)).abs();
                    if area > 0.035 * s * s {
                        break (ax, ay, bx, by, cx, cy);
                    }
                };
                let color = jitter(&mut rng, BASE_COLORS[3]);
                paint(&mut painted, &mut colors, 3, color, |x, y| {
                    point_in_triangle(x as f64, y as f64, ax, ay, bx, by, cx, cy)
                });
            }
            4 => {
                let w = rng.gen_range(0.2 * s..0.4 * s);
                let h = rng.gen_range(0.2 * s..0.4 * s);
                let x0 = rng.gen_range(0.05 * s..(0.93 * s - w));
                let y0 = rng.gen_range(0.05 * s..(0.93 * s - h));
                let stripe = rng.gen_range(3..6usize);
                let a = jitter(&mut rng, BASE_COLORS[4]);
                let b = jitter(&mut rng, STRIPE_ALT);
                for y in 0..size {
                    for x in 0..size {
                        let xf = x as f64;
                        let yf = y as f64;
                        if xf >= x0 && xf < x0 + w && yf >= y0 && yf < y0 + h {
                            painted[[y, x]] = 4;
                            let band = ((x + y) / stripe) % 2 == 0;
                            let col = if band { &a } else { &b };
                            for c in 0..3 {
                                colors[[c, y, x]] = col[c];
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    // Ignore band: pixels within Chebyshev distance 1 of a label change.
    let mut boundary = Array2::<bool>::from_elem((size, size), false);
    for y in 0..size {
        for x in 0..size {
            let here = painted[[y, x]];
            if (x + 1 < size && painted[[y, x + 1]] != here)
                || (y + 1 < size && painted[[y + 1, x]] != here)
            {
                boundary[[y, x]] = true;
                if x + 1 < size {
                    boundary[[y, x + 1]] = true;
                }
                if y + 1 < size {
                    boundary[[y + 1, x]] = true;
                }
            }
        }
    }
    let mut labels = painted.clone();
    for y in 0..size {
        for x in 0..size {
            let near = (y.saturating_sub(1)..(y + 2).min(size))
                .any(|yy| (x.saturating_sub(1)..(x + 2).min(size)).any(|xx| boundary[[yy, xx]]));
            if near {
                labels[[y, x]] = IGNORE_LABEL;
            }
        }
    }

    Layout { labels, colors }
}

fn paint(
    painted: &mut Array2<u8>,
    colors: &mut Array3<f64>,
    class: u8,
    color: [f64; 3],
    inside: impl Fn(usize, usize) -> bool,
) {
    let (h, w) = painted.dim();
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) {
                painted[[y, x]] = class;
                for c in 0..3 {
                    colors[[c, y, x]] = color[c];
                }
            }
        }
    }
}

fn point_in_triangle(
    px: f64,
    py: f64,
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    cx: f64,
    cy: f64,
) -> bool {
    let sign = |x1: f64, y1: f64, x2: f64, y2: f64, x3: f64, y3: f64| {
        (x1 - x3) * (y2 - y3) - (x2 - x3) * (y1 - y3)
    };
    let d1 = sign(px, py, ax, ay, bx, by);
    let d2 = sign(px, py, bx, by, cx, cy);
    let d3 = sign(px, py, cx, cy, ax, ay);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

fn hue_rotation(theta: f64) -> [[f64; 3]; 3] {
    // Rotation about the (1,1,1)/sqrt(3) axis.
    let c = theta.cos();
    let s = theta.sin();
    let a = 1.0 / 3.0;
    let b = (1.0 / 3.0f64).sqrt();
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let kron = if i == j { 1.0 } else { 0.0 };
            *cell = c * kron + (1.0 - c) * a + s * b * levi(i, j);
        }
    }
    m
}

fn levi(i: usize, j: usize) -> f64 {
    // Antisymmetric part of the axis-angle rotation for axis (1,1,1)/sqrt(3).
    match (i, j) {
        (0, 1) | (1, 2) | (2, 0) => -1.0,
        (1, 0) | (2, 1) | (0, 2) => 1.0,
        _ => 0.0,
    }
}

fn render(layout: &Layout, spec: &DomainSpec, index: u64) -> Array3<f64> {
    let (_, h, w) = layout.colors.dim();
    let mut rng = sample_rng(spec.seed, index, 0x5EED);
    let rot = hue_rotation(spec.hue_shift);

    // Coarse value noise, bilinearly upsampled to the image grid.
    let cells = ((h as f64 / spec.noise_scale).ceil() as usize).max(1) + 1;
    let grid = Array2::<f64>::from_shape_fn((cells + 1, cells + 1), |_| rng.gen_range(-1.0..1.0));
    let coarse = |y: usize, x: usize| -> f64 {
        let fy = y as f64 / h as f64 * cells as f64;
        let fx = x as f64 / w as f64 * cells as f64;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let ty = fy - y0 as f64;
        let tx = fx - x0 as f64;
        grid[[y0, x0]] * (1.0 - ty) * (1.0 - tx)
            + grid[[y0, x0 + 1]] * (1.0 - ty) * tx
            + grid[[y0 + 1, x0]] * ty * (1.0 - tx)
            + grid[[y0 + 1, x0 + 1]] * ty * tx
    };

    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let r = layout.colors[[0, y, x]];
            let g = layout.colors[[1, y, x]];
            let b = layout.colors[[2, y, x]];
            // Hue rotation.
            let mut rgb = [
                rot[0][0] * r + rot[0][1] * g + rot[0][2] * b,
                rot[1][0] * r + rot[1][1] * g + rot[1][2] * b,
                rot[2][0] * r + rot[2][1] * g + rot[2][2] * b,
            ];
            // Saturation about luminance.
            let lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            for v in rgb.iter_mut() {
                *v = lum + spec.saturation * (*v - lum);
            }
            let n = coarse(y, x) * spec.noise_amp;
            for (c, v) in rgb.iter_mut().enumerate() {
                let fine = rng.gen_range(-1.0..1.0) * spec.noise_amp * 0.35;
                let val = *v * spec.illum_gain + spec.illum_bias + n + fine;
                out[[c, y, x]] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Render `n_per_domain` shared layouts through every domain.
/// Sample order: all of domain 0, then domain 1, ...
pub fn generate_dataset(
    domains: &[(String, DomainSpec)],
    n_per_domain: usize,
    layout_seed: u64,
    image_size: usize,
) -> Result<Vec<Sample>> {
    if domains.is_empty() {
        return Err(Error::invalid("at least one domain is required"));
    }
    if image_size % 32 != 0 {
        return Err(Error::invalid("image size must be a multiple of 32"));
    }
    let layouts: Vec<Layout> = (0..n_per_domain)
        .map(|i| generate_layout(layout_seed, i as u64, image_size))
        .collect();
    let mut samples = Vec::with_capacity(domains.len() * n_per_domain);
    for (name, spec) in domains {
        for (i, layout) in layouts.iter().enumerate() {
            samples.push(Sample {
                image: render(layout, spec, i as u64),
                labels: layout.labels.clone(),
                domain: name.clone(),
            });
        }
    }
    Ok(samples)
}

/// Snap pixel values to the 8-bit grid used by the on-disk rasters, so an
/// in-memory regeneration matches a saved-then-loaded dataset bit for bit.
pub fn quantize_images(samples: &mut [Sample]) {
    for s in samples.iter_mut() {
        s.image.mapv_inplace(|v| (v * 255.0).round() / 255.0);
    }
}

/// Dataset description stored next to the rendered files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub n_per_domain: usize,
    pub layout_seed: u64,
    pub domains: Vec<String>,
    pub train_domains: Vec<String>,
    pub eval_domains: Vec<String>,
}

/// Write one directory per domain (images + label rasters) plus the
/// manifest. Deterministic: rerunning produces byte-identical files.
pub fn save_dataset(dir: &Path, samples: &[Sample], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut counters: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for sample in samples {
        let idx = counters.entry(sample.domain.as_str()).or_insert(0);
        let domain_dir = dir.join(&sample.domain);
        std::fs::create_dir_all(&domain_dir)?;
        let (_, h, w) = sample.image.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (sample.image[[0, y, x]] * 255.0).round() as u8,
                    (sample.image[[1, y, x]] * 255.0).round() as u8,
                    (sample.image[[2, y, x]] * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(domain_dir.join(format!("img_{idx:04}.png")))
            .map_err(|e| Error::Runtime(format!("png write failed: {e}")))?;

        let mut lab = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                lab.put_pixel(x as u32, y as u32, image::Luma([sample.labels[[y, x]]]));
            }
        }
        lab.save(domain_dir.join(format!("lab_{idx:04}.png")))
            .map_err(|e| Error::Runtime(format!("png write failed: {e}")))?;
        *idx += 1;
    }
    let manifest_json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Runtime(format!("manifest encode failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), manifest_json)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&raw).map_err(|e| Error::Config(format!("bad manifest: {e}")))
}

/// Load every sample of the named domains, in manifest order.
pub fn load_domains(dir: &Path, manifest: &Manifest, domains: &[String]) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for domain in domains {
        if !manifest.domains.contains(domain) {
            return Err(Error::Config(format!(
                "domain {domain:?} is not in the dataset manifest"
            )));
        }
        let domain_dir = dir.join(domain);
        for i in 0..manifest.n_per_domain {
            let img_path = domain_dir.join(format!("img_{i:04}.png"));
            let lab_path = domain_dir.join(format!("lab_{i:04}.png"));
            let img = image::open(&img_path)
                .map_err(|e| Error::Runtime(format!("{}: {e}", img_path.display())))?
                .to_rgb8();
            let lab = image::open(&lab_path)
                .map_err(|e| Error::Runtime(format!("{}: {e}", lab_path.display())))?
                .to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut image_arr = Array3::<f64>::zeros((3, h, w));
            for y in 0..h {
                for x in 0..w {
                    let px = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        image_arr[[c, y, x]] = px[c] as f64 / 255.0;
                    }
                }
            }
            let mut labels = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    labels[[y, x]] = lab.get_pixel(x as u32, y as u32)[0];
                }
            }
            samples.push(Sample {
                image: image_arr,
                labels,
                domain: domain.clone(),
            });
        }
    }
    Ok(samples)
}
