//! Spatial resampling helpers shared by the style modules and evaluation.

use ndarray::{Array2, Array3};

/// Bilinear resize of an `H x W x D` map (center-aligned sampling).
pub fn bilinear_resize_hwd(input: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, d) = input.dim();
    if h == out_h && w == out_w {
        return input.clone();
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, d));
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..d {
                let v00 = input[[y0, x0, c]];
                let v01 = input[[y0, x1, c]];
                let v10 = input[[y1, x0, c]];
                let v11 = input[[y1, x1, c]];
                out[[oy, ox, c]] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a `D x H x W` map (center-aligned sampling).
pub fn nearest_resize_dhw(input: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (d, h, w) = input.dim();
    if h == out_h && w == out_w {
        return input.clone();
    }
    let mut out = Array3::<f64>::zeros((d, out_h, out_w));
    for oy in 0..out_h {
        let sy = nearest_index(oy, out_h, h);
        for ox in 0..out_w {
            let sx = nearest_index(ox, out_w, w);
            for c in 0..d {
                out[[c, oy, ox]] = input[[c, sy, sx]];
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel map.
pub fn bilinear_resize_2d(input: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = input.dim();
    let expanded = input
        .clone()
        .into_shape_with_order((h, w, 1))
        .expect("shape");
    let resized = bilinear_resize_hwd(&expanded, out_h, out_w);
    resized.index_axis(ndarray::Axis(2), 0).to_owned()
}

pub(crate) fn nearest_index(out_idx: usize, out_len: usize, src_len: usize) -> usize {
    let pos = (out_idx as f64 + 0.5) * src_len as f64 / out_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn identity_when_sizes_match() {
        let x = Array3::from_shape_fn((3, 4, 2), |(a, b, c)| (a * 8 + b * 2 + c) as f64);
        assert_eq!(bilinear_resize_hwd(&x, 3, 4), x);
        let y = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a + b + c) as f64);
        assert_eq!(nearest_resize_dhw(&y, 3, 4), y);
    }

    #[test]
    fn constant_maps_stay_constant() {
        let x = Array3::from_elem((8, 8, 3), 2.5);
        let down = bilinear_resize_hwd(&x, 3, 5);
        assert!(down.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn nearest_upsample_repeats_pixels() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]])
            .into_shape_with_order((1, 2, 2))
            .unwrap();
        let up = nearest_resize_dhw(&x, 4, 4);
        assert_eq!(up[[0, 0, 0]], 1.0);
        assert_eq!(up[[0, 0, 3]], 2.0);
        assert_eq!(up[[0, 3, 0]], 3.0);
        assert_eq!(up[[0, 3, 3]], 4.0);
    }

    #[test]
    fn bilinear_interpolates_midpoints() {
        let x = arr2(&[[0.0, 1.0]])
            .into_shape_with_order((1, 2, 1))
            .unwrap();
        let up = bilinear_resize_hwd(&x, 1, 4);
        // Samples at src coords -0.25, 0.25, 0.75, 1.25 (clamped).
        assert!((up[[0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((up[[0, 1, 0]] - 0.25).abs() < 1e-12);
        assert!((up[[0, 2, 0]] - 0.75).abs() < 1e-12);
        assert!((up[[0, 3, 0]] - 1.0).abs() < 1e-12);
    }
}
