//! 2-D discrete Fourier transforms over `ndarray` buffers.
//!
//! Forward transforms are unnormalized; the inverse carries the `1/(H*W)`
//! factor so `ifft2(fft2(x)) == x`. Shift helpers rotate the zero-frequency
//! bin to the spatial center (index `floor(n/2)` on each axis) and back,
//! and are exact inverses of each other for odd lengths too.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// Forward 2-D DFT of a real-valued map.
pub fn fft2(input: &Array2<f64>) -> Array2<Complex64> {
    let mut buf = input.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut buf, FftDirection::Forward);
    buf
}

/// Inverse 2-D DFT, normalized by `1/(H*W)`.
pub fn ifft2(input: &Array2<Complex64>) -> Array2<Complex64> {
    let mut buf = input.clone();
    fft2_inplace(&mut buf, FftDirection::Inverse);
    let scale = 1.0 / (buf.len() as f64);
    buf.mapv_inplace(|v| v * scale);
    buf
}

fn fft2_inplace(buf: &mut Array2<Complex64>, direction: FftDirection) {
    let (h, w) = buf.dim();
    let mut planner = FftPlanner::new();

    let row_fft = planner.plan_fft(w, direction);
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for mut row in buf.rows_mut() {
        let slice = row.as_slice_mut().expect("row-major layout");
        row_fft.process_with_scratch(slice, &mut scratch);
    }

    let col_fft = planner.plan_fft(h, direction);
    scratch.resize(col_fft.get_inplace_scratch_len(), Complex64::default());
    let mut col_buf = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col_buf[y] = buf[[y, x]];
        }
        col_fft.process_with_scratch(&mut col_buf, &mut scratch);
        for y in 0..h {
            buf[[y, x]] = col_buf[y];
        }
    }
}

/// Rotate rows/cols so the `(0, 0)` frequency bin lands at
/// `(floor(h/2), floor(w/2))`.
pub fn fftshift2<T: Copy>(input: &Array2<T>) -> Array2<T> {
    let (h, w) = input.dim();
    let mut out = input.clone();
    let (dy, dx) = (h / 2, w / 2);
    for y in 0..h {
        for x in 0..w {
            out[[(y + dy) % h, (x + dx) % w]] = input[[y, x]];
        }
    }
    out
}

/// Exact inverse of [`fftshift2`], including odd-length axes.
pub fn ifftshift2<T: Copy>(input: &Array2<T>) -> Array2<T> {
    let (h, w) = input.dim();
    let mut out = input.clone();
    let (dy, dx) = (h / 2, w / 2);
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = input[[(y + dy) % h, (x + dx) % w]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(h, w) in &[(4usize, 4usize), (5, 3), (8, 8), (7, 13), (1, 6), (9, 1)] {
            let x = Array2::from_shape_fn((h, w), |_| rng.gen_range(-2.0..2.0));
            let back = ifft2(&fft2(&x));
            for (a, b) in x.iter().zip(back.iter()) {
                assert!((a - b.re).abs() < 1e-10);
                assert!(b.im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dc_bin_is_sum() {
        let x = Array2::from_elem((4, 4), 0.5);
        let spec = fft2(&x);
        assert!((spec[[0, 0]].re - 8.0).abs() < 1e-12);
        let off_dc: f64 = spec
            .indexed_iter()
            .filter(|((y, x), _)| !(*y == 0 && *x == 0))
            .map(|(_, v)| v.norm())
            .sum();
        assert!(off_dc < 1e-10);
    }

    #[test]
    fn shift_inverse_pairs_odd_and_even() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(4usize, 6usize), (5, 5), (5, 4), (3, 7)] {
            let x = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0));
            assert_eq!(ifftshift2(&fftshift2(&x)), x);
            assert_eq!(fftshift2(&ifftshift2(&x)), x);
        }
    }

    #[test]
    fn shift_moves_dc_to_center() {
        for &(h, w) in &[(4usize, 4usize), (5, 7), (6, 3)] {
            let x = Array2::from_elem((h, w), 1.0);
            let shifted = fftshift2(&fft2(&x));
            let center = (h / 2, w / 2);
            assert!((shifted[[center.0, center.1]].re - (h * w) as f64).abs() < 1e-9);
        }
    }
}
