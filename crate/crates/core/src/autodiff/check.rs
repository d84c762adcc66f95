//! Finite-difference verification of analytic gradients.
//!
//! Used by unit tests for individual ops and by the acceptance suite for
//! whole-model losses. Probing is sampled: for large parameter tensors a
//! random subset of coordinates is checked.

use super::{no_grad, Tensor};
use rand::Rng;

/// Central-difference derivative of `loss` w.r.t. one coordinate of `param`.
pub fn central_difference(
    param: &Tensor,
    index: usize,
    eps: f64,
    mut loss: impl FnMut() -> f64,
) -> f64 {
    let original = {
        let d = param.data();
        d.as_slice().expect("standard layout")[index]
    };
    let step = eps * original.abs().max(1.0);
    set_coord(param, index, original + step);
    let plus = loss();
    set_coord(param, index, original - step);
    let minus = loss();
    set_coord(param, index, original);
    (plus - minus) / (2.0 * step)
}

fn set_coord(param: &Tensor, index: usize, value: f64) {
    param.update_data(|d| {
        d.as_slice_mut().expect("standard layout")[index] = value;
    });
}

/// Compare analytic gradients of `build_loss()` against central finite
/// differences at up to `probes` random coordinates per parameter.
/// Returns the maximum relative error observed.
///
/// The error for one coordinate is `|a - n| / max(|a|, |n|, floor)` where
/// the floor is a thousandth of the largest analytic gradient component.
/// Directions whose true derivative sits far below the problem's gradient
/// scale are dominated by f64 difference-quotient noise, not by gradient
/// bugs; the scaled floor keeps the check sensitive everywhere else.
pub fn probe_gradients(
    params: &[Tensor],
    build_loss: impl Fn() -> Tensor,
    probes: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> f64 {
    for p in params {
        p.zero_grad();
    }
    let loss = build_loss();
    loss.backward();
    let analytic: Vec<ndarray::ArrayD<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .unwrap_or_else(|| ndarray::ArrayD::zeros(p.data().shape()))
        })
        .collect();
    let gscale = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let floor = (1e-3 * gscale).max(1e-9);

    let mut max_err: f64 = 0.0;
    for (p, grad) in params.iter().zip(&analytic) {
        let n = p.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > probes {
            for i in 0..probes {
                let j = rng.gen_range(i..n);
                coords.swap(i, j);
            }
            coords.truncate(probes);
        }
        for &idx in &coords {
            let numeric =
                central_difference(p, idx, eps, || no_grad(|| build_loss().value()));
            let a = grad.as_slice().expect("standard layout")[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > max_err {
                max_err = err;
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    max_err
}
