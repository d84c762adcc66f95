//! Set-prediction losses: class cross entropy plus binary cross entropy
//! and Dice on Hungarian-matched masks, deep-supervised over all decoder
//! layers.

use super::hungarian::match_queries;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::prompts::IGNORE_LABEL;
use ndarray::{Array1, Array2, Ix2};

/// Matching/loss weights follow the usual query-based segmentation
/// convention: (class, bce, dice) = (2, 5, 5).
pub const W_CLS: f64 = 2.0;
pub const W_BCE: f64 = 5.0;
pub const W_DICE: f64 = 5.0;
/// Down-weight applied to the no-object class in the classification loss.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
/// Additive smoothing in the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

/// Class and mask logits emitted after one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// `[N, C + 1]`; the last column is the no-object class.
    pub class_logits: Tensor,
    /// `[N, P]` with `P = mask_h * mask_w`.
    pub mask_logits: Tensor,
}

/// Predictions from every decoder layer plus the mask grid dims.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub layers: Vec<LayerPrediction>,
    pub mask_h: usize,
    pub mask_w: usize,
}

/// One ground-truth segment: a class and its binary mask on the loss grid.
#[derive(Debug, Clone)]
pub struct SegTarget {
    pub class_id: usize,
    /// `[P]`, entries in {0, 1}.
    pub mask: Array1<f64>,
}

/// Split a label map into per-class binary segments plus the validity mask
/// (zero where the ignore label sits).
pub fn targets_from_label_map(
    labels: &ndarray::Array2<u8>,
    num_classes: usize,
) -> (Vec<SegTarget>, Array1<f64>) {
    let p = labels.len();
    let flat: Vec<u8> = labels.iter().cloned().collect();
    let mut valid = Array1::<f64>::ones(p);
    for (i, &l) in flat.iter().enumerate() {
        if l == IGNORE_LABEL {
            valid[i] = 0.0;
        }
    }
    let mut targets = Vec::new();
    for c in 0..num_classes {
        let mut mask = Array1::<f64>::zeros(p);
        let mut any = false;
        for (i, &l) in flat.iter().enumerate() {
            if l as usize == c {
                mask[i] = 1.0;
                any = true;
            }
        }
        if any {
            targets.push(SegTarget { class_id: c, mask });
        }
    }
    (targets, valid)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln()
}

/// Query-to-target matching costs on detached logits.
pub fn matching_costs(
    class_logits: &Array2<f64>,
    mask_logits: &Array2<f64>,
    targets: &[SegTarget],
    valid: &Array1<f64>,
) -> Result<Array2<f64>> {
    let (n, c_plus_1) = class_logits.dim();
    let p = mask_logits.ncols();
    if valid.len() != p {
        return Err(Error::shape(&[p], &[valid.len()], "matching_costs valid mask"));
    }
    let valid_count: f64 = valid.sum();
    let mut probs = class_logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    let mut cost = Array2::<f64>::zeros((n, targets.len()));
    for (t_idx, target) in targets.iter().enumerate() {
        if target.class_id >= c_plus_1 - 1 {
            return Err(Error::invalid(format!(
                "target class {} out of range",
                target.class_id
            )));
        }
        let t_sum: f64 = target
            .mask
            .iter()
            .zip(valid.iter())
            .map(|(t, v)| t * v)
            .sum();
        for q in 0..n {
            let cls_cost = -probs[[q, target.class_id]];
            let mut bce = 0.0;
            let mut inter = 0.0;
            let mut s_sum = 0.0;
            for i in 0..p {
                if valid[i] > 0.0 {
                    let x = mask_logits[[q, i]];
                    let s = sigmoid(x);
                    bce += bce_logit(x, target.mask[i]);
                    inter += s * target.mask[i];
                    s_sum += s;
                }
            }
            let bce = if valid_count > 0.0 { bce / valid_count } else { 0.0 };
            let dice = 1.0
                - (2.0 * inter + DICE_SMOOTH) / (s_sum + t_sum + DICE_SMOOTH);
            cost[[q, t_idx]] = W_CLS * cls_cost + W_BCE * bce + W_DICE * dice;
        }
    }
    Ok(cost)
}

/// Mean Dice loss of matched mask rows (`[T, P]` logits) against binary
/// targets, restricted to valid pixels.
fn dice_loss_rows(logits: &Tensor, targets: &Array2<f64>, valid: &Array2<f64>) -> Tensor {
    let t = targets.nrows();
    let t_masked = targets * valid;
    let t_sums: Array1<f64> = t_masked.sum_axis(ndarray::Axis(1));
    let s = logits.sigmoid();
    let numer = s
        .mul(&Tensor::constant(t_masked.into_dyn()))
        .sum_cols()
        .mul_scalar(2.0)
        .add_scalar(DICE_SMOOTH);
    let denom = s
        .mul(&Tensor::constant(valid.clone().into_dyn()))
        .sum_cols()
        .add(&Tensor::constant(
            t_sums.mapv(|v| v + DICE_SMOOTH).into_dyn(),
        ));
    numer
        .div(&denom)
        .neg()
        .add_scalar(1.0)
        .sum_all()
        .mul_scalar(1.0 / t as f64)
}

/// Classification + mask losses for one decoder layer under a given
/// assignment. Returns `(l_cls, l_seg)` already weighted.
pub fn layer_losses(
    prediction: &LayerPrediction,
    targets: &[SegTarget],
    valid: &Array1<f64>,
    pairs: &[(usize, usize)],
) -> Result<(Tensor, Tensor)> {
    let n = prediction.class_logits.shape()[0];
    let c_plus_1 = prediction.class_logits.shape()[1];
    let no_object = c_plus_1 - 1;

    let mut class_targets = vec![no_object; n];
    for &(q, t) in pairs {
        class_targets[q] = targets[t].class_id;
    }
    let mut class_weights = vec![1.0; c_plus_1];
    class_weights[no_object] = NO_OBJECT_WEIGHT;
    let l_cls = prediction
        .class_logits
        .cross_entropy_logits(&class_targets, &class_weights)
        .mul_scalar(W_CLS);

    if pairs.is_empty() {
        return Ok((l_cls, Tensor::constant(ndarray::arr1(&[0.0]).into_dyn())));
    }

    let p = prediction.mask_logits.shape()[1];
    let matched_rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let matched = prediction.mask_logits.select_rows(&matched_rows);

    // All matched rows at once; every row shares the valid mask.
    let mut mask_targets = Array2::<f64>::zeros((pairs.len(), p));
    let mut mask_valid = Array2::<f64>::zeros((pairs.len(), p));
    for (row, &(_, t)) in pairs.iter().enumerate() {
        for i in 0..p {
            mask_targets[[row, i]] = targets[t].mask[i];
            mask_valid[[row, i]] = valid[i];
        }
    }
    let l_bce = matched.bce_with_logits_masked(
        &mask_targets.clone().into_dyn(),
        &mask_valid.clone().into_dyn(),
    );
    let l_dice = dice_loss_rows(&matched, &mask_targets, &mask_valid);

    let l_seg = l_bce.mul_scalar(W_BCE).add(&l_dice.mul_scalar(W_DICE));
    Ok((l_cls, l_seg))
}

/// Deep-supervised total: every layer is matched independently and its
/// losses summed. Returns `(l_cls, l_seg)`.
pub fn segmentation_losses(
    predictions: &PredictionSet,
    targets: &[SegTarget],
    valid: &Array1<f64>,
) -> Result<(Tensor, Tensor)> {
    let mut total_cls: Option<Tensor> = None;
    let mut total_seg: Option<Tensor> = None;
    for layer in &predictions.layers {
        let cls_detached = layer
            .class_logits
            .to_array()
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        let mask_detached = layer
            .mask_logits
            .to_array()
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        let cost = matching_costs(&cls_detached, &mask_detached, targets, valid)?;
        let pairs = match_queries(&cost)?;
        let (l_cls, l_seg) = layer_losses(layer, targets, valid, &pairs)?;
        total_cls = Some(match total_cls {
            Some(t) => t.add(&l_cls),
            None => l_cls,
        });
        total_seg = Some(match total_seg {
            Some(t) => t.add(&l_seg),
            None => l_seg,
        });
    }
    Ok((
        total_cls.ok_or_else(|| Error::invalid("no decoder layers"))?,
        total_seg.ok_or_else(|| Error::invalid("no decoder layers"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::probe_gradients;
    use ndarray::{arr2, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_masks_drive_seg_loss_to_zero() {
        // Sigmoid ~= 1 on an all-ones target: dice -> 0 and bce -> 0.
        let target = SegTarget {
            class_id: 0,
            mask: Array1::ones(6),
        };
        let valid = Array1::ones(6);
        let pred = LayerPrediction {
            class_logits: Tensor::constant(arr2(&[[8.0, -8.0]]).into_dyn()),
            mask_logits: Tensor::constant(ArrayD::from_elem(vec![1, 6], 30.0)),
        };
        let (_, l_seg) = layer_losses(&pred, &[target], &valid, &[(0, 0)]).unwrap();
        assert!(l_seg.value() < 1e-3, "seg loss {}", l_seg.value());
    }

    #[test]
    fn half_confidence_dice_matches_hand_formula() {
        let n = 8usize;
        let targets = Array2::<f64>::ones((1, n));
        let valid = Array2::<f64>::ones((1, n));
        let logits = Tensor::constant(ArrayD::zeros(vec![1, n])); // sigmoid = 0.5
        let d = dice_loss_rows(&logits, &targets, &valid);
        let nf = n as f64;
        let expected = 1.0 - (2.0 * 0.5 * nf + 1.0) / (0.5 * nf + nf + 1.0);
        assert!((d.value() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_class_logits_give_log_c_plus_1() {
        let c = 5usize;
        let pred = LayerPrediction {
            class_logits: Tensor::constant(ArrayD::zeros(vec![3, c + 1])),
            mask_logits: Tensor::constant(ArrayD::zeros(vec![3, 4])),
        };
        let (l_cls, _) = layer_losses(&pred, &[], &Array1::ones(4), &[]).unwrap();
        // All queries are no-object; the weighted mean leaves ln(C+1).
        assert!((l_cls.value() / W_CLS - ((c + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ignore_pixels_do_not_contribute() {
        let target = SegTarget {
            class_id: 0,
            mask: Array1::from_vec(vec![1.0, 1.0, 0.0, 0.0]),
        };
        let mut valid = Array1::ones(4);
        valid[3] = 0.0;
        let good = LayerPrediction {
            class_logits: Tensor::constant(arr2(&[[5.0, -5.0]]).into_dyn()),
            mask_logits: Tensor::constant(
                ArrayD::from_shape_vec(vec![1, 4], vec![9.0, 9.0, -9.0, -2.0]).unwrap(),
            ),
        };
        let also_good = LayerPrediction {
            class_logits: Tensor::constant(arr2(&[[5.0, -5.0]]).into_dyn()),
            mask_logits: Tensor::constant(
                ArrayD::from_shape_vec(vec![1, 4], vec![9.0, 9.0, -9.0, 7.0]).unwrap(),
            ),
        };
        let (_, a) = layer_losses(&good, std::slice::from_ref(&target), &valid, &[(0, 0)]).unwrap();
        let (_, b) =
            layer_losses(&also_good, std::slice::from_ref(&target), &valid, &[(0, 0)]).unwrap();
        assert!((a.value() - b.value()).abs() < 1e-12);
    }

    #[test]
    fn targets_built_per_present_class() {
        let labels = arr2(&[[0u8, 0, 255], [2, 2, 2]]);
        let (targets, valid) = targets_from_label_map(&labels, 5);
        assert_eq!(targets.len(), 2);
        assert_eq!(targets[0].class_id, 0);
        assert_eq!(targets[1].class_id, 2);
        assert_eq!(valid[2], 0.0);
        assert_eq!(valid.sum(), 5.0);
    }

    #[test]
    fn matching_prefers_right_class_and_mask() {
        let labels = arr2(&[[0u8, 0], [1, 1]]);
        let (targets, valid) = targets_from_label_map(&labels, 2);
        // Query 0 predicts class 1 with the bottom mask, query 1 predicts
        // class 0 with the top mask.
        let class_logits = arr2(&[[-4.0, 4.0, -4.0], [4.0, -4.0, -4.0]]);
        let mask_logits = arr2(&[
            [-6.0, -6.0, 6.0, 6.0],
            [6.0, 6.0, -6.0, -6.0],
        ]);
        let cost = matching_costs(&class_logits, &mask_logits, &targets, &valid).unwrap();
        let pairs = match_queries(&cost).unwrap();
        assert_eq!(pairs, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn seg_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = arr2(&[[0u8, 1, 1], [2, 255, 0]]);
        let (targets, valid) = targets_from_label_map(&labels, 3);
        let class_logits = Tensor::param(ArrayD::from_shape_fn(vec![4, 4], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let mask_logits = Tensor::param(ArrayD::from_shape_fn(vec![4, 6], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let params = vec![class_logits.clone(), mask_logits.clone()];
        let loss = || {
            let pred = LayerPrediction {
                class_logits: class_logits.clone(),
                mask_logits: mask_logits.clone(),
            };
            // Fixed assignment keeps the loss differentiable at the probe.
            let (l_cls, l_seg) =
                layer_losses(&pred, &targets, &valid, &[(0, 0), (2, 1), (3, 2)]).unwrap();
            l_cls.add(&l_seg)
        };
        let err = probe_gradients(&params, loss, 20, 1e-5, &mut rng);
        assert!(err < 1e-4, "seg loss grad error {err}");
    }
}
