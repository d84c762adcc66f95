//! Semantic inference and mean-IoU evaluation.

use super::dataset::Sample;
use super::losses::PredictionSet;
use super::model::SegModel;
use crate::error::{Error, Result};
use crate::prompts::IGNORE_LABEL;
use crate::resample::bilinear_resize_2d;
use ndarray::{Array2, Ix2};
use serde::Serialize;

/// Per-class IoU table plus the mean over classes with nonempty unions.
#[derive(Debug, Clone, Serialize)]
pub struct MiouReport {
    pub class_names: Vec<String>,
    /// `None` where the class appears in neither prediction nor truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub num_samples: usize,
}

/// Running intersection/union counts; order-independent by construction.
#[derive(Debug, Clone, Default)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn update(&mut self, predicted: &Array2<u8>, truth: &Array2<u8>) {
        debug_assert_eq!(predicted.dim(), truth.dim());
        for (p, t) in predicted.iter().zip(truth.iter()) {
            if *t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (*p as usize, *t as usize);
            if p == t {
                self.intersection[t] += 1;
                self.union[t] += 1;
            } else {
                self.union[t] += 1;
                if p < self.union.len() {
                    self.union[p] += 1;
                }
            }
        }
    }

    pub fn report(&self, class_names: &[String], num_samples: usize) -> MiouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| {
                if u == 0 {
                    None
                } else {
                    Some(i as f64 / u as f64)
                }
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport {
            class_names: class_names.to_vec(),
            per_class,
            miou,
            num_samples,
        }
    }
}

/// Mask2Former-style semantic inference from one decoder layer's outputs:
/// class probabilities (without no-object) weight the mask sigmoids, the
/// per-class maps are bilinearly upsampled, and each pixel takes the
/// argmax class.
pub fn semantic_inference(
    predictions: &PredictionSet,
    layer: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Array2<u8>> {
    let pred = predictions
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("decoder layer {layer} out of range")))?;
    let class_logits = pred
        .class_logits
        .to_array()
        .into_dimensionality::<Ix2>()
        .expect("2-d");
    let mask_logits = pred
        .mask_logits
        .to_array()
        .into_dimensionality::<Ix2>()
        .expect("2-d");
    let (n, c_plus_1) = class_logits.dim();
    let num_classes = c_plus_1 - 1;
    let (h, w) = (predictions.mask_h, predictions.mask_w);

    let mut cls_probs = class_logits.clone();
    for mut row in cls_probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }

    // semseg[c] = sum_n p_n(c) * sigmoid(mask_n), accumulated per class.
    let mut best_class = Array2::<u8>::zeros((out_h, out_w));
    let mut best_score = Array2::<f64>::from_elem((out_h, out_w), f64::NEG_INFINITY);
    let mut class_map = Array2::<f64>::zeros((h, w));
    for c in 0..num_classes {
        class_map.fill(0.0);
        for q in 0..n {
            let weight = cls_probs[[q, c]];
            if weight < 1e-12 {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let logit = mask_logits[[q, y * w + x]];
                    class_map[[y, x]] += weight / (1.0 + (-logit).exp());
                }
            }
        }
        let upsampled = if (h, w) == (out_h, out_w) {
            class_map.clone()
        } else {
            bilinear_resize_2d(&class_map, out_h, out_w)
        };
        for y in 0..out_h {
            for x in 0..out_w {
                if upsampled[[y, x]] > best_score[[y, x]] {
                    best_score[[y, x]] = upsampled[[y, x]];
                    best_class[[y, x]] = c as u8;
                }
            }
        }
    }
    Ok(best_class)
}

/// Evaluate mean IoU of the final decoder layer over a sample set.
pub fn evaluate_miou(model: &SegModel, samples: &[Sample], class_names: &[String]) -> Result<MiouReport> {
    evaluate_miou_at_layer(model, samples, class_names, None)
}

/// Same, at a specific decoder layer (`None` = last).
pub fn evaluate_miou_at_layer(
    model: &SegModel,
    samples: &[Sample],
    class_names: &[String],
    layer: Option<usize>,
) -> Result<MiouReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    let mut acc = IouAccumulator::new(class_names.len());
    for sample in samples {
        let preds = model.eval_forward(sample)?;
        let layer_idx = layer.unwrap_or(preds.layers.len() - 1);
        let (h, w) = sample.labels.dim();
        let predicted = semantic_inference(&preds, layer_idx, h, w)?;
        acc.update(&predicted, &sample.labels);
    }
    Ok(acc.report(class_names, samples.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions_reach_full_miou() {
        let gt = arr2(&[[0u8, 1], [2, 255]]);
        let mut acc = IouAccumulator::new(3);
        acc.update(&gt.clone(), &gt);
        let report = acc.report(&names(3), 1);
        assert_eq!(report.miou, 1.0);
        for c in report.per_class.iter().take(3) {
            assert_eq!(*c, Some(1.0));
        }
    }

    #[test]
    fn half_overlap_with_equal_false_positive_gives_one_third() {
        // Class 1 truth occupies 4 pixels; prediction covers half of them
        // and an equally sized disjoint region.
        let truth = arr2(&[
            [1u8, 1, 0, 0],
            [1, 1, 0, 0],
            [0, 0, 0, 0],
            [0, 0, 0, 0],
        ]);
        let pred = arr2(&[
            [1u8, 0, 0, 0],
            [1, 0, 0, 0],
            [0, 0, 1, 0],
            [0, 0, 1, 0],
        ]);
        let mut acc = IouAccumulator::new(2);
        acc.update(&pred, &truth);
        let report = acc.report(&names(2), 1);
        let iou1 = report.per_class[1].unwrap();
        assert!((iou1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_background_prediction_zeroes_the_missing_class() {
        let truth = arr2(&[[0u8, 0], [1, 1]]);
        let pred = arr2(&[[0u8, 0], [0, 0]]);
        let mut acc = IouAccumulator::new(2);
        acc.update(&pred, &truth);
        let report = acc.report(&names(2), 1);
        assert!(report.per_class[0].unwrap() < 1.0);
        assert_eq!(report.per_class[1], Some(0.0));
    }

    #[test]
    fn miou_ignores_sample_order() {
        let a_truth = arr2(&[[0u8, 1]]);
        let a_pred = arr2(&[[0u8, 0]]);
        let b_truth = arr2(&[[1u8, 1]]);
        let b_pred = arr2(&[[1u8, 0]]);
        let mut forward = IouAccumulator::new(2);
        forward.update(&a_pred, &a_truth);
        forward.update(&b_pred, &b_truth);
        let mut backward = IouAccumulator::new(2);
        backward.update(&b_pred, &b_truth);
        backward.update(&a_pred, &a_truth);
        assert_eq!(
            forward.report(&names(2), 2).miou,
            backward.report(&names(2), 2).miou
        );
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let truth = arr2(&[[0u8, 0]]);
        let pred = arr2(&[[0u8, 0]]);
        let mut acc = IouAccumulator::new(3);
        acc.update(&pred, &truth);
        let report = acc.report(&names(3), 1);
        assert_eq!(report.per_class[1], None);
        assert_eq!(report.per_class[2], None);
        assert_eq!(report.miou, 1.0);
    }
}
