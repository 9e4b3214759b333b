//! Detection evaluation: average precision over IoU thresholds with
//! greedy score-ranked matching and 101-point precision-recall interpolation,
//! plus a size breakdown by ground-truth area terciles.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_xyxy, BoxCxCyWH};
use crate::nn::{model_forward, BoundParams, ModelConfig, ModelError, Prediction};
use crate::params::ParamStore;
use crate::scenes::{GroundTruth, SceneSample};

/// IoU thresholds 0.50:0.05:0.95.
pub const IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

const RECALL_POINTS: usize = 101;

/// One scored class hypothesis (a query/class pair from the last decoder
/// layer).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoxCxCyWH,
}

/// Aggregate AP metrics over an evaluation set; every value is in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP at IoU 0.50, averaged over classes.
    pub ap50: f64,
    /// Mean AP over the IoU thresholds 0.50:0.05:0.95.
    pub map: f64,
    /// AP over the bottom / middle / top tercile of ground-truth box areas.
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "epoch,ap50,map,ap_small,ap_medium,ap_large";

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{}",
            self.ap50, self.map, self.ap_small, self.ap_medium, self.ap_large
        )
    }
}

/// Expand per-query class probabilities into one detection per (query, class).
pub fn predictions_to_detections(preds: &[Prediction]) -> Vec<Detection> {
    preds
        .iter()
        .flat_map(|p| {
            let bbox = p.bbox;
            p.probs
                .iter()
                .enumerate()
                .map(move |(c, &s)| Detection { class_id: c, score: s, bbox })
        })
        .collect()
}

fn area(b: &BoxCxCyWH) -> f64 {
    b.w * b.h
}

/// AP for one class at one IoU threshold, with ignore semantics: ground
/// truths failing `gt_keep` never count toward recall; detections that match
/// only an ignored ground truth, or that are unmatched and fail `det_keep`,
/// are dropped from the ranking instead of counting as false positives.
fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    tau: f64,
    gt_keep: &dyn Fn(&GroundTruth) -> bool,
    det_keep: &dyn Fn(&Detection) -> bool,
) -> Option<f64> {
    let n_gt: usize = gts
        .iter()
        .map(|g| g.iter().filter(|gt| gt.class_id == class_id && gt_keep(gt)).count())
        .sum();
    if n_gt == 0 {
        return None;
    }

    // (scene, detection), globally ranked by score; the stable sort keeps
    // scene/query/class order on ties for determinism.
    let mut ranked: Vec<(usize, Detection)> = Vec::new();
    for (scene, scene_dets) in dets.iter().enumerate() {
        for d in scene_dets.iter().filter(|d| d.class_id == class_id) {
            ranked.push((scene, *d));
        }
    }
    ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for (scene, d) in ranked {
        let dx = d.bbox.to_xyxy();
        let mut best: Option<(usize, f64, bool)> = None; // (gt idx, iou, kept)
        for (j, gt) in gts[scene].iter().enumerate() {
            if gt.class_id != class_id {
                continue;
            }
            let kept = gt_keep(gt);
            if kept && used[scene][j] {
                continue;
            }
            let iou = iou_xyxy(dx, gt.bbox.to_xyxy());
            if iou < tau {
                continue;
            }
            // Prefer kept ground truths over ignored ones, then higher IoU.
            let better = match best {
                None => true,
                Some((_, biou, bkept)) => (kept, iou) > (bkept, biou),
            };
            if better {
                best = Some((j, iou, kept));
            }
        }
        match best {
            Some((j, _, true)) => {
                used[scene][j] = true;
                tp += 1;
            }
            Some((_, _, false)) => continue, // matched an ignored GT
            None => {
                if det_keep(&d) {
                    fp += 1;
                } else {
                    continue;
                }
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // 101-point interpolation: max precision at recall ≥ r for each grid r.
    let mut ap = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec + 1e-12 >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += p;
    }
    Some(ap / RECALL_POINTS as f64)
}

fn mean_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    n_classes: usize,
    tau: f64,
    gt_keep: &dyn Fn(&GroundTruth) -> bool,
    det_keep: &dyn Fn(&Detection) -> bool,
) -> f64 {
    let aps: Vec<f64> =
        (0..n_classes).filter_map(|c| class_ap(dets, gts, c, tau, gt_keep, det_keep)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// AP averaged over classes at one IoU threshold, no size restriction.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    n_classes: usize,
    tau: f64,
) -> f64 {
    mean_ap(dets, gts, n_classes, tau, &|_| true, &|_| true)
}

/// Full evaluation: AP@0.50, the 0.50:0.05:0.95 mean, and size-bucket APs
/// with bucket edges at the terciles of the ground-truth area distribution.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    n_classes: usize,
) -> EvalResult {
    let map = IOU_THRESHOLDS
        .iter()
        .map(|&tau| average_precision(dets, gts, n_classes, tau))
        .sum::<f64>()
        / IOU_THRESHOLDS.len() as f64;
    let ap50 = average_precision(dets, gts, n_classes, 0.50);

    let mut areas: Vec<f64> = gts.iter().flatten().map(|g| area(&g.bbox)).collect();
    areas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = if areas.is_empty() {
        (0.0, 0.0)
    } else {
        (areas[areas.len() / 3], areas[2 * areas.len() / 3])
    };
    let bucket_ap = |keep_gt: &dyn Fn(&GroundTruth) -> bool, keep_det: &dyn Fn(&Detection) -> bool| {
        IOU_THRESHOLDS
            .iter()
            .map(|&tau| mean_ap(dets, gts, n_classes, tau, keep_gt, keep_det))
            .sum::<f64>()
            / IOU_THRESHOLDS.len() as f64
    };
    let ap_small = bucket_ap(&|g| area(&g.bbox) < lo, &|d| area(&d.bbox) < lo);
    let ap_medium = bucket_ap(
        &|g| (lo..hi).contains(&area(&g.bbox)),
        &|d| (lo..hi).contains(&area(&d.bbox)),
    );
    let ap_large = bucket_ap(&|g| area(&g.bbox) >= hi, &|d| area(&d.bbox) >= hi);

    EvalResult { ap50, map, ap_small, ap_medium, ap_large }
}

/// Forward every scene through the model (no gradients) and evaluate the
/// last decoder layer's student-group predictions.
pub fn evaluate_model(
    store: &ParamStore,
    cfg: &ModelConfig,
    scenes: &[SceneSample],
) -> Result<EvalResult, ModelError> {
    let mut dets = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut t = crate::grad::Tape::new();
        let bp = BoundParams::bind(&mut t, store, false)?;
        let out = model_forward(&mut t, cfg, &bp, &scene.features, &[])?;
        let preds = out.student_predictions(&t, out.layers.len() - 1);
        dets.push(predictions_to_detections(&preds));
        gts.push(scene.gts.clone());
    }
    Ok(evaluate_detections(&dets, &gts, cfg.n_classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxCxCyWH {
        BoxCxCyWH::new(cx, cy, w, h)
    }

    fn gt(class_id: usize, b: BoxCxCyWH) -> GroundTruth {
        GroundTruth { class_id, bbox: b }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let b1 = bx(0.3, 0.3, 0.2, 0.2);
        let b2 = bx(0.7, 0.7, 0.25, 0.3);
        let gts = vec![vec![gt(0, b1), gt(1, b2)]];
        let dets = vec![vec![
            Detection { class_id: 0, score: 1.0, bbox: b1 },
            Detection { class_id: 1, score: 1.0, bbox: b2 },
        ]];
        let r = evaluate_detections(&dets, &gts, 2);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.ap50, 1.0);
    }

    #[test]
    fn no_overlapping_predictions_score_zero() {
        let gts = vec![vec![gt(0, bx(0.2, 0.2, 0.1, 0.1))]];
        let dets = vec![vec![Detection {
            class_id: 0,
            score: 0.9,
            bbox: bx(0.8, 0.8, 0.1, 0.1),
        }]];
        let r = evaluate_detections(&dets, &gts, 1);
        assert_eq!(r.map, 0.0);
        assert_eq!(r.ap50, 0.0);
    }

    #[test]
    fn half_recall_matches_interpolated_area() {
        // 2 GTs, one exact prediction, no false positives: precision 1 up to
        // recall 0.5, then 0. The 101-point grid places 51 of its points at
        // recall ≤ 0.5, giving 51/101 ≈ 0.5.
        let b1 = bx(0.3, 0.3, 0.2, 0.2);
        let b2 = bx(0.7, 0.7, 0.2, 0.2);
        let gts = vec![vec![gt(0, b1), gt(0, b2)]];
        let dets = vec![vec![Detection { class_id: 0, score: 0.8, bbox: b1 }]];
        let ap = average_precision(&dets, &gts, 1, 0.5);
        assert!((ap - 51.0 / 101.0).abs() < 1e-12);
        assert!((ap - 0.5).abs() < 0.01);
    }

    #[test]
    fn false_positive_above_true_positive_halves_precision() {
        // FP ranked above the TP: precision at full recall is 1/2; max
        // precision at every recall grid point is 0.5.
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let gts = vec![vec![gt(0, b)]];
        let dets = vec![vec![
            Detection { class_id: 0, score: 0.9, bbox: bx(0.1, 0.1, 0.05, 0.05) },
            Detection { class_id: 0, score: 0.8, bbox: b },
        ]];
        let ap = average_precision(&dets, &gts, 1, 0.5);
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn each_gt_matches_at_most_once() {
        // Two identical detections on one GT: the second is a false positive.
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let gts = vec![vec![gt(0, b)]];
        let dets = vec![vec![
            Detection { class_id: 0, score: 0.9, bbox: b },
            Detection { class_id: 0, score: 0.8, bbox: b },
        ]];
        let ap = average_precision(&dets, &gts, 1, 0.5);
        // Recall hits 1.0 at the first detection with precision 1.
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classes_without_gt_are_excluded_from_the_mean() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let gts = vec![vec![gt(0, b)]];
        let dets = vec![vec![Detection { class_id: 0, score: 1.0, bbox: b }]];
        // Class 1 has no GT anywhere; mAP should still be 1.
        let r = evaluate_detections(&dets, &gts, 2);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn size_buckets_partition_by_area_terciles() {
        // Three GTs of distinct areas, each detected perfectly.
        let small = bx(0.2, 0.2, 0.05, 0.05);
        let medium = bx(0.5, 0.5, 0.2, 0.2);
        let large = bx(0.7, 0.7, 0.5, 0.5);
        let gts = vec![vec![gt(0, small), gt(0, medium), gt(0, large)]];
        let dets = vec![vec![
            Detection { class_id: 0, score: 0.9, bbox: small },
            Detection { class_id: 0, score: 0.9, bbox: medium },
            Detection { class_id: 0, score: 0.9, bbox: large },
        ]];
        let r = evaluate_detections(&dets, &gts, 1);
        assert_eq!(r.map, 1.0);
        assert_eq!((r.ap_small, r.ap_medium, r.ap_large), (1.0, 1.0, 1.0));
    }

    #[test]
    fn deterministic_under_repeated_evaluation() {
        let b = bx(0.4, 0.6, 0.3, 0.2);
        let gts = vec![vec![gt(1, b)]];
        let dets = vec![vec![
            Detection { class_id: 1, score: 0.7, bbox: bx(0.42, 0.58, 0.3, 0.2) },
            Detection { class_id: 1, score: 0.7, bbox: bx(0.9, 0.9, 0.05, 0.05) },
        ]];
        let a = evaluate_detections(&dets, &gts, 2);
        let b2 = evaluate_detections(&dets, &gts, 2);
        assert_eq!(a, b2);
    }
}
