//! COCO-style average precision and the confidence-vs-IoU correlation
//! analysis.
//!
//! AP follows the published COCO convention: greedy score-ordered matching
//! against unmatched ground truths, 101-point interpolated precision, mean
//! over the classes present in the ground truth, thresholds 0.50 to 0.95
//! in steps of 0.05.

use crate::error::Result;
use crate::geometry::{iou, AnchorGrid, BBox, Detection};
use crate::model::CascadeModel;
use crate::numerics::tape::Tape;
use crate::pipeline::scene::SyntheticScene;

/// Detections and ground truths for one image.
pub type ImageEval = (Vec<Detection>, Vec<(BBox, usize)>);

/// The ten matching thresholds AP averages over.
pub const AP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Average precision at one matching threshold, averaged over the classes
/// that appear in the ground truth.
pub fn ap_at_iou(per_image: &[ImageEval], iou_threshold: f64) -> f64 {
    let mut classes: Vec<usize> = per_image
        .iter()
        .flat_map(|(_, gts)| gts.iter().map(|(_, c)| *c))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| class_ap(per_image, c, iou_threshold))
        .sum();
    total / classes.len() as f64
}

fn class_ap(per_image: &[ImageEval], class: usize, iou_threshold: f64) -> f64 {
    // All detections of this class, ordered by descending score with ties
    // broken by (image, input order) for determinism.
    let mut dets: Vec<(usize, usize, f64)> = per_image
        .iter()
        .enumerate()
        .flat_map(|(img, (dets, _))| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class)
                .map(move |(di, d)| (img, di, d.score))
        })
        .collect();
    dets.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("scores must not be NaN")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let total_gt: usize = per_image
        .iter()
        .map(|(_, gts)| gts.iter().filter(|(_, c)| *c == class).count())
        .sum();
    if total_gt == 0 {
        return 0.0;
    }

    let mut matched: Vec<Vec<bool>> = per_image
        .iter()
        .map(|(_, gts)| vec![false; gts.len()])
        .collect();
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(dets.len()); // (recall, precision)
    for (rank, &(img, di, _)) in dets.iter().enumerate() {
        let d = &per_image[img].0[di];
        let gts = &per_image[img].1;
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, (_, c))| *c == class && !matched[img][*gi])
            .map(|(gi, (g, _))| (gi, iou(&d.bbox, g)))
            .rev()
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("IoU is never NaN"));
        if let Some((gi, overlap)) = best {
            if overlap >= iou_threshold {
                matched[img][gi] = true;
                tp += 1;
            }
        }
        curve.push((
            tp as f64 / total_gt as f64,
            tp as f64 / (rank + 1) as f64,
        ));
    }

    // 101-point interpolation: at each recall level take the maximum
    // precision achieved at that recall or beyond.
    let mut envelope = curve.clone();
    let mut best = 0.0_f64;
    for point in envelope.iter_mut().rev() {
        best = best.max(point.1);
        point.1 = best;
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = envelope
            .iter()
            .find(|(recall, _)| *recall >= r)
            .map_or(0.0, |(_, precision)| *precision);
        sum += p;
    }
    sum / 101.0
}

/// Mean AP and the per-threshold columns used for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct APReport {
    /// Mean over the ten thresholds.
    pub ap: f64,
    /// All ten (threshold, ap) pairs, ascending.
    pub per_threshold: Vec<(f64, f64)>,
}

impl APReport {
    /// AP at one of the ten evaluated thresholds.
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|(_, ap)| *ap)
    }
}

/// Evaluate the full threshold sweep.
pub fn coco_ap(per_image: &[ImageEval]) -> APReport {
    let per_threshold: Vec<(f64, f64)> = AP_THRESHOLDS
        .iter()
        .map(|&t| (t, ap_at_iou(per_image, t)))
        .collect();
    let ap = per_threshold.iter().map(|(_, a)| a).sum::<f64>() / per_threshold.len() as f64;
    APReport { ap, per_threshold }
}

/// Pearson correlation; `None` when either variable has zero variance.
pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return None;
    }
    let mx = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Fewer matched pairs than this flags the stage as low-sample.
pub const MIN_CORRELATION_PAIRS: usize = 30;

/// Only detections whose matched IoU reaches this enter the correlation.
pub const CORRELATION_MIN_IOU: f64 = 0.5;

/// Confidence-vs-IoU relation for one stage's raw predictions.
#[derive(Debug, Clone)]
pub struct StageCorrelation {
    /// (confidence, matched IoU) for every kept prediction.
    pub pairs: Vec<(f64, f64)>,
    /// Pearson r; 0 when degenerate.
    pub pearson_r: f64,
    /// Set when a zero-variance input made r undefined.
    pub degenerate: bool,
    /// Set when fewer than [`MIN_CORRELATION_PAIRS`] pairs matched.
    pub low_sample: bool,
    /// Mean confidence over ten IoU bins covering [0.5, 1.0].
    pub bin_means: [Option<f64>; 10],
}

/// Per-stage correlation over a scene set.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub stages: Vec<StageCorrelation>,
}

fn stage_stats(pairs: Vec<(f64, f64)>) -> StageCorrelation {
    let r = pearson(&pairs);
    let mut sums = [(0.0, 0usize); 10];
    for &(conf, overlap) in &pairs {
        let idx = (((overlap - CORRELATION_MIN_IOU) / 0.05) as usize).min(9);
        sums[idx].0 += conf;
        sums[idx].1 += 1;
    }
    let mut bin_means = [None; 10];
    for (i, (sum, count)) in sums.iter().enumerate() {
        if *count > 0 {
            bin_means[i] = Some(sum / *count as f64);
        }
    }
    StageCorrelation {
        low_sample: pairs.len() < MIN_CORRELATION_PAIRS,
        degenerate: r.is_none() && !pairs.is_empty(),
        pearson_r: r.unwrap_or(0.0),
        pairs,
        bin_means,
    }
}

/// Collect (confidence, matched IoU) pairs per stage from raw predictions:
/// pre-NMS, post score threshold, each stage scored by its own classifier
/// on its own refined boxes, matched to the best same-class ground truth,
/// kept when that IoU reaches 0.5.
pub fn correlation_report(
    model: &CascadeModel,
    scenes: &[SyntheticScene],
    anchors: &AnchorGrid,
    score_threshold: f64,
) -> Result<CorrelationReport> {
    let mut per_stage: Vec<Vec<(f64, f64)>> = vec![Vec::new(); model.cfg.num_stages];
    for scene in scenes {
        let mut tape = Tape::new();
        let out = model.cascade_forward(&mut tape, &scene.image, anchors)?;
        for (s, stage) in out.stages.iter().enumerate() {
            let scores = tape.sigmoid(stage.cls_logits);
            let scores = tape.value(scores);
            let classes = model.cfg.num_classes;
            for (n, bbox) in stage.boxes.iter().enumerate() {
                for k in 0..classes {
                    let conf = scores.data()[n * classes + k];
                    if conf < score_threshold {
                        continue;
                    }
                    let best = scene
                        .gts
                        .iter()
                        .filter(|(_, c)| *c == k)
                        .map(|(g, _)| iou(bbox, g))
                        .fold(0.0, f64::max);
                    if best >= CORRELATION_MIN_IOU {
                        per_stage[s].push((conf, best));
                    }
                }
            }
        }
    }
    Ok(CorrelationReport {
        stages: per_stage.into_iter().map(stage_stats).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(bbox: BBox, class_id: usize, score: f64) -> Detection {
        Detection { bbox, class_id, score }
    }

    fn unit_box(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    #[test]
    fn perfect_detections_score_one_everywhere() {
        let gts = vec![(unit_box(0.0), 0), (unit_box(20.0), 1)];
        let dets = vec![det(unit_box(0.0), 0, 1.0), det(unit_box(20.0), 1, 1.0)];
        let report = coco_ap(&[(dets, gts)]);
        assert_eq!(report.ap, 1.0);
        for (_, ap) in &report.per_threshold {
            assert_eq!(*ap, 1.0);
        }
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![(unit_box(0.0), 0)];
        assert_eq!(ap_at_iou(&[(vec![], gts)], 0.5), 0.0);
    }

    #[test]
    fn worked_precision_recall_example() {
        // One gt; a high-scored TP at IoU 0.8 and a lower-scored disjoint
        // FP. The interpolated envelope holds precision 1.0 through recall
        // 1.0, so AP is exactly 1.
        let gt_box = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU 8x10 / (100 + 100 - 80) = 80/120 ≈ 0.67 ... need 0.8:
        // overlap 9x10 / (90+100-90) -> box (0,0,9,10) gives 90/100 = 0.9.
        let tp_box = BBox::new(0.0, 0.0, 9.0, 10.0); // IoU 0.9 >= 0.5
        let fp_box = BBox::new(30.0, 30.0, 40.0, 40.0);
        let dets = vec![det(tp_box, 0, 0.9), det(fp_box, 0, 0.8)];
        let ap = ap_at_iou(&[(dets, vec![(gt_box, 0)])], 0.5);
        assert!((ap - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_iou_trips_the_threshold_staircase() {
        // Detections overlapping their gts at IoU ~0.65: full marks below
        // 0.65, zero above.
        let mut images = Vec::new();
        for i in 0..4 {
            let g = BBox::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0);
            // (0,0,6.5,10) vs (0,0,10,10): 65/100 = 0.65.
            let d = BBox::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 6.5, 10.0);
            images.push((vec![det(d, 0, 0.9)], vec![(g, 0)]));
        }
        let report = coco_ap(&images);
        assert_eq!(report.ap_at(0.5), Some(1.0));
        assert_eq!(report.ap_at(0.6), Some(1.0));
        assert_eq!(report.ap_at(0.7), Some(0.0));
        assert_eq!(report.ap_at(0.8), Some(0.0));
        assert_eq!(report.ap_at(0.9), Some(0.0));
        let mean: f64 = report.per_threshold.iter().map(|(_, a)| a).sum::<f64>() / 10.0;
        assert!((report.ap - mean).abs() < 1e-12);
    }

    #[test]
    fn second_detection_on_a_matched_gt_is_a_false_positive() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = vec![det(g, 0, 0.9), det(g, 0, 0.8)];
        let ap_dup = ap_at_iou(&[(dets, vec![(g, 0)])], 0.5);
        let ap_single = ap_at_iou(&[(vec![det(g, 0, 0.9)], vec![(g, 0)])], 0.5);
        // Envelope keeps precision 1.0 up to recall 1.0 either way; the
        // duplicate cannot raise it.
        assert!(ap_dup <= ap_single + 1e-12);
    }

    #[test]
    fn ap_is_monotone_in_threshold() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = BBox::new(0.0, 0.0, 8.0, 10.0);
        let images = [(vec![det(d, 0, 0.9)], vec![(g, 0)])];
        let mut prev = f64::INFINITY;
        for &t in &AP_THRESHOLDS {
            let ap = ap_at_iou(&images, t);
            assert!(ap <= prev);
            prev = ap;
        }
    }

    #[test]
    fn wrong_class_detection_never_matches() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = vec![det(g, 1, 0.9)];
        assert_eq!(ap_at_iou(&[(dets, vec![(g, 0)])], 0.5), 0.0);
    }

    #[test]
    fn pearson_hand_cases() {
        let exact = [(0.5, 0.5), (0.9, 0.9), (0.7, 0.7)];
        assert!((pearson(&exact).unwrap() - 1.0).abs() < 1e-12);

        let inverse = [(0.1, 0.9), (0.5, 0.5), (0.9, 0.1)];
        assert!((pearson(&inverse).unwrap() + 1.0).abs() < 1e-12);

        let constant = [(0.5, 0.1), (0.5, 0.9)];
        assert_eq!(pearson(&constant), None);
    }

    #[test]
    fn stage_stats_flags() {
        let few = stage_stats(vec![(0.5, 0.6), (0.7, 0.8)]);
        assert!(few.low_sample);
        assert!(!few.degenerate);
        assert!((few.pearson_r - 1.0).abs() < 1e-12);

        let flat = stage_stats(vec![(0.5, 0.6); 40]);
        assert!(!flat.low_sample);
        assert!(flat.degenerate);
        assert_eq!(flat.pearson_r, 0.0);
    }

    #[test]
    fn bins_average_confidence_by_iou() {
        let pairs = vec![(0.2, 0.51), (0.4, 0.52), (0.9, 0.99)];
        let stats = stage_stats(pairs);
        assert!((stats.bin_means[0].unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(stats.bin_means[9], Some(0.9));
        assert_eq!(stats.bin_means[5], None);
    }
}
