//! Turning raw cascade outputs into final detections.
//!
//! The last stage's boxes carry the localization; classification scores
//! come from either the mean over all stages' sigmoid outputs or the last
//! stage alone. Candidates below the score threshold are dropped, the rest
//! go through per-class non-maximum suppression, and the merged survivors
//! are truncated to the top K by score.

use crate::error::Result;
use crate::geometry::{nms, AnchorGrid, Detection};
use crate::model::{CascadeModel, CascadeOutput};
use crate::numerics::tape::sigmoid_scalar;
use crate::numerics::{Tape, Tensor};
use crate::pipeline::config::{EnsembleMode, TrainConfig};

/// Post-processing knobs, detachable from the full training config.
#[derive(Debug, Clone, Copy)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
    pub ensemble_mode: EnsembleMode,
}

impl From<&TrainConfig> for InferConfig {
    fn from(cfg: &TrainConfig) -> Self {
        InferConfig {
            score_threshold: cfg.score_threshold,
            nms_threshold: cfg.nms_threshold,
            top_k: cfg.top_k,
            ensemble_mode: cfg.ensemble_mode,
        }
    }
}

/// Sigmoid scores for one stage's logits, kept in `[num_anchors, C]` layout.
pub fn stage_scores(tape: &Tape, output: &CascadeOutput, stage: usize) -> Vec<f64> {
    tape.value(output.stages[stage].cls_logits)
        .data()
        .iter()
        .map(|&z| sigmoid_scalar(z))
        .collect()
}

/// Combined per-anchor scores according to the ensemble mode. With one
/// stage both modes reduce to that stage's scores.
pub fn ensemble_scores(tape: &Tape, output: &CascadeOutput, mode: EnsembleMode) -> Vec<f64> {
    match mode {
        EnsembleMode::Last => stage_scores(tape, output, output.stages.len() - 1),
        EnsembleMode::Average => {
            let mut sum = stage_scores(tape, output, 0);
            for s in 1..output.stages.len() {
                for (acc, v) in sum.iter_mut().zip(stage_scores(tape, output, s)) {
                    *acc += v;
                }
            }
            let n = output.stages.len() as f64;
            for v in &mut sum {
                *v /= n;
            }
            sum
        }
    }
}

/// Score thresholding, per-class NMS, and top-K on an already-run forward
/// pass. Split from [`detect`] so callers holding a tape can reuse it.
pub fn postprocess(tape: &Tape, output: &CascadeOutput, cfg: &InferConfig) -> Vec<Detection> {
    let scores = ensemble_scores(tape, output, cfg.ensemble_mode);
    let boxes = &output.stages.last().expect("cascade has at least one stage").boxes;
    let num_classes = scores.len() / boxes.len().max(1);

    let mut kept: Vec<(usize, Detection)> = Vec::new();
    for class_id in 0..num_classes {
        let candidates: Vec<Detection> = (0..boxes.len())
            .filter_map(|n| {
                let score = scores[n * num_classes + class_id];
                (score >= cfg.score_threshold).then(|| Detection {
                    bbox: boxes[n],
                    class_id,
                    score,
                })
            })
            .collect();
        let base = kept.len();
        kept.extend(
            nms(&candidates, cfg.nms_threshold)
                .into_iter()
                .enumerate()
                .map(|(i, d)| (base + i, d)),
        );
    }
    // Merge classes: score descending, original candidate order on ties.
    kept.sort_by(|(ia, a), (ib, b)| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores must not be NaN")
            .then(ia.cmp(ib))
    });
    kept.truncate(cfg.top_k);
    kept.into_iter().map(|(_, d)| d).collect()
}

/// Full inference on one image: forward pass plus post-processing.
pub fn detect(
    model: &CascadeModel,
    image: &Tensor,
    anchors: &AnchorGrid,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let output = model.cascade_forward(&mut tape, image, anchors)?;
    Ok(postprocess(&tape, &output, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_anchors;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(num_stages: usize, use_fcm: bool) -> (CascadeModel, AnchorGrid) {
        let cfg = ModelConfig {
            channels: 4,
            num_classes: 2,
            num_stages,
            tower_depth: 1,
            anchor_spec: crate::geometry::AnchorSpec {
                strides: vec![4],
                scales: vec![6.0],
                ratios: vec![1.0],
            },
            clip_boxes: true,
            use_fcm,
        };
        let anchors = generate_anchors((16, 16), &cfg.anchor_spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (CascadeModel::new(cfg, &mut rng).unwrap(), anchors)
    }

    fn toy_image() -> Tensor {
        Tensor::from_fn(vec![3, 16, 16], |i| ((i * 37) % 101) as f64 / 101.0)
    }

    #[test]
    fn averaging_two_stage_scores_is_the_mean() {
        let (model, anchors) = toy_model(2, true);
        let mut tape = Tape::new();
        let out = model.cascade_forward(&mut tape, &toy_image(), &anchors).unwrap();
        let s1 = stage_scores(&tape, &out, 0);
        let s2 = stage_scores(&tape, &out, 1);
        let avg = ensemble_scores(&tape, &out, EnsembleMode::Average);
        for i in 0..avg.len() {
            assert!((avg[i] - 0.5 * (s1[i] + s2[i])).abs() < 1e-15);
        }
        let last = ensemble_scores(&tape, &out, EnsembleMode::Last);
        assert_eq!(last, s2);
    }

    #[test]
    fn one_stage_average_equals_last_bitwise() {
        let (model, anchors) = toy_model(1, true);
        let image = toy_image();
        let mut cfg = InferConfig {
            score_threshold: 0.0,
            nms_threshold: 0.5,
            top_k: 1000,
            ensemble_mode: EnsembleMode::Average,
        };
        let avg = detect(&model, &image, &anchors, &cfg).unwrap();
        cfg.ensemble_mode = EnsembleMode::Last;
        let last = detect(&model, &image, &anchors, &cfg).unwrap();
        assert_eq!(avg.len(), last.len());
        for (a, b) in avg.iter().zip(&last) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert_eq!(a.bbox.x1.to_bits(), b.bbox.x1.to_bits());
            assert_eq!(a.class_id, b.class_id);
        }
    }

    #[test]
    fn score_threshold_filters_and_top_k_truncates() {
        let (model, anchors) = toy_model(1, true);
        let image = toy_image();
        let all = detect(
            &model,
            &image,
            &anchors,
            &InferConfig {
                score_threshold: 0.0,
                nms_threshold: 1.1, // IoU can never exceed 1, nothing suppressed
                top_k: usize::MAX,
                ensemble_mode: EnsembleMode::Last,
            },
        )
        .unwrap();
        // A fresh model scores everything near the 0.01 prior.
        assert_eq!(all.len(), anchors.boxes.len() * 2);
        let none = detect(
            &model,
            &image,
            &anchors,
            &InferConfig {
                score_threshold: 0.5,
                nms_threshold: 1.1,
                top_k: usize::MAX,
                ensemble_mode: EnsembleMode::Last,
            },
        )
        .unwrap();
        assert!(none.is_empty());
        let three = detect(
            &model,
            &image,
            &anchors,
            &InferConfig {
                score_threshold: 0.0,
                nms_threshold: 1.1,
                top_k: 3,
                ensemble_mode: EnsembleMode::Last,
            },
        )
        .unwrap();
        assert_eq!(three.len(), 3);
        // Top-K keeps the global best regardless of class.
        assert!(three.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(all.iter().all(|d| three[0].score >= d.score));
    }

    #[test]
    fn detections_are_sorted_by_score() {
        let (model, anchors) = toy_model(2, true);
        let dets = detect(
            &model,
            &toy_image(),
            &anchors,
            &InferConfig {
                score_threshold: 0.0,
                nms_threshold: 0.5,
                top_k: 100,
                ensemble_mode: EnsembleMode::Average,
            },
        )
        .unwrap();
        assert!(!dets.is_empty());
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn nms_runs_per_class_not_globally() {
        // Two classes scoring identically on identical boxes: per-class NMS
        // keeps one box per class, global NMS would have kept only one.
        let (model, anchors) = toy_model(1, true);
        let dets = detect(
            &model,
            &toy_image(),
            &anchors,
            &InferConfig {
                score_threshold: 0.0,
                nms_threshold: 0.0, // suppress any overlap at all
                top_k: usize::MAX,
                ensemble_mode: EnsembleMode::Last,
            },
        )
        .unwrap();
        let classes: std::collections::HashSet<usize> =
            dets.iter().map(|d| d.class_id).collect();
        assert_eq!(classes.len(), 2, "both classes survive their own NMS");
    }
}
