//! The training loop: mini-batch SGD with momentum over synthetic scenes.
//!
//! Scene content is derived only from the run seed and the scene index, so
//! two runs that differ in model settings (say, alignment on versus off)
//! still see identical data. Each batch builds a fresh tape, runs every
//! stage's losses for every image, backpropagates the batch mean, and takes
//! one optimizer step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::assign;
use crate::error::{Error, Result};
use crate::evaluation::{coco_ap, ImageEval};
use crate::geometry::{generate_anchors, AnchorGrid};
use crate::losses::{stage_loss, total_loss, StageLossVars};
use crate::model::CascadeModel;
use crate::numerics::Tape;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::infer::{detect, InferConfig};
use crate::pipeline::scene::{gen_scene, SyntheticScene};

/// Column order of the metrics CSV.
pub const METRICS_HEADER: &str = "epoch,stage,cls_loss,loc_loss,total,val_ap";

// Independent RNG streams drawn from the one run seed.
const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

/// Offset-predicting convolutions train at this multiple of the base rate.
const OFFSET_LR_MULT: f64 = 1.0;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_seed(run_seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(run_seed ^ stream) ^ index)
}

/// The i-th training scene of a run. Regenerated on demand, never stored.
pub fn train_scene(cfg: &TrainConfig, index: usize) -> SyntheticScene {
    gen_scene(&cfg.scene_config(), stream_seed(cfg.seed, TRAIN_STREAM, index as u64))
}

/// The i-th held-out scene of a run.
pub fn val_scene(cfg: &TrainConfig, index: usize) -> SyntheticScene {
    gen_scene(&cfg.scene_config(), stream_seed(cfg.seed, VAL_STREAM, index as u64))
}

/// The whole held-out set, materialized for evaluation.
pub fn val_set(cfg: &TrainConfig) -> Vec<SyntheticScene> {
    (0..cfg.val_scenes).map(|i| val_scene(cfg, i)).collect()
}

/// A freshly initialized model for this config, drawn from the run seed's
/// init stream. Loading a checkpoint over it restores a trained run.
pub fn init_model(cfg: &TrainConfig) -> Result<CascadeModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, INIT_STREAM, 0));
    CascadeModel::new(cfg.model_config(), &mut rng)
}

/// One metrics CSV row. `cls_loss` and `loc_loss` are per stage;
/// `total` and `val_ap` describe the whole epoch and repeat on each of
/// its stage rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: usize,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub total: f64,
    pub val_ap: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CascadeModel,
    pub anchors: AnchorGrid,
    pub rows: Vec<MetricsRow>,
    /// Held-out AP after the final epoch.
    pub final_val_ap: f64,
}

impl TrainOutcome {
    /// The metrics table rendered exactly as it is written to disk. f64
    /// values use the shortest round-trip display, so identical runs
    /// produce identical bytes.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.stage, r.cls_loss, r.loc_loss, r.total, r.val_ap
            ));
        }
        out
    }
}

/// Mean validation AP of a model over the run's held-out scenes.
pub fn validation_ap(model: &CascadeModel, anchors: &AnchorGrid, cfg: &TrainConfig) -> Result<f64> {
    let infer_cfg = InferConfig::from(cfg);
    let mut per_image: Vec<ImageEval> = Vec::with_capacity(cfg.val_scenes);
    for i in 0..cfg.val_scenes {
        let scene = val_scene(cfg, i);
        let dets = detect(model, &scene.image, anchors, &infer_cfg)?;
        per_image.push((dets, scene.gts));
    }
    Ok(coco_ap(&per_image).ap)
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(cfg, |_, _| {})
}

/// Train and invoke `on_epoch(epoch, rows_of_that_epoch)` after each epoch.
pub fn train_with_progress(
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &[MetricsRow]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let anchors = generate_anchors((cfg.image_size, cfg.image_size), &cfg.anchor_spec)?;
    let mut model = init_model(cfg)?;
    let num_stages = cfg.num_stages;

    let mut rows: Vec<MetricsRow> = Vec::with_capacity(cfg.epochs * num_stages);
    let mut final_val_ap = 0.0;

    for epoch in 1..=cfg.epochs {
        // Step schedule: the final fifth of the run fine-tunes at a tenth
        // of the base rate, which mostly sharpens localization.
        let decay_after = (cfg.epochs * 4 / 5).max(1);
        let epoch_lr = if epoch > decay_after { cfg.lr * 0.1 } else { cfg.lr };
        let mut order: Vec<usize> = (0..cfg.train_scenes).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        // Per-stage (cls, loc) sums plus the total, averaged over images.
        let mut stage_sums = vec![(0.0, 0.0); num_stages];
        let mut total_sum = 0.0;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut batch_total: Option<crate::numerics::VarId> = None;

            for &scene_idx in batch {
                let scene = train_scene(cfg, scene_idx);
                let output = model.cascade_forward(&mut tape, &scene.image, &anchors)?;
                let mut stage_vars: Vec<StageLossVars> = Vec::with_capacity(num_stages);
                for (s, stage_out) in output.stages.iter().enumerate() {
                    let assignment = assign(&stage_out.input_boxes, &scene.gts, &cfg.stages[s])?;
                    stage_vars.push(stage_loss(
                        &mut tape,
                        stage_out.cls_logits,
                        stage_out.reg_deltas,
                        &assignment,
                        &cfg.stages[s],
                        &cfg.loss,
                    )?);
                }
                let (image_total, breakdown) = total_loss(&mut tape, &stage_vars, &cfg.stages)?;
                if !breakdown.total.is_finite() {
                    let culprit = tape
                        .first_nonfinite()
                        .map(|(i, name)| format!("first bad node: {name} #{i}"))
                        .unwrap_or_else(|| "loss itself".into());
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, batch {batch_idx}, scene {scene_idx}: training loss diverged ({culprit})"
                    )));
                }
                for (s, (c, l)) in breakdown.per_stage.iter().enumerate() {
                    stage_sums[s].0 += c;
                    stage_sums[s].1 += l;
                }
                total_sum += breakdown.total;
                batch_total = Some(match batch_total {
                    None => image_total,
                    Some(acc) => tape.add(acc, image_total)?,
                });
            }

            let batch_total = batch_total.expect("batches are never empty");
            tape.backward(batch_total, 1.0 / batch.len() as f64)?;
            model.params.accumulate_from_tape(&tape);
            model.params.sgd_step_by(
                |name| {
                    if name.contains(".fcm.offset_conv.") {
                        epoch_lr * OFFSET_LR_MULT
                    } else {
                        epoch_lr
                    }
                },
                cfg.momentum,
            )?;
        }

        for p in model.params.iter() {
            if !p.value.all_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}: parameter `{}` became non-finite after update",
                    p.name
                )));
            }
        }

        let n = cfg.train_scenes as f64;
        let val_ap = validation_ap(&model, &anchors, cfg)?;
        final_val_ap = val_ap;
        let first = rows.len();
        for (s, (c, l)) in stage_sums.iter().enumerate() {
            rows.push(MetricsRow {
                epoch,
                stage: s + 1,
                cls_loss: c / n,
                loc_loss: l / n,
                total: total_sum / n,
                val_ap,
            });
        }
        on_epoch(epoch, &rows[first..]);
    }

    Ok(TrainOutcome { model, anchors, rows, final_val_ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::checkpoint;

    /// Small enough to train in well under a second.
    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::parse(
            "channels = 4\n\
             tower_depth = 1\n\
             num_stages = 1\n\
             image_size = 32\n\
             anchor.strides = 8\n\
             anchor.scales = 12, 20\n\
             epochs = 3\n\
             batch_size = 5\n\
             train_scenes = 20\n\
             val_scenes = 4\n\
             scene.max_shapes = 2\n\
             lr = 0.02\n",
        )
        .unwrap();
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn loss_goes_down_over_a_few_epochs() {
        let cfg = tiny_cfg();
        let out = train(&cfg).unwrap();
        let first = out.rows.first().unwrap().total;
        let last = out.rows.last().unwrap().total;
        assert!(
            last < first,
            "expected the mean loss to drop, got {first} -> {last}"
        );
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = tiny_cfg();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(
            checkpoint::to_string(&a.model.params),
            checkpoint::to_string(&b.model.params)
        );
    }

    #[test]
    fn metrics_rows_cover_each_epoch_and_stage() {
        let mut cfg = tiny_cfg();
        cfg.num_stages = 2;
        cfg.stages = vec![cfg.stages[0].clone(), cfg.stages[0].clone()];
        cfg.stages[1].t_fg = 0.6;
        cfg.stages[1].t_bg = 0.5;
        cfg.epochs = 2;
        cfg.train_scenes = 10;
        let out = train(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2 * 2);
        let expect: Vec<(usize, usize)> = vec![(1, 1), (1, 2), (2, 1), (2, 2)];
        let got: Vec<(usize, usize)> = out.rows.iter().map(|r| (r.epoch, r.stage)).collect();
        assert_eq!(got, expect);
        let csv = out.metrics_csv();
        assert!(csv.starts_with("epoch,stage,cls_loss,loc_loss,total,val_ap\n"));
        assert_eq!(csv.lines().count(), 5);
        // total and val_ap repeat across one epoch's stage rows.
        assert_eq!(out.rows[0].total, out.rows[1].total);
        assert_eq!(out.rows[0].val_ap, out.rows[1].val_ap);
    }

    #[test]
    fn single_stage_run_has_no_alignment_parameters() {
        let out = train(&tiny_cfg()).unwrap();
        assert!(out.model.params.iter().all(|p| !p.name.contains("fcm")));
    }

    #[test]
    fn scene_stream_ignores_model_settings() {
        let with = tiny_cfg();
        let mut without = tiny_cfg();
        without.use_fcm = false;
        without.channels = 8;
        for i in 0..5 {
            assert_eq!(train_scene(&with, i).gts, train_scene(&without, i).gts);
            assert_eq!(
                train_scene(&with, i).image.data(),
                train_scene(&without, i).image.data()
            );
        }
        // Train and validation streams must not overlap.
        assert_ne!(train_scene(&with, 0).seed, val_scene(&with, 0).seed);
    }

    #[test]
    fn different_seeds_see_different_data() {
        let a = tiny_cfg();
        let mut b = tiny_cfg();
        b.seed = 12;
        assert_ne!(train_scene(&a, 0).seed, train_scene(&b, 0).seed);
    }
}
