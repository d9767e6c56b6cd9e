//! Self-verification suites: finite-difference checks for every
//! differentiable operation and independent re-implementations of the
//! decision procedures (NMS, assignment, AP). The re-implementations are
//! deliberately written in a different style from the main code paths, so
//! a shared bug would have to be made twice.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::{assign, AssignmentResult, Label, StageConfig};
use crate::error::{Error, Result};
use crate::evaluation::ap_at_iou;
use crate::geometry::{
    decode_deltas, encode_deltas, generate_anchors, nms, AnchorSpec, BBox, Deltas, Detection,
};
use crate::losses::{stage_loss, total_loss, FocalLossOp, LossConfig, SmoothL1Op};
use crate::numerics::{GradCheck, GradCheckReport, Tape, Tensor, VarId};

/// Acceptance bound for every finite-difference comparison in the suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Random instances evaluated per differentiable operation.
pub const GRADCHECK_INSTANCES: usize = 20;

fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random values bounded away from zero, for inputs feeding a relu.
fn rand_tensor_off_zero(rng: &mut impl Rng, shape: Vec<usize>, min_mag: f64, max_mag: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(min_mag..max_mag)
    })
}

/// Fold many per-instance reports into one per-op summary.
fn merge_reports(name: &str, reports: Vec<GradCheckReport>) -> GradCheckReport {
    let mut merged = GradCheckReport {
        name: name.to_string(),
        entries_checked: 0,
        max_rel_err: 0.0,
        tolerance: reports.first().map_or(GRADCHECK_TOLERANCE, |r| r.tolerance),
        worst: None,
    };
    for r in reports {
        merged.entries_checked += r.entries_checked;
        if r.max_rel_err >= merged.max_rel_err {
            merged.max_rel_err = r.max_rel_err;
            merged.worst = r.worst;
        }
    }
    merged
}

fn gc(tolerance: f64, cap: usize) -> GradCheck {
    GradCheck {
        tolerance,
        max_entries_per_input: Some(cap),
        ..GradCheck::default()
    }
}

fn gc_conv2d(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let h = rng.gen_range(k..=6);
    let w = rng.gen_range(k..=6);
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=1);
    let x = rand_tensor(rng, vec![cin, h, w], -1.0, 1.0);
    let wt = rand_tensor(rng, vec![cout, cin, k, k], -0.7, 0.7);
    let b = rand_tensor(rng, vec![cout], -0.4, 0.4);
    gc(tol, 12).check("conv2d", &[x, wt, b], rng, move |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding)?;
        Ok(tape.sum(y))
    })
}

fn gc_sigmoid(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let n = rng.gen_range(3..=12);
    let x = rand_tensor(rng, vec![n], -3.0, 3.0);
    gc(tol, 12).check("sigmoid", &[x], rng, |tape, ids| {
        let s = tape.sigmoid(ids[0]);
        Ok(tape.sum(s))
    })
}

fn gc_relu(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let n = rng.gen_range(3..=12);
    // Inputs keep a margin from the origin: the kink there has no unique
    // derivative, so finite differences would disagree by construction.
    let x = rand_tensor_off_zero(rng, vec![n], 0.05, 2.0);
    gc(tol, 12).check("relu", &[x], rng, |tape, ids| {
        let r = tape.relu(ids[0]);
        Ok(tape.sum(r))
    })
}

fn gc_bilinear_sample(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let p = rng.gen_range(2..=6);
    let map = rand_tensor(rng, vec![c, h, w], -1.0, 1.0);
    // Points stay clear of the integer lattice (where the interpolation
    // weights kink) but do wander past the border into the zero pad.
    let points = Tensor::from_fn(vec![p, 2], |i| {
        let extent = if i % 2 == 0 { h } else { w };
        let cell = rng.gen_range(-1..extent as i64) as f64;
        cell + rng.gen_range(0.2..0.8)
    });
    gc(tol, 12).check("bilinear_sample", &[map, points], rng, |tape, ids| {
        let s = tape.bilinear_sample(ids[0], ids[1])?;
        Ok(tape.sum(s))
    })
}

fn gc_fcm_forward(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=5);
    let w = rng.gen_range(3..=5);
    let x = rand_tensor(rng, vec![c, h, w], -1.0, 1.0);
    let ow = rand_tensor(rng, vec![18, c, 1, 1], -0.1, 0.1);
    // Offset biases keep the sampling points off the integer lattice.
    let ob = Tensor::from_fn(vec![18], |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.2..0.45)
    });
    let dw = rand_tensor(rng, vec![c, c, 3, 3], -0.5, 0.5);
    let db = rand_tensor(rng, vec![c], -0.3, 0.3);
    gc(tol, 10).check("fcm_forward", &[x, ow, ob, dw, db], rng, |tape, ids| {
        let offsets = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0)?;
        let y = tape.deform_conv2d(ids[0], offsets, ids[3], Some(ids[4]))?;
        Ok(tape.sum(y))
    })
}

fn random_labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Label> {
    (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0..=2 => Label::Foreground(rng.gen_range(0..classes)),
            3..=4 => Label::Ignore,
            _ => Label::Background,
        })
        .collect()
}

fn gc_focal_loss(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let n = rng.gen_range(6..=14);
    let classes = rng.gen_range(2..=3);
    let labels = random_labels(rng, n, classes);
    let logits = rand_tensor(rng, vec![n, classes], -2.5, 2.5);
    let alpha = 0.25;
    let gamma = if rng.gen_bool(0.3) { 0.0 } else { 2.0 };
    gc(tol, 18).check("focal_loss", &[logits], rng, move |tape, ids| {
        tape.apply(
            Box::new(FocalLossOp {
                labels: labels.clone(),
                alpha,
                gamma,
            }),
            &[ids[0]],
        )
    })
}

fn gc_smooth_l1(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let n = rng.gen_range(5..=12);
    let beta = 1.0 / 9.0;
    let preds = rand_tensor(rng, vec![n, 4], -0.5, 0.5);
    let targets: Vec<Option<Deltas>> = (0..n)
        .map(|i| {
            rng.gen_bool(0.6).then(|| {
                let mut t = [0.0; 4];
                for (j, tj) in t.iter_mut().enumerate() {
                    // Keep each residual away from the quadratic-to-linear
                    // switch at |x| = beta.
                    let mag = if rng.gen_bool(0.5) {
                        rng.gen_range(0.0..0.8 * beta)
                    } else {
                        rng.gen_range(1.2 * beta..0.5)
                    };
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    *tj = preds.data()[i * 4 + j] - sign * mag;
                }
                Deltas::from_array(t)
            })
        })
        .collect();
    gc(tol, 18).check("smooth_l1", &[preds], rng, move |tape, ids| {
        tape.apply(
            Box::new(SmoothL1Op {
                targets: targets.clone(),
                beta,
            }),
            &[ids[0]],
        )
    })
}

/// Assemble a miniature two-stage cascade (with alignment) directly from
/// leaf variables, mirroring the model graph. Returns per-stage
/// (logits, deltas) pairs.
fn cascade_graph(
    tape: &mut Tape,
    ids: &[VarId],
    classes: usize,
) -> Result<[(VarId, VarId); 2]> {
    let &[image, bw, bb, t1w, t1b, c1w, c1b, r1w, r1b, ow, ob, dw, db, t2w, t2b, c2w, c2b, r2w, r2b] =
        ids
    else {
        return Err(Error::Config("cascade graph expects 19 leaves".into()));
    };
    let f = tape.conv2d(image, bw, Some(bb), 2, 1)?;
    let f = tape.relu(f);

    let t = tape.conv2d(f, t1w, Some(t1b), 1, 1)?;
    let t = tape.relu(t);
    let cls1 = tape.conv2d(t, c1w, Some(c1b), 1, 1)?;
    let cls1 = tape.to_anchor_rows(cls1, 1, classes)?;
    let reg1 = tape.conv2d(t, r1w, Some(r1b), 1, 1)?;
    let reg1 = tape.to_anchor_rows(reg1, 1, 4)?;

    let offsets = tape.conv2d(f, ow, Some(ob), 1, 0)?;
    let g = tape.deform_conv2d(f, offsets, dw, Some(db))?;
    let t = tape.conv2d(g, t2w, Some(t2b), 1, 1)?;
    let t = tape.relu(t);
    let cls2 = tape.conv2d(t, c2w, Some(c2b), 1, 1)?;
    let cls2 = tape.to_anchor_rows(cls2, 1, classes)?;
    let reg2 = tape.conv2d(t, r2w, Some(r2b), 1, 1)?;
    let reg2 = tape.to_anchor_rows(reg2, 1, 4)?;

    Ok([(cls1, reg1), (cls2, reg2)])
}

fn gc_cascade_loss(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let c = 3;
    let classes = 2;
    let spec = AnchorSpec {
        strides: vec![2],
        scales: vec![3.0],
        ratios: vec![1.0],
    };
    let grid = generate_anchors((8, 8), &spec)?;

    let head = |rng: &mut ChaCha8Rng, cout: usize| {
        [
            rand_tensor_off_zero(rng, vec![cout, c, 3, 3], 0.02, 0.35),
            rand_tensor(rng, vec![cout], -0.2, 0.2),
        ]
    };
    let mut inputs: Vec<Tensor> = Vec::new();
    inputs.push(rand_tensor(rng, vec![3, 8, 8], 0.0, 1.0)); // image
    inputs.extend(head(rng, c)); // backbone
    inputs.extend(head(rng, c)); // stage-1 tower
    inputs.extend(head(rng, classes)); // stage-1 cls
    inputs.extend(head(rng, 4)); // stage-1 reg
    inputs.push(rand_tensor(rng, vec![18, c, 1, 1], -0.1, 0.1)); // offset conv
    inputs.push(Tensor::from_fn(vec![18], |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.2..0.45)
    }));
    inputs.extend(head(rng, c)); // alignment conv
    inputs.extend(head(rng, c)); // stage-2 tower
    inputs.extend(head(rng, classes)); // stage-2 cls
    inputs.extend(head(rng, 4)); // stage-2 reg

    // One ground truth sits exactly on an anchor so stage 1 always has a
    // foreground; a second box lands wherever it lands.
    let mut gts = vec![(
        grid.boxes[rng.gen_range(0..grid.boxes.len())],
        rng.gen_range(0..classes),
    )];
    if rng.gen_bool(0.7) {
        let cx = rng.gen_range(2.0..6.0);
        let cy = rng.gen_range(2.0..6.0);
        gts.push((
            BBox::from_center(cx, cy, rng.gen_range(2.5..5.0), rng.gen_range(2.5..5.0)),
            rng.gen_range(0..classes),
        ));
    }
    let stage_cfgs = [
        StageConfig { t_fg: 0.5, t_bg: 0.4, lambda: 2.0, alpha: 1.0 },
        StageConfig { t_fg: 0.6, t_bg: 0.5, lambda: 2.0, alpha: 1.0 },
    ];
    let loss_cfg = LossConfig::default();

    // Probe pass: recover stage-1 boxes, then freeze both assignments.
    // The losses treat matching decisions and regression targets as
    // constants of the current forward pass, so the check must as well.
    let mut probe = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
    let [(_, reg1), _] = cascade_graph(&mut probe, &ids, classes)?;
    let reg1 = probe.value(reg1);
    let boxes1: Vec<BBox> = grid
        .boxes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let d = Deltas::from_array([
                reg1.data()[i * 4],
                reg1.data()[i * 4 + 1],
                reg1.data()[i * 4 + 2],
                reg1.data()[i * 4 + 3],
            ]);
            decode_deltas(a, &d, None)
        })
        .collect();
    let assignments = [
        assign(&grid.boxes, &gts, &stage_cfgs[0])?,
        assign(&boxes1, &gts, &stage_cfgs[1])?,
    ];

    gc(tol, 3).check("cascade_loss", &inputs, rng, move |tape, ids| {
        let stages = cascade_graph(tape, ids, classes)?;
        let vars = [
            stage_loss(tape, stages[0].0, stages[0].1, &assignments[0], &stage_cfgs[0], &loss_cfg)?,
            stage_loss(tape, stages[1].0, stages[1].1, &assignments[1], &stage_cfgs[1], &loss_cfg)?,
        ];
        let (tot, _) = total_loss(tape, &vars, &stage_cfgs)?;
        Ok(tot)
    })
}

/// Run every differentiable operation through finite differences. Returns
/// one merged report per op, in a fixed order, each covering `instances`
/// random instances.
pub fn gradcheck_suite(
    seed: u64,
    instances: usize,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>> {
    type OpFn = fn(&mut ChaCha8Rng, f64) -> Result<GradCheckReport>;
    let ops: [(&str, OpFn); 8] = [
        ("conv2d", gc_conv2d),
        ("sigmoid", gc_sigmoid),
        ("relu", gc_relu),
        ("bilinear_sample", gc_bilinear_sample),
        ("fcm_forward", gc_fcm_forward),
        ("focal_loss", gc_focal_loss),
        ("smooth_l1", gc_smooth_l1),
        ("cascade_loss", gc_cascade_loss),
    ];
    let mut reports = Vec::with_capacity(ops.len());
    for (i, (name, run)) in ops.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9));
        let per_instance: Result<Vec<GradCheckReport>> =
            (0..instances).map(|_| run(&mut rng, tolerance)).collect();
        reports.push(merge_reports(name, per_instance?));
    }
    Ok(reports)
}

/// Largest absolute difference between the alignment convolution with all
/// offsets pinned to zero and a plain dense convolution, over random
/// weights and inputs. The two share their accumulation order, so the
/// expected value is exactly 0.
pub fn zero_offset_max_deviation(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=7);
        let w = rng.gen_range(3..=7);
        let x = rand_tensor(&mut rng, vec![cin, h, w], -2.0, 2.0);
        let wt = rand_tensor(&mut rng, vec![cout, cin, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![cout], -0.5, 0.5);

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(wt);
        let bv = tape.leaf(b);
        let zero_off = tape.leaf(Tensor::zeros(vec![18, h, w]));
        let dense = tape.conv2d(xv, wv, Some(bv), 1, 1)?;
        let aligned = tape.deform_conv2d(xv, zero_off, wv, Some(bv))?;
        for (a, d) in tape
            .value(aligned)
            .data()
            .iter()
            .zip(tape.value(dense).data())
        {
            worst = worst.max((a - d).abs());
        }
    }
    Ok(worst)
}

fn iou_reference(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Reference NMS: no pre-sorting, just repeated scans for the best
/// still-alive candidate (earliest index on score ties).
pub fn nms_reference(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, &a) in alive.iter().enumerate() {
            if a && best.is_none_or(|j| dets[i].score > dets[j].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(dets[b]);
        for (i, a) in alive.iter_mut().enumerate() {
            if *a && iou_reference(&dets[b].bbox, &dets[i].bbox) > iou_threshold {
                *a = false;
            }
        }
    }
    kept
}

fn random_box(rng: &mut impl Rng, extent: f64, min_side: f64, max_side: f64) -> BBox {
    let w = rng.gen_range(min_side..max_side);
    let h = rng.gen_range(min_side..max_side);
    let x1 = rng.gen_range(0.0..extent - w);
    let y1 = rng.gen_range(0.0..extent - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// Compare NMS against [`nms_reference`] on random candidate sets,
/// including score ties and exactly coincident boxes.
pub fn compare_nms_with_reference(sets: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for set in 0..sets {
        let n = rng.gen_range(0..=20);
        let mut dets: Vec<Detection> = Vec::with_capacity(n);
        for i in 0..n {
            let bbox = if i > 0 && rng.gen_bool(0.2) {
                dets[rng.gen_range(0..i)].bbox
            } else {
                random_box(&mut rng, 32.0, 2.0, 14.0)
            };
            // Coarse score grid so ties actually happen.
            let score = rng.gen_range(0..=20) as f64 / 20.0;
            dets.push(Detection { bbox, class_id: 0, score });
        }
        for threshold in [0.3, 0.5, 0.7] {
            let ours = nms(&dets, threshold);
            let reference = nms_reference(&dets, threshold);
            let same = ours.len() == reference.len()
                && ours.iter().zip(&reference).all(|(a, b)| {
                    a.score == b.score
                        && a.bbox.x1 == b.bbox.x1
                        && a.bbox.y1 == b.bbox.y1
                        && a.bbox.x2 == b.bbox.x2
                        && a.bbox.y2 == b.bbox.y2
                });
            if !same {
                return Err(Error::Verification(format!(
                    "nms disagrees with reference on set {set} at threshold {threshold}: \
                     {} kept vs {}",
                    ours.len(),
                    reference.len()
                )));
            }
        }
    }
    Ok(())
}

/// Reference assignment: forward scan for the max-IoU ground truth (first
/// index wins ties), then plain threshold comparisons.
pub fn assign_reference(
    boxes: &[BBox],
    gts: &[(BBox, usize)],
    cfg: &StageConfig,
) -> Result<AssignmentResult> {
    let mut out = AssignmentResult {
        labels: Vec::new(),
        matched_gt: Vec::new(),
        reg_targets: Vec::new(),
    };
    for b in boxes {
        let mut best_iou = f64::NEG_INFINITY;
        let mut best_gt = usize::MAX;
        for (gi, (g, _)) in gts.iter().enumerate() {
            let v = iou_reference(b, g);
            if v > best_iou {
                best_iou = v;
                best_gt = gi;
            }
        }
        if gts.is_empty() || best_iou < cfg.t_bg {
            out.labels.push(Label::Background);
            out.matched_gt.push(None);
            out.reg_targets.push(None);
        } else if best_iou < cfg.t_fg {
            out.labels.push(Label::Ignore);
            out.matched_gt.push(None);
            out.reg_targets.push(None);
        } else {
            out.labels.push(Label::Foreground(gts[best_gt].1));
            out.matched_gt.push(Some(best_gt));
            out.reg_targets.push(Some(encode_deltas(b, &gts[best_gt].0)?));
        }
    }
    Ok(out)
}

/// Compare the assignment against [`assign_reference`] on random scenes,
/// including duplicate ground truths (IoU ties) and empty scenes.
pub fn compare_assignment_with_reference(scenes: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threshold_menu = [(0.5, 0.4), (0.6, 0.5), (0.7, 0.6)];
    for scene in 0..scenes {
        let boxes: Vec<BBox> = (0..rng.gen_range(5..=60))
            .map(|_| random_box(&mut rng, 64.0, 2.0, 30.0))
            .collect();
        let mut gts: Vec<(BBox, usize)> = (0..rng.gen_range(0..=4))
            .map(|_| (random_box(&mut rng, 64.0, 4.0, 30.0), rng.gen_range(0..3)))
            .collect();
        if !gts.is_empty() && rng.gen_bool(0.3) {
            // Exact duplicate with a different class: an IoU tie that only
            // the lowest-index rule resolves.
            let (b, c) = gts[0];
            gts.push((b, (c + 1) % 3));
        }
        let (t_fg, t_bg) = threshold_menu[rng.gen_range(0..threshold_menu.len())];
        let cfg = StageConfig { t_fg, t_bg, lambda: 2.0, alpha: 1.0 };

        let ours = assign(&boxes, &gts, &cfg)?;
        let reference = assign_reference(&boxes, &gts, &cfg)?;
        let targets_match = ours
            .reg_targets
            .iter()
            .zip(&reference.reg_targets)
            .all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => a.to_array() == b.to_array(),
                _ => false,
            });
        if ours.labels != reference.labels
            || ours.matched_gt != reference.matched_gt
            || !targets_match
        {
            return Err(Error::Verification(format!(
                "assignment disagrees with reference on scene {scene} \
                 ({} boxes, {} gts, t_fg {t_fg})",
                boxes.len(),
                gts.len()
            )));
        }
    }
    Ok(())
}

fn expect_close(what: &str, got: f64, want: f64, tol: f64) -> Result<()> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "{what}: got {got}, expected {want} (tol {tol})"
        )))
    }
}

/// Hand-verified average-precision instances, including the worked
/// precision-recall example (one TP above one disjoint FP).
pub fn check_ap_instances() -> Result<()> {
    let tol = 1e-9;
    let gt = (BBox::new(0.0, 0.0, 10.0, 10.0), 0usize);
    let det = |bbox: BBox, score: f64| Detection { bbox, class_id: 0, score };

    // One gt; a TP at rank 1 (IoU 9/10) and a disjoint FP at rank 2. The
    // precision-recall points are (recall 1, precision 1) then (1, 1/2);
    // the interpolated envelope is 1 everywhere, so AP = 1.
    let worked = vec![(
        vec![
            det(BBox::new(0.0, 0.0, 9.0, 10.0), 0.9),
            det(BBox::new(20.0, 20.0, 30.0, 30.0), 0.8),
        ],
        vec![gt],
    )];
    expect_close("worked example", ap_at_iou(&worked, 0.5), 1.0, tol)?;

    // Perfect detection: AP 1 at every threshold.
    let perfect = vec![(vec![det(gt.0, 1.0)], vec![gt])];
    for thr in [0.5, 0.75, 0.95] {
        expect_close("perfect detections", ap_at_iou(&perfect, thr), 1.0, tol)?;
    }

    // No detections at all.
    let empty: Vec<_> = vec![(vec![], vec![gt])];
    expect_close("no detections", ap_at_iou(&empty, 0.5), 0.0, tol)?;

    // Uniform IoU 0.65 turns into a step function of the threshold.
    let step = vec![(
        vec![det(BBox::new(0.0, 0.0, 6.5, 10.0), 0.9)],
        vec![gt],
    )];
    expect_close("uniform 0.65 at 0.5", ap_at_iou(&step, 0.5), 1.0, tol)?;
    expect_close("uniform 0.65 at 0.6", ap_at_iou(&step, 0.6), 1.0, tol)?;
    expect_close("uniform 0.65 at 0.7", ap_at_iou(&step, 0.7), 0.0, tol)?;

    // Two gts, ranks TP/FP/TP: 101-point AP = (51*1 + 50*(2/3)) / 101.
    let gt2 = (BBox::new(30.0, 30.0, 40.0, 40.0), 0usize);
    let staircase = vec![(
        vec![
            det(gt.0, 0.9),
            det(BBox::new(50.0, 50.0, 60.0, 60.0), 0.8),
            det(gt2.0, 0.7),
        ],
        vec![gt, gt2],
    )];
    expect_close(
        "staircase",
        ap_at_iou(&staircase, 0.5),
        (51.0 + 50.0 * (2.0 / 3.0)) / 101.0,
        tol,
    )?;

    // Two classes: one perfect, one with a lone false positive.
    let gt_b = (BBox::new(0.0, 0.0, 10.0, 10.0), 1usize);
    let two_class = vec![(
        vec![
            det(gt.0, 0.9),
            Detection { bbox: BBox::new(40.0, 40.0, 50.0, 50.0), class_id: 1, score: 0.8 },
        ],
        vec![gt, gt_b],
    )];
    expect_close("two classes", ap_at_iou(&two_class, 0.5), 0.5, tol)?;
    Ok(())
}

/// Encode/decode round trip on random box pairs; returns the worst
/// absolute corner error.
pub fn check_box_roundtrip(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let anchor = random_box(&mut rng, 64.0, 2.0, 40.0);
        let target = random_box(&mut rng, 64.0, 2.0, 40.0);
        let deltas = encode_deltas(&anchor, &target)?;
        let back = decode_deltas(&anchor, &deltas, None);
        for (a, b) in [
            (back.x1, target.x1),
            (back.y1, target.y1),
            (back.x2, target.x2),
            (back.y2, target.y2),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Sequential two-step decode against the closed-form composition,
/// written out in center coordinates.
pub fn check_sequential_decode(cases: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let b0 = random_box(&mut rng, 64.0, 2.0, 30.0);
        let d = |rng: &mut ChaCha8Rng| {
            Deltas::from_array([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ])
        };
        let d1 = d(&mut rng);
        let d2 = d(&mut rng);
        let sequential = decode_deltas(&decode_deltas(&b0, &d1, None), &d2, None);

        let (cx0, cy0) = b0.center();
        let (w0, h0) = (b0.width(), b0.height());
        let cx1 = cx0 + d1.dx * w0;
        let cy1 = cy0 + d1.dy * h0;
        let w1 = w0 * d1.dw.exp();
        let h1 = h0 * d1.dh.exp();
        let cx2 = cx1 + d2.dx * w1;
        let cy2 = cy1 + d2.dy * h1;
        let w2 = w1 * d2.dw.exp();
        let h2 = h1 * d2.dh.exp();

        for (got, want) in [
            (sequential.x1, cx2 - w2 / 2.0),
            (sequential.y1, cy2 - h2 / 2.0),
            (sequential.x2, cx2 + w2 / 2.0),
            (sequential.y2, cy2 + h2 / 2.0),
        ] {
            if (got - want).abs() > 1e-9 {
                return Err(Error::Verification(format!(
                    "sequential decode case {case}: {got} vs hand-composed {want}"
                )));
            }
        }
    }
    Ok(())
}

/// The full property suite at its contract sizes. `progress` receives one
/// line per completed check.
pub fn selftest(mut progress: impl FnMut(&str)) -> Result<()> {
    compare_nms_with_reference(500, 0x6e6d73)?;
    progress("nms vs reference scan (500 sets): ok");
    compare_assignment_with_reference(500, 0x61736e)?;
    progress("assignment vs reference scan (500 scenes): ok");
    let dev = zero_offset_max_deviation(50, 0x646566)?;
    if dev > 1e-12 {
        return Err(Error::Verification(format!(
            "zero-offset alignment deviates from dense conv by {dev:e}"
        )));
    }
    progress("zero-offset alignment vs dense conv (50 instances): ok");
    check_ap_instances()?;
    progress("average precision hand instances: ok");
    let worst = check_box_roundtrip(10_000, 0x626f78)?;
    if worst > 1e-9 {
        return Err(Error::Verification(format!(
            "encode/decode round trip error {worst:e} exceeds 1e-9"
        )));
    }
    progress("encode/decode round trip (10000 pairs): ok");
    check_sequential_decode(200, 0x736571)?;
    progress("sequential decode vs hand composition (200 cases): ok");
    Ok(())
}
