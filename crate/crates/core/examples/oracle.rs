// Temporary diagnostic: box-pool recall ceilings vs measured ranking.
// Usage: oracle <config> <checkpoint> [seed]
use cascadet::evaluation::{ap_at_iou, ImageEval};
use cascadet::geometry::{generate_anchors, iou, nms, Detection};
use cascadet::numerics::{checkpoint, Tape};
use cascadet::pipeline::config::TrainConfig;
use cascadet::pipeline::train::{init_model, val_set};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let text = std::fs::read_to_string(&args[1]).unwrap();
    let mut cfg = TrainConfig::parse(&text).unwrap();
    cfg.seed = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let mut model = init_model(&cfg).unwrap();
    let loaded = checkpoint::load(std::path::Path::new(&args[2])).unwrap();
    checkpoint::apply(&mut model.params, &loaded).unwrap();
    let anchors = generate_anchors((cfg.image_size, cfg.image_size), &cfg.anchor_spec).unwrap();

    let mut n_gt = 0usize;
    let mut stage_hits: Vec<[usize; 2]> = vec![[0, 0]; cfg.num_stages];
    let mut top1_iou_sum = 0.0;
    // Per-location IoU (vs best gt) of each stage's boxes, bucketed. This is
    // the population the next stage's assignment threshold slices.
    let mut b1_hist = [0usize; 6];
    // AP at 0.8/0.9 when the SAME final boxes are ranked by stage-1 score
    // only, stage-2 only, or the average.
    let n_scorings = cfg.num_stages + 2;
    let mut evals: Vec<Vec<ImageEval>> = vec![Vec::new(); n_scorings];
    // Post-NMS box quality under the average scoring: does suppression
    // delete the high-IoU candidates that the pool contains?
    let mut post_nms_hits = [0usize; 2];
    let classes = cfg.num_classes;

    for scene in val_set(&cfg) {
        let mut tape = Tape::new();
        let out = model.cascade_forward(&mut tape, &scene.image, &anchors).unwrap();
        let mut per_stage: Vec<Vec<f64>> = Vec::new();
        let mut avg = vec![0.0f64; anchors.boxes.len() * classes];
        for st in &out.stages {
            let s = tape.sigmoid(st.cls_logits);
            let v = tape.value(s).data().to_vec();
            for (a, x) in avg.iter_mut().zip(&v) {
                *a += x / cfg.num_stages as f64;
            }
            per_stage.push(v);
        }
        let final_boxes = &out.stages.last().unwrap().boxes;

        // b1 population histogram (stage-1 outputs, all locations).
        if out.stages.len() > 1 {
            for b in &out.stages[0].boxes {
                let best = scene.gts.iter().map(|(g, _)| iou(b, g)).fold(0.0, f64::max);
                let bucket = if best < 0.5 {
                    0
                } else {
                    (((best - 0.5) / 0.1) as usize + 1).min(5)
                };
                b1_hist[bucket] += 1;
            }
        }

        let mut scorings: Vec<(&[f64], &Vec<cascadet::geometry::BBox>)> = per_stage
            .iter()
            .map(|v| (v.as_slice(), final_boxes))
            .collect();
        scorings.push((&avg, final_boxes));
        // Cascade-as-one-stage: stage-1 boxes ranked by stage-1 scores.
        scorings.push((per_stage[0].as_slice(), &out.stages[0].boxes));
        for (si, (scores, boxes)) in scorings.iter().enumerate() {
            let mut dets = Vec::new();
            for c in 0..classes {
                let mut cand: Vec<Detection> = (0..boxes.len())
                    .filter(|&i| scores[i * classes + c] >= cfg.score_threshold)
                    .map(|i| Detection {
                        bbox: boxes[i],
                        class_id: c,
                        score: scores[i * classes + c],
                    })
                    .collect();
                cand = nms(&cand, cfg.nms_threshold);
                dets.extend(cand);
            }
            if si == cfg.num_stages {
                for (g, _) in &scene.gts {
                    let best = dets.iter().map(|d| iou(&d.bbox, g)).fold(0.0, f64::max);
                    if best >= 0.8 { post_nms_hits[0] += 1; }
                    if best >= 0.9 { post_nms_hits[1] += 1; }
                }
            }
            evals[si].push((dets, scene.gts.clone()));
        }

        for (g, gc) in &scene.gts {
            n_gt += 1;
            for (si, st) in out.stages.iter().enumerate() {
                let best = st.boxes.iter().map(|b| iou(b, g)).fold(0.0, f64::max);
                if best >= 0.8 { stage_hits[si][0] += 1; }
                if best >= 0.9 { stage_hits[si][1] += 1; }
            }
            let top = (0..final_boxes.len())
                .max_by(|&i, &j| {
                    avg[i * classes + gc].partial_cmp(&avg[j * classes + gc]).unwrap()
                })
                .unwrap();
            let top_local = (0..final_boxes.len())
                .filter(|&i| iou(&final_boxes[i], g) >= 0.3)
                .max_by(|&i, &j| {
                    avg[i * classes + gc].partial_cmp(&avg[j * classes + gc]).unwrap()
                })
                .unwrap_or(top);
            top1_iou_sum += iou(&final_boxes[top_local], g);
        }
    }
    for (si, [h80, h90]) in stage_hits.iter().enumerate() {
        println!(
            "stage {} boxes: recall80 {:.4}, recall90 {:.4}",
            si + 1,
            *h80 as f64 / n_gt as f64,
            *h90 as f64 / n_gt as f64
        );
    }
    println!("top-scored candidate mean IoU: {:.4}", top1_iou_sum / n_gt as f64);
    println!(
        "post-NMS survivors: recall80 {:.4}, recall90 {:.4}",
        post_nms_hits[0] as f64 / n_gt as f64,
        post_nms_hits[1] as f64 / n_gt as f64
    );
    if cfg.num_stages > 1 {
        let total: usize = b1_hist.iter().sum();
        let pct = |n: usize| 100.0 * n as f64 / total as f64;
        println!(
            "b1 IoU mass: <.5 {:.2}%  .5-.6 {:.3}%  .6-.7 {:.3}%  .7-.8 {:.3}%  .8-.9 {:.3}%  .9+ {:.3}%",
            pct(b1_hist[0]), pct(b1_hist[1]), pct(b1_hist[2]),
            pct(b1_hist[3]), pct(b1_hist[4]), pct(b1_hist[5])
        );
    }
    for (si, ev) in evals.iter().enumerate() {
        let label = if si < cfg.num_stages {
            format!("s{}-only on final boxes", si + 1)
        } else if si == cfg.num_stages {
            "average on final boxes".into()
        } else {
            "s1 on stage-1 boxes".into()
        };
        println!(
            "rank by {label}: ap80 {:.4}, ap90 {:.4}",
            ap_at_iou(ev, 0.8),
            ap_at_iou(ev, 0.9)
        );
    }
}
