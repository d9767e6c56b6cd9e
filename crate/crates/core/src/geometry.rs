//! Boxes, anchors, IoU, delta encoding, and NMS. Everything here is a pure
//! function over plain values, so each has a brute-force oracle in the
//! verification module.

use crate::error::{Error, Result};

/// Largest log-space size delta applied when decoding, guarding the `exp`
/// against blowing up on early untrained regression outputs.
pub const DELTA_CLAMP: f64 = 4.135166556742356; // ln(1000/16)

/// Axis-aligned box in pixel coordinates, corners (x1, y1) to (x2, y2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Corners ordered and coordinates finite. Zero area is still valid.
    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1
            && self.y2 >= self.y1
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite())
    }

    /// Clamp to an image of `height` by `width` pixels.
    pub fn clip(&self, height: f64, width: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Intersection over union. Degenerate input is allowed; a zero-area union
/// gives 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box-regression deltas relative to an anchor: fractional center shift and
/// log-space size change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Deltas {
    pub const ZERO: Deltas = Deltas {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Deltas {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

/// Deltas that move `anchor` onto `target`:
/// `dx = (cx_t - cx_a)/w_a`, `dy` likewise with heights,
/// `dw = ln(w_t/w_a)`, `dh = ln(h_t/h_a)`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<Deltas> {
    if anchor.area() <= 0.0 || target.area() <= 0.0 {
        return Err(Error::shape(
            "encode_deltas",
            format!("boxes must have positive area, got {anchor:?} and {target:?}"),
        ));
    }
    let (cxa, cya) = anchor.center();
    let (cxt, cyt) = target.center();
    Ok(Deltas {
        dx: (cxt - cxa) / anchor.width(),
        dy: (cyt - cya) / anchor.height(),
        dw: (target.width() / anchor.width()).ln(),
        dh: (target.height() / anchor.height()).ln(),
    })
}

/// Inverse of [`encode_deltas`], with `dw`/`dh` clamped to [`DELTA_CLAMP`]
/// before exponentiation and an optional clip to image bounds (height,
/// width).
pub fn decode_deltas(anchor: &BBox, deltas: &Deltas, clip_to: Option<(f64, f64)>) -> BBox {
    let (cxa, cya) = anchor.center();
    let cx = cxa + deltas.dx * anchor.width();
    let cy = cya + deltas.dy * anchor.height();
    let w = anchor.width() * deltas.dw.min(DELTA_CLAMP).exp();
    let h = anchor.height() * deltas.dh.min(DELTA_CLAMP).exp();
    let b = BBox::from_center(cx, cy, w, h);
    match clip_to {
        Some((height, width)) => b.clip(height, width),
        None => b,
    }
}

/// Shape-generation recipe for the anchor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    /// Feature strides, one pyramid level each. Must divide the image dims.
    pub strides: Vec<usize>,
    /// Anchor side length at aspect ratio 1; area is `scale²` at any ratio.
    pub scales: Vec<f64>,
    /// Height over width. Ratio 2 gives `h = s·√2`, `w = s/√2`.
    pub ratios: Vec<f64>,
}

impl AnchorSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// All anchors for one image, flat in generation order: level-major, then
/// row, then column, then shape (scales outer, ratios inner). This order is
/// exactly how head outputs are flattened, so row `k` of a score matrix
/// talks about `boxes[k]`.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub spec: AnchorSpec,
    /// Image size as (height, width).
    pub image_size: (usize, usize),
    pub boxes: Vec<BBox>,
    /// Feature extents per level as (height, width).
    pub level_extents: Vec<(usize, usize)>,
}

impl AnchorGrid {
    /// Number of anchors on one pyramid level.
    pub fn level_len(&self, level: usize) -> usize {
        let (h, w) = self.level_extents[level];
        h * w * self.spec.anchors_per_cell()
    }
}

/// Lay out anchors over every feature cell: centers at
/// `((col + 0.5)·stride, (row + 0.5)·stride)`, one box per (scale, ratio).
pub fn generate_anchors(image_size: (usize, usize), spec: &AnchorSpec) -> Result<AnchorGrid> {
    let (img_h, img_w) = image_size;
    if spec.strides.is_empty() || spec.scales.is_empty() || spec.ratios.is_empty() {
        return Err(Error::Config(
            "anchor spec needs at least one stride, scale, and ratio".into(),
        ));
    }
    if spec.ratios.iter().any(|&r| r <= 0.0) || spec.scales.iter().any(|&s| s <= 0.0) {
        return Err(Error::Config("anchor scales and ratios must be positive".into()));
    }
    let mut boxes = Vec::new();
    let mut level_extents = Vec::with_capacity(spec.strides.len());
    for &stride in &spec.strides {
        if stride == 0 || img_h % stride != 0 || img_w % stride != 0 {
            return Err(Error::Config(format!(
                "stride {stride} does not divide image size {img_h}x{img_w}"
            )));
        }
        let (fh, fw) = (img_h / stride, img_w / stride);
        level_extents.push((fh, fw));
        for row in 0..fh {
            for col in 0..fw {
                let cx = (col as f64 + 0.5) * stride as f64;
                let cy = (row as f64 + 0.5) * stride as f64;
                for &scale in &spec.scales {
                    for &ratio in &spec.ratios {
                        let h = scale * ratio.sqrt();
                        let w = scale / ratio.sqrt();
                        boxes.push(BBox::from_center(cx, cy, w, h));
                    }
                }
            }
        }
    }
    Ok(AnchorGrid {
        spec: spec.clone(),
        image_size,
        boxes,
        level_extents,
    })
}

/// One scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Greedy non-maximum suppression over one class: keep the highest-scoring
/// box, drop everything overlapping it with IoU strictly above the
/// threshold, repeat. Score ties break toward the earlier input index, and
/// the output keeps descending-score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &candidate.bbox) <= iou_threshold) {
            kept.push(*candidate);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_identity_and_disjoint() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&b, &b), 1.0);
        let far = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&b, &far), 0.0);
    }

    #[test]
    fn iou_half_overlap_by_hand() {
        // Overlap 5x10 = 50, union 100 + 100 - 50 = 150.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_degenerate_box_is_zero() {
        let point = BBox::new(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&point, &point), 0.0);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&point, &b), 0.0);
    }

    #[test]
    fn single_anchor_grid() {
        let spec = AnchorSpec {
            strides: vec![8],
            scales: vec![8.0],
            ratios: vec![1.0],
        };
        let grid = generate_anchors((8, 8), &spec).unwrap();
        assert_eq!(grid.boxes.len(), 1);
        assert_eq!(grid.boxes[0], BBox::new(0.0, 0.0, 8.0, 8.0));
    }

    #[test]
    fn anchor_count_scales_with_shapes() {
        let spec = AnchorSpec {
            strides: vec![4],
            scales: vec![6.0, 9.0],
            ratios: vec![1.0],
        };
        let grid = generate_anchors((16, 16), &spec).unwrap();
        assert_eq!(grid.boxes.len(), 2 * 4 * 4);
    }

    #[test]
    fn aspect_ratio_preserves_area() {
        let spec = AnchorSpec {
            strides: vec![8],
            scales: vec![8.0],
            ratios: vec![2.0],
        };
        let grid = generate_anchors((8, 8), &spec).unwrap();
        let b = &grid.boxes[0];
        assert!((b.area() - 64.0).abs() < 1e-9);
        assert!((b.height() / b.width() - 2.0).abs() < 1e-9);
        assert!((b.height() - 8.0 * 2.0_f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn anchor_order_is_row_col_shape() {
        let spec = AnchorSpec {
            strides: vec![8],
            scales: vec![4.0, 6.0],
            ratios: vec![1.0],
        };
        let grid = generate_anchors((16, 16), &spec).unwrap();
        // First two boxes share the cell (0,0); next two are column 1.
        assert_eq!(grid.boxes[0].center(), (4.0, 4.0));
        assert_eq!(grid.boxes[1].center(), (4.0, 4.0));
        assert!((grid.boxes[0].width() - 4.0).abs() < 1e-12);
        assert!((grid.boxes[1].width() - 6.0).abs() < 1e-12);
        assert_eq!(grid.boxes[2].center(), (12.0, 4.0));
        // Row advances after the columns are exhausted.
        assert_eq!(grid.boxes[4].center(), (4.0, 12.0));
    }

    #[test]
    fn non_dividing_stride_is_a_config_error() {
        let spec = AnchorSpec {
            strides: vec![7],
            scales: vec![8.0],
            ratios: vec![1.0],
        };
        assert!(generate_anchors((16, 16), &spec).is_err());
    }

    #[test]
    fn encode_known_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_deltas(&a, &a).unwrap(), Deltas::ZERO);

        let shifted = BBox::new(5.0, 0.0, 15.0, 10.0);
        let d = encode_deltas(&a, &shifted).unwrap();
        assert_eq!((d.dx, d.dy, d.dw, d.dh), (0.5, 0.0, 0.0, 0.0));

        let grown = BBox::new(0.0, 0.0, 20.0, 20.0);
        let d = encode_deltas(&a, &grown).unwrap();
        assert_eq!(d.dx, 0.5);
        assert_eq!(d.dy, 0.5);
        assert!((d.dw - 2.0_f64.ln()).abs() < 1e-15);
        assert!((d.dh - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn encode_rejects_degenerate_boxes() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let flat = BBox::new(0.0, 0.0, 10.0, 0.0);
        assert!(encode_deltas(&flat, &a).is_err());
        assert!(encode_deltas(&a, &flat).is_err());
    }

    #[test]
    fn decode_known_case_and_clamp() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = Deltas {
            dx: 0.5,
            dy: 0.5,
            dw: 2.0_f64.ln(),
            dh: 2.0_f64.ln(),
        };
        let b = decode_deltas(&a, &d, None);
        assert!((b.x1 - 0.0).abs() < 1e-9);
        assert!((b.y1 - 0.0).abs() < 1e-9);
        assert!((b.x2 - 20.0).abs() < 1e-9);
        assert!((b.y2 - 20.0).abs() < 1e-9);

        // A huge dw is clamped: width becomes 10 * 1000/16, not exp(50).
        let wild = Deltas {
            dw: 50.0,
            ..Deltas::ZERO
        };
        let b = decode_deltas(&a, &wild, None);
        assert!((b.width() - 10.0 * 1000.0 / 16.0).abs() < 1e-6);
    }

    #[test]
    fn decode_clips_to_image() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = Deltas {
            dx: 2.0,
            ..Deltas::ZERO
        };
        let b = decode_deltas(&a, &d, Some((16.0, 16.0)));
        assert_eq!(b.x2, 16.0);
        assert!(b.is_valid());
    }

    #[test]
    fn nms_single_detection_survives() {
        let d = Detection {
            bbox: BBox::new(0.0, 0.0, 5.0, 5.0),
            class_id: 0,
            score: 0.3,
        };
        assert_eq!(nms(&[d], 0.5), vec![d]);
    }

    #[test]
    fn nms_suppresses_duplicate_box() {
        let b = BBox::new(0.0, 0.0, 5.0, 5.0);
        let hi = Detection { bbox: b, class_id: 0, score: 0.9 };
        let lo = Detection { bbox: b, class_id: 0, score: 0.8 };
        let kept = nms(&[lo, hi], 0.5);
        assert_eq!(kept, vec![hi]);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // IoU exactly at the threshold is kept, only strictly-above is
        // suppressed.
        let a = Detection {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            class_id: 0,
            score: 0.9,
        };
        let b = Detection {
            bbox: BBox::new(5.0, 0.0, 15.0, 10.0),
            class_id: 0,
            score: 0.8,
        };
        let third = 50.0 / 150.0;
        assert_eq!(nms(&[a, b], third).len(), 2);
        assert_eq!(nms(&[a, b], third - 1e-9).len(), 1);
    }

    #[test]
    fn nms_tie_breaks_toward_earlier_index() {
        let b = BBox::new(0.0, 0.0, 5.0, 5.0);
        let first = Detection { bbox: b, class_id: 0, score: 0.7 };
        let second = Detection {
            bbox: BBox::new(0.0, 0.0, 5.0, 5.1),
            class_id: 0,
            score: 0.7,
        };
        let kept = nms(&[first, second], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], first);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0_f64, 0.0..50.0_f64, 0.1..40.0_f64, 0.1..40.0_f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn encode_decode_round_trip(a in arb_box(), t in arb_box()) {
            let d = encode_deltas(&a, &t).unwrap();
            prop_assume!(d.dw.abs() < DELTA_CLAMP && d.dh.abs() < DELTA_CLAMP);
            let back = decode_deltas(&a, &d, None);
            prop_assert!((back.x1 - t.x1).abs() < 1e-9);
            prop_assert!((back.y1 - t.y1).abs() < 1e-9);
            prop_assert!((back.x2 - t.x2).abs() < 1e-9);
            prop_assert!((back.y2 - t.y2).abs() < 1e-9);
        }

        #[test]
        fn nms_output_is_valid(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0_f64), 1..20),
            thr in 0.1..0.9_f64,
        ) {
            let dets: Vec<Detection> = boxes
                .iter()
                .map(|(b, s)| Detection { bbox: *b, class_id: 0, score: *s })
                .collect();
            let kept = nms(&dets, thr);
            // Subset of the input.
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            // Scores non-increasing.
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            // No kept pair exceeds the threshold.
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) <= thr);
                }
            }
        }

        #[test]
        fn anchor_generation_is_deterministic(seed_scale in 5.0..20.0_f64) {
            let spec = AnchorSpec {
                strides: vec![4, 8],
                scales: vec![seed_scale],
                ratios: vec![0.5, 1.0, 2.0],
            };
            let a = generate_anchors((32, 32), &spec).unwrap();
            let b = generate_anchors((32, 32), &spec).unwrap();
            prop_assert_eq!(a.boxes.len(), b.boxes.len());
            for (x, y) in a.boxes.iter().zip(&b.boxes) {
                prop_assert_eq!(x.x1.to_bits(), y.x1.to_bits());
                prop_assert_eq!(x.y1.to_bits(), y.y1.to_bits());
                prop_assert_eq!(x.x2.to_bits(), y.x2.to_bits());
                prop_assert_eq!(x.y2.to_bits(), y.y2.to_bits());
            }
        }
    }
}
