//! The cascade detector: a small strided backbone feeding one or two
//! pyramid levels, per-stage classification/regression heads, and a
//! feature alignment step between stages.
//!
//! Stage 1 runs on the backbone features directly. Every later stage first
//! passes the previous stage's features through the alignment module (a
//! 1x1 conv predicts per-tap offsets, a 3x3 deformable conv resamples),
//! then applies its own head tower. Refined boxes decode outside the tape:
//! the boxes feed assignment and the next stage's targets as constants,
//! while gradients reach earlier stages through the feature maps.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, AnchorGrid, AnchorSpec, BBox, Deltas};
use crate::numerics::optim::ParamSet;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;

/// Mean classification prior at initialization; the classification bias
/// starts at `-ln((1 - PRIOR)/PRIOR)` so an untrained model scores roughly
/// this on every anchor, keeping the focal loss stable from step one.
pub const CLS_PRIOR: f64 = 0.01;

/// Architecture knobs. Parameter shapes derive entirely from this.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Feature channels everywhere past the first backbone conv.
    pub channels: usize,
    pub num_classes: usize,
    /// Refinement stages, 1 to 3.
    pub num_stages: usize,
    /// 3x3 convs in each head tower before the output convs.
    pub tower_depth: usize,
    /// Anchor layout; backbone depth follows the strides.
    pub anchor_spec: AnchorSpec,
    /// Clip refined boxes to the image after each stage.
    pub clip_boxes: bool,
    /// Align features between stages. Off, later stages read the previous
    /// stage's features unchanged (the ablation baseline).
    pub use_fcm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.num_classes == 0 || self.tower_depth == 0 {
            return Err(Error::Config(
                "channels, num_classes, and tower_depth must be positive".into(),
            ));
        }
        if !(1..=3).contains(&self.num_stages) {
            return Err(Error::Config(format!(
                "num_stages must be 1 to 3, got {}",
                self.num_stages
            )));
        }
        let strides = &self.anchor_spec.strides;
        if strides.is_empty() {
            return Err(Error::Config("at least one anchor stride required".into()));
        }
        for w in strides.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config("anchor strides must be strictly increasing".into()));
            }
        }
        for &s in strides {
            if s < 2 || !s.is_power_of_two() {
                return Err(Error::Config(format!(
                    "anchor stride {s} must be a power of two >= 2 (backbone halves per conv)"
                )));
            }
        }
        Ok(())
    }

    fn backbone_depth(&self) -> usize {
        let max = *self.anchor_spec.strides.last().expect("validated nonempty");
        max.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct StageRefs {
    /// Present from stage 2 on.
    fcm: Option<FcmRefs>,
    tower: Vec<ConvRef>,
    cls: ConvRef,
    reg: ConvRef,
}

#[derive(Debug, Clone, Copy)]
struct FcmRefs {
    offset: ConvRef,
    deform: ConvRef,
}

enum WeightInit {
    /// Normal with He scaling, for convs feeding relu.
    He,
    /// Small normal for output convs, so initial predictions hug the bias.
    Small,
    Zero,
}

/// Everything learnable plus the wiring to run a forward pass.
#[derive(Debug)]
pub struct CascadeModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    backbone: Vec<ConvRef>,
    stages: Vec<StageRefs>,
}

/// One stage's raw outputs for a single image.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// `[num_anchors, num_classes]` logits in anchor order.
    pub cls_logits: VarId,
    /// `[num_anchors, 4]` predicted deltas in anchor order.
    pub reg_deltas: VarId,
    /// The boxes this stage refined (previous stage's output, or anchors).
    pub input_boxes: Vec<BBox>,
    /// `decode(input_boxes, reg_deltas)`, clipped when configured.
    pub boxes: Vec<BBox>,
}

/// Per-stage outputs, stage 1 first.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub stages: Vec<StageOutput>,
}

impl CascadeModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let c = cfg.channels;

        let mut backbone = Vec::new();
        for d in 0..cfg.backbone_depth() {
            let cin = if d == 0 { 3 } else { c };
            backbone.push(add_conv(
                &mut params,
                rng,
                &format!("backbone.conv{}", d + 1),
                c,
                cin,
                3,
                WeightInit::He,
                0.0,
            )?);
        }

        let a = cfg.anchor_spec.anchors_per_cell();
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let mut stages = Vec::new();
        for s in 1..=cfg.num_stages {
            let prefix = format!("stage{s}");
            let fcm = if s > 1 && cfg.use_fcm {
                Some(FcmRefs {
                    offset: add_conv(
                        &mut params,
                        rng,
                        &format!("{prefix}.fcm.offset_conv"),
                        18,
                        c,
                        1,
                        WeightInit::Zero,
                        0.0,
                    )?,
                    deform: add_conv(
                        &mut params,
                        rng,
                        &format!("{prefix}.fcm.deform"),
                        c,
                        c,
                        3,
                        WeightInit::He,
                        0.0,
                    )?,
                })
            } else {
                None
            };
            let tower = (1..=cfg.tower_depth)
                .map(|t| {
                    add_conv(
                        &mut params,
                        rng,
                        &format!("{prefix}.tower{t}"),
                        c,
                        c,
                        3,
                        WeightInit::He,
                        0.0,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let cls = add_conv(
                &mut params,
                rng,
                &format!("{prefix}.cls"),
                a * cfg.num_classes,
                c,
                3,
                WeightInit::Small,
                prior_bias,
            )?;
            let reg = add_conv(
                &mut params,
                rng,
                &format!("{prefix}.reg"),
                a * 4,
                c,
                3,
                WeightInit::Small,
                0.0,
            )?;
            stages.push(StageRefs { fcm, tower, cls, reg });
        }

        Ok(CascadeModel {
            cfg,
            params,
            backbone,
            stages,
        })
    }

    /// Total scalar parameter count across all tensors.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn leaf(&self, tape: &mut Tape, idx: usize) -> VarId {
        tape.param_leaf(self.params.get(idx).value.clone(), idx)
    }

    fn conv(
        &self,
        tape: &mut Tape,
        x: VarId,
        r: ConvRef,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let w = self.leaf(tape, r.w);
        let b = self.leaf(tape, r.b);
        tape.conv2d(x, w, Some(b), stride, padding)
    }

    /// Run the strided backbone, returning one feature map per anchor
    /// stride (e.g. strides [4, 8] tap the 2nd and 3rd halving).
    pub fn backbone_forward(&self, tape: &mut Tape, image: VarId) -> Result<Vec<VarId>> {
        let mut x = image;
        let mut taps = Vec::new();
        let mut stride = 1;
        for conv in &self.backbone {
            x = self.conv(tape, x, *conv, 2, 1)?;
            x = tape.relu(x);
            stride *= 2;
            if self.cfg.anchor_spec.strides.contains(&stride) {
                taps.push(x);
            }
        }
        Ok(taps)
    }

    /// Feature alignment between stages: a 1x1 conv on the features
    /// predicts 18 offset channels (row and column displacement for each
    /// of the 9 kernel taps), and a 3x3 deformable conv resamples the same
    /// features at those displaced positions. With the offset conv at its
    /// zero initialization this is exactly a plain 3x3 conv.
    pub fn fcm_forward(&self, tape: &mut Tape, x: VarId, stage: usize) -> Result<VarId> {
        let fcm = self.stages[stage]
            .fcm
            .ok_or_else(|| Error::Config(format!("stage {} has no alignment module", stage + 1)))?;
        let offsets = self.conv(tape, x, fcm.offset, 1, 0)?;
        let w = self.leaf(tape, fcm.deform.w);
        let b = self.leaf(tape, fcm.deform.b);
        tape.deform_conv2d(x, offsets, w, Some(b))
    }

    /// One stage's head on one feature level: shared tower, then the two
    /// output convs, flattened to per-anchor rows.
    pub fn head_forward(&self, tape: &mut Tape, x: VarId, stage: usize) -> Result<(VarId, VarId)> {
        let refs = &self.stages[stage];
        let mut t = x;
        for conv in &refs.tower {
            t = self.conv(tape, t, *conv, 1, 1)?;
            t = tape.relu(t);
        }
        let a = self.cfg.anchor_spec.anchors_per_cell();
        let cls_map = self.conv(tape, t, refs.cls, 1, 1)?;
        let cls = tape.to_anchor_rows(cls_map, a, self.cfg.num_classes)?;
        let reg_map = self.conv(tape, t, refs.reg, 1, 1)?;
        let reg = tape.to_anchor_rows(reg_map, a, 4)?;
        Ok((cls, reg))
    }

    /// Decode one stage's predicted deltas against its input boxes.
    fn refine_boxes(&self, tape: &Tape, reg: VarId, input_boxes: &[BBox], anchors: &AnchorGrid) -> Vec<BBox> {
        let data = tape.value(reg).data();
        let clip = self
            .cfg
            .clip_boxes
            .then(|| (anchors.image_size.0 as f64, anchors.image_size.1 as f64));
        input_boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let d = Deltas::from_array([
                    data[i * 4],
                    data[i * 4 + 1],
                    data[i * 4 + 2],
                    data[i * 4 + 3],
                ]);
                decode_deltas(b, &d, clip)
            })
            .collect()
    }

    /// Full multi-stage forward for one image.
    pub fn cascade_forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        anchors: &AnchorGrid,
    ) -> Result<CascadeOutput> {
        let (img_h, img_w) = anchors.image_size;
        if image.shape() != [3, img_h, img_w] {
            return Err(Error::shape(
                "cascade_forward",
                format!(
                    "image must be [3, {img_h}, {img_w}] to match the anchor grid, got {:?}",
                    image.shape()
                ),
            ));
        }
        let image = tape.leaf(image.clone());
        let mut feats = self.backbone_forward(tape, image)?;
        if feats.len() != anchors.level_extents.len() {
            return Err(Error::shape(
                "cascade_forward",
                format!(
                    "backbone produced {} levels for {} anchor strides",
                    feats.len(),
                    anchors.level_extents.len()
                ),
            ));
        }

        let mut stages = Vec::with_capacity(self.cfg.num_stages);
        let mut boxes_prev = anchors.boxes.clone();
        for s in 0..self.cfg.num_stages {
            if self.stages[s].fcm.is_some() {
                feats = feats
                    .iter()
                    .map(|&x| self.fcm_forward(tape, x, s))
                    .collect::<Result<Vec<_>>>()?;
            }
            let mut cls_parts = Vec::new();
            let mut reg_parts = Vec::new();
            for &x in &feats {
                let (cls, reg) = self.head_forward(tape, x, s)?;
                cls_parts.push(cls);
                reg_parts.push(reg);
            }
            let cls = tape.concat_rows(&cls_parts)?;
            let reg = tape.concat_rows(&reg_parts)?;
            if tape.value(cls).shape()[0] != anchors.boxes.len() {
                return Err(Error::shape(
                    "cascade_forward",
                    format!(
                        "head produced {} rows for {} anchors",
                        tape.value(cls).shape()[0],
                        anchors.boxes.len()
                    ),
                ));
            }
            let boxes = self.refine_boxes(tape, reg, &boxes_prev, anchors);
            stages.push(StageOutput {
                cls_logits: cls,
                reg_deltas: reg,
                input_boxes: boxes_prev,
                boxes: boxes.clone(),
            });
            boxes_prev = boxes;
        }
        Ok(CascadeOutput { stages })
    }
}

fn add_conv(
    params: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    init: WeightInit,
    bias_value: f64,
) -> Result<ConvRef> {
    let fan_in = (cin * k * k) as f64;
    let weight = match init {
        WeightInit::He => {
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std is finite");
            Tensor::from_fn(vec![cout, cin, k, k], |_| dist.sample(rng))
        }
        WeightInit::Small => {
            let dist = Normal::new(0.0, 0.01).expect("std is finite");
            Tensor::from_fn(vec![cout, cin, k, k], |_| dist.sample(rng))
        }
        WeightInit::Zero => Tensor::zeros(vec![cout, cin, k, k]),
    };
    let w = params.add(format!("{name}.weight"), weight)?;
    let b = params.add(
        format!("{name}.bias"),
        Tensor::from_fn(vec![cout], |_| bias_value),
    )?;
    Ok(ConvRef { w, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_anchors;
    use crate::numerics::conv::Conv2d;
    use crate::numerics::tape::TapeOp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(num_stages: usize) -> ModelConfig {
        ModelConfig {
            channels: 4,
            num_classes: 3,
            num_stages,
            tower_depth: 2,
            anchor_spec: AnchorSpec {
                strides: vec![4, 8],
                scales: vec![6.0, 10.0],
                ratios: vec![1.0],
            },
            clip_boxes: true,
            use_fcm: true,
        }
    }

    fn toy_model(num_stages: usize, seed: u64) -> CascadeModel {
        CascadeModel::new(toy_cfg(num_stages), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn parameter_count_matches_hand_formula() {
        let m = toy_model(2, 0);
        let c = 4;
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let backbone = conv(c, 3, 3) + conv(c, c, 3) + conv(c, c, 3);
        let head = 2 * conv(c, c, 3) + conv(2 * 3, c, 3) + conv(2 * 4, c, 3);
        let fcm = conv(18, c, 1) + conv(c, c, 3);
        assert_eq!(m.param_count(), backbone + head + (head + fcm));
    }

    #[test]
    fn single_stage_has_no_alignment_params() {
        let m = toy_model(1, 0);
        assert!(m.params.iter().all(|p| !p.name.contains("fcm")));
        assert!(m.params.index_of("stage1.cls.weight").is_some());
    }

    #[test]
    fn disabling_alignment_drops_its_params_and_still_runs() {
        let mut cfg = toy_cfg(2);
        cfg.use_fcm = false;
        let m = CascadeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(m.params.iter().all(|p| !p.name.contains("fcm")));
        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let image = random_image(32, 32, 1);
        let mut tape = Tape::new();
        let out = m.cascade_forward(&mut tape, &image, &anchors).unwrap();
        assert_eq!(out.stages.len(), 2);
    }

    #[test]
    fn untrained_scores_sit_at_the_prior() {
        let m = toy_model(2, 3);
        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let image = random_image(32, 32, 17);
        let mut tape = Tape::new();
        let out = m.cascade_forward(&mut tape, &image, &anchors).unwrap();
        for stage in &out.stages {
            let logits = tape.value(stage.cls_logits);
            let mean: f64 = logits
                .data()
                .iter()
                .map(|&z| 1.0 / (1.0 + (-z).exp()))
                .sum::<f64>()
                / logits.len() as f64;
            assert!(
                (0.009..=0.011).contains(&mean),
                "mean initial score {mean} outside the prior band"
            );
        }
    }

    #[test]
    fn fresh_alignment_module_is_a_plain_conv() {
        // Offsets initialize to zero, so the aligned features must equal a
        // dense conv with the same kernel, exactly.
        let m = toy_model(2, 5);
        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let image = random_image(32, 32, 11);
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone());
        let feats = m.backbone_forward(&mut tape, img).unwrap();
        let aligned = m.fcm_forward(&mut tape, feats[0], 1).unwrap();

        let dw = m.params.index_of("stage2.fcm.deform.weight").unwrap();
        let db = m.params.index_of("stage2.fcm.deform.bias").unwrap();
        let plain = Conv2d { stride: 1, padding: 1 }
            .forward(&[
                tape.value(feats[0]),
                &m.params.get(dw).value,
                &m.params.get(db).value,
            ])
            .unwrap();
        assert_eq!(tape.value(aligned).shape(), plain.shape());
        for (a, b) in tape.value(aligned).data().iter().zip(plain.data()) {
            assert_eq!(a, b);
        }
        let _ = anchors;
    }

    #[test]
    fn all_zero_cls_weights_emit_the_bias_everywhere() {
        let mut m = toy_model(1, 7);
        let widx = m.params.index_of("stage1.cls.weight").unwrap();
        m.params.get_mut(widx).value.data_mut().fill(0.0);
        let bidx = m.params.index_of("stage1.cls.bias").unwrap();
        let bias = m.params.get(bidx).value.data()[0];

        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let image = random_image(32, 32, 2);
        let mut tape = Tape::new();
        let out = m.cascade_forward(&mut tape, &image, &anchors).unwrap();
        for &z in tape.value(out.stages[0].cls_logits).data() {
            assert_eq!(z, bias);
        }
    }

    #[test]
    fn forward_shapes_follow_the_anchor_grid() {
        let m = toy_model(2, 9);
        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let n = anchors.boxes.len();
        assert_eq!(n, (8 * 8 + 4 * 4) * 2);
        let image = random_image(32, 32, 4);
        let mut tape = Tape::new();
        let out = m.cascade_forward(&mut tape, &image, &anchors).unwrap();
        assert_eq!(out.stages.len(), 2);
        for stage in &out.stages {
            assert_eq!(tape.value(stage.cls_logits).shape(), &[n, 3]);
            assert_eq!(tape.value(stage.reg_deltas).shape(), &[n, 4]);
            assert_eq!(stage.boxes.len(), n);
        }
        assert_eq!(out.stages[0].input_boxes, anchors.boxes);
        assert_eq!(out.stages[1].input_boxes, out.stages[0].boxes);
    }

    #[test]
    fn zeroed_stage_two_regression_keeps_stage_one_boxes() {
        let mut m = toy_model(2, 13);
        for name in ["stage2.reg.weight", "stage2.reg.bias"] {
            let idx = m.params.index_of(name).unwrap();
            let p = m.params.get_mut(idx);
            let len = p.value.len();
            p.value = Tensor::zeros(p.value.shape().to_vec());
            assert_eq!(p.value.len(), len);
        }
        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let image = random_image(32, 32, 6);
        let mut tape = Tape::new();
        let out = m.cascade_forward(&mut tape, &image, &anchors).unwrap();
        for (b1, b2) in out.stages[0].boxes.iter().zip(&out.stages[1].boxes) {
            assert!((b1.x1 - b2.x1).abs() < 1e-12);
            assert!((b1.y1 - b2.y1).abs() < 1e-12);
            assert!((b1.x2 - b2.x2).abs() < 1e-12);
            assert!((b1.y2 - b2.y2).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_for_fixed_params() {
        let m = toy_model(2, 21);
        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let image = random_image(32, 32, 8);
        let run = || {
            let mut tape = Tape::new();
            let out = m.cascade_forward(&mut tape, &image, &anchors).unwrap();
            tape.value(out.stages[1].cls_logits).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_reach_the_offset_conv() {
        let m = toy_model(2, 19);
        let anchors = generate_anchors((32, 32), &m.cfg.anchor_spec).unwrap();
        let image = random_image(32, 32, 10);
        let mut tape = Tape::new();
        let out = m.cascade_forward(&mut tape, &image, &anchors).unwrap();
        // Any scalar touching stage 2 works; sum of its logits is simplest.
        let loss = tape.sum(out.stages[1].cls_logits);
        tape.backward(loss, 1.0).unwrap();
        let mut params = m.params.clone();
        params.accumulate_from_tape(&tape);
        let idx = params.index_of("stage2.fcm.offset_conv.weight").unwrap();
        let g = params.get(idx).grad.as_ref().expect("offset conv got a gradient");
        assert!(g.iter().any(|v| v.abs() > 1e-12), "offset gradients all zero");
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = toy_cfg(2);
        cfg.num_stages = 4;
        assert!(CascadeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut cfg = toy_cfg(2);
        cfg.anchor_spec.strides = vec![6];
        assert!(CascadeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut cfg = toy_cfg(2);
        cfg.anchor_spec.strides = vec![8, 4];
        assert!(CascadeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
