//! Matching boxes to ground truths, stage by stage.
//!
//! Each refinement stage labels its own input boxes with that stage's IoU
//! thresholds: at least `t_fg` overlap with the best ground truth makes a
//! box foreground, below `t_bg` makes it background, and the band between
//! is ignored by both losses. Later stages use stricter thresholds on the
//! boxes the previous stage refined, which is the whole point of the
//! cascade: the population of training boxes improves together with the
//! threshold.

use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox, Deltas};

/// Per-stage training knobs: the IoU band and the loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    /// Foreground threshold: best IoU at or above this gets the gt's class.
    pub t_fg: f64,
    /// Background threshold: best IoU strictly below this is background.
    pub t_bg: f64,
    /// Weight of the localization term inside this stage's loss.
    pub lambda: f64,
    /// Weight of this stage inside the total loss.
    pub alpha: f64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_bg)
            || !(0.0..=1.0).contains(&self.t_fg)
            || self.t_bg > self.t_fg
        {
            return Err(Error::Config(format!(
                "stage thresholds must satisfy 0 <= t_bg <= t_fg <= 1, got t_bg={} t_fg={}",
                self.t_bg, self.t_fg
            )));
        }
        if self.lambda <= 0.0 || self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "stage weights must be positive, got lambda={} alpha={}",
                self.lambda, self.alpha
            )));
        }
        Ok(())
    }
}

/// Training role of one box under one stage's thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// In the threshold band; contributes to no loss.
    Ignore,
    Background,
    /// Matched to a ground truth of this class.
    Foreground(usize),
}

impl Label {
    pub fn is_foreground(&self) -> bool {
        matches!(self, Label::Foreground(_))
    }
}

/// Labels plus regression targets for one stage.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub labels: Vec<Label>,
    /// Ground-truth index for foreground boxes.
    pub matched_gt: Vec<Option<usize>>,
    /// Deltas from the box to its matched ground truth, foreground only.
    pub reg_targets: Vec<Option<Deltas>>,
}

impl AssignmentResult {
    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_foreground()).count()
    }
}

/// Label every box against the ground truths with one stage's thresholds.
///
/// A box matches the ground truth with the highest IoU (ties break toward
/// the lowest gt index), so it is assigned to at most one object. With no
/// ground truths at all everything is background.
pub fn assign(boxes: &[BBox], gts: &[(BBox, usize)], cfg: &StageConfig) -> Result<AssignmentResult> {
    cfg.validate()?;
    let n = boxes.len();
    let mut result = AssignmentResult {
        labels: Vec::with_capacity(n),
        matched_gt: Vec::with_capacity(n),
        reg_targets: Vec::with_capacity(n),
    };
    for b in boxes {
        let best = gts
            .iter()
            .enumerate()
            .map(|(gi, (g, _))| (gi, iou(b, g)))
            // max_by keeps the later element on ties, so scan in reverse to
            // make the lowest index win.
            .rev()
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("IoU is never NaN"));
        match best {
            Some((gi, m)) if m >= cfg.t_fg => {
                let (gbox, gclass) = &gts[gi];
                result.labels.push(Label::Foreground(*gclass));
                result.matched_gt.push(Some(gi));
                result.reg_targets.push(Some(encode_deltas(b, gbox)?));
            }
            Some((_, m)) if m >= cfg.t_bg => {
                result.labels.push(Label::Ignore);
                result.matched_gt.push(None);
                result.reg_targets.push(None);
            }
            _ => {
                result.labels.push(Label::Background);
                result.matched_gt.push(None);
                result.reg_targets.push(None);
            }
        }
    }
    Ok(result)
}

/// Run [`assign`] once per stage, each stage on its own refined boxes with
/// its own thresholds.
pub fn reassign_all_stages(
    stage_boxes: &[Vec<BBox>],
    gts: &[(BBox, usize)],
    stage_cfgs: &[StageConfig],
) -> Result<Vec<AssignmentResult>> {
    if stage_boxes.len() != stage_cfgs.len() {
        return Err(Error::Config(format!(
            "{} stages of boxes but {} stage configs",
            stage_boxes.len(),
            stage_cfgs.len()
        )));
    }
    stage_boxes
        .iter()
        .zip(stage_cfgs)
        .map(|(boxes, cfg)| assign(boxes, gts, cfg))
        .collect()
}
