//! Detection losses: focal loss for classification, smooth L1 for box
//! regression, and their combination per stage and across the cascade.
//!
//! Both losses are fused tape ops; labels and regression targets are
//! constants of the op (training treats the assignment as data), so
//! gradients flow only into the logits and the predicted deltas.

use crate::assignment::{AssignmentResult, Label, StageConfig};
use crate::error::{Error, Result};
use crate::geometry::Deltas;
use crate::numerics::tape::{Tape, TapeOp, VarId};
use crate::numerics::tensor::Tensor;

/// Classification and regression loss settings shared by all stages.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Focal loss weight on positive targets; negatives get `1 - alpha_fl`.
    pub alpha_fl: f64,
    /// Focal loss focusing exponent.
    pub gamma: f64,
    /// Smooth L1 transition point between quadratic and linear.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_fl: 0.25,
            gamma: 2.0,
            beta: 1.0 / 9.0,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One focal term and its derivative in the logit.
///
/// With `z_s = z` for a positive target and `-z` for a negative one,
/// `p_t = sigmoid(z_s)` and the term is `-a_t (1-p_t)^g ln(p_t)`. The
/// derivative uses the product form `a_t (1-p_t)^g (g p_t ln(p_t) - (1-p_t))`
/// which stays finite at both saturation ends and reduces to the plain
/// cross-entropy slope at `g = 0`.
fn focal_term(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let a_t = if positive { alpha } else { 1.0 - alpha };
    let z_s = if positive { z } else { -z };
    let ln_pt = -softplus(-z_s);
    let p_t = crate::numerics::tape::sigmoid_scalar(z_s);
    let one_minus = crate::numerics::tape::sigmoid_scalar(-z_s);
    let mod_factor = one_minus.powf(gamma);
    let loss = -a_t * mod_factor * ln_pt;
    let dz_s = a_t * mod_factor * (gamma * p_t * ln_pt - one_minus);
    (loss, if positive { dz_s } else { -dz_s })
}

/// Focal classification loss over `[N, num_classes]` logits.
///
/// Per-class sigmoid with one-hot targets: a foreground box is positive for
/// its class and negative for the rest, a background box is negative
/// everywhere, and an ignored box contributes nothing. Sum over boxes and
/// classes, divided by `max(1, foreground count)`.
#[derive(Debug)]
pub struct FocalLossOp {
    pub labels: Vec<Label>,
    pub alpha: f64,
    pub gamma: f64,
}

impl FocalLossOp {
    fn norm(&self) -> f64 {
        self.labels
            .iter()
            .filter(|l| l.is_foreground())
            .count()
            .max(1) as f64
    }

    fn check(&self, logits: &Tensor) -> Result<(usize, usize)> {
        let [n, c] = logits.shape() else {
            return Err(Error::shape(
                "focal_loss",
                format!("logits must be [N, classes], got {:?}", logits.shape()),
            ));
        };
        if *n != self.labels.len() {
            return Err(Error::shape(
                "focal_loss",
                format!("{} logit rows but {} labels", n, self.labels.len()),
            ));
        }
        for l in &self.labels {
            if let Label::Foreground(class) = l {
                if *class >= *c {
                    return Err(Error::shape(
                        "focal_loss",
                        format!("label class {class} out of range for {c} classes"),
                    ));
                }
            }
        }
        Ok((*n, *c))
    }
}

impl TapeOp for FocalLossOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let logits = inputs[0];
        let (n, c) = self.check(logits)?;
        let mut total = 0.0;
        for (i, label) in self.labels.iter().enumerate().take(n) {
            match label {
                Label::Ignore => {}
                Label::Background => {
                    for k in 0..c {
                        total += focal_term(logits.data()[i * c + k], false, self.alpha, self.gamma).0;
                    }
                }
                Label::Foreground(class) => {
                    for k in 0..c {
                        total += focal_term(
                            logits.data()[i * c + k],
                            k == *class,
                            self.alpha,
                            self.gamma,
                        )
                        .0;
                    }
                }
            }
        }
        Ok(Tensor::scalar(total / self.norm()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let logits = inputs[0];
        let c = logits.shape()[1];
        let scale = out_grad[0] / self.norm();
        let mut g = vec![0.0; logits.len()];
        for (i, label) in self.labels.iter().enumerate() {
            match label {
                Label::Ignore => {}
                Label::Background => {
                    for k in 0..c {
                        g[i * c + k] =
                            scale * focal_term(logits.data()[i * c + k], false, self.alpha, self.gamma).1;
                    }
                }
                Label::Foreground(class) => {
                    for k in 0..c {
                        g[i * c + k] = scale
                            * focal_term(
                                logits.data()[i * c + k],
                                k == *class,
                                self.alpha,
                                self.gamma,
                            )
                            .1;
                    }
                }
            }
        }
        vec![g]
    }
}

/// Smooth L1 over `[N, 4]` predicted deltas against per-box targets.
///
/// Boxes without a target (non-foreground) contribute nothing. Elementwise
/// `0.5 x²/beta` inside `|x| < beta`, `|x| - beta/2` outside; summed and
/// divided by `max(1, foreground count)`.
#[derive(Debug)]
pub struct SmoothL1Op {
    pub targets: Vec<Option<Deltas>>,
    pub beta: f64,
}

impl SmoothL1Op {
    fn norm(&self) -> f64 {
        self.targets.iter().flatten().count().max(1) as f64
    }

    fn check(&self, preds: &Tensor) -> Result<()> {
        if preds.shape() != [self.targets.len(), 4] {
            return Err(Error::shape(
                "smooth_l1",
                format!(
                    "predictions must be [{}, 4], got {:?}",
                    self.targets.len(),
                    preds.shape()
                ),
            ));
        }
        Ok(())
    }
}

impl TapeOp for SmoothL1Op {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let preds = inputs[0];
        self.check(preds)?;
        let mut total = 0.0;
        for (i, target) in self.targets.iter().enumerate() {
            let Some(t) = target else { continue };
            for (k, tv) in t.to_array().iter().enumerate() {
                let x = preds.data()[i * 4 + k] - tv;
                total += if x.abs() < self.beta {
                    0.5 * x * x / self.beta
                } else {
                    x.abs() - 0.5 * self.beta
                };
            }
        }
        Ok(Tensor::scalar(total / self.norm()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let preds = inputs[0];
        let scale = out_grad[0] / self.norm();
        let mut g = vec![0.0; preds.len()];
        for (i, target) in self.targets.iter().enumerate() {
            let Some(t) = target else { continue };
            for (k, tv) in t.to_array().iter().enumerate() {
                let x = preds.data()[i * 4 + k] - tv;
                g[i * 4 + k] = scale * (x / self.beta).clamp(-1.0, 1.0);
            }
        }
        vec![g]
    }
}

/// Scalar loss nodes for one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageLossVars {
    pub cls: VarId,
    pub loc: VarId,
    /// `cls + lambda * loc`.
    pub combined: VarId,
}

/// Record one stage's loss on the tape: focal on the logits, smooth L1 on
/// the deltas, combined with the stage's localization weight.
pub fn stage_loss(
    tape: &mut Tape,
    cls_logits: VarId,
    reg_preds: VarId,
    assignment: &AssignmentResult,
    cfg: &StageConfig,
    loss_cfg: &LossConfig,
) -> Result<StageLossVars> {
    let cls = tape.apply(
        Box::new(FocalLossOp {
            labels: assignment.labels.clone(),
            alpha: loss_cfg.alpha_fl,
            gamma: loss_cfg.gamma,
        }),
        &[cls_logits],
    )?;
    let loc = tape.apply(
        Box::new(SmoothL1Op {
            targets: assignment.reg_targets.clone(),
            beta: loss_cfg.beta,
        }),
        &[reg_preds],
    )?;
    let weighted_loc = tape.scale(loc, cfg.lambda);
    let combined = tape.add(cls, weighted_loc)?;
    Ok(StageLossVars { cls, loc, combined })
}

/// Loss values for reporting, one row per stage plus the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Per stage: (classification, localization).
    pub per_stage: Vec<(f64, f64)>,
    pub total: f64,
}

/// Weight each stage's combined loss by its `alpha` and sum on the tape.
/// Returns the total node (for backward) and the numbers for logging.
pub fn total_loss(
    tape: &mut Tape,
    stages: &[StageLossVars],
    cfgs: &[StageConfig],
) -> Result<(VarId, LossBreakdown)> {
    if stages.len() != cfgs.len() || stages.is_empty() {
        return Err(Error::Config(format!(
            "{} stage losses but {} stage configs",
            stages.len(),
            cfgs.len()
        )));
    }
    let mut acc: Option<VarId> = None;
    let mut per_stage = Vec::with_capacity(stages.len());
    for (vars, cfg) in stages.iter().zip(cfgs) {
        per_stage.push((tape.value(vars.cls).item(), tape.value(vars.loc).item()));
        let weighted = tape.scale(vars.combined, cfg.alpha);
        acc = Some(match acc {
            None => weighted,
            Some(prev) => tape.add(prev, weighted)?,
        });
    }
    let total = acc.expect("at least one stage");
    Ok((
        total,
        LossBreakdown {
            per_stage,
            total: tape.value(total).item(),
        },
    ))
}
