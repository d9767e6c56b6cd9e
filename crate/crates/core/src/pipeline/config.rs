//! Flat key = value configuration for training, inference, and evaluation.
//!
//! The format is a plain text file: one `key = value` per line, `#` starts
//! a comment, blank lines ignored. Stage-indexed settings use dotted keys
//! (`stage.2.t_fg = 0.6`). Unknown keys are hard errors so typos cannot
//! silently fall back to defaults.

use std::fs;
use std::path::Path;

use crate::assignment::StageConfig;
use crate::error::{Error, Result};
use crate::geometry::AnchorSpec;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pipeline::scene::SceneConfig;

/// How per-stage classification scores combine at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Mean of every stage's sigmoid scores.
    Average,
    /// Last stage's scores only.
    Last,
}

/// Everything a run needs, resolvable entirely from one config file.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub num_stages: usize,
    pub tower_depth: usize,
    pub use_fcm: bool,
    pub clip_boxes: bool,
    /// Square image side in pixels.
    pub image_size: usize,
    pub anchor_spec: AnchorSpec,
    pub stages: Vec<StageConfig>,
    pub loss: LossConfig,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_shape_size: f64,
    pub max_shape_size: f64,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub top_k: usize,
    pub ensemble_mode: EnsembleMode,
}

/// Default foreground threshold ladder: stage i trains at `0.5 + 0.1*(i-1)`.
fn default_t_fg(stage: usize) -> f64 {
    0.5 + 0.1 * (stage - 1) as f64
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            channels: 12,
            num_classes: 3,
            num_stages: 2,
            tower_depth: 2,
            use_fcm: true,
            clip_boxes: true,
            image_size: 64,
            anchor_spec: AnchorSpec {
                strides: vec![4, 8],
                scales: vec![13.0, 18.0, 25.0],
                ratios: vec![1.0],
            },
            stages: (1..=2).map(default_stage).collect(),
            loss: LossConfig::default(),
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            train_scenes: 1000,
            val_scenes: 200,
            min_shapes: 1,
            max_shapes: 4,
            min_shape_size: 12.0,
            max_shape_size: 26.0,
            nms_threshold: 0.5,
            score_threshold: 0.05,
            top_k: 100,
            ensemble_mode: EnsembleMode::Average,
        }
    }
}

fn default_stage(index: usize) -> StageConfig {
    let t_fg = default_t_fg(index);
    StageConfig {
        t_fg,
        t_bg: t_fg - 0.1,
        lambda: 2.0,
        alpha: 1.0,
    }
}

/// A stage field override found while parsing (applied after `num_stages`
/// is known, so key order in the file does not matter).
struct StageOverride {
    stage: usize,
    field: String,
    value: f64,
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        TrainConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut overrides: Vec<StageOverride> = Vec::new();
        let mut explicit_t_bg: Vec<usize> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let fail = |what: &str| {
                Error::Config(format!("line {}: bad {what} value `{value}` for `{key}`", lineno + 1))
            };

            match key {
                "channels" => cfg.channels = value.parse().map_err(|_| fail("integer"))?,
                "num_classes" => cfg.num_classes = value.parse().map_err(|_| fail("integer"))?,
                "num_stages" => cfg.num_stages = value.parse().map_err(|_| fail("integer"))?,
                "tower_depth" => cfg.tower_depth = value.parse().map_err(|_| fail("integer"))?,
                "use_fcm" => cfg.use_fcm = value.parse().map_err(|_| fail("boolean"))?,
                "clip_boxes" => cfg.clip_boxes = value.parse().map_err(|_| fail("boolean"))?,
                "image_size" => cfg.image_size = value.parse().map_err(|_| fail("integer"))?,
                "anchor.strides" => {
                    cfg.anchor_spec.strides = parse_list(value).map_err(|_| fail("integer list"))?
                }
                "anchor.scales" => {
                    cfg.anchor_spec.scales = parse_list(value).map_err(|_| fail("number list"))?
                }
                "anchor.ratios" => {
                    cfg.anchor_spec.ratios = parse_list(value).map_err(|_| fail("number list"))?
                }
                "loss.alpha_fl" => cfg.loss.alpha_fl = value.parse().map_err(|_| fail("number"))?,
                "loss.gamma" => cfg.loss.gamma = value.parse().map_err(|_| fail("number"))?,
                "loss.beta" => cfg.loss.beta = value.parse().map_err(|_| fail("number"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| fail("number"))?,
                "momentum" => cfg.momentum = value.parse().map_err(|_| fail("number"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| fail("integer"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| fail("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| fail("integer"))?,
                "train_scenes" => cfg.train_scenes = value.parse().map_err(|_| fail("integer"))?,
                "val_scenes" => cfg.val_scenes = value.parse().map_err(|_| fail("integer"))?,
                "scene.min_shapes" => cfg.min_shapes = value.parse().map_err(|_| fail("integer"))?,
                "scene.max_shapes" => cfg.max_shapes = value.parse().map_err(|_| fail("integer"))?,
                "scene.min_size" => cfg.min_shape_size = value.parse().map_err(|_| fail("number"))?,
                "scene.max_size" => cfg.max_shape_size = value.parse().map_err(|_| fail("number"))?,
                "nms_threshold" => cfg.nms_threshold = value.parse().map_err(|_| fail("number"))?,
                "score_threshold" => {
                    cfg.score_threshold = value.parse().map_err(|_| fail("number"))?
                }
                "top_k" => cfg.top_k = value.parse().map_err(|_| fail("integer"))?,
                "ensemble_mode" => {
                    cfg.ensemble_mode = match value {
                        "average" => EnsembleMode::Average,
                        "last" => EnsembleMode::Last,
                        _ => {
                            return Err(Error::Config(format!(
                                "line {}: ensemble_mode must be `average` or `last`, got `{value}`",
                                lineno + 1
                            )))
                        }
                    }
                }
                k if k.starts_with("stage.") => {
                    let mut parts = k.splitn(3, '.');
                    parts.next();
                    let stage: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Config(format!("line {}: bad stage key `{k}`", lineno + 1)))?;
                    let field = parts
                        .next()
                        .ok_or_else(|| Error::Config(format!("line {}: bad stage key `{k}`", lineno + 1)))?;
                    if !matches!(field, "t_fg" | "t_bg" | "lambda" | "alpha") {
                        return Err(Error::Config(format!(
                            "line {}: unknown stage field `{field}` in `{k}`",
                            lineno + 1
                        )));
                    }
                    if field == "t_bg" {
                        explicit_t_bg.push(stage);
                    }
                    overrides.push(StageOverride {
                        stage,
                        field: field.to_string(),
                        value: value.parse().map_err(|_| fail("number"))?,
                    });
                }
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown config key `{key}`",
                        lineno + 1
                    )))
                }
            }
        }

        cfg.stages = (1..=cfg.num_stages).map(default_stage).collect();
        for ov in &overrides {
            if ov.stage == 0 || ov.stage > cfg.num_stages {
                return Err(Error::Config(format!(
                    "stage.{}.{} set but num_stages = {}",
                    ov.stage, ov.field, cfg.num_stages
                )));
            }
            let s = &mut cfg.stages[ov.stage - 1];
            match ov.field.as_str() {
                "t_fg" => s.t_fg = ov.value,
                "t_bg" => s.t_bg = ov.value,
                "lambda" => s.lambda = ov.value,
                "alpha" => s.alpha = ov.value,
                _ => unreachable!("field validated during parsing"),
            }
        }
        // t_bg defaults follow an overridden t_fg unless t_bg itself was set.
        for (i, s) in cfg.stages.iter_mut().enumerate() {
            if !explicit_t_bg.contains(&(i + 1)) {
                s.t_bg = s.t_fg - 0.1;
            }
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 3 {
            return Err(Error::Config(format!(
                "num_classes must be 1 to 3 (shape kinds), got {}",
                self.num_classes
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config("train_scenes and val_scenes must be positive".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "need 1 <= min_shapes <= max_shapes, got {} and {}",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.min_shape_size < 4.0 || self.min_shape_size > self.max_shape_size {
            return Err(Error::Config(format!(
                "need 4 <= scene.min_size <= scene.max_size, got {} and {}",
                self.min_shape_size, self.max_shape_size
            )));
        }
        if self.max_shape_size > self.image_size as f64 {
            return Err(Error::Config("scene.max_size exceeds the image".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr > 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold)
            || !(0.0..=1.0).contains(&self.score_threshold)
        {
            return Err(Error::Config(
                "nms_threshold and score_threshold must be in [0, 1]".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Config(format!("stage {}: {e}", i + 1)))?;
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            num_classes: self.num_classes,
            num_stages: self.num_stages,
            tower_depth: self.tower_depth,
            anchor_spec: self.anchor_spec.clone(),
            clip_boxes: self.clip_boxes,
            use_fcm: self.use_fcm,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_size: (self.image_size, self.image_size),
            num_classes: self.num_classes,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            min_size: self.min_shape_size,
            max_size: self.max_shape_size,
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, ()> {
    let items: std::result::Result<Vec<T>, _> = value
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| ()))
        .collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default_config() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg.num_stages, 2);
        assert_eq!(cfg.stages[0].t_fg, 0.5);
        assert_eq!(cfg.stages[0].t_bg, 0.4);
        assert_eq!(cfg.stages[1].t_fg, 0.6);
        assert_eq!(cfg.stages[1].t_bg, 0.5);
        assert_eq!(cfg.ensemble_mode, EnsembleMode::Average);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = TrainConfig::parse("# a comment\n\nlr = 0.5 # trailing\n").unwrap();
        assert_eq!(cfg.lr, 0.5);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = TrainConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"), "{err}");
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn stage_indexed_keys_override_one_stage() {
        let cfg = TrainConfig::parse("stage.2.t_fg = 0.7\nstage.2.lambda = 1.5\n").unwrap();
        assert_eq!(cfg.stages[1].t_fg, 0.7);
        // t_bg follows the overridden t_fg by the minus-0.1 rule.
        assert!((cfg.stages[1].t_bg - 0.6).abs() < 1e-12);
        assert_eq!(cfg.stages[1].lambda, 1.5);
        assert_eq!(cfg.stages[0].t_fg, 0.5);
    }

    #[test]
    fn explicit_t_bg_wins_over_the_rule() {
        let cfg = TrainConfig::parse("stage.2.t_fg = 0.7\nstage.2.t_bg = 0.3\n").unwrap();
        assert_eq!(cfg.stages[1].t_bg, 0.3);
    }

    #[test]
    fn stage_keys_work_regardless_of_order() {
        let cfg = TrainConfig::parse("stage.3.t_fg = 0.75\nnum_stages = 3\n").unwrap();
        assert_eq!(cfg.stages.len(), 3);
        assert_eq!(cfg.stages[2].t_fg, 0.75);
    }

    #[test]
    fn out_of_range_stage_index_is_an_error() {
        let err = TrainConfig::parse("stage.3.t_fg = 0.7\n").unwrap_err();
        assert!(err.to_string().contains("num_stages"), "{err}");
    }

    #[test]
    fn lists_parse_comma_separated() {
        let cfg = TrainConfig::parse("anchor.scales = 10, 14, 20\nanchor.strides = 8\n").unwrap();
        assert_eq!(cfg.anchor_spec.scales, vec![10.0, 14.0, 20.0]);
        assert_eq!(cfg.anchor_spec.strides, vec![8]);
    }

    #[test]
    fn default_config_validates() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_values_name_the_line() {
        let err = TrainConfig::parse("lr = fast\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = TrainConfig::parse("\njust a line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn ensemble_mode_values() {
        assert_eq!(
            TrainConfig::parse("ensemble_mode = last\n").unwrap().ensemble_mode,
            EnsembleMode::Last
        );
        assert!(TrainConfig::parse("ensemble_mode = mean\n").is_err());
    }

    #[test]
    fn validation_rejects_nonsense() {
        assert!(TrainConfig::parse("num_classes = 5\n").is_err());
        assert!(TrainConfig::parse("momentum = 1.5\n").is_err());
        assert!(TrainConfig::parse("batch_size = 0\n").is_err());
        assert!(TrainConfig::parse("stage.1.t_fg = 0.3\nstage.1.t_bg = 0.6\n").is_err());
    }
}
