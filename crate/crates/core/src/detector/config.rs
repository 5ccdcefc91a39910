use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of pyramid levels; fixed by the architecture.
pub const NUM_LEVELS: usize = 4;
/// Pyramid strides relative to input pixels.
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32];

/// Architecture and proposal/matching hyper-parameters of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub backbone_channels: [usize; NUM_LEVELS],
    pub pyramid_channels: usize,
    pub rpn_hidden: usize,
    pub anchor_sizes: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub pool_size: usize,
    pub head_hidden: usize,
    pub rpn_pre_nms_top_k: usize,
    pub rpn_nms_threshold: f64,
    pub rpn_post_nms_top_n: usize,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_positive_samples: usize,
    pub rpn_negative_samples: usize,
    pub roi_positive_iou: f64,
    pub roi_samples: usize,
    pub roi_positive_fraction: f64,
    pub smooth_l1_beta: f64,
    pub delta_clamp: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 128,
            backbone_channels: [16, 32, 32, 32],
            pyramid_channels: 32,
            rpn_hidden: 32,
            anchor_sizes: vec![8.0, 16.0, 32.0, 64.0, 96.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pool_size: 4,
            head_hidden: 128,
            rpn_pre_nms_top_k: 256,
            rpn_nms_threshold: 0.7,
            rpn_post_nms_top_n: 64,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            rpn_positive_samples: 32,
            rpn_negative_samples: 32,
            roi_positive_iou: 0.5,
            roi_samples: 32,
            roi_positive_fraction: 0.5,
            smooth_l1_beta: 1.0,
            delta_clamp: crate::geometry::DEFAULT_DELTA_CLAMP,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad(format!("image size {} is not a positive multiple of 32", self.image_size));
        }
        if self.backbone_channels.contains(&0) || self.pyramid_channels == 0 || self.rpn_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.pool_size == 0 || self.head_hidden == 0 {
            return bad("pool size and head width must be positive".into());
        }
        if self.anchor_sizes.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor sizes and ratios must be non-empty".into());
        }
        if self.anchor_sizes.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("anchor sizes and ratios must be positive".into());
        }
        for t in [self.rpn_nms_threshold, self.rpn_positive_iou, self.rpn_negative_iou, self.roi_positive_iou, self.roi_positive_fraction] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("threshold {t} outside [0, 1]"));
            }
        }
        if self.rpn_negative_iou > self.rpn_positive_iou {
            return bad("rpn negative IoU must not exceed the positive IoU".into());
        }
        if !(self.smooth_l1_beta > 0.0) || !(self.delta_clamp > 0.0) {
            return bad("smooth-L1 beta and delta clamp must be positive".into());
        }
        if self.rpn_post_nms_top_n == 0 || self.rpn_pre_nms_top_k == 0 || self.roi_samples == 0 {
            return bad("proposal budgets must be positive".into());
        }
        for level in 0..NUM_LEVELS {
            if self.level_sizes(level).is_empty() {
                return bad(format!("no anchor size falls on pyramid level {level}"));
            }
        }
        Ok(())
    }

    /// Pyramid level handling anchors of side `size`: the level whose stride is
    /// closest (in log scale) to `size / 2`.
    pub fn level_for_size(size: f64) -> usize {
        let level = (size / (2.0 * LEVEL_STRIDES[0] as f64)).log2().round();
        level.clamp(0.0, (NUM_LEVELS - 1) as f64) as usize
    }

    pub fn level_sizes(&self, level: usize) -> Vec<f64> {
        self.anchor_sizes
            .iter()
            .copied()
            .filter(|s| Self::level_for_size(*s) == level)
            .collect()
    }

    pub fn anchors_per_cell(&self, level: usize) -> usize {
        self.level_sizes(level).len() * self.anchor_ratios.len()
    }

    pub fn level_extent(&self, level: usize) -> usize {
        self.image_size.div_ceil(LEVEL_STRIDES[level])
    }

    pub fn pooled_len(&self) -> usize {
        self.pyramid_channels * self.pool_size * self.pool_size
    }
}
