//! Staged training and full-volume inference.
//!
//! Training runs five stages in order (`backbone`, `rpn_step1`, `rpn_step2`,
//! `rcn_step1`, `rcn_step2`); each updates one network section and keeps the
//! earlier sections frozen. Inference tiles the volume, fuses overlapping
//! tiles by averaging, extracts candidate centres as maxima of the smoothed
//! proximity map gated by the proposal score, prunes them and classifies
//! the survivors.

mod dense;
mod infer;
mod train;

pub use dense::{dense_maps, tile_origins, DenseMaps};
pub use infer::{
    detections_from_json, detections_to_json, infer_volume, nms_prune, propose, read_detections,
    refine_proposals, write_detections, DetectionRecord,
};
pub use train::{
    backbone_rmse, prepare_cases, rcn_targets, train_stage, train_stage_with, validation_patches, LogRow,
    PreparedCase, RcnTarget, StageSettings, TrainingLog,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::RegressionPenalty;
use crate::sampler::PatchSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub w_cls: f64,
    /// `w_reg` ramps linearly from `w_reg_start` to `w_reg_end` over the stage.
    pub w_reg_start: f64,
    pub w_reg_end: f64,
    /// Replace the printed regression penalty with the continuous smooth-L1.
    pub continuous_smooth_l1: bool,
    /// Proposals classified per refinement-stage iteration.
    pub rcn_proposals_per_iter: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 1e-4,
            w_cls: 1.0,
            w_reg_start: 0.1,
            w_reg_end: 1.0,
            continuous_smooth_l1: false,
            rcn_proposals_per_iter: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations ≥ 1 required".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be ≥ 0", self.lr)));
        }
        if !(self.w_cls > 0.0 && self.w_reg_start > 0.0 && self.w_reg_end > 0.0) {
            return Err(Error::Config("loss weights must be > 0".into()));
        }
        if self.rcn_proposals_per_iter == 0 {
            return Err(Error::Config("rcn_proposals_per_iter must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn penalty(&self) -> RegressionPenalty {
        if self.continuous_smooth_l1 {
            RegressionPenalty::ContinuousSmoothL1
        } else {
            RegressionPenalty::SmoothDistance
        }
    }

    /// Regression weight at iteration `i` of `iterations`.
    pub fn w_reg(&self, i: usize) -> f64 {
        let t = if self.iterations <= 1 {
            1.0
        } else {
            i as f64 / (self.iterations - 1) as f64
        };
        self.w_reg_start + t * (self.w_reg_end - self.w_reg_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub score_threshold: f64,
    pub nms_radius_mm: f64,
    pub max_proposals: usize,
    pub smooth_sigma_mm: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self::for_patch(PatchSpec::default().patch_size)
    }
}

impl InferConfig {
    /// Defaults for a model trained on `patch`-sized patches.
    pub fn for_patch(patch: usize) -> Self {
        Self {
            patch_size: patch,
            stride: (patch / 2).max(1),
            score_threshold: 0.25,
            nms_radius_mm: 2.0,
            max_proposals: 300,
            smooth_sigma_mm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "stride {} must lie in (0, patch_size = {}]",
                self.stride, self.patch_size
            )));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config("score_threshold must lie in (0, 1)".into()));
        }
        if !(self.nms_radius_mm >= 0.0) || !(self.smooth_sigma_mm >= 0.0) {
            return Err(Error::Config("nms_radius_mm and smooth_sigma_mm must be ≥ 0".into()));
        }
        Ok(())
    }
}
