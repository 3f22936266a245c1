//! Pipeline configuration and its TOML representation.

use serde::{Deserialize, Serialize};

use crate::classify::{Protocol, ScaleSpec};
use crate::error::{Error, Result};
use crate::scene::DEFAULT_DEPTH_TOLERANCE;
use crate::tracking::MatchMode;

/// Which proposal sources feed classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalMode {
    #[serde(rename = "2d-only")]
    ImageOnly,
    #[serde(rename = "3d-only")]
    PointCloudOnly,
    #[serde(rename = "2d+3d")]
    Combined,
}

impl ProposalMode {
    pub fn uses_images(self) -> bool {
        matches!(self, ProposalMode::ImageOnly | ProposalMode::Combined)
    }

    pub fn uses_point_cloud(self) -> bool {
        matches!(self, ProposalMode::PointCloudOnly | ProposalMode::Combined)
    }

    /// Top-K budget: 600 when both sources are combined, else 300.
    pub fn default_top_k(self) -> usize {
        match self {
            ProposalMode::Combined => 600,
            _ => 300,
        }
    }
}

impl std::str::FromStr for ProposalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d-only" => Ok(Self::ImageOnly),
            "3d-only" => Ok(Self::PointCloudOnly),
            "2d+3d" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tau_img: f64,
    pub tau_inst: f64,
    pub tau_tracking: f64,
    pub tau_merge: f64,
    pub tau_ref: f64,
    pub tau_incl: f64,
    pub tau_sms: f64,
    pub sms_enabled: bool,
    pub nms_iou: f64,
    pub frame_stride: usize,
    pub top_views: usize,
    pub scale_levels: u32,
    pub scale_expansion: f64,
    /// `None` resolves to the mode's default budget.
    pub top_k: Option<usize>,
    pub protocol: Protocol,
    /// `None` resolves to combined when point-cloud proposals exist, else image-only.
    pub mode: Option<ProposalMode>,
    pub overlap_removal_enabled: bool,
    pub refinement_enabled: bool,
    pub merge_enabled: bool,
    pub match_mode: MatchMode,
    pub principal_axis_correction: bool,
    pub depth_tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_img: 0.1,
            tau_inst: 0.3,
            tau_tracking: 0.3,
            tau_merge: 0.3,
            tau_ref: 0.4,
            tau_incl: 0.99,
            tau_sms: 0.0,
            sms_enabled: true,
            nms_iou: 0.95,
            frame_stride: 5,
            top_views: 20,
            scale_levels: 3,
            scale_expansion: 0.2,
            top_k: None,
            protocol: Protocol::Top1,
            mode: None,
            overlap_removal_enabled: true,
            refinement_enabled: true,
            merge_enabled: true,
            match_mode: MatchMode::FrameWise,
            principal_axis_correction: false,
            depth_tolerance: DEFAULT_DEPTH_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ScanNet,
    S3dis,
    Replica,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scannet" | "scannet200" => Ok(Self::ScanNet),
            "s3dis" => Ok(Self::S3dis),
            "replica" => Ok(Self::Replica),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self::default();
        match preset {
            Preset::ScanNet => base,
            Preset::S3dis => Self {
                top_views: 40,
                ..base
            },
            Preset::Replica => Self {
                tau_merge: 0.7,
                refinement_enabled: false,
                principal_axis_correction: true,
                ..base
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("tau_img", self.tau_img),
            ("tau_inst", self.tau_inst),
            ("tau_tracking", self.tau_tracking),
            ("tau_merge", self.tau_merge),
            ("tau_ref", self.tau_ref),
            ("tau_incl", self.tau_incl),
            ("nms_iou", self.nms_iou),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.tau_sms.is_nan() {
            return Err(Error::Config("tau_sms is NaN".into()));
        }
        if !(self.depth_tolerance >= 0.0 && self.depth_tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "depth_tolerance = {} must be a finite non-negative length",
                self.depth_tolerance
            )));
        }
        if !(self.scale_expansion >= 0.0 && self.scale_expansion.is_finite()) {
            return Err(Error::Config("scale_expansion must be non-negative".into()));
        }
        for (name, v) in [
            ("frame_stride", self.frame_stride),
            ("top_views", self.top_views),
            ("scale_levels", self.scale_levels as usize),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> ScaleSpec {
        ScaleSpec {
            levels: self.scale_levels,
            expansion: self.scale_expansion,
        }
    }

    /// Fills `mode` and `top_k` for a bundle with or without point-cloud proposals.
    pub fn resolved(&self, has_point_cloud_proposals: bool) -> Self {
        let mode = self.mode.unwrap_or(if has_point_cloud_proposals {
            ProposalMode::Combined
        } else {
            ProposalMode::ImageOnly
        });
        Self {
            mode: Some(mode),
            top_k: Some(self.top_k.unwrap_or(mode.default_top_k())),
            ..self.clone()
        }
    }

    /// Refinement threshold in effect, `None` when refinement is disabled.
    pub fn effective_tau_ref(&self) -> Option<f64> {
        self.refinement_enabled.then_some(self.tau_ref)
    }
}
