//! Open-vocabulary 3D instance segmentation from posed depth frames,
//! superpoints and 2D instance masks.
//!
//! The pipeline lifts per-frame 2D masks onto superpoints, tracks them
//! across frames with a co-visibility-restricted superpoint IoU, merges and
//! refines the resulting 3D proposals, and classifies each proposal by
//! comparing multi-view aggregated image embeddings against text embeddings.
//!
//! Geometry and classification are generic over [`num::Real`] (`f32`/`f64`);
//! set algebra, tracking, evaluation and the pipeline work in `f64`.

pub mod bundle;
pub mod classify;
pub mod config;
pub mod error;
pub mod eval;
pub mod export;
pub mod grounding;
pub mod lifting;
pub mod mask;
pub mod num;
pub mod pipeline;
pub mod refine;
pub mod scene;
pub mod sets;
pub mod synth;
pub mod tracking;

pub use bundle::{validate_bundle, SceneBundle, ValidationReport, Violation};
pub use config::{PipelineConfig, Preset, ProposalMode};
pub use error::{Error, Result};
pub use num::Real;
pub use pipeline::{run_pipeline, write_outputs, PipelineOutput};
pub use refine::{Proposal, ProposalSource};
pub use sets::{PixelSet, PointMask, SuperpointSet};
pub use tracking::{MatchMode, Tracklet};

pub type PointCloud64 = scene::PointCloud<f64>;
pub type PointCloud32 = scene::PointCloud<f32>;
pub type CameraFrame64 = scene::CameraFrame<f64>;
pub type CameraFrame32 = scene::CameraFrame<f32>;
pub type PixelProjection64 = scene::PixelProjection<f64>;
pub type PixelProjection32 = scene::PixelProjection<f32>;
pub type SimilarityMatrix64 = classify::SimilarityMatrix<f64>;
pub type SimilarityMatrix32 = classify::SimilarityMatrix<f32>;
pub type AggregatedFeature64 = classify::AggregatedFeature<f64>;
pub type AggregatedFeature32 = classify::AggregatedFeature<f32>;
pub type Prediction64 = classify::Prediction<f64>;
pub type SmsStats64 = classify::SmsStats<f64>;
