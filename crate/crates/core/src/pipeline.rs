//! End-to-end orchestration over an in-memory bundle, plus the run output
//! files.
//!
//! Frames are subsampled by `frame_stride` once, up front; every later
//! stage (lifting, tracking, view selection) sees the same subset.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{mask_key, point_mask_from_runs, to_json_bytes, SceneBundle};
use crate::classify::{
    aggregate_feature, assign_labels, combine_and_nms, principal_axis_correction, select_views,
    similarity, sms_filter, AggregatedFeature, FrameVisibility, Prediction, Protocol,
    SimilarityMatrix, SkippedView, SmsStats, ViewSelection,
};
use crate::config::{PipelineConfig, ProposalMode};
use crate::error::{Error, Result};
use crate::eval::EvalPrediction;
use crate::grounding::{remove_overlaps, Rejection};
use crate::lifting::FrameLifter;
use crate::refine::{inclusion_removal, merge_loop, refine_proposal, MergeTrace, Proposal, ProposalSource};
use crate::scene::{project_points, visible_points};
use crate::sets::PointMask;
use crate::tracking::{run_tracking, tracklet_to_proposal, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
struct Stopwatch(Vec<StageTiming>);

impl Stopwatch {
    fn time<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        self.0.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// A surviving proposal after NMS. `proposal.id` is its index in the final
/// list; `origin_id` is its id within its source.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalProposal {
    pub proposal: Proposal,
    pub origin_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub classes: Vec<String>,
    /// One per final proposal.
    pub features: Vec<AggregatedFeature<f64>>,
    /// Final proposal index of each similarity row (classifiable proposals only).
    pub rows: Vec<usize>,
    pub similarity: SimilarityMatrix<f64>,
    pub sms: SmsStats<f64>,
    /// Final proposal indices that passed the SMS filter.
    pub kept: Vec<usize>,
    /// `Prediction::proposal` is a final proposal index.
    pub predictions: Vec<Prediction<f64>>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Effective configuration (mode and top-K resolved).
    pub config: PipelineConfig,
    pub frames_used: Vec<u32>,
    pub rejected_detections: Vec<Rejection>,
    pub num_observations: usize,
    pub num_tracklets: usize,
    /// Image-based proposals after merging and inclusion removal, before NMS.
    pub image_proposals: Vec<Proposal>,
    pub merge_trace: Option<MergeTrace>,
    pub proposals: Vec<FinalProposal>,
    pub views: Vec<ViewSelection>,
    pub classification: Option<Classification>,
    pub timings: Vec<StageTiming>,
}

impl PipelineOutput {
    /// Labeled predictions for evaluation (confidence as emitted).
    pub fn eval_predictions(&self) -> Vec<EvalPrediction> {
        let Some(cls) = &self.classification else {
            return Vec::new();
        };
        cls.predictions
            .iter()
            .enumerate()
            .map(|(i, p)| EvalPrediction {
                id: i as u32,
                mask: self.proposals[p.proposal].proposal.mask.clone(),
                class_id: p.class as u32,
                confidence: p.confidence,
            })
            .collect()
    }

    /// Every final proposal as a class-0 prediction with confidence 1.
    pub fn agnostic_predictions(&self) -> Vec<EvalPrediction> {
        self.proposals
            .iter()
            .map(|p| EvalPrediction {
                id: p.proposal.id,
                mask: p.proposal.mask.clone(),
                class_id: 0,
                confidence: 1.0,
            })
            .collect()
    }
}

struct FrameStage {
    visibility: FrameVisibility,
    observations: Vec<Observation>,
    rejected: Vec<Rejection>,
}

pub fn run_pipeline(bundle: &SceneBundle, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let cfg = config.resolved(!bundle.point_cloud_proposals.is_empty());
    let mode = cfg.mode.expect("resolved mode");
    if mode.uses_point_cloud() && bundle.point_cloud_proposals.is_empty() {
        return Err(Error::Config(format!(
            "mode {mode:?} needs point-cloud proposals but the bundle has none"
        )));
    }
    let mut clock = Stopwatch::default();
    let partition = &bundle.partition;
    let stride = cfg.frame_stride;
    let used: Vec<usize> = (0..bundle.frames.len()).step_by(stride).collect();

    let frames: Vec<FrameStage> = clock.time("projection+lifting", || {
        used.par_iter()
            .map(|&f| -> Result<FrameStage> {
                let frame = &bundle.frames[f];
                let projections = project_points(&bundle.cloud, frame, cfg.depth_tolerance);
                let visibility = FrameVisibility {
                    frame_id: frame.frame_id,
                    visible: visible_points(&projections),
                };
                if !mode.uses_images() {
                    return Ok(FrameStage {
                        visibility,
                        observations: Vec::new(),
                        rejected: Vec::new(),
                    });
                }
                let (instances, report) = bundle.detections[f].decode();
                let instances = if cfg.overlap_removal_enabled {
                    remove_overlaps(&instances)
                } else {
                    instances
                };
                let lifter = FrameLifter::new(frame.frame_id, &projections, partition, cfg.tau_img)?;
                let observations = instances
                    .iter()
                    .map(|inst| lifter.lift(inst, cfg.tau_inst))
                    .filter(|o| !o.support.is_empty())
                    .collect();
                Ok(FrameStage {
                    visibility,
                    observations,
                    rejected: report.rejected,
                })
            })
            .collect::<Result<_>>()
    })?;

    let frames_used = frames.iter().map(|f| f.visibility.frame_id).collect();
    let num_observations = frames.iter().map(|f| f.observations.len()).sum();
    let rejected_detections = frames.iter().flat_map(|f| f.rejected.clone()).collect();
    let visibility: Vec<FrameVisibility> = frames.iter().map(|f| f.visibility.clone()).collect();
    let per_frame: Vec<Vec<Observation>> = frames.into_iter().map(|f| f.observations).collect();

    let tracklets = clock.time("tracking", || {
        run_tracking(&per_frame, cfg.tau_tracking, cfg.match_mode)
    });
    let num_tracklets = tracklets.len();

    let tau_ref = cfg.effective_tau_ref();
    let (image_proposals, merge_trace) = clock.time("merging", || {
        let pairs: Vec<_> = tracklets
            .into_iter()
            .filter_map(|t| {
                let p = tracklet_to_proposal(&t, partition);
                let p = match tau_ref {
                    Some(tau) => refine_proposal(&p, &t, tau, partition)?,
                    None => p,
                };
                Some((p, t))
            })
            .collect();
        if cfg.merge_enabled {
            let outcome = merge_loop(pairs, cfg.tau_merge, tau_ref, partition);
            let props: Vec<Proposal> = outcome.pairs.into_iter().map(|(p, _)| p).collect();
            (inclusion_removal(&props, cfg.tau_incl), Some(outcome.trace))
        } else {
            (pairs.into_iter().map(|(p, _)| p).collect(), None)
        }
    });

    let proposals: Vec<FinalProposal> = clock.time("nms", || {
        let pc: Vec<Proposal> = if mode.uses_point_cloud() {
            bundle
                .point_cloud_proposals
                .iter()
                .enumerate()
                .map(|(i, m)| Proposal::from_mask(i as u32, ProposalSource::PointCloud, m.clone()))
                .collect()
        } else {
            Vec::new()
        };
        combine_and_nms(&image_proposals, &pc, cfg.nms_iou)
            .into_iter()
            .enumerate()
            .map(|(i, p)| FinalProposal {
                origin_id: p.id,
                proposal: Proposal { id: i as u32, ..p },
            })
            .collect()
    });

    let views: Vec<ViewSelection> = clock.time("view-selection", || {
        proposals
            .par_iter()
            .map(|p| select_views(&p.proposal, &visibility, cfg.top_views))
            .collect()
    });

    let classification = match (&bundle.embeddings, &bundle.text) {
        (Some(emb), Some(text)) => Some(clock.time("classification", || {
            classify(&cfg, emb.provider().as_ref(), &text.classes, &text.vectors, &proposals, &views, &visibility)
        })?),
        _ => None,
    };

    Ok(PipelineOutput {
        config: cfg,
        frames_used,
        rejected_detections,
        num_observations,
        num_tracklets,
        image_proposals,
        merge_trace,
        proposals,
        views,
        classification,
        timings: clock.0,
    })
}

fn classify(
    cfg: &PipelineConfig,
    provider: &dyn crate::classify::EmbeddingProvider<f64>,
    classes: &[String],
    text: &[Vec<f64>],
    proposals: &[FinalProposal],
    views: &[ViewSelection],
    visibility: &[FrameVisibility],
) -> Result<Classification> {
    let scales = cfg.scales();
    let features: Vec<AggregatedFeature<f64>> = proposals
        .par_iter()
        .zip(views)
        .map(|(p, sel)| aggregate_feature(&p.proposal, sel, visibility, provider, &scales))
        .collect();

    let mut rows: Vec<usize> = (0..features.len()).filter(|&i| features[i].classifiable).collect();
    let mut visual: Vec<Vec<f64>> = rows.iter().map(|&i| features[i].vector.clone()).collect();
    let mut text = text.to_vec();
    if cfg.principal_axis_correction && visual.len() >= 2 {
        let corr = principal_axis_correction(&visual, &text)?;
        let (r, v): (Vec<usize>, Vec<Vec<f64>>) = rows
            .iter()
            .zip(corr.visual)
            .zip(&corr.visual_zero)
            .filter(|(_, zero)| !**zero)
            .map(|((&r, v), _)| (r, v))
            .unzip();
        rows = r;
        visual = v;
        text = corr.text;
    }

    let sim = similarity(&visual, &text)?;
    let tau = if cfg.sms_enabled { cfg.tau_sms } else { f64::NEG_INFINITY };
    let (kept_rows, sms) = sms_filter(&sim, tau);
    let top_k = cfg.top_k.unwrap_or(300);
    let predictions = assign_labels(&sim, &kept_rows, cfg.protocol, top_k)
        .into_iter()
        .map(|p| Prediction {
            proposal: rows[p.proposal],
            ..p
        })
        .collect();
    Ok(Classification {
        classes: classes.to_vec(),
        features,
        kept: kept_rows.iter().map(|&r| rows[r]).collect(),
        rows,
        similarity: sim,
        sms,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub id: u32,
    pub source: ProposalSource,
    pub origin_id: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tracklet: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub superpoints: Option<Vec<u32>>,
    pub num_points: usize,
    pub point_runs: Vec<(u32, u32)>,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalsFile {
    pub num_points: usize,
    pub proposals: Vec<ProposalRecord>,
}

impl ProposalsFile {
    pub fn masks(&self) -> Result<Vec<PointMask>> {
        self.proposals
            .iter()
            .map(|p| {
                point_mask_from_runs(self.num_points, &p.point_runs)
                    .map_err(|e| Error::Invalid(format!("proposal {}: {e}", p.id)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub proposal: usize,
    pub class_id: usize,
    pub class: String,
    pub confidence: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub protocol: Protocol,
    pub classes: Vec<String>,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmsFile {
    pub enabled: bool,
    pub tau_sms: f64,
    pub rows: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub best_query: Vec<usize>,
    pub score: Vec<Option<f64>>,
    pub kept: Vec<usize>,
    pub unclassifiable: Vec<usize>,
    pub skipped_views: Vec<SkippedView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: ProposalMode,
    pub frames_used: Vec<u32>,
    pub rejected_detections: Vec<Rejection>,
    pub num_observations: usize,
    pub num_tracklets: usize,
    pub num_image_proposals: usize,
    pub num_pointcloud_proposals: usize,
    pub num_proposals: usize,
    pub num_predictions: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merge_trace: Option<MergeTrace>,
}

pub const PROPOSALS_FILE: &str = "proposals.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const SMS_FILE: &str = "sms.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VIEWS_FILE: &str = "views.json";
pub const CONFIG_FILE: &str = "config.toml";
/// Wall-clock timings; the only output that varies between identical runs.
pub const TIMINGS_FILE: &str = "timings.json";

pub fn proposals_file(bundle: &SceneBundle, out: &PipelineOutput) -> ProposalsFile {
    ProposalsFile {
        num_points: bundle.num_points(),
        proposals: out
            .proposals
            .iter()
            .map(|fp| {
                let p = &fp.proposal;
                ProposalRecord {
                    id: p.id,
                    source: p.source,
                    origin_id: fp.origin_id,
                    tracklet: p.tracklet,
                    superpoints: p.superpoints.as_ref().map(|s| s.iter().map(|x| x as u32).collect()),
                    num_points: p.num_points(),
                    point_runs: p.mask.runs(),
                    key: mask_key(&p.mask),
                }
            })
            .collect(),
    }
}

/// Writes every run artifact into `dir` (created if needed).
pub fn write_outputs(dir: &Path, bundle: &SceneBundle, out: &PipelineOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: Vec<u8>| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };

    write(PROPOSALS_FILE, to_json_bytes(&proposals_file(bundle, out)))?;
    write(VIEWS_FILE, to_json_bytes(&out.views))?;
    write(CONFIG_FILE, out.config.to_toml_string().into_bytes())?;
    write(TIMINGS_FILE, to_json_bytes(&out.timings))?;

    if let Some(cls) = &out.classification {
        let predictions = PredictionsFile {
            protocol: out.config.protocol,
            classes: cls.classes.clone(),
            predictions: cls
                .predictions
                .iter()
                .map(|p| PredictionRecord {
                    proposal: p.proposal,
                    class_id: p.class,
                    class: cls.classes[p.class].clone(),
                    confidence: p.confidence,
                    similarity: p.similarity,
                })
                .collect(),
        };
        write(PREDICTIONS_FILE, to_json_bytes(&predictions))?;
        let sms = SmsFile {
            enabled: out.config.sms_enabled,
            tau_sms: out.config.tau_sms,
            rows: cls.rows.clone(),
            mean: cls.sms.mean.clone(),
            std: cls.sms.std.clone(),
            best_query: cls.sms.best_query.clone(),
            score: cls.sms.score.clone(),
            kept: cls.kept.clone(),
            unclassifiable: (0..cls.features.len()).filter(|i| !cls.rows.contains(i)).collect(),
            skipped_views: cls.features.iter().flat_map(|f| f.skipped.clone()).collect(),
        };
        write(SMS_FILE, to_json_bytes(&sms))?;
    }

    let summary = RunSummary {
        mode: out.config.mode.expect("resolved mode"),
        frames_used: out.frames_used.clone(),
        rejected_detections: out.rejected_detections.clone(),
        num_observations: out.num_observations,
        num_tracklets: out.num_tracklets,
        num_image_proposals: out.image_proposals.len(),
        num_pointcloud_proposals: out
            .proposals
            .iter()
            .filter(|p| p.proposal.source == ProposalSource::PointCloud)
            .count(),
        num_proposals: out.proposals.len(),
        num_predictions: out.classification.as_ref().map_or(0, |c| c.predictions.len()),
        merge_trace: out.merge_trace.clone(),
    };
    write(SUMMARY_FILE, to_json_bytes(&summary))?;
    Ok(())
}
