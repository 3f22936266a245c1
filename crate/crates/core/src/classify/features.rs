use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::num::Real;
use crate::refine::Proposal;
use crate::sets::PointMask;

/// One crop scale: level `l` expands the projected box by `l × expansion`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleLevel {
    pub level: u32,
    pub expansion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub levels: u32,
    pub expansion: f64,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            expansion: 0.2,
        }
    }
}

impl ScaleSpec {
    pub fn levels(&self) -> impl Iterator<Item = ScaleLevel> + '_ {
        (0..self.levels).map(|level| ScaleLevel {
            level,
            expansion: level as f64 * self.expansion,
        })
    }
}

/// Visible points of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVisibility {
    pub frame_id: u32,
    pub visible: PointMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub frame_id: u32,
    /// Fraction of the proposal's points visible in the frame.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSelection {
    pub proposal_id: u32,
    pub views: Vec<View>,
}

/// Picks the `top_v` frames with the highest visibility ratio (ties by frame
/// id). Frames where no point of the proposal is visible are never selected.
pub fn select_views(proposal: &Proposal, frames: &[FrameVisibility], top_v: usize) -> ViewSelection {
    let total = proposal.num_points();
    let mut views: Vec<View> = if total == 0 {
        Vec::new()
    } else {
        frames
            .iter()
            .filter_map(|f| {
                let seen = proposal.mask.intersection_len(&f.visible);
                (seen > 0).then(|| View {
                    frame_id: f.frame_id,
                    alpha: seen as f64 / total as f64,
                })
            })
            .collect()
    };
    views.sort_by(|a, b| b.alpha.total_cmp(&a.alpha).then(a.frame_id.cmp(&b.frame_id)));
    views.truncate(top_v);
    ViewSelection {
        proposal_id: proposal.id,
        views,
    }
}

/// Everything a provider needs to embed one proposal in one view at one scale.
#[derive(Debug, Clone, Copy)]
pub struct ViewRequest<'a> {
    pub proposal: &'a Proposal,
    pub frame_id: u32,
    /// Points of the proposal visible in this frame.
    pub footprint: &'a PointMask,
    pub scale: ScaleLevel,
}

/// Source of unit-norm visual embeddings.
pub trait EmbeddingProvider<T>: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, request: &ViewRequest<'_>) -> Result<Vec<T>, Error>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedView {
    pub proposal_id: u32,
    pub frame_id: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeature<T> {
    /// L2-normalized weighted sum, or all zeros when unclassifiable.
    pub vector: Vec<T>,
    pub classifiable: bool,
    pub skipped: Vec<SkippedView>,
}

/// Σ_i α_i · f_i over `(feature, weight)` pairs, summed in order.
pub fn weighted_sum<T: Real>(dim: usize, terms: &[(&[T], T)]) -> Vec<T> {
    let mut acc = vec![T::zero(); dim];
    for (f, alpha) in terms {
        for (a, x) in acc.iter_mut().zip(f.iter()) {
            *a = *a + *x * *alpha;
        }
    }
    acc
}

pub(crate) fn l2_normalized<T: Real>(v: &[T]) -> Option<Vec<T>> {
    let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
    (norm > T::zero() && norm.is_finite()).then(|| v.iter().map(|x| *x / norm).collect())
}

/// Visibility-weighted multi-view, multi-scale feature of one proposal.
///
/// Every selected view contributes `α_v · Σ_l f_v^l`; a view is skipped (and
/// reported) when the provider fails or returns a malformed vector at any
/// scale. The sum is L2-normalized. An empty selection, or a zero sum, yields
/// a zero vector flagged unclassifiable.
pub fn aggregate_feature<T: Real, P: EmbeddingProvider<T> + ?Sized>(
    proposal: &Proposal,
    selection: &ViewSelection,
    frames: &[FrameVisibility],
    provider: &P,
    scales: &ScaleSpec,
) -> AggregatedFeature<T> {
    let dim = provider.dim();
    let per_view: Vec<Result<(Vec<Vec<T>>, T), SkippedView>> = selection
        .views
        .par_iter()
        .map(|view| {
            let skip = |reason: String| SkippedView {
                proposal_id: proposal.id,
                frame_id: view.frame_id,
                reason,
            };
            let frame = frames
                .iter()
                .find(|f| f.frame_id == view.frame_id)
                .ok_or_else(|| skip("frame not available".into()))?;
            let footprint = proposal.mask.intersection(&frame.visible);
            let mut feats = Vec::with_capacity(scales.levels as usize);
            for scale in scales.levels() {
                let request = ViewRequest {
                    proposal,
                    frame_id: view.frame_id,
                    footprint: &footprint,
                    scale,
                };
                let f = provider.embed(&request).map_err(|e| skip(e.to_string()))?;
                if f.len() != dim || f.iter().any(|x| !x.is_finite()) {
                    return Err(skip(format!(
                        "malformed embedding at scale {} (len {}, expected {dim})",
                        scale.level,
                        f.len()
                    )));
                }
                feats.push(f);
            }
            Ok((feats, T::lit(view.alpha)))
        })
        .collect();

    let mut terms: Vec<(&[T], T)> = Vec::new();
    let mut skipped = Vec::new();
    for r in &per_view {
        match r {
            Ok((feats, alpha)) => terms.extend(feats.iter().map(|f| (f.as_slice(), *alpha))),
            Err(s) => {
                warn!(
                    "proposal {}: skipping view {}: {}",
                    s.proposal_id, s.frame_id, s.reason
                );
                skipped.push(s.clone());
            }
        }
    }

    match l2_normalized(&weighted_sum(dim, &terms)) {
        Some(vector) => AggregatedFeature {
            vector,
            classifiable: true,
            skipped,
        },
        None => AggregatedFeature {
            vector: vec![T::zero(); dim],
            classifiable: false,
            skipped,
        },
    }
}
