//! Multi-view consensus refinement, iterative proposal merging and
//! one-pass inclusion removal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::SuperpointPartition;
use crate::sets::{PointMask, SuperpointSet};
use crate::tracking::Tracklet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalSource {
    Image,
    PointCloud,
}

/// A 3D instance proposal. Image-based proposals carry their superpoint set
/// and `mask` is its point expansion; point-cloud proposals carry only a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub id: u32,
    pub source: ProposalSource,
    pub superpoints: Option<SuperpointSet>,
    pub mask: PointMask,
    pub tracklet: Option<u32>,
}

impl Proposal {
    pub fn from_superpoints(
        id: u32,
        source: ProposalSource,
        superpoints: SuperpointSet,
        partition: &SuperpointPartition,
        tracklet: Option<u32>,
    ) -> Self {
        let mask = partition.expand(&superpoints);
        Self {
            id,
            source,
            superpoints: Some(superpoints),
            mask,
            tracklet,
        }
    }

    pub fn from_mask(id: u32, source: ProposalSource, mask: PointMask) -> Self {
        Self {
            id,
            source,
            superpoints: None,
            mask,
            tracklet: None,
        }
    }

    pub fn num_points(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

pub fn point_iou(a: &Proposal, b: &Proposal) -> f64 {
    a.mask.iou(&b.mask)
}

/// Drops superpoints whose consensus rate in `tracklet` is below `tau_ref`.
/// Superpoints never seen by the tracklet are kept. Returns `None` when the
/// refined proposal would be empty. Proposals without superpoints are
/// returned unchanged.
pub fn refine_proposal(
    proposal: &Proposal,
    tracklet: &Tracklet,
    tau_ref: f64,
    partition: &SuperpointPartition,
) -> Option<Proposal> {
    let Some(sp) = &proposal.superpoints else {
        return Some(proposal.clone());
    };
    let kept = refine_superpoints(sp, tracklet, tau_ref);
    if kept.is_empty() {
        return None;
    }
    Some(Proposal::from_superpoints(
        proposal.id,
        proposal.source,
        kept,
        partition,
        proposal.tracklet,
    ))
}

fn refine_superpoints(sp: &SuperpointSet, tracklet: &Tracklet, tau_ref: f64) -> SuperpointSet {
    SuperpointSet::from_indices(
        sp.width(),
        sp.iter()
            .filter(|&s| tracklet.consensus_rate(s).is_none_or(|rate| rate >= tau_ref)),
    )
}

/// Pairwise point IoU, stored for `r < c` only.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeCostMatrix {
    k: usize,
    values: Vec<f64>,
}

impl MergeCostMatrix {
    pub fn compute(proposals: &[Proposal]) -> Self {
        let k = proposals.len();
        let values = (0..k)
            .into_par_iter()
            .flat_map_iter(|r| {
                (0..k).map(move |c| {
                    if c > r {
                        point_iou(&proposals[r], &proposals[c])
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self { k, values }
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.k + c]
    }

    pub fn any_above(&self, tau: f64) -> bool {
        self.values.iter().any(|&v| v > tau)
    }
}

/// Full matrix of inclusion rates `|m_r ∩ m_c| / |m_r|`.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionCostMatrix {
    k: usize,
    values: Vec<f64>,
}

impl InclusionCostMatrix {
    pub fn compute(proposals: &[Proposal]) -> Self {
        let k = proposals.len();
        let values = (0..k)
            .into_par_iter()
            .flat_map_iter(|r| {
                (0..k).map(move |c| {
                    if r == c {
                        0.0
                    } else {
                        proposals[r].mask.inclusion_in(&proposals[c].mask)
                    }
                })
            })
            .collect();
        Self { k, values }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.k + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    /// Outer iteration (0-based) in which the merge happened.
    pub iteration: usize,
    /// Id of the surviving (row) proposal.
    pub into: u32,
    /// Id of the absorbed (column) proposal.
    pub merged: u32,
    /// The refined union came out empty; the row proposal is dropped at compaction.
    pub emptied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeTrace {
    /// Executions of the outer loop body.
    pub outer_iterations: usize,
    /// Cost matrices computed, including the initial one.
    pub cost_evaluations: usize,
    pub events: Vec<MergeEvent>,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub pairs: Vec<(Proposal, Tracklet)>,
    pub trace: MergeTrace,
}

/// Iterative merge with per-merge refinement.
///
/// Each outer iteration computes the strictly upper-triangular IoU matrix
/// once, then scans it row-major with a visited map: an unvisited row `r`
/// absorbs every unvisited column `c` with IoU above `tau_merge`, unioning
/// proposals and tracklets and refining the union immediately. Absorbed
/// proposals are removed before the next iteration. The loop ends when no
/// pair exceeds `tau_merge`. `tau_ref = None` disables refinement.
pub fn merge_loop(
    pairs: Vec<(Proposal, Tracklet)>,
    tau_merge: f64,
    tau_ref: Option<f64>,
    partition: &SuperpointPartition,
) -> MergeOutcome {
    let (mut proposals, mut tracklets): (Vec<Proposal>, Vec<Option<Tracklet>>) =
        pairs.into_iter().map(|(p, t)| (p, Some(t))).unzip();
    let mut trace = MergeTrace::default();

    let mut cost = MergeCostMatrix::compute(&proposals);
    trace.cost_evaluations += 1;
    while cost.any_above(tau_merge) {
        let k = proposals.len();
        let mut valid = vec![true; k];
        let mut visited = vec![false; k];
        for r in 0..k {
            if visited[r] {
                continue;
            }
            for c in 0..k {
                if r == c || visited[c] || cost.get(r, c) <= tau_merge {
                    continue;
                }
                let absorbed = tracklets[c].take().expect("unvisited column has a tracklet");
                let row_tracklet = tracklets[r].as_mut().expect("unvisited row has a tracklet");
                row_tracklet.absorb(absorbed);

                let mut union = proposals[r]
                    .superpoints
                    .clone()
                    .expect("image-based proposal");
                union.union_with(proposals[c].superpoints.as_ref().expect("image-based proposal"));
                if let Some(tau) = tau_ref {
                    union = refine_superpoints(&union, row_tracklet, tau);
                }
                let emptied = union.is_empty();
                trace.events.push(MergeEvent {
                    iteration: trace.outer_iterations,
                    into: proposals[r].id,
                    merged: proposals[c].id,
                    emptied,
                });
                proposals[r] = Proposal::from_superpoints(
                    proposals[r].id,
                    proposals[r].source,
                    union,
                    partition,
                    proposals[r].tracklet,
                );
                valid[c] = false;
                visited[c] = true;
            }
            visited[r] = true;
        }
        trace.outer_iterations += 1;

        let (p, t): (Vec<_>, Vec<_>) = proposals
            .into_iter()
            .zip(tracklets)
            .zip(valid)
            .filter(|((p, _), keep)| *keep && !p.is_empty())
            .map(|(pt, _)| pt)
            .unzip();
        proposals = p;
        tracklets = t;
        cost = MergeCostMatrix::compute(&proposals);
        trace.cost_evaluations += 1;
    }

    let pairs = proposals
        .into_iter()
        .zip(tracklets)
        .map(|(p, t)| (p, t.expect("surviving proposal keeps its tracklet")))
        .collect();
    MergeOutcome { pairs, trace }
}

/// Removes every proposal whose inclusion rate in some other proposal is at
/// least `tau_incl`, judged on the input set. When two proposals include
/// each other at that level, only the one with the higher id is removed.
pub fn inclusion_removal(proposals: &[Proposal], tau_incl: f64) -> Vec<Proposal> {
    let incl = InclusionCostMatrix::compute(proposals);
    let k = proposals.len();
    (0..k)
        .filter(|&r| {
            !(0..k).any(|c| {
                if c == r || incl.get(r, c) < tau_incl {
                    return false;
                }
                let mutual = incl.get(c, r) >= tau_incl;
                !mutual || proposals[c].id < proposals[r].id
            })
        })
        .map(|r| proposals[r].clone())
        .collect()
}
