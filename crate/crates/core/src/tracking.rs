//! Sequential association of lifted instances into tracklets.
//!
//! Each new observation is compared against tracklets built from strictly
//! earlier frames. In frame-wise mode the score of a tracklet is the best
//! superpoint IoU against any single tracked observation; in tracklet-wise
//! mode the tracklet is summarized by the union of its supports and the union
//! of its frame-visible sets. The observation joins the best-scoring tracklet
//! when that score is strictly above `tau_tracking`, otherwise it starts a
//! new tracklet.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifting::LiftedInstance;
use crate::refine::{Proposal, ProposalSource};
use crate::scene::SuperpointPartition;
use crate::sets::SuperpointSet;

pub type Observation = LiftedInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    #[default]
    FrameWise,
    TrackletWise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u32,
    observations: Vec<Observation>,
    support_count: Vec<u32>,
    visible_count: Vec<u32>,
    union_support: SuperpointSet,
    union_visible: SuperpointSet,
}

impl Tracklet {
    pub fn new(id: u32, first: Observation) -> Self {
        Self::from_observations(id, vec![first])
    }

    /// Builds a tracklet and recomputes all counters from `observations`,
    /// which are stably reordered by frame id.
    pub fn from_observations(id: u32, mut observations: Vec<Observation>) -> Self {
        assert!(!observations.is_empty(), "tracklet needs an observation");
        observations.sort_by_key(|o| o.frame_id);
        let width = observations[0].support.width();
        let mut t = Self {
            id,
            observations: Vec::with_capacity(observations.len()),
            support_count: vec![0; width],
            visible_count: vec![0; width],
            union_support: SuperpointSet::empty(width),
            union_visible: SuperpointSet::empty(width),
        };
        for obs in observations {
            t.account(&obs);
            t.observations.push(obs);
        }
        t
    }

    fn account(&mut self, obs: &Observation) {
        for s in obs.support.iter() {
            self.support_count[s] += 1;
        }
        for s in obs.frame_visible.iter() {
            self.visible_count[s] += 1;
        }
        self.union_support.union_with(&obs.support);
        self.union_visible.union_with(&obs.frame_visible);
    }

    pub fn push(&mut self, obs: Observation) {
        self.account(&obs);
        let at = self.observations.partition_point(|o| o.frame_id <= obs.frame_id);
        self.observations.insert(at, obs);
    }

    /// Concatenates `other`'s observations into `self` and recomputes counters.
    pub fn absorb(&mut self, other: Tracklet) {
        let mut all = std::mem::take(&mut self.observations);
        all.extend(other.observations);
        *self = Self::from_observations(self.id, all);
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn support_count(&self) -> &[u32] {
        &self.support_count
    }

    pub fn visible_count(&self) -> &[u32] {
        &self.visible_count
    }

    pub fn union_support(&self) -> &SuperpointSet {
        &self.union_support
    }

    pub fn union_visible(&self) -> &SuperpointSet {
        &self.union_visible
    }

    /// Fraction of observations seeing `s` whose mask also supports it.
    pub fn consensus_rate(&self, s: usize) -> Option<f64> {
        let vis = self.visible_count[s];
        (vis > 0).then(|| self.support_count[s] as f64 / vis as f64)
    }
}

/// Superpoint IoU restricted to superpoints visible in both frames:
/// `|a ∩ b| / |(a ∪ b) ∩ vis_a ∩ vis_b|`, zero when the denominator is empty.
pub fn siou(
    a: &SuperpointSet,
    b: &SuperpointSet,
    vis_a: &SuperpointSet,
    vis_b: &SuperpointSet,
) -> Result<f64> {
    let w = a.width();
    if [b.width(), vis_a.width(), vis_b.width()].iter().any(|&x| x != w) {
        return Err(Error::structural("sIoU operands have different widths"));
    }
    Ok(siou_unchecked(a, b, vis_a, vis_b))
}

fn siou_unchecked(
    a: &SuperpointSet,
    b: &SuperpointSet,
    vis_a: &SuperpointSet,
    vis_b: &SuperpointSet,
) -> f64 {
    let mut region = a.union(b);
    region.intersect_with(vis_a);
    region.intersect_with(vis_b);
    let denom = region.len();
    if denom == 0 {
        return 0.0;
    }
    a.intersection_len(b) as f64 / denom as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchDecision {
    /// Tracklet joined, or `None` for a new tracklet.
    pub tracklet: Option<u32>,
    pub best_siou: f64,
    /// Index of the best-matching observation inside its tracklet (frame-wise mode).
    pub best_observation: Option<usize>,
}

fn decide(
    candidates: impl Iterator<Item = (u32, Option<usize>, f64)>,
    tau_tracking: f64,
) -> MatchDecision {
    let mut best: Option<(u32, Option<usize>, f64)> = None;
    for (id, obs, score) in candidates {
        let better = match best {
            None => true,
            Some((bid, bobs, bscore)) => {
                score > bscore || (score == bscore && (id, obs) < (bid, bobs))
            }
        };
        if better {
            best = Some((id, obs, score));
        }
    }
    match best {
        Some((id, obs, score)) if score > tau_tracking => MatchDecision {
            tracklet: Some(id),
            best_siou: score,
            best_observation: obs,
        },
        Some((_, _, score)) => MatchDecision {
            tracklet: None,
            best_siou: score,
            best_observation: None,
        },
        None => MatchDecision {
            tracklet: None,
            best_siou: 0.0,
            best_observation: None,
        },
    }
}

/// Frame-wise matching: the maximum sIoU against every tracked observation decides.
pub fn match_observation(obs: &Observation, tracklets: &[Tracklet], tau_tracking: f64) -> MatchDecision {
    decide(
        tracklets.iter().flat_map(|t| {
            t.observations.iter().enumerate().map(move |(j, o)| {
                let score = siou_unchecked(&obs.support, &o.support, &obs.frame_visible, &o.frame_visible);
                (t.id, Some(j), score)
            })
        }),
        tau_tracking,
    )
}

/// Tracklet-wise matching against the aggregated support of each tracklet.
pub fn match_observation_trackletwise(
    obs: &Observation,
    tracklets: &[Tracklet],
    tau_tracking: f64,
) -> MatchDecision {
    decide(
        tracklets.iter().map(|t| {
            let score = siou_unchecked(
                &obs.support,
                &t.union_support,
                &obs.frame_visible,
                &t.union_visible,
            );
            (t.id, None, score)
        }),
        tau_tracking,
    )
}

pub fn match_with_mode(
    obs: &Observation,
    tracklets: &[Tracklet],
    tau_tracking: f64,
    mode: MatchMode,
) -> MatchDecision {
    match mode {
        MatchMode::FrameWise => match_observation(obs, tracklets, tau_tracking),
        MatchMode::TrackletWise => match_observation_trackletwise(obs, tracklets, tau_tracking),
    }
}

/// Keeps every `stride`-th entry (positions 0, stride, 2·stride, ...).
pub fn downsample<T: Clone>(items: &[T], stride: usize) -> Vec<T> {
    items.iter().step_by(stride.max(1)).cloned().collect()
}

/// Runs tracking over frames given in ascending frame order, each a list of
/// that frame's lifted instances. All observations of a frame are matched
/// against the tracklets as they stood before the frame, then applied in
/// instance order; new tracklets get consecutive ids.
pub fn run_tracking(
    frames: &[Vec<Observation>],
    tau_tracking: f64,
    mode: MatchMode,
) -> Vec<Tracklet> {
    let mut tracklets: Vec<Tracklet> = Vec::new();
    for frame in frames {
        let decisions: Vec<MatchDecision> = frame
            .par_iter()
            .map(|obs| match_with_mode(obs, &tracklets, tau_tracking, mode))
            .collect();
        for (obs, decision) in frame.iter().zip(decisions) {
            match decision.tracklet {
                Some(id) => tracklets[id as usize].push(obs.clone()),
                None => {
                    let id = tracklets.len() as u32;
                    tracklets.push(Tracklet::new(id, obs.clone()));
                }
            }
        }
    }
    tracklets
}

/// Aggregates a tracklet into an image-based proposal (union of supports).
pub fn tracklet_to_proposal(t: &Tracklet, partition: &SuperpointPartition) -> Proposal {
    Proposal::from_superpoints(
        t.id,
        ProposalSource::Image,
        t.union_support.clone(),
        partition,
        Some(t.id),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn set(w: usize, xs: &[usize]) -> SuperpointSet {
        SuperpointSet::from_indices(w, xs.iter().copied())
    }

    fn obs(frame: u32, idx: u32, support: &[usize], vis: &[usize]) -> Observation {
        LiftedInstance {
            frame_id: frame,
            instance_index: idx,
            support: set(8, support),
            frame_visible: Arc::new(set(8, vis)),
        }
    }

    #[test]
    fn siou_examples() {
        let all = set(8, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let a = set(8, &[1, 2]);
        assert_eq!(siou(&a, &a, &all, &all).unwrap(), 1.0);
        assert_eq!(siou(&a, &set(8, &[3]), &all, &all).unwrap(), 0.0);
        let v = set(8, &[1, 2, 3]);
        let x = siou(&set(8, &[1, 2, 3]), &set(8, &[2, 3, 4]), &v, &all).unwrap();
        assert_eq!(x, 2.0 / 3.0);
        assert!(siou(&a, &set(9, &[1]), &all, &all).is_err());
    }

    #[test]
    fn siou_degenerate_denominators() {
        let empty = SuperpointSet::empty(8);
        let all = SuperpointSet::full(8);
        assert_eq!(siou(&empty, &empty, &all, &all).unwrap(), 0.0);
        // Nonempty sets without any co-visible superpoint.
        let a = set(8, &[1, 2]);
        assert_eq!(siou(&a, &a, &set(8, &[1, 2]), &set(8, &[5])).unwrap(), 0.0);
    }

    #[test]
    fn identical_observation_matches() {
        let t = Tracklet::new(0, obs(0, 0, &[1, 2, 3], &[0, 1, 2, 3, 4]));
        let d = match_observation(&obs(1, 0, &[1, 2, 3], &[0, 1, 2, 3, 4]), &[t], 0.3);
        assert_eq!(d.tracklet, Some(0));
        assert_eq!(d.best_siou, 1.0);
        assert_eq!(d.best_observation, Some(0));
    }

    #[test]
    fn threshold_is_strict_and_empty_list_is_new() {
        let vis: Vec<usize> = (0..8).collect();
        let t = Tracklet::new(0, obs(0, 0, &[0, 1, 2, 3, 4, 5, 6], &vis));
        let o = obs(1, 0, &[0, 1, 2], &vis);
        // sIoU is 3/7: matches at 0.3, but not at exactly 3/7.
        assert_eq!(match_observation(&o, std::slice::from_ref(&t), 0.3).tracklet, Some(0));
        assert_eq!(match_observation(&o, std::slice::from_ref(&t), 3.0 / 7.0).tracklet, None);
        let d = match_observation(&o, &[], 0.3);
        assert_eq!((d.tracklet, d.best_siou), (None, 0.0));
        assert_eq!(match_observation_trackletwise(&o, &[], 0.3).tracklet, None);
    }

    #[test]
    fn ties_prefer_lowest_tracklet_id() {
        let vis: Vec<usize> = (0..8).collect();
        let t0 = Tracklet::new(0, obs(0, 0, &[1, 2], &vis));
        let t1 = Tracklet::new(1, obs(0, 1, &[1, 2], &vis));
        let d = match_observation(&obs(1, 0, &[1, 2], &vis), &[t1, t0], 0.3);
        assert_eq!(d.tracklet, Some(0));
    }

    #[test]
    fn tracking_one_frame_and_repeated_frame() {
        let vis: Vec<usize> = (0..8).collect();
        let frame0 = vec![obs(0, 0, &[0, 1], &vis), obs(0, 1, &[2, 3], &vis), obs(0, 2, &[5], &vis)];
        let tracks = run_tracking(std::slice::from_ref(&frame0), 0.3, MatchMode::FrameWise);
        assert_eq!(tracks.len(), 3);
        let frame1: Vec<_> = frame0.iter().map(|o| Observation { frame_id: 1, ..o.clone() }).collect();
        let tracks = run_tracking(&[frame0, frame1], 0.3, MatchMode::FrameWise);
        assert_eq!(tracks.len(), 3);
        assert!(tracks.iter().all(|t| t.observations().len() == 2));
        assert!(run_tracking(&[], 0.3, MatchMode::FrameWise).is_empty());
    }

    #[test]
    fn same_frame_observations_do_not_match_each_other() {
        let vis: Vec<usize> = (0..8).collect();
        let frame0 = vec![obs(0, 0, &[0, 1], &vis), obs(0, 1, &[0, 1], &vis)];
        assert_eq!(run_tracking(&[frame0], 0.3, MatchMode::FrameWise).len(), 2);
    }

    #[test]
    fn counters_track_support_and_visibility() {
        let mut t = Tracklet::new(0, obs(2, 0, &[1, 2], &[1, 2, 3]));
        t.push(obs(1, 0, &[2], &[2, 3]));
        assert_eq!(t.observations()[0].frame_id, 1, "kept in frame order");
        assert_eq!(t.support_count()[2], 2);
        assert_eq!(t.visible_count()[3], 2);
        assert_eq!(t.consensus_rate(3), Some(0.0));
        assert_eq!(t.consensus_rate(1), Some(1.0));
        assert_eq!(t.consensus_rate(7), None);
        for s in 0..8 {
            assert!(t.support_count()[s] <= t.visible_count()[s]);
            assert!(t.visible_count()[s] as usize <= t.observations().len());
        }
    }

    #[test]
    fn proposal_is_union_of_supports() {
        let part = SuperpointPartition::singleton(8);
        let mut t = Tracklet::new(4, obs(0, 0, &[1, 2], &[1, 2, 3]));
        t.push(obs(1, 0, &[2, 3], &[1, 2, 3]));
        let p = tracklet_to_proposal(&t, &part);
        assert_eq!(p.superpoints.as_ref().unwrap().to_vec(), vec![1, 2, 3]);
        assert_eq!(p.source, ProposalSource::Image);
        assert_eq!(p.tracklet, Some(4));
    }

    #[test]
    fn downsample_keeps_every_stride() {
        assert_eq!(downsample(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10], 5), vec![0, 5, 10]);
        assert_eq!(downsample(&[0, 1, 2], 1), vec![0, 1, 2]);
    }
}
