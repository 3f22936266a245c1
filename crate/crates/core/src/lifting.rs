//! Lifting of 2D instance masks onto superpoints.
//!
//! A superpoint is visible in a frame when the fraction of its points that
//! pass the depth test is strictly above `tau_img`. It supports an instance
//! when, among its visible points, the fraction whose pixel lies inside the
//! instance mask is strictly above `tau_inst`.

use std::sync::Arc;

use crate::error::Result;
use crate::grounding::Instance2D;
use crate::mask::RunMask;
use crate::scene::{superpoint_visibility, PixelProjection, SuperpointPartition, VisibilityCount};
use crate::sets::SuperpointSet;

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedInstance {
    pub frame_id: u32,
    pub instance_index: u32,
    pub support: SuperpointSet,
    /// Superpoints visible in the instance's frame, shared by all instances of that frame.
    pub frame_visible: Arc<SuperpointSet>,
}

pub fn frame_visible_set(stats: &[VisibilityCount], tau_img: f64) -> SuperpointSet {
    SuperpointSet::from_indices(
        stats.len(),
        stats
            .iter()
            .enumerate()
            .filter(|(_, c)| c.total > 0 && c.visible as f64 / c.total as f64 > tau_img)
            .map(|(s, _)| s),
    )
}

pub fn instance_support_set<T>(
    mask: &RunMask,
    projections: &[PixelProjection<T>],
    partition: &SuperpointPartition,
    frame_visible: &SuperpointSet,
    tau_inst: f64,
) -> SuperpointSet {
    let mut visible = vec![0u32; partition.num_superpoints()];
    let mut inside = vec![0u32; partition.num_superpoints()];
    for proj in projections.iter().filter(|p| p.visible) {
        let s = partition.label(proj.point_index as usize);
        visible[s] += 1;
        if proj.pixel.is_some_and(|px| mask.contains(px as usize)) {
            inside[s] += 1;
        }
    }
    support_from_counts(&inside, &visible, frame_visible, tau_inst)
}

fn support_from_counts(
    inside: &[u32],
    visible: &[u32],
    frame_visible: &SuperpointSet,
    tau_inst: f64,
) -> SuperpointSet {
    SuperpointSet::from_indices(
        visible.len(),
        frame_visible
            .iter()
            .filter(|&s| visible[s] > 0 && inside[s] as f64 / visible[s] as f64 > tau_inst),
    )
}

/// Per-frame lifting state: the frame-visible set plus the visible points
/// and their pixels, so each instance costs one pass over visible points.
#[derive(Debug, Clone)]
pub struct FrameLifter<'a> {
    frame_id: u32,
    partition: &'a SuperpointPartition,
    visible_points: Vec<(u32, u32)>,
    visible_per_superpoint: Vec<u32>,
    frame_visible: Arc<SuperpointSet>,
}

impl<'a> FrameLifter<'a> {
    pub fn new<T>(
        frame_id: u32,
        projections: &[PixelProjection<T>],
        partition: &'a SuperpointPartition,
        tau_img: f64,
    ) -> Result<Self> {
        let stats = superpoint_visibility(projections, partition)?;
        let frame_visible = Arc::new(frame_visible_set(&stats, tau_img));
        let visible_points = projections
            .iter()
            .filter_map(|p| p.pixel.filter(|_| p.visible).map(|px| (p.point_index, px)))
            .collect();
        Ok(Self {
            frame_id,
            partition,
            visible_points,
            visible_per_superpoint: stats.iter().map(|c| c.visible).collect(),
            frame_visible,
        })
    }

    pub fn frame_visible(&self) -> &Arc<SuperpointSet> {
        &self.frame_visible
    }

    pub fn lift(&self, instance: &Instance2D, tau_inst: f64) -> LiftedInstance {
        let pixels = instance.mask.to_pixels();
        let mut inside = vec![0u32; self.partition.num_superpoints()];
        for &(point, px) in &self.visible_points {
            if pixels.contains(px as usize) {
                inside[self.partition.label(point as usize)] += 1;
            }
        }
        LiftedInstance {
            frame_id: self.frame_id,
            instance_index: instance.index,
            support: support_from_counts(
                &inside,
                &self.visible_per_superpoint,
                &self.frame_visible,
                tau_inst,
            ),
            frame_visible: Arc::clone(&self.frame_visible),
        }
    }
}
