//! Geometry domain types and the projection / depth-test visibility primitive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::sets::{PointMask, SuperpointSet};

/// Default absolute depth-test tolerance in meters.
pub const DEFAULT_DEPTH_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    positions: Vec<[T; 3]>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(positions: Vec<[T; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Invalid("point cloud is empty".into()));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::Invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[T; 3]] {
        &self.positions
    }
}

/// Assignment of every point to exactly one superpoint id in `0..S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointPartition {
    labels: Vec<u32>,
    members: Vec<Vec<u32>>,
}

impl SuperpointPartition {
    pub fn new(labels: Vec<u32>, count: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); count];
        for (i, &label) in labels.iter().enumerate() {
            let slot = members.get_mut(label as usize).ok_or_else(|| {
                Error::Invalid(format!("point {i} has superpoint id {label} >= {count}"))
            })?;
            slot.push(i as u32);
        }
        if let Some(s) = members.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(format!("superpoint {s} has no member points")));
        }
        Ok(Self { labels, members })
    }

    /// One superpoint per point, with id equal to the point index.
    pub fn singleton(num_points: usize) -> Self {
        Self {
            labels: (0..num_points as u32).collect(),
            members: (0..num_points as u32).map(|i| vec![i]).collect(),
        }
    }

    pub fn num_points(&self) -> usize {
        self.labels.len()
    }

    pub fn num_superpoints(&self) -> usize {
        self.members.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, point: usize) -> usize {
        self.labels[point] as usize
    }

    pub fn members(&self, superpoint: usize) -> &[u32] {
        &self.members[superpoint]
    }

    /// Expands a superpoint set into the mask of its member points.
    pub fn expand(&self, set: &SuperpointSet) -> PointMask {
        assert_eq!(set.width(), self.num_superpoints(), "superpoint set width");
        let mut mask = PointMask::empty(self.num_points());
        for s in set.iter() {
            for &p in &self.members[s] {
                mask.insert(p as usize);
            }
        }
        mask
    }
}

/// A posed depth frame. Extrinsics map world to camera coordinates; the
/// camera looks down +z with pixel `u` along +x and `v` along +y.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame<T> {
    pub frame_id: u32,
    pub intrinsics: [[T; 3]; 3],
    pub extrinsics: [[T; 4]; 4],
    pub width: u32,
    pub height: u32,
    /// Row-major `height × width` depth in meters; zero marks an invalid pixel.
    pub depth: Vec<T>,
}

impl<T: Real> CameraFrame<T> {
    pub fn new(
        frame_id: u32,
        intrinsics: [[T; 3]; 3],
        extrinsics: [[T; 4]; 4],
        width: u32,
        height: u32,
        depth: Vec<T>,
    ) -> Result<Self> {
        let frame = Self {
            frame_id,
            intrinsics,
            extrinsics,
            width,
            height,
            depth,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.frame_id;
        if !(self.intrinsics[0][0] > T::zero() && self.intrinsics[1][1] > T::zero()) {
            return Err(Error::Invalid(format!("frame {id}: focal lengths must be positive")));
        }
        let all_finite = self.intrinsics.iter().flatten().all(|x| x.is_finite())
            && self.extrinsics.iter().flatten().all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::Invalid(format!("frame {id}: non-finite camera matrix")));
        }
        let tol = T::lit(1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let dot: T = (0..3)
                    .map(|k| self.extrinsics[k][i] * self.extrinsics[k][j])
                    .sum();
                let expected = if i == j { T::one() } else { T::zero() };
                if (dot - expected).abs() > tol {
                    return Err(Error::Invalid(format!(
                        "frame {id}: rotation block is not orthonormal"
                    )));
                }
            }
        }
        if self.depth.len() != self.width as usize * self.height as usize {
            return Err(Error::structural(format!(
                "frame {id}: depth map has {} values, expected {}x{}",
                self.depth.len(),
                self.width,
                self.height
            )));
        }
        if let Some(i) = self.depth.iter().position(|d| !(*d >= T::zero()) || !d.is_finite()) {
            return Err(Error::Invalid(format!(
                "frame {id}: depth value at pixel {i} is negative or non-finite"
            )));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Projects one world point, returning `(u, v, z)` with `z` the camera-space depth.
    pub fn project(&self, p: &[T; 3]) -> (T, T, T) {
        let e = &self.extrinsics;
        let mut cam = [T::zero(); 3];
        for (i, c) in cam.iter_mut().enumerate() {
            *c = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        let k = &self.intrinsics;
        let mut img = [T::zero(); 3];
        for (i, c) in img.iter_mut().enumerate() {
            *c = k[i][0] * cam[0] + k[i][1] * cam[1] + k[i][2] * cam[2];
        }
        (img[0] / img[2], img[1] / img[2], cam[2])
    }

    /// Row-major pixel index for continuous coordinates under floor sampling,
    /// or `None` outside the half-open image domain.
    pub fn pixel_index(&self, u: T, v: T) -> Option<usize> {
        let (w, h) = (T::count(self.width as usize), T::count(self.height as usize));
        if !(u >= T::zero() && u < w && v >= T::zero() && v < h) {
            return None;
        }
        let px = u.floor().to_usize()?.min(self.width as usize - 1);
        let py = v.floor().to_usize()?.min(self.height as usize - 1);
        Some(py * self.width as usize + px)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection<T> {
    pub point_index: u32,
    pub u: T,
    pub v: T,
    pub z: T,
    pub visible: bool,
    /// Row-major pixel index, set only when `visible`.
    pub pixel: Option<u32>,
}

/// Projects every point into `frame` and applies the depth test.
///
/// A point is visible iff it lies in front of the camera, falls inside the
/// half-open pixel domain, the depth sampled at its (floored) pixel is
/// positive, and `|z - depth| <= depth_tolerance`.
pub fn project_points<T: Real>(
    cloud: &PointCloud<T>,
    frame: &CameraFrame<T>,
    depth_tolerance: T,
) -> Vec<PixelProjection<T>> {
    cloud
        .positions()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (u, v, z) = frame.project(p);
            let pixel = if z > T::zero() {
                frame.pixel_index(u, v).filter(|&px| {
                    let d = frame.depth[px];
                    d > T::zero() && (z - d).abs() <= depth_tolerance
                })
            } else {
                None
            };
            PixelProjection {
                point_index: i as u32,
                u,
                v,
                z,
                visible: pixel.is_some(),
                pixel: pixel.map(|px| px as u32),
            }
        })
        .collect()
}

/// Mask of the visible points of a projection list.
pub fn visible_points<T>(projections: &[PixelProjection<T>]) -> PointMask {
    PointMask::from_indices(
        projections.len(),
        projections
            .iter()
            .filter(|p| p.visible)
            .map(|p| p.point_index as usize),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VisibilityCount {
    pub visible: u32,
    pub total: u32,
}

impl VisibilityCount {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.visible as f64 / self.total as f64
        }
    }
}

/// Per-superpoint counts of visible and total member points.
pub fn superpoint_visibility<T>(
    projections: &[PixelProjection<T>],
    partition: &SuperpointPartition,
) -> Result<Vec<VisibilityCount>> {
    if projections.len() != partition.num_points() {
        return Err(Error::structural(format!(
            "{} projections for a partition of {} points",
            projections.len(),
            partition.num_points()
        )));
    }
    let mut counts = vec![VisibilityCount::default(); partition.num_superpoints()];
    for proj in projections {
        let c = &mut counts[partition.label(proj.point_index as usize)];
        c.total += 1;
        c.visible += proj.visible as u32;
    }
    Ok(counts)
}
