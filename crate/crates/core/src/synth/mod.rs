//! Deterministic synthetic scenes and brute-force reference implementations.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) keyed with
//! `seed_from_u64(seed)`; each purpose draws from its own stream
//! (`set_stream`): 1 layout, 2 surface sampling, 3 detection noise,
//! 4 class prototypes. Generation is single-threaded.
//!
//! Objects are axis-aligned boxes (top and four sides) or half-ellipsoid
//! domes resting on the floor, laid out on a grid. Cameras orbit the room
//! center and look at it with OpenCV conventions. Depth is rendered by
//! nearest-point splatting: each point writes its camera depth into the
//! `(2r+1)²` pixel block around its floored pixel and the minimum wins (ties
//! keep the lower point index). Depth values are rounded to `f32` so the
//! in-memory and on-disk bundles agree exactly. A pixel's ground-truth
//! object is the object of the point that won it.

mod oracle;
mod provider;

pub use oracle::{pointlevel_pipeline_oracle, ORACLE_MAX_POINTS};
pub use provider::SyntheticProvider;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::{
    Dtype, EmbeddingData, GroundTruth, SceneBundle, SyntheticEmbeddings, TextQueries,
};
use crate::classify::PROMPT_TEMPLATE;
use crate::error::{Error, Result};
use crate::eval::GroundTruthInstance;
use crate::grounding::{DetectionFile, DetectionRecord};
use crate::mask::RunMask;
use crate::scene::{CameraFrame, PointCloud, SuperpointPartition};
use crate::sets::{PixelSet, PointMask};

const STREAM_LAYOUT: u64 = 1;
const STREAM_SURFACE: u64 = 2;
const STREAM_DETECTIONS: u64 = 3;
const STREAM_PROTOTYPES: u64 = 4;

pub const DEFAULT_CLASSES: [&str; 10] = [
    "chair", "table", "sofa", "bed", "cabinet", "desk", "lamp", "shelf", "toilet", "sink",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitSpec {
    pub count: usize,
    /// Horizontal distance from the room center.
    pub radius: f64,
    pub height: f64,
    /// Height of the look-at point above the room center.
    pub target_height: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            count: 30,
            radius: 5.0,
            height: 2.2,
            target_height: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Each detection is dilated or eroded (fair coin) by this many pixels.
    pub boundary_px: u32,
    /// Probability that a detection is wrong: half of these are merged with
    /// another object's mask, half replaced by a random box.
    pub wrong_detection_rate: f64,
    /// Standard deviation of the per-coordinate embedding noise.
    pub embedding_sigma: f64,
    /// Probability that a view embeds the prototype of a different class.
    pub label_flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub num_objects: usize,
    pub points_per_object: usize,
    /// Azimuth sectors per object; 0 makes every point its own superpoint.
    pub superpoints_per_object: usize,
    /// Side of the square room in meters.
    pub room_extent: f64,
    pub cameras: OrbitSpec,
    pub image_width: u32,
    pub image_height: u32,
    /// Focal length in units of the image width.
    pub focal_scale: f64,
    pub splat_radius: u32,
    /// Projected object masks smaller than this are not reported as detections.
    pub min_mask_area: usize,
    pub noise: NoiseSpec,
    pub classes: Vec<String>,
    pub embedding_dim: usize,
    /// Also emit the ground-truth masks as point-cloud proposals.
    pub pointcloud_proposals: bool,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_objects: 5,
            points_per_object: 400,
            superpoints_per_object: 8,
            room_extent: 6.0,
            cameras: OrbitSpec::default(),
            image_width: 320,
            image_height: 240,
            focal_scale: 0.7,
            splat_radius: 1,
            min_mask_area: 20,
            noise: NoiseSpec {
                embedding_sigma: 0.1,
                ..NoiseSpec::default()
            },
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            embedding_dim: 32,
            pointcloud_proposals: false,
        }
    }
}

impl SynthSceneSpec {
    /// A small scene (N ≤ 2000, 160×120 images) with singleton superpoints.
    pub fn small(seed: u64) -> Self {
        Self {
            seed,
            num_objects: 3,
            points_per_object: 300,
            superpoints_per_object: 0,
            room_extent: 4.0,
            cameras: OrbitSpec {
                count: 20,
                radius: 3.5,
                height: 1.8,
                target_height: 0.3,
            },
            image_width: 160,
            image_height: 120,
            min_mask_area: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synthetic scene: {m}")));
        if self.num_objects == 0 {
            return bad("needs at least one object");
        }
        if self.points_per_object == 0 {
            return bad("needs at least one point per object");
        }
        if self.cameras.count == 0 {
            return bad("needs at least one camera");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if self.classes.is_empty() || self.embedding_dim == 0 {
            return bad("needs classes and a positive embedding dimension");
        }
        let positive = [
            self.room_extent,
            self.cameras.radius,
            self.focal_scale,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("room extent, orbit radius and focal scale must be positive");
        }
        let n = &self.noise;
        let rates = [n.wrong_detection_rate, n.label_flip_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || !(n.embedding_sigma >= 0.0) {
            return bad("noise knobs out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Box,
    Dome,
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    center: [f64; 2],
    half: [f64; 2],
    height: f64,
    class: u32,
}

impl Object {
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let [cx, cy] = self.center;
        let [hx, hy] = self.half;
        let h = self.height;
        match self.shape {
            Shape::Box => {
                // top plus four sides, picked by area
                let areas = [4.0 * hx * hy, 2.0 * hx * h, 2.0 * hx * h, 2.0 * hy * h, 2.0 * hy * h];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 0;
                while face < 4 && pick >= areas[face] {
                    pick -= areas[face];
                    face += 1;
                }
                let a = rng.random::<f64>() * 2.0 - 1.0;
                let b = rng.random::<f64>();
                match face {
                    0 => [cx + a * hx, cy + (2.0 * b - 1.0) * hy, h],
                    1 => [cx + a * hx, cy - hy, b * h],
                    2 => [cx + a * hx, cy + hy, b * h],
                    3 => [cx - hx, cy + a * hy, b * h],
                    _ => [cx + hx, cy + a * hy, b * h],
                }
            }
            Shape::Dome => {
                // uniform direction on the upper unit hemisphere, then scaled
                let z: f64 = rng.random::<f64>();
                let phi = rng.random::<f64>() * std::f64::consts::TAU;
                let r = (1.0 - z * z).sqrt();
                [cx + hx * r * phi.cos(), cy + hy * r * phi.sin(), h * z]
            }
        }
    }
}

/// Generates a bundle (ground truth included) from `spec`.
pub fn generate(spec: &SynthSceneSpec) -> Result<(SceneBundle, GroundTruth)> {
    spec.validate()?;
    let rng_for = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        rng
    };

    let objects = layout(spec, &mut rng_for(STREAM_LAYOUT));
    let object_classes: Vec<u32> = objects.iter().map(|o| o.class).collect();

    let mut rng = rng_for(STREAM_SURFACE);
    let mut positions = Vec::with_capacity(spec.num_objects * spec.points_per_object);
    let mut point_object = Vec::with_capacity(positions.capacity());
    let mut labels = Vec::with_capacity(positions.capacity());
    let mut next_label = 0u32;
    for (o, obj) in objects.iter().enumerate() {
        let pts: Vec<[f64; 3]> = (0..spec.points_per_object)
            .map(|_| obj.sample_surface(&mut rng))
            .collect();
        let obj_labels = sector_labels(obj, &pts, spec.superpoints_per_object, &mut next_label);
        positions.extend(pts);
        labels.extend(obj_labels);
        point_object.extend(std::iter::repeat_n(o as u32, spec.points_per_object));
    }
    let n = positions.len();
    let cloud = PointCloud::new(positions)?;
    let partition = SuperpointPartition::new(labels, next_label as usize)?;

    let mut frames = Vec::with_capacity(spec.cameras.count);
    let mut detections = Vec::with_capacity(spec.cameras.count);
    let mut det_rng = rng_for(STREAM_DETECTIONS);
    for i in 0..spec.cameras.count {
        let (frame, owner) = render(spec, i, &cloud)?;
        let masks = object_masks(&owner, &point_object, objects.len());
        let det = detect(spec, &frame, masks, &object_classes, &mut det_rng);
        frames.push(frame);
        detections.push(det);
    }

    let prototypes = prototypes(spec, &mut rng_for(STREAM_PROTOTYPES));
    let instances: Vec<GroundTruthInstance> = (0..objects.len())
        .map(|o| GroundTruthInstance {
            mask: PointMask::from_indices(n, (0..n).filter(|&i| point_object[i] == o as u32)),
            class_id: object_classes[o],
        })
        .collect();
    let gt = GroundTruth {
        classes: spec.classes.clone(),
        instances,
    };

    let mut provenance = BTreeMap::new();
    provenance.insert("generator".into(), "ovseg3d synth".into());
    provenance.insert(
        "spec".into(),
        serde_json::to_string(spec).expect("serializable spec"),
    );

    let bundle = SceneBundle {
        cloud,
        partition,
        frames,
        detections,
        embeddings: Some(EmbeddingData::Synthetic(SyntheticEmbeddings {
            point_instances: point_object.iter().map(|&o| o as i32).collect(),
            instance_classes: object_classes,
            prototypes: prototypes.clone(),
            sigma: spec.noise.embedding_sigma,
            label_flip_rate: spec.noise.label_flip_rate,
            seed: spec.seed,
        })),
        text: Some(TextQueries {
            classes: spec.classes.clone(),
            template: PROMPT_TEMPLATE.into(),
            vectors: prototypes,
        }),
        point_cloud_proposals: if spec.pointcloud_proposals {
            gt.instances.iter().map(|g| g.mask.clone()).collect()
        } else {
            Vec::new()
        },
        ground_truth: Some(gt.clone()),
        provenance,
        depth_dtype: Dtype::F32,
    };
    Ok((bundle, gt))
}

fn layout(spec: &SynthSceneSpec, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let cols = (spec.num_objects as f64).sqrt().ceil() as usize;
    let rows = spec.num_objects.div_ceil(cols);
    let margin = 0.1 * spec.room_extent;
    let inner = spec.room_extent - 2.0 * margin;
    let cell = [inner / cols as f64, inner / rows as f64];
    (0..spec.num_objects)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let shape = if rng.random::<f64>() < 0.5 { Shape::Box } else { Shape::Dome };
            let half = [
                cell[0] * rng.random_range(0.2..0.35),
                cell[1] * rng.random_range(0.2..0.35),
            ];
            let height = rng.random_range(0.4..1.2);
            let class = rng.random_range(0..spec.classes.len()) as u32;
            Object {
                class,
                shape,
                center: [
                    margin + (c as f64 + 0.5) * cell[0],
                    margin + (r as f64 + 0.5) * cell[1],
                ],
                half,
                height,
            }
        })
        .collect()
}

/// Splits an object's points into `k` azimuth sectors around its center and
/// assigns fresh consecutive ids to the nonempty ones.
fn sector_labels(obj: &Object, pts: &[[f64; 3]], k: usize, next: &mut u32) -> Vec<u32> {
    if k == 0 {
        let labels = (*next..*next + pts.len() as u32).collect();
        *next += pts.len() as u32;
        return labels;
    }
    let sector: Vec<usize> = pts
        .iter()
        .map(|p| {
            let a = (p[1] - obj.center[1]).atan2(p[0] - obj.center[0]) + std::f64::consts::PI;
            ((a / std::f64::consts::TAU * k as f64) as usize).min(k - 1)
        })
        .collect();
    let mut remap = vec![None; k];
    for &s in &sector {
        if remap[s].is_none() {
            remap[s] = Some(0);
        }
    }
    for slot in remap.iter_mut().flatten() {
        *slot = *next;
        *next += 1;
    }
    sector.iter().map(|&s| remap[s].expect("used sector")).collect()
}

/// Camera `i` of the orbit as intrinsics and world→camera extrinsics.
pub fn orbit_camera(spec: &SynthSceneSpec, i: usize) -> ([[f64; 3]; 3], [[f64; 4]; 4]) {
    let c = spec.room_extent / 2.0;
    let theta = std::f64::consts::TAU * i as f64 / spec.cameras.count as f64;
    let eye = [
        c + spec.cameras.radius * theta.cos(),
        c + spec.cameras.radius * theta.sin(),
        spec.cameras.height,
    ];
    let target = [c, c, spec.cameras.target_height];
    let forward = normalize(sub(target, eye));
    let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
    let down = cross(forward, right);
    let rot = [right, down, forward];
    let mut ext = [[0.0; 4]; 4];
    for r in 0..3 {
        ext[r][..3].copy_from_slice(&rot[r]);
        ext[r][3] = -(rot[r][0] * eye[0] + rot[r][1] * eye[1] + rot[r][2] * eye[2]);
    }
    ext[3][3] = 1.0;
    let f = spec.focal_scale * spec.image_width as f64;
    let k = [
        [f, 0.0, spec.image_width as f64 / 2.0],
        [0.0, f, spec.image_height as f64 / 2.0],
        [0.0, 0.0, 1.0],
    ];
    (k, ext)
}

/// Renders the depth map of camera `i`; also returns the winning point per pixel.
fn render(
    spec: &SynthSceneSpec,
    i: usize,
    cloud: &PointCloud<f64>,
) -> Result<(CameraFrame<f64>, Vec<Option<u32>>)> {
    let (k, ext) = orbit_camera(spec, i);
    let (w, h) = (spec.image_width as usize, spec.image_height as usize);
    let probe = CameraFrame::new(i as u32, k, ext, w as u32, h as u32, vec![0.0; w * h])?;
    let r = spec.splat_radius as i64;
    let mut depth = vec![0.0f64; w * h];
    let mut owner: Vec<Option<u32>> = vec![None; w * h];
    for (idx, p) in cloud.positions().iter().enumerate() {
        let (u, v, z) = probe.project(p);
        if !(z > 0.0) || probe.pixel_index(u, v).is_none() {
            continue;
        }
        let z = z as f32 as f64;
        let (pu, pv) = (u.floor() as i64, v.floor() as i64);
        for dv in -r..=r {
            for du in -r..=r {
                let (x, y) = (pu + du, pv + dv);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let px = y as usize * w + x as usize;
                if depth[px] == 0.0 || z < depth[px] {
                    depth[px] = z;
                    owner[px] = Some(idx as u32);
                }
            }
        }
    }
    let frame = CameraFrame { depth, ..probe };
    Ok((frame, owner))
}

/// Per-object pixel sets of one frame from depth-buffer ownership.
fn object_masks(
    owner: &[Option<u32>],
    point_object: &[u32],
    num_objects: usize,
) -> Vec<Vec<usize>> {
    let mut masks = vec![Vec::new(); num_objects];
    for (px, o) in owner.iter().enumerate() {
        if let Some(p) = o {
            masks[point_object[*p as usize] as usize].push(px);
        }
    }
    masks
}

fn detect(
    spec: &SynthSceneSpec,
    frame: &CameraFrame<f64>,
    masks: Vec<Vec<usize>>,
    object_classes: &[u32],
    rng: &mut ChaCha8Rng,
) -> DetectionFile {
    let (w, h) = (frame.width as usize, frame.height as usize);
    let present: Vec<(usize, Vec<usize>)> = masks
        .into_iter()
        .enumerate()
        .filter(|(_, m)| m.len() >= spec.min_mask_area)
        .collect();
    let noise = &spec.noise;
    let mut instances = Vec::new();
    for (slot, (o, pixels)) in present.iter().enumerate() {
        let mut grid = vec![false; w * h];
        for &px in pixels {
            grid[px] = true;
        }
        if noise.boundary_px > 0 {
            let dilate = rng.random::<bool>();
            grid = morph(&grid, w, h, noise.boundary_px as usize, dilate);
        }
        let mut label = Some(spec.classes[object_classes[*o] as usize].clone());
        if noise.wrong_detection_rate > 0.0 && rng.random::<f64>() < noise.wrong_detection_rate {
            let merge = rng.random::<bool>() && present.len() > 1;
            if merge {
                let mut other = rng.random_range(0..present.len() - 1);
                if other >= slot {
                    other += 1;
                }
                for &px in &present[other].1 {
                    grid[px] = true;
                }
            } else {
                grid.iter_mut().for_each(|g| *g = false);
                let bw = rng.random_range(w / 10..=w / 4).max(1);
                let bh = rng.random_range(h / 10..=h / 4).max(1);
                let x0 = rng.random_range(0..=w - bw);
                let y0 = rng.random_range(0..=h - bh);
                for y in y0..y0 + bh {
                    grid[y * w + x0..y * w + x0 + bw].iter_mut().for_each(|g| *g = true);
                }
                label = None;
            }
        }
        let score = (rng.random_range(0.5..1.0) * 1000.0f64).round() / 1000.0;
        let set = PixelSet::from_indices(w * h, (0..w * h).filter(|&px| grid[px]));
        if set.is_empty() {
            continue;
        }
        let mask = RunMask::from_pixels(w as u32, h as u32, &set);
        instances.push(DetectionRecord {
            score,
            label,
            runs: mask.runs().to_vec(),
        });
    }
    DetectionFile {
        frame_id: frame.frame_id,
        width: frame.width,
        height: frame.height,
        instances,
    }
}

/// Square-window dilation (`dilate`) or erosion of a binary image.
fn morph(grid: &[bool], w: usize, h: usize, r: usize, dilate: bool) -> Vec<bool> {
    // erosion is dilation of the complement
    let src: Vec<bool> = grid.iter().map(|&g| g == dilate).collect();
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let hit = (lo..=hi).any(|yy| rows[yy * w + x]);
            out[y * w + x] = hit == dilate;
        }
    }
    out
}

fn prototypes(spec: &SynthSceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..spec.classes.len())
        .map(|_| {
            let v: Vec<f64> = (0..spec.embedding_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            normalize_vec(v)
        })
        .collect()
}

pub(crate) fn normalize_vec(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}
