//! Per-frame 2D instance ingest and size-ordered overlap removal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskError, RunMask};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance2D {
    pub frame_id: u32,
    /// Position of the instance in its detection file.
    pub index: u32,
    pub mask: RunMask,
    pub score: f64,
    pub label: Option<String>,
}

impl Instance2D {
    pub fn area(&self) -> usize {
        self.mask.area()
    }
}

/// On-disk detection file for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    pub frame_id: u32,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub runs: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub frame_id: u32,
    pub index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rejected: Vec<Rejection>,
}

impl LoadReport {
    pub fn merge(&mut self, other: LoadReport) {
        self.rejected.extend(other.rejected);
    }
}

impl DetectionFile {
    /// Decodes and validates every record. Invalid instances are dropped
    /// and listed in the report; the survivors keep their stored order.
    pub fn decode(&self) -> (Vec<Instance2D>, LoadReport) {
        let mut out = Vec::with_capacity(self.instances.len());
        let mut report = LoadReport::default();
        for (i, rec) in self.instances.iter().enumerate() {
            let reject = |reason: String| Rejection {
                frame_id: self.frame_id,
                index: i as u32,
                reason,
            };
            if !(0.0..=1.0).contains(&rec.score) {
                report
                    .rejected
                    .push(reject(format!("score {} outside [0, 1]", rec.score)));
                continue;
            }
            let mask = RunMask::from_runs(self.width, self.height, rec.runs.clone())
                .and_then(|m| if m.area() == 0 { Err(MaskError::ZeroArea) } else { Ok(m) });
            match mask {
                Ok(mask) => out.push(Instance2D {
                    frame_id: self.frame_id,
                    index: i as u32,
                    mask,
                    score: rec.score,
                    label: rec.label.clone(),
                }),
                Err(e) => report.rejected.push(reject(e.to_string())),
            }
        }
        (out, report)
    }

    pub fn from_instances(frame_id: u32, width: u32, height: u32, instances: &[Instance2D]) -> Self {
        Self {
            frame_id,
            width,
            height,
            instances: instances
                .iter()
                .map(|inst| DetectionRecord {
                    score: inst.score,
                    label: inst.label.clone(),
                    runs: inst.mask.runs().to_vec(),
                })
                .collect(),
        }
    }
}

pub fn read_detection_file(path: &Path) -> Result<DetectionFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the detections of `frame_id` from the bundle rooted at `bundle_dir`.
pub fn load_detections(bundle_dir: &Path, frame_id: u32) -> Result<(Vec<Instance2D>, LoadReport)> {
    let manifest = crate::bundle::Manifest::read(bundle_dir)?;
    let entry = manifest
        .frames
        .iter()
        .find(|f| f.frame_id == frame_id)
        .ok_or_else(|| Error::Invalid(format!("frame {frame_id} not in bundle manifest")))?;
    let file = read_detection_file(&bundle_dir.join(&entry.detections.path))?;
    if file.frame_id != frame_id {
        return Err(Error::Invalid(format!(
            "detection file for frame {frame_id} declares frame {}",
            file.frame_id
        )));
    }
    Ok(file.decode())
}

/// Resolves contested pixels in favor of the smaller mask.
///
/// Instances are ranked by ascending area (ties: lower stored index first)
/// and claim pixels greedily in that order, so every pixel covered by
/// several inputs ends up in the smallest one. Instances left empty are
/// dropped; survivors keep the input order.
pub fn remove_overlaps(instances: &[Instance2D]) -> Vec<Instance2D> {
    let Some(first) = instances.first() else {
        return Vec::new();
    };
    let (w, h) = (first.mask.width(), first.mask.height());
    assert!(
        instances
            .iter()
            .all(|i| i.mask.width() == w && i.mask.height() == h && i.frame_id == first.frame_id),
        "remove_overlaps expects instances from one frame"
    );

    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by_key(|&i| (instances[i].area(), i));

    const UNCLAIMED: u32 = u32::MAX;
    let mut owner = vec![UNCLAIMED; w as usize * h as usize];
    for &i in &order {
        for &(start, len) in instances[i].mask.runs() {
            for px in &mut owner[start as usize..(start + len) as usize] {
                if *px == UNCLAIMED {
                    *px = i as u32;
                }
            }
        }
    }

    instances
        .iter()
        .enumerate()
        .filter_map(|(i, inst)| {
            let mut runs: Vec<(u32, u32)> = Vec::new();
            for &(start, len) in inst.mask.runs() {
                for px in start..start + len {
                    if owner[px as usize] != i as u32 {
                        continue;
                    }
                    match runs.last_mut() {
                        Some((s, l)) if *s + *l == px => *l += 1,
                        _ => runs.push((px, 1)),
                    }
                }
            }
            if runs.is_empty() {
                return None;
            }
            let mask = RunMask::from_runs(w, h, runs).expect("subset of a valid mask");
            Some(Instance2D {
                mask,
                ..inst.clone()
            })
        })
        .collect()
}
