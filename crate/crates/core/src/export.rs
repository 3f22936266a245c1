//! Colored point-cloud export (ASCII PLY) for offline viewing.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::PointCloud;
use crate::sets::PointMask;

const UNLABELED: [u8; 3] = [160, 160, 160];

/// Deterministic, well-spread color for label `i`.
pub fn palette(i: usize) -> [u8; 3] {
    // golden-angle hue walk at fixed saturation and value
    let h = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to = |f: f64| ((f + m) * 255.0).round() as u8;
    [to(r), to(g), to(b)]
}

/// Per-point label from a list of masks; later masks overwrite earlier ones.
pub fn labels_from_masks(num_points: usize, masks: &[PointMask]) -> Vec<Option<usize>> {
    let mut labels = vec![None; num_points];
    for (k, m) in masks.iter().enumerate() {
        for i in m.iter() {
            labels[i] = Some(k);
        }
    }
    labels
}

pub fn ply_string(cloud: &PointCloud<f64>, labels: &[Option<usize>]) -> Result<String> {
    if labels.len() != cloud.len() {
        return Err(Error::structural(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property int label\nend_header\n",
    );
    for (p, l) in cloud.positions().iter().zip(labels) {
        let [r, g, b] = l.map_or(UNLABELED, palette);
        let label = l.map_or(-1, |x| x as i64);
        writeln!(out, "{} {} {} {r} {g} {b} {label}", p[0] as f32, p[1] as f32, p[2] as f32).unwrap();
    }
    Ok(out)
}

pub fn write_ply(path: &Path, cloud: &PointCloud<f64>, labels: &[Option<usize>]) -> Result<()> {
    let text = ply_string(cloud, labels)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
