//! Point-level reference pipeline written with plain loops over `Vec<bool>`.
//!
//! Every point is its own superpoint and every set operation is a scan, so
//! this is slow by design and guarded by [`ORACLE_MAX_POINTS`]. It covers
//! the image branch up to inclusion removal: projection, overlap removal,
//! lifting, tracking, refinement, merging.

use crate::bundle::SceneBundle;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::sets::PointMask;
use crate::tracking::MatchMode;

pub const ORACLE_MAX_POINTS: usize = 2000;

type Mask = Vec<bool>;

#[derive(Clone)]
struct Obs {
    support: Mask,
    visible: Mask,
}

#[derive(Clone)]
struct Track {
    id: u32,
    obs: Vec<Obs>,
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&b| b).count()
}

fn union_of(masks: impl Iterator<Item = Mask>, n: usize) -> Mask {
    let mut out = vec![false; n];
    for m in masks {
        for i in 0..n {
            out[i] |= m[i];
        }
    }
    out
}

fn siou(a: &Obs, b_support: &[bool], b_visible: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut denom = 0usize;
    for i in 0..a.support.len() {
        if a.support[i] && b_support[i] {
            inter += 1;
        }
        if (a.support[i] || b_support[i]) && a.visible[i] && b_visible[i] {
            denom += 1;
        }
    }
    if denom == 0 {
        0.0
    } else {
        inter as f64 / denom as f64
    }
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut uni = 0usize;
    for i in 0..a.len() {
        inter += (a[i] && b[i]) as usize;
        uni += (a[i] || b[i]) as usize;
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

fn refine(mask: &[bool], track: &Track, tau: f64) -> Mask {
    (0..mask.len())
        .map(|i| {
            if !mask[i] {
                return false;
            }
            let vis = track.obs.iter().filter(|o| o.visible[i]).count();
            let sup = track.obs.iter().filter(|o| o.support[i]).count();
            vis == 0 || sup as f64 / vis as f64 >= tau
        })
        .collect()
}

/// Image-branch proposals of `bundle` under `config`, treating every point
/// as a superpoint. Fails with [`Error::OracleRefused`] above
/// [`ORACLE_MAX_POINTS`] points.
pub fn pointlevel_pipeline_oracle(bundle: &SceneBundle, config: &PipelineConfig) -> Result<Vec<PointMask>> {
    let n = bundle.num_points();
    if n > ORACLE_MAX_POINTS {
        return Err(Error::OracleRefused(format!(
            "{n} points exceeds the limit of {ORACLE_MAX_POINTS}"
        )));
    }
    let stride = config.frame_stride.max(1);
    let tol = config.depth_tolerance;

    let mut tracks: Vec<Track> = Vec::new();
    let mut f = 0;
    while f < bundle.frames.len() {
        let frame = &bundle.frames[f];
        let det = &bundle.detections[f];
        f += stride;
        let (w, h) = (frame.width as usize, frame.height as usize);

        // projection and depth test
        let mut pixel: Vec<Option<usize>> = vec![None; n];
        for (i, p) in bundle.cloud.positions().iter().enumerate() {
            let e = frame.extrinsics;
            let k = frame.intrinsics;
            let c0 = e[0][0] * p[0] + e[0][1] * p[1] + e[0][2] * p[2] + e[0][3];
            let c1 = e[1][0] * p[0] + e[1][1] * p[1] + e[1][2] * p[2] + e[1][3];
            let c2 = e[2][0] * p[0] + e[2][1] * p[1] + e[2][2] * p[2] + e[2][3];
            let x = k[0][0] * c0 + k[0][1] * c1 + k[0][2] * c2;
            let y = k[1][0] * c0 + k[1][1] * c1 + k[1][2] * c2;
            let z = k[2][0] * c0 + k[2][1] * c1 + k[2][2] * c2;
            let (u, v) = (x / z, y / z);
            if !(c2 > 0.0 && u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64) {
                continue;
            }
            let px = (v.floor() as usize).min(h - 1) * w + (u.floor() as usize).min(w - 1);
            let d = frame.depth[px];
            if d > 0.0 && (c2 - d).abs() <= tol {
                pixel[i] = Some(px);
            }
        }
        let frame_visible: Mask = pixel
            .iter()
            .map(|p| {
                let ratio = if p.is_some() { 1.0 } else { 0.0 };
                ratio > config.tau_img
            })
            .collect();

        // detections as pixel grids
        let (decoded, _) = det.decode();
        let mut masks: Vec<Mask> = decoded
            .iter()
            .map(|inst| {
                let mut g = vec![false; w * h];
                for &(s, l) in inst.mask.runs() {
                    for px in s..s + l {
                        g[px as usize] = true;
                    }
                }
                g
            })
            .collect();
        if config.overlap_removal_enabled {
            let areas: Vec<usize> = masks.iter().map(|m| count(m)).collect();
            let mut resolved = vec![vec![false; w * h]; masks.len()];
            for px in 0..w * h {
                let mut best: Option<usize> = None;
                for j in 0..masks.len() {
                    if masks[j][px] && best.is_none_or(|b| areas[j] < areas[b]) {
                        best = Some(j);
                    }
                }
                if let Some(j) = best {
                    resolved[j][px] = true;
                }
            }
            masks = resolved.into_iter().filter(|m| count(m) > 0).collect();
        }

        // lifting; each point is its own superpoint
        let observations: Vec<Obs> = masks
            .iter()
            .map(|m| {
                let support = (0..n)
                    .map(|i| {
                        let visible = pixel[i].is_some() as usize;
                        let inside = pixel[i].is_some_and(|px| m[px]) as usize;
                        frame_visible[i] && visible > 0 && inside as f64 / visible as f64 > config.tau_inst
                    })
                    .collect();
                Obs {
                    support,
                    visible: frame_visible.clone(),
                }
            })
            .filter(|o| count(&o.support) > 0)
            .collect();

        // tracking against the tracklets as they were before this frame
        let snapshot = tracks.clone();
        let mut decisions = Vec::new();
        for o in &observations {
            let mut best: Option<(usize, f64)> = None;
            for (t, track) in snapshot.iter().enumerate() {
                let scores: Vec<f64> = match config.match_mode {
                    MatchMode::FrameWise => track.obs.iter().map(|b| siou(o, &b.support, &b.visible)).collect(),
                    MatchMode::TrackletWise => {
                        let us = union_of(track.obs.iter().map(|b| b.support.clone()), n);
                        let uv = union_of(track.obs.iter().map(|b| b.visible.clone()), n);
                        vec![siou(o, &us, &uv)]
                    }
                };
                for s in scores {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((t, s));
                    }
                }
            }
            decisions.push(best.filter(|&(_, s)| s > config.tau_tracking).map(|(t, _)| t));
        }
        for (o, d) in observations.into_iter().zip(decisions) {
            match d {
                Some(t) => tracks[t].obs.push(o),
                None => {
                    let id = tracks.len() as u32;
                    tracks.push(Track { id, obs: vec![o] });
                }
            }
        }
    }

    let tau_ref = config.effective_tau_ref();
    let mut props: Vec<(Mask, Track)> = tracks
        .into_iter()
        .filter_map(|t| {
            let mut m = union_of(t.obs.iter().map(|o| o.support.clone()), n);
            if let Some(tau) = tau_ref {
                m = refine(&m, &t, tau);
            }
            (count(&m) > 0).then_some((m, t))
        })
        .collect();

    if config.merge_enabled {
        loop {
            let k = props.len();
            let mut cost = vec![vec![0.0; k]; k];
            let mut any = false;
            for r in 0..k {
                for c in r + 1..k {
                    cost[r][c] = iou(&props[r].0, &props[c].0);
                    any |= cost[r][c] > config.tau_merge;
                }
            }
            if !any {
                break;
            }
            let mut alive = vec![true; k];
            let mut visited = vec![false; k];
            for r in 0..k {
                if visited[r] {
                    continue;
                }
                for c in 0..k {
                    if c == r || visited[c] || cost[r][c] <= config.tau_merge {
                        continue;
                    }
                    let absorbed = std::mem::take(&mut props[c].1.obs);
                    props[r].1.obs.extend(absorbed);
                    let mut m: Mask = (0..n).map(|i| props[r].0[i] || props[c].0[i]).collect();
                    if let Some(tau) = tau_ref {
                        m = refine(&m, &props[r].1, tau);
                    }
                    props[r].0 = m;
                    alive[c] = false;
                    visited[c] = true;
                }
                visited[r] = true;
            }
            props = props
                .into_iter()
                .zip(alive)
                .filter(|((m, _), a)| *a && count(m) > 0)
                .map(|(p, _)| p)
                .collect();
        }

        let k = props.len();
        let incl = |r: usize, c: usize| {
            let size = count(&props[r].0);
            let inter = (0..n).filter(|&i| props[r].0[i] && props[c].0[i]).count();
            if size == 0 {
                0.0
            } else {
                inter as f64 / size as f64
            }
        };
        let mut keep = vec![true; k];
        for r in 0..k {
            for c in 0..k {
                if r == c || incl(r, c) < config.tau_incl {
                    continue;
                }
                if incl(c, r) >= config.tau_incl && props[r].1.id < props[c].1.id {
                    continue;
                }
                keep[r] = false;
            }
        }
        props = props.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect();
    }

    Ok(props
        .into_iter()
        .map(|(m, _)| PointMask::from_indices(n, (0..n).filter(|&i| m[i])))
        .collect())
}
