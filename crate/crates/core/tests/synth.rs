use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ovseg3d::config::PipelineConfig;
use ovseg3d::pipeline::run_pipeline;
use ovseg3d::scene::{project_points, visible_points};
use ovseg3d::sets::PointMask;
use ovseg3d::synth::{generate, pointlevel_pipeline_oracle, SynthSceneSpec, ORACLE_MAX_POINTS};
use ovseg3d::Error;

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn same_spec_writes_identical_bytes() {
    let mut spec = SynthSceneSpec::small(21);
    spec.noise.boundary_px = 1;
    spec.noise.wrong_detection_rate = 0.3;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&spec).unwrap().0.write(a.path()).unwrap();
    generate(&spec).unwrap().0.write(b.path()).unwrap();
    let fa = files_under(a.path());
    assert!(fa.len() > 10);
    assert_eq!(fa, files_under(b.path()));
}

#[test]
fn fixtures_regenerate_from_their_specs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    for name in ["clean-small", "noisy-small"] {
        let text = std::fs::read_to_string(root.join(format!("{name}.toml"))).unwrap();
        let spec: SynthSceneSpec = toml::from_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        generate(&spec).unwrap().0.write(dir.path()).unwrap();
        let fresh = files_under(dir.path());
        let checked_in = files_under(&root.join(name));
        assert_eq!(fresh.keys().collect::<Vec<_>>(), checked_in.keys().collect::<Vec<_>>(), "{name}");
        for (rel, bytes) in &fresh {
            assert!(checked_in[rel] == *bytes, "{name}/{}", rel.display());
        }
    }
}

/// Re-renders ownership pixel by pixel: a pixel belongs to the nearest point
/// whose floored projection lies within the splat window (ties: lower index).
fn ownership_oracle(spec: &SynthSceneSpec, seed_bundle: &ovseg3d::SceneBundle, f: usize) -> Vec<Option<usize>> {
    let frame = &seed_bundle.frames[f];
    let (w, h) = (frame.width as i64, frame.height as i64);
    let r = spec.splat_radius as i64;
    let hits: Vec<(i64, i64, f32, usize)> = seed_bundle
        .cloud
        .positions()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (u, v, z) = frame.project(p);
            let inside = z > 0.0 && u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64;
            inside.then(|| (u.floor() as i64, v.floor() as i64, z as f32, i))
        })
        .collect();
    let mut owner = vec![None; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            owner[(y * w + x) as usize] = hits
                .iter()
                .filter(|(pu, pv, _, _)| (pu - x).abs() <= r && (pv - y).abs() <= r)
                .min_by(|a, b| a.2.total_cmp(&b.2).then(a.3.cmp(&b.3)))
                .map(|h| h.3);
        }
    }
    owner
}

#[test]
fn noiseless_detections_equal_rendered_ownership() {
    let mut spec = SynthSceneSpec::small(8);
    spec.cameras.count = 4;
    let (bundle, gt) = generate(&spec).unwrap();
    let n = bundle.num_points();
    let object_of: Vec<usize> = (0..n)
        .map(|i| gt.instances.iter().position(|g| g.mask.contains(i)).unwrap())
        .collect();
    for f in 0..bundle.frames.len() {
        let owner = ownership_oracle(&spec, &bundle, f);
        let mut expect: Vec<(String, Vec<usize>)> = (0..gt.instances.len())
            .map(|o| {
                let px: Vec<usize> = (0..owner.len()).filter(|&p| owner[p].map(|i| object_of[i]) == Some(o)).collect();
                (gt.classes[gt.instances[o].class_id as usize].clone(), px)
            })
            .filter(|(_, px)| px.len() >= spec.min_mask_area)
            .collect();
        let (instances, report) = bundle.detections[f].decode();
        assert!(report.rejected.is_empty());
        let mut got: Vec<(String, Vec<usize>)> = instances
            .iter()
            .map(|d| (d.label.clone().unwrap(), d.mask.to_pixels().to_vec()))
            .collect();
        expect.sort();
        got.sort();
        assert_eq!(got, expect, "frame {f}");
        // depth agrees with the owner
        for (px, o) in owner.iter().enumerate() {
            let d = bundle.frames[f].depth[px];
            match o {
                None => assert_eq!(d, 0.0),
                Some(i) => assert_eq!(d, bundle.frames[f].project(&bundle.cloud.positions()[*i]).2 as f32 as f64),
            }
        }
    }
}

#[test]
fn noiseless_scene_recovers_every_object() {
    for seed in [1, 2, 3] {
        let (bundle, gt) = generate(&SynthSceneSpec::small(seed)).unwrap();
        let all_frames = PipelineConfig { frame_stride: 1, ..PipelineConfig::default() };
        let out = run_pipeline(&bundle, &all_frames).unwrap();
        for g in &gt.instances {
            let best = out.image_proposals.iter().map(|p| p.mask.iou(&g.mask)).fold(0.0, f64::max);
            assert!(best >= 0.99, "seed {seed}: best IoU {best}");
        }

        // With a stride, an object is recovered up to the points the used frames observe.
        let cfg = PipelineConfig::default();
        let out = run_pipeline(&bundle, &cfg).unwrap();
        let mut seen = PointMask::empty(bundle.num_points());
        for f in bundle.frames.iter().step_by(cfg.frame_stride) {
            seen.union_with(&visible_points(&project_points(&bundle.cloud, f, cfg.depth_tolerance)));
        }
        for g in &gt.instances {
            let best = out.image_proposals.iter().map(|p| p.mask.iou(&g.mask)).fold(0.0, f64::max);
            let observed = g.mask.intersection_len(&seen) as f64 / g.mask.len() as f64;
            assert!((best - observed).abs() < 1e-12, "seed {seed}: {best} vs {observed}");
        }
    }
}

#[test]
fn oracle_refuses_large_scenes() {
    let mut spec = SynthSceneSpec::small(1);
    spec.points_per_object = ORACLE_MAX_POINTS / 3 + 1;
    let (bundle, _) = generate(&spec).unwrap();
    assert!(matches!(
        pointlevel_pipeline_oracle(&bundle, &PipelineConfig::default()),
        Err(Error::OracleRefused(_))
    ));
}

#[test]
fn oracle_agrees_with_pipeline_on_small_scenes() {
    for seed in [4, 5] {
        let mut spec = SynthSceneSpec::small(seed);
        spec.noise.boundary_px = 1;
        spec.noise.wrong_detection_rate = 0.2;
        let (bundle, _) = generate(&spec).unwrap();
        let cfg = PipelineConfig::default();
        let mut expect: Vec<Vec<usize>> = pointlevel_pipeline_oracle(&bundle, &cfg).unwrap().iter().map(PointMask::to_vec).collect();
        let out = run_pipeline(&bundle, &cfg).unwrap();
        let mut got: Vec<Vec<usize>> = out.image_proposals.iter().map(|p| p.mask.to_vec()).collect();
        expect.sort();
        got.sort();
        assert_eq!(got, expect, "seed {seed}");
    }
}
