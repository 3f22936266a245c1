use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use ovseg3d::scene::{
    project_points, superpoint_visibility, CameraFrame, PointCloud, SuperpointPartition,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn look_at(eye: [f64; 3], target: [f64; 3]) -> [[f64; 4]; 4] {
    let eye = Vector3::from(eye);
    let f = (Vector3::from(target) - eye).normalize();
    let r = f.cross(&Vector3::z()).normalize();
    let d = f.cross(&r);
    let mut e = [[0.0; 4]; 4];
    for (i, row) in [r, d, f].iter().enumerate() {
        e[i] = [row.x, row.y, row.z, -row.dot(&eye)];
    }
    e[3][3] = 1.0;
    e
}

/// Visibility by explicit matrix products and a depth-map lookup.
fn oracle_visible(frame: &CameraFrame<f64>, p: &[f64; 3], tol: f64) -> bool {
    let k = Matrix3::from_fn(|r, c| frame.intrinsics[r][c]);
    let e = Matrix4::from_fn(|r, c| frame.extrinsics[r][c]);
    let cam = e * Vector4::new(p[0], p[1], p[2], 1.0);
    let img = k * Vector3::new(cam.x, cam.y, cam.z);
    if cam.z <= 0.0 {
        return false;
    }
    let (u, v) = (img.x / img.z, img.y / img.z);
    if u < 0.0 || v < 0.0 || u >= frame.width as f64 || v >= frame.height as f64 {
        return false;
    }
    let idx = v.floor() as usize * frame.width as usize + u.floor() as usize;
    let d = frame.depth[idx];
    d > 0.0 && (cam.z - d).abs() <= tol
}

fn random_scene(seed: u64) -> (PointCloud<f64>, CameraFrame<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..200)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)])
        .collect();
    let k = [[80.0, 0.0, 40.0], [0.0, 80.0, 30.0], [0.0, 0.0, 1.0]];
    let e = look_at([0.3, -3.0, 1.0], [0.0, 0.0, 0.0]);
    let (w, h) = (80u32, 60u32);
    let probe = CameraFrame::new(0, k, e, w, h, vec![0.0; (w * h) as usize]).unwrap();
    // depth: nearest splat of the first half of the points, noise elsewhere
    let mut depth = vec![0.0; (w * h) as usize];
    for p in &pts[..100] {
        let (u, v, z) = probe.project(p);
        if let Some(px) = probe.pixel_index(u, v) {
            if z > 0.0 && (depth[px] == 0.0 || z < depth[px]) {
                depth[px] = z;
            }
        }
    }
    for d in depth.iter_mut().filter(|d| **d == 0.0) {
        if rng.random::<f64>() < 0.5 {
            *d = rng.random_range(1.0..5.0);
        }
    }
    (PointCloud::new(pts).unwrap(), CameraFrame { depth, ..probe })
}

#[test]
fn visibility_flags_match_matrix_oracle() {
    for seed in 0..5 {
        let (cloud, frame) = random_scene(seed);
        for tol in [0.0, 0.05, 0.5] {
            let proj = project_points(&cloud, &frame, tol);
            let mut visible = 0;
            for (p, pr) in cloud.positions().iter().zip(&proj) {
                assert_eq!(pr.visible, oracle_visible(&frame, p, tol), "seed {seed} tol {tol}");
                visible += pr.visible as usize;
            }
            if tol == 0.0 {
                assert!(visible > 0, "splatted points see themselves");
            }
        }
    }
}

#[test]
fn half_occluded_superpoint_counts_match_enumeration() {
    // two planes facing the camera; the near plane hides the left half of the far one
    let k = [[50.0, 0.0, 25.0], [0.0, 50.0, 25.0], [0.0, 0.0, 1.0]];
    let e = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..10 {
        for j in 0..10 {
            let (x, y) = (-0.45 + 0.1 * i as f64, -0.45 + 0.1 * j as f64);
            pts.push([x, y, 2.0]);
            labels.push(0);
            pts.push([x / 2.0 - 0.25, y / 2.0, 1.0]);
            labels.push(1);
        }
    }
    let (w, h) = (50u32, 50u32);
    let probe = CameraFrame::new(0, k, e, w, h, vec![0.0; 2500]).unwrap();
    let mut depth = vec![0.0; 2500];
    for p in &pts {
        let (u, v, z) = probe.project(p);
        let px = probe.pixel_index(u, v).unwrap();
        if depth[px] == 0.0 || z < depth[px] {
            depth[px] = z;
        }
    }
    // near plane covers u in [0, 25): fill it completely
    for y in 0..50 {
        for x in 0..25 {
            depth[y * 50 + x] = 1.0;
        }
    }
    let frame = CameraFrame { depth, ..probe };
    let cloud = PointCloud::new(pts.clone()).unwrap();
    let part = SuperpointPartition::new(labels.clone(), 2).unwrap();
    let proj = project_points(&cloud, &frame, 0.01);
    let counts = superpoint_visibility(&proj, &part).unwrap();

    let mut expect = [(0u32, 0u32); 2];
    for (p, &l) in pts.iter().zip(&labels) {
        expect[l as usize].1 += 1;
        expect[l as usize].0 += oracle_visible(&frame, p, 0.01) as u32;
    }
    for s in 0..2 {
        assert_eq!((counts[s].visible, counts[s].total), expect[s]);
    }
    assert_eq!(counts[0].visible, 50, "far plane is half hidden");
    assert_eq!(counts[1].visible, 100);
}

proptest! {
    #[test]
    fn visible_points_pass_the_depth_test(seed in 0u64..1000, tol in 0.0f64..0.3) {
        let (cloud, frame) = random_scene(seed);
        for pr in project_points(&cloud, &frame, tol) {
            if let Some(px) = pr.pixel {
                prop_assert!(pr.visible && pr.z > 0.0);
                prop_assert!(pr.u >= 0.0 && pr.v >= 0.0 && pr.u < 80.0 && pr.v < 60.0);
                prop_assert!((pr.z - frame.depth[px as usize]).abs() <= tol);
            } else {
                prop_assert!(!pr.visible);
            }
        }
    }
}
