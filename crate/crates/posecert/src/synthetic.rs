//! Synthetic scene and model generators used in place of proprietary data:
//! a 23-keypoint wireframe "aircraft", random poses inside a visibility
//! cone, unimodal axis-symmetric heatmaps, and a toy heatmap backbone.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraIntrinsics, GeometryError, KeypointScene, Pose};
use crate::graph::{Manifest, ModelGraph};
use crate::heads::Heatmap;
use crate::tensor::Tensor;

/// Number of keypoints on the wireframe model.
pub const KEYPOINTS: usize = 23;

/// 23 keypoints on a rigid wireframe: fuselage box corners, wing tips,
/// nose, tail fin and assorted mid-edge markers. Deliberately non-coplanar
/// and in general position so PnP stays well conditioned.
pub fn aircraft_points() -> Vec<Vector3<f64>> {
    let mut pts = Vec::with_capacity(KEYPOINTS);
    // Fuselage box corners.
    for &x in &[-1.0, 1.0] {
        for &y in &[-0.6, 0.6] {
            for &z in &[-0.3, 0.3] {
                pts.push(Vector3::new(x, y, z));
            }
        }
    }
    // Wing tips and wing midpoints.
    pts.push(Vector3::new(0.0, -2.0, 0.05));
    pts.push(Vector3::new(0.0, 2.0, 0.05));
    pts.push(Vector3::new(0.1, -1.2, 0.12));
    pts.push(Vector3::new(0.1, 1.2, 0.12));
    // Nose and tail fin.
    pts.push(Vector3::new(1.6, 0.0, 0.0));
    pts.push(Vector3::new(-1.4, 0.0, 0.7));
    // Horizontal stabilizers.
    pts.push(Vector3::new(-1.3, -0.7, 0.15));
    pts.push(Vector3::new(-1.3, 0.7, 0.15));
    // Fuselage spine/belly markers.
    pts.push(Vector3::new(0.5, 0.0, 0.35));
    pts.push(Vector3::new(-0.5, 0.0, 0.35));
    pts.push(Vector3::new(0.5, 0.0, -0.35));
    pts.push(Vector3::new(-0.5, 0.0, -0.35));
    // Canopy and ventral markers.
    pts.push(Vector3::new(0.8, -0.4, 0.28));
    pts.push(Vector3::new(0.8, 0.4, 0.28));
    pts.push(Vector3::new(-0.9, 0.0, -0.5));
    debug_assert_eq!(pts.len(), KEYPOINTS);
    pts
}

fn random_pose(rng: &mut ChaCha8Rng, z_range: (f64, f64)) -> Pose {
    let ang = 25f64.to_radians();
    Pose::from_xi(&[
        rng.gen_range(-ang..ang),
        rng.gen_range(-ang..ang),
        rng.gen_range(-ang..ang),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(z_range.0..z_range.1),
    ])
}

/// Random noiseless scene at VGA-ish scale (320x240 image).
pub fn synthetic_scene(rng: &mut ChaCha8Rng) -> Result<KeypointScene, GeometryError> {
    let intrinsics = CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0)?;
    let pose = random_pose(rng, (6.0, 10.0));
    KeypointScene::noiseless(intrinsics, aircraft_points(), pose)
}

/// Random noiseless scene whose projections land inside an `h x w` heatmap
/// (1-based pixel box) with a margin for pooling.
pub fn heatmap_scene(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
) -> Result<KeypointScene, GeometryError> {
    let f = (h.min(w) as f64) * 0.9;
    let intrinsics = CameraIntrinsics::new(
        f,
        f,
        (w as f64 + 1.0) / 2.0,
        (h as f64 + 1.0) / 2.0,
    )?;
    loop {
        let pose = random_pose(rng, (7.0, 11.0));
        let scene = KeypointScene::noiseless(intrinsics, aircraft_points(), pose)?;
        let inside = scene.points2d.iter().all(|p| {
            p[0] >= 3.0 && p[0] <= w as f64 - 2.0 && p[1] >= 3.0 && p[1] <= h as f64 - 2.0
        });
        if inside {
            return Ok(scene);
        }
    }
}

/// Rounded 1-based (row, col) heatmap pixels of the scene's 2-D keypoints.
pub fn keypoint_pixels(scene: &KeypointScene, h: usize, w: usize) -> Vec<(usize, usize)> {
    scene
        .points2d
        .iter()
        .map(|p| {
            let col = (p[0].round() as usize).clamp(1, w);
            let row = (p[1].round() as usize).clamp(1, h);
            (row, col)
        })
        .collect()
}

/// Axis-symmetric, unimodal, compactly supported bump (separable triangle)
/// centered at a 1-based (row, col) pixel, normalized to sum 1 in f64.
/// The support is clipped to the map; symmetry about the center is exact
/// only when the support fits, which callers arrange.
pub fn triangle_bump_f64(
    m: usize,
    n: usize,
    center: (usize, usize),
    radius: usize,
) -> Vec<f64> {
    let mut v = vec![0.0f64; m * n];
    for i in 1..=m {
        for j in 1..=n {
            let di = (i as isize - center.0 as isize).unsigned_abs();
            let dj = (j as isize - center.1 as isize).unsigned_abs();
            if di <= radius && dj <= radius {
                v[(i - 1) * n + (j - 1)] =
                    ((radius + 1 - di) * (radius + 1 - dj)) as f64;
            }
        }
    }
    let sum: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= sum;
    }
    v
}

/// f32 heatmap wrapper over [`triangle_bump_f64`].
pub fn triangle_bump(m: usize, n: usize, center: (usize, usize), radius: usize) -> Heatmap {
    let v = triangle_bump_f64(m, n, center, radius);
    let t = Tensor::new(vec![m, n], v.into_iter().map(|x| x as f32).collect()).unwrap();
    Heatmap::normalized(t).unwrap()
}

/// Toy heatmap backbone: two small convolutions plus a constant bump added
/// per keypoint channel, so the seed image's argmax sits exactly on the
/// ground-truth pixels. `image_scale` controls how strongly the input image
/// leaks into the heatmaps.
pub fn toy_backbone(
    rng: &mut ChaCha8Rng,
    keypoints: &[(usize, usize)],
    h: usize,
    w: usize,
    image_scale: f32,
) -> ModelGraph {
    let k = keypoints.len();
    let hidden = 4usize;
    let c_in = 3usize;
    let mut weights: Vec<f32> = Vec::new();
    let w1_len = hidden * c_in * 9 + hidden;
    for _ in 0..w1_len {
        weights.push(rng.gen_range(-1.0..1.0) * image_scale);
    }
    let w2_off = weights.len();
    let w2_len = k * hidden + k;
    for _ in 0..w2_len {
        weights.push(rng.gen_range(-1.0..1.0) * image_scale);
    }
    // Bias bumps: tall peak at each keypoint with a gentle pyramid falloff.
    let bias_off = weights.len();
    for &(r, c) in keypoints {
        for i in 1..=h {
            for j in 1..=w {
                let d = (i as isize - r as isize)
                    .unsigned_abs()
                    .max((j as isize - c as isize).unsigned_abs());
                weights.push(if d <= 3 { (8 - d) as f32 } else { 0.0 });
            }
        }
    }
    let bias_len = k * h * w;
    let manifest: Manifest = serde_json::from_value(serde_json::json!({
        "input": {"shape": [c_in, h, w]},
        "nodes": [
            {"id": "in", "op": "input"},
            {"id": "c1", "op": "conv",
             "attrs": {"out_channels": hidden, "kernel": [3,3], "padding": [1,1]},
             "weight": {"offset": 0, "len": w1_len}},
            {"id": "r1", "op": "relu"},
            {"id": "c2", "op": "conv",
             "attrs": {"out_channels": k, "kernel": [1,1]},
             "weight": {"offset": w2_off, "len": w2_len}},
            {"id": "bump", "op": "bias_add", "weight": {"offset": bias_off, "len": bias_len}},
            {"id": "out", "op": "output"},
        ],
        "edges": [["in","c1"],["c1","r1"],["r1","c2"],["c2","bump"],["bump","out"]],
        "outputs": ["out"],
    }))
    .unwrap();
    ModelGraph::from_manifest(&manifest, weights).unwrap()
}

/// Deterministic pseudo-random 8-bit test image.
pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(
        vec![c, h, w],
        (0..c * h * w).map(|_| rng.gen_range(0..=255) as f32).collect(),
    )
    .unwrap()
}
