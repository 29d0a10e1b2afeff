//! Pinhole camera model, rigid poses, Euler parameterization, perspective
//! projection and pose error metrics.
//!
//! The Euler convention is intrinsic Z-Y-X (yaw, pitch, roll):
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`. All rotation error comparisons use
//! this convention consistently.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("matrix is not a rotation (orthogonality/determinant check failed)")]
    NotARotation,
    #[error("point {index} is behind the camera (depth {depth})")]
    BehindCamera { index: usize, depth: f64 },
    #[error("PnP needs at least 4 keypoints, got {0}")]
    InsufficientPoints(usize),
    #[error("pose error budget must be strictly positive")]
    NonPositiveBudget,
    #[error("malformed scene file: {0}")]
    MalformedScene(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn from_matrix(k: &Matrix3<f64>) -> Result<Self, GeometryError> {
        if (k[(2, 2)] - 1.0).abs() > 1e-12
            || k[(0, 1)].abs() > 1e-12
            || k[(1, 0)].abs() > 1e-12
            || k[(2, 0)].abs() > 1e-12
            || k[(2, 1)].abs() > 1e-12
        {
            return Err(GeometryError::BadIntrinsics(
                "expected zero-skew upper-triangular K with K[2][2]=1".into(),
            ));
        }
        Self::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)])
    }
}

/// Intrinsic Z-Y-X Euler triple in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

pub fn rotation_from_euler(e: &EulerAngles) -> Matrix3<f64> {
    let (sy, cy) = e.yaw.sin_cos();
    let (sp, cp) = e.pitch.sin_cos();
    let (sr, cr) = e.roll.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Extracts the Euler triple. The second return is the gimbal-lock flag:
/// when |pitch| is within 1e-6 of pi/2 the roll is forced to 0 and yaw
/// absorbs the remaining rotation.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> (EulerAngles, bool) {
    let sp = -r[(2, 0)];
    let sp = sp.clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6 {
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        (EulerAngles { yaw, pitch, roll: 0.0 }, true)
    } else {
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        (EulerAngles { yaw, pitch, roll }, false)
    }
}

/// Rigid transform from object to camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if err > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// 6-vector form: [yaw, pitch, roll, tx, ty, tz] (radians, scene units).
    pub fn xi(&self) -> [f64; 6] {
        let (e, _) = euler_from_rotation(&self.rotation);
        [
            e.yaw,
            e.pitch,
            e.roll,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_xi(xi: &[f64; 6]) -> Self {
        let rotation = rotation_from_euler(&EulerAngles {
            yaw: xi[0],
            pitch: xi[1],
            roll: xi[2],
        });
        Self {
            rotation,
            translation: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }
}

/// Perspective projection. Returns the dehomogenized pixel coordinates and
/// scaling factors (depths) of each point; errors on non-positive depth.
pub fn project(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    points: &[Vector3<f64>],
) -> Result<(Vec<[f64; 2]>, Vec<f64>), GeometryError> {
    let k = intrinsics.matrix();
    let mut pixels = Vec::with_capacity(points.len());
    let mut depths = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let h = k * (pose.rotation * p + pose.translation);
        if h.z <= 1e-12 {
            return Err(GeometryError::BehindCamera {
                index,
                depth: h.z,
            });
        }
        pixels.push([h.x / h.z, h.y / h.z]);
        depths.push(h.z);
    }
    Ok((pixels, depths))
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = (a + PI) % (2.0 * PI);
    if x < 0.0 {
        x += 2.0 * PI;
    }
    x - PI
}

/// Per-axis pose error: rotation differences in degrees (angle-wrapped into
/// [0, 180]) and absolute translation differences in scene units.
pub fn pose_error(pose_hat: &Pose, pose: &Pose) -> ([f64; 3], [f64; 3]) {
    let (ea, _) = euler_from_rotation(&pose_hat.rotation);
    let (eb, _) = euler_from_rotation(&pose.rotation);
    let mut d_r = [0.0; 3];
    for (i, (a, b)) in ea.as_array().iter().zip(eb.as_array()).enumerate() {
        d_r[i] = wrap_angle(a - b).abs().to_degrees();
    }
    let dt = pose_hat.translation - pose.translation;
    (d_r, [dt.x.abs(), dt.y.abs(), dt.z.abs()])
}

/// Per-axis pose error thresholds: rotation in degrees, translation in
/// scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorBudget {
    pub eps_r_deg: [f64; 3],
    pub eps_t: [f64; 3],
}

impl PoseErrorBudget {
    pub fn new(eps_r_deg: [f64; 3], eps_t: [f64; 3]) -> Result<Self, GeometryError> {
        if eps_r_deg.iter().chain(&eps_t).any(|&e| e <= 0.0) {
            return Err(GeometryError::NonPositiveBudget);
        }
        Ok(Self { eps_r_deg, eps_t })
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.eps_r_deg.map(|e| e * alpha),
            self.eps_t.map(|e| e * alpha),
        )
    }

    /// Bound vector in the xi units (radians for rotation axes).
    pub fn bound_vector(&self) -> [f64; 6] {
        [
            self.eps_r_deg[0].to_radians(),
            self.eps_r_deg[1].to_radians(),
            self.eps_r_deg[2].to_radians(),
            self.eps_t[0],
            self.eps_t[1],
            self.eps_t[2],
        ]
    }

    /// Box polytope `P_xi dxi <= b_xi` with 12 signed rows: +e_i then -e_i,
    /// b = (eps_r, eps_t, eps_r, eps_t) with rotation rows in radians.
    pub fn to_polytope(&self) -> (DMatrix<f64>, DVector<f64>) {
        let b6 = self.bound_vector();
        let mut p = DMatrix::zeros(12, 6);
        let mut b = DVector::zeros(12);
        for i in 0..6 {
            p[(i, i)] = 1.0;
            p[(i + 6, i)] = -1.0;
            b[i] = b6[i];
            b[i + 6] = b6[i];
        }
        (p, b)
    }

    /// Whether a pose deviation (in xi units) satisfies the budget box.
    pub fn contains(&self, dxi: &[f64; 6]) -> bool {
        let b6 = self.bound_vector();
        dxi.iter().zip(b6).all(|(d, b)| d.abs() <= b)
    }
}

/// A synthetic or loaded certification scene: intrinsics, 3-D keypoints,
/// their ground-truth 2-D projections and the nominal pose.
#[derive(Debug, Clone)]
pub struct KeypointScene {
    pub intrinsics: CameraIntrinsics,
    pub points3d: Vec<Vector3<f64>>,
    pub points2d: Vec<[f64; 2]>,
    pub pose: Pose,
    pub depths: Vec<f64>,
}

impl KeypointScene {
    pub fn new(
        intrinsics: CameraIntrinsics,
        points3d: Vec<Vector3<f64>>,
        points2d: Vec<[f64; 2]>,
        pose: Pose,
    ) -> Result<Self, GeometryError> {
        if points3d.len() < 4 {
            return Err(GeometryError::InsufficientPoints(points3d.len()));
        }
        if points3d.len() != points2d.len() {
            return Err(GeometryError::MalformedScene(format!(
                "{} 3d points but {} 2d points",
                points3d.len(),
                points2d.len()
            )));
        }
        // Depth positivity under the nominal pose is part of the invariant.
        let (_, depths) = project(&intrinsics, &pose, &points3d)?;
        Ok(Self {
            intrinsics,
            points3d,
            points2d,
            pose,
            depths,
        })
    }

    pub fn keypoint_count(&self) -> usize {
        self.points3d.len()
    }

    /// A scene whose 2-D points are the exact projections of its 3-D points.
    pub fn noiseless(
        intrinsics: CameraIntrinsics,
        points3d: Vec<Vector3<f64>>,
        pose: Pose,
    ) -> Result<Self, GeometryError> {
        let (points2d, _) = project(&intrinsics, &pose, &points3d)?;
        Self::new(intrinsics, points3d, points2d, pose)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        let file: SceneFile = serde_json::from_str(&text)
            .map_err(|e| GeometryError::MalformedScene(e.to_string()))?;
        file.into_scene()
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let file = SceneFile::from_scene(self);
        std::fs::write(path, serde_json::to_string_pretty(&file).unwrap())?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    pub points3d: Vec<[f64; 3]>,
    pub points2d: Vec<[f64; 2]>,
    pub pose: ScenePose,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScenePose {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl SceneFile {
    pub fn into_scene(self) -> Result<KeypointScene, GeometryError> {
        let k = Matrix3::from_row_slice(&self.k);
        let intrinsics = CameraIntrinsics::from_matrix(&k)?;
        let rotation = Matrix3::from_row_slice(&self.pose.r);
        let pose = Pose::new(rotation, Vector3::from_row_slice(&self.pose.t))?;
        let points3d = self
            .points3d
            .iter()
            .map(|p| Vector3::new(p[0], p[1], p[2]))
            .collect();
        KeypointScene::new(intrinsics, points3d, self.points2d, pose)
    }

    pub fn from_scene(scene: &KeypointScene) -> Self {
        let k = scene.intrinsics.matrix();
        let mut karr = [0.0; 9];
        let mut rarr = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                karr[i * 3 + j] = k[(i, j)];
                rarr[i * 3 + j] = scene.pose.rotation[(i, j)];
            }
        }
        SceneFile {
            k: karr,
            points3d: scene.points3d.iter().map(|p| [p.x, p.y, p.z]).collect(),
            points2d: scene.points2d.clone(),
            pose: ScenePose {
                r: rarr,
                t: [
                    scene.pose.translation.x,
                    scene.pose.translation.y,
                    scene.pose.translation.z,
                ],
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn principal_point_ray() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0).unwrap();
        let (v, l) = project(&intr, &Pose::identity(), &[Vector3::new(0.0, 0.0, 1.0)]).unwrap();
        assert_eq!(v[0], [32.0, 24.0]);
        assert_eq!(l[0], 1.0);
    }

    #[test]
    fn off_axis_projection_hand_check() {
        let intr = CameraIntrinsics::new(2.0, 2.0, 0.0, 0.0).unwrap();
        let (v, l) = project(&intr, &Pose::identity(), &[Vector3::new(1.0, 0.0, 2.0)]).unwrap();
        assert!((v[0][0] - 1.0).abs() < 1e-12 && v[0][1].abs() < 1e-12);
        assert_eq!(l[0], 2.0);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let intr = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let res = project(&intr, &Pose::identity(), &[Vector3::new(0.0, 0.0, -1.0)]);
        assert!(matches!(res, Err(GeometryError::BehindCamera { index: 0, .. })));
    }

    #[test]
    fn identity_euler_is_zero() {
        let (e, lock) = euler_from_rotation(&Matrix3::identity());
        assert_eq!(e.as_array(), [0.0, 0.0, 0.0]);
        assert!(!lock);
    }

    #[test]
    fn ninety_degree_yaw() {
        let r = rotation_from_euler(&EulerAngles {
            yaw: FRAC_PI_2,
            pitch: 0.0,
            roll: 0.0,
        });
        let (e, _) = euler_from_rotation(&r);
        assert!((e.yaw - FRAC_PI_2).abs() < 1e-12);
        assert!(e.pitch.abs() < 1e-12 && e.roll.abs() < 1e-12);
    }

    #[test]
    fn gimbal_lock_sets_flag_and_zero_roll() {
        let r = rotation_from_euler(&EulerAngles {
            yaw: 0.3,
            pitch: FRAC_PI_2,
            roll: 0.2,
        });
        let (e, lock) = euler_from_rotation(&r);
        assert!(lock);
        assert_eq!(e.roll, 0.0);
        // Round trip still reproduces the rotation even though the triple
        // is not unique at the singularity.
        let r2 = rotation_from_euler(&e);
        assert!((r - r2).norm() < 1e-9);
    }

    #[test]
    fn pose_error_wraps_angles() {
        let a = Pose::from_xi(&[179f64.to_radians(), 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = Pose::from_xi(&[(-179f64).to_radians(), 0.0, 0.0, 0.0, 0.0, 0.0]);
        let (dr, _) = pose_error(&a, &b);
        assert!((dr[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn pose_error_absolute_translation() {
        let a = Pose::from_xi(&[0.0, 0.0, 0.0, 1.0, -2.0, 0.5]);
        let b = Pose::identity();
        let (dr, dt) = pose_error(&a, &b);
        assert_eq!(dr, [0.0, 0.0, 0.0]);
        assert_eq!(dt, [1.0, 2.0, 0.5]);
    }

    #[test]
    fn budget_polytope_structure() {
        let budget = PoseErrorBudget::new([10.0, 10.0, 10.0], [4.0, 4.0, 20.0]).unwrap();
        let (p, b) = budget.to_polytope();
        assert_eq!(p.nrows(), 12);
        let rad = 10f64.to_radians();
        assert!((b[0] - rad).abs() < 1e-12 && (b[6] - rad).abs() < 1e-12);
        assert_eq!(b[5], 20.0);
        // origin is interior
        assert!(budget.contains(&[0.0; 6]));
        // yaw at 1.1 * eps violates
        let mut dxi = [0.0; 6];
        dxi[0] = 1.1 * rad;
        assert!(!budget.contains(&dxi));
    }

    #[test]
    fn euler_roundtrip_away_from_lock() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let e = EulerAngles {
                yaw: rng.gen_range(-PI..PI),
                pitch: rng.gen_range(-(FRAC_PI_2 - 0.01)..(FRAC_PI_2 - 0.01)),
                roll: rng.gen_range(-PI..PI),
            };
            let (back, lock) = euler_from_rotation(&rotation_from_euler(&e));
            assert!(!lock);
            assert!((back.yaw - e.yaw).abs() < 1e-9);
            assert!((back.pitch - e.pitch).abs() < 1e-9);
            assert!((back.roll - e.roll).abs() < 1e-9);
        }
    }
}
