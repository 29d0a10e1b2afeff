//! First-order sensitivity of the PnP objective.
//!
//! At a local optimum of `G(xi; v)` the implicit-function theorem links
//! keypoint perturbations to pose perturbations through the linear system
//!
//! ```text
//! [ G_xi^T  -1 ] [dxi]   [ -G_v   ]
//! [ G_xixi   0 ] [dz ] = [ -G_xiv ] dv
//! ```
//!
//! whose first six solution rows form the pose Jacobian `M~` with
//! `dxi ~= M~ dv`. First derivatives are analytic; second derivatives use
//! central finite differences of the analytic gradient.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{KeypointScene, Pose, PoseErrorBudget};
use crate::pnp::{jacobian_v, jacobian_xi, residuals};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("non-finite derivative entry")]
    NonFinite,
    #[error("point depth changes sign inside the finite-difference stencil")]
    DepthSignFlip,
    #[error("M_xi is singular or ill-conditioned (condition {0:.3e})")]
    IllConditioned(f64),
}

/// Condition-number cutoff before M_xi is treated as singular. Sensitivity
/// math runs in f64 even though model weights are f32.
pub const CONDITION_CUTOFF: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct SensitivityMatrices {
    /// Gradient of G w.r.t. the pose parameters (6).
    pub g_xi: DVector<f64>,
    /// Hessian of G w.r.t. the pose parameters (6x6), finite-differenced.
    pub g_xixi: DMatrix<f64>,
    /// Gradient of G w.r.t. the stacked pixel observations (2 K_pts).
    pub g_v: DVector<f64>,
    /// Cross derivative d2G/(dxi dv) (6 x 2 K_pts), finite-differenced.
    pub g_xiv: DMatrix<f64>,
    /// Assembled right-hand side map (7 x 2 K_pts).
    pub m_vxi: DMatrix<f64>,
    /// Assembled system matrix (7 x 7).
    pub m_xi: DMatrix<f64>,
    /// True when the supplied xi was not close to a stationary point.
    pub gradient_warning: bool,
}

/// Pose Jacobian extracted from the solved sensitivity system.
#[derive(Debug, Clone)]
pub struct PoseJacobian {
    /// `M~`: 6 x 2 K_pts map from keypoint perturbations to pose
    /// perturbations, rows ordered (yaw, pitch, roll, tx, ty, tz).
    pub m_tilde: DMatrix<f64>,
    /// Sensitivity of the optimal objective value (row 7 of the solution);
    /// not used downstream but part of the solved system.
    pub dz: DVector<f64>,
    /// Condition number of M_xi.
    pub condition: f64,
}

fn analytic_g_xi(scene: &KeypointScene, points2d: &[[f64; 2]], xi: &[f64; 6]) -> DVector<f64> {
    let r = residuals(&scene.intrinsics, &scene.points3d, points2d, xi);
    let j = jacobian_xi(&scene.intrinsics, &scene.points3d, points2d, xi);
    2.0 * j.transpose() * r
}

fn min_depth(scene: &KeypointScene, xi: &[f64; 6]) -> f64 {
    let pose = Pose::from_xi(xi);
    scene
        .points3d
        .iter()
        .map(|p| (pose.rotation * p + pose.translation).z)
        .fold(f64::INFINITY, f64::min)
}

/// Derivatives of the PnP objective at `xi`, which should be (near) the
/// optimum for the scene's observations.
pub fn nls_derivatives(
    scene: &KeypointScene,
    xi: &[f64; 6],
) -> Result<SensitivityMatrices, SensitivityError> {
    let v = &scene.points2d;
    let n2 = 2 * scene.keypoint_count();

    let g_xi = analytic_g_xi(scene, v, xi);
    let r = residuals(&scene.intrinsics, &scene.points3d, v, xi);
    let g_v = 2.0 * jacobian_v(&scene.intrinsics, &scene.points3d, xi).transpose() * &r;

    // Hessian w.r.t. xi: central differences of the analytic gradient.
    let mut g_xixi = DMatrix::zeros(6, 6);
    for j in 0..6 {
        let h = 1e-6 * (1.0 + xi[j].abs());
        let mut xp = *xi;
        let mut xm = *xi;
        xp[j] += h;
        xm[j] -= h;
        if min_depth(scene, &xp) <= 0.0 || min_depth(scene, &xm) <= 0.0 {
            return Err(SensitivityError::DepthSignFlip);
        }
        let col = (analytic_g_xi(scene, v, &xp) - analytic_g_xi(scene, v, &xm)) / (2.0 * h);
        g_xixi.set_column(j, &col);
    }

    // Cross derivative: differentiate the analytic xi-gradient w.r.t. each
    // observation component.
    let mut g_xiv = DMatrix::zeros(6, n2);
    for i in 0..n2 {
        let (k, axis) = (i / 2, i % 2);
        let h = 1e-6 * (1.0 + v[k][axis].abs());
        let mut vp = v.clone();
        let mut vm = v.clone();
        vp[k][axis] += h;
        vm[k][axis] -= h;
        let col = (analytic_g_xi(scene, &vp, xi) - analytic_g_xi(scene, &vm, xi)) / (2.0 * h);
        g_xiv.set_column(i, &col);
    }

    // M_vxi = [-G_v; -G_xiv], M_xi = [G_xi^T -1; G_xixi 0].
    let mut m_vxi = DMatrix::zeros(7, n2);
    m_vxi.row_mut(0).copy_from(&(-&g_v).transpose());
    m_vxi.view_mut((1, 0), (6, n2)).copy_from(&(-&g_xiv));
    let mut m_xi = DMatrix::zeros(7, 7);
    m_xi.view_mut((0, 0), (1, 6)).copy_from(&g_xi.transpose());
    m_xi[(0, 6)] = -1.0;
    m_xi.view_mut((1, 0), (6, 6)).copy_from(&g_xixi);

    if g_xi.iter().any(|x| !x.is_finite())
        || g_v.iter().any(|x| !x.is_finite())
        || g_xixi.iter().any(|x| !x.is_finite())
        || g_xiv.iter().any(|x| !x.is_finite())
    {
        return Err(SensitivityError::NonFinite);
    }

    Ok(SensitivityMatrices {
        gradient_warning: g_xi.amax() > 1e-4,
        g_xi,
        g_xixi,
        g_v,
        g_xiv,
        m_vxi,
        m_xi,
    })
}

/// Solves `M_xi X = M_vxi` and extracts the six pose rows.
pub fn pose_jacobian(mats: &SensitivityMatrices) -> Result<PoseJacobian, SensitivityError> {
    let svd = SVD::new(mats.m_xi.clone(), true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > CONDITION_CUTOFF {
        return Err(SensitivityError::IllConditioned(condition));
    }
    let x = svd
        .solve(&mats.m_vxi, 0.0)
        .map_err(|_| SensitivityError::IllConditioned(condition))?;
    // Unknown ordering is (dxi, dz): pose rows first, objective slot last.
    let m_tilde = x.rows(0, 6).into_owned();
    let dz = x.row(6).transpose();
    if m_tilde.iter().any(|v| !v.is_finite()) {
        return Err(SensitivityError::NonFinite);
    }
    Ok(PoseJacobian {
        m_tilde,
        dz,
        condition,
    })
}

/// Keypoint-error polytope `{dv : |P_v dv| <= b_v}` in the two-sided 6-row
/// form. The 12 signed budget rows collapse pairwise because the budget box
/// rows are +/- unit vectors, leaving `P_v = M~` and `b_v = b_xi`.
#[derive(Debug, Clone)]
pub struct TolerancePolytope {
    pub p_v: DMatrix<f64>,
    pub b_v: DVector<f64>,
    pub scene_id: String,
}

impl TolerancePolytope {
    pub fn contains(&self, dv: &DVector<f64>) -> bool {
        let y = &self.p_v * dv;
        y.iter().zip(self.b_v.iter()).all(|(v, b)| v.abs() <= *b)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(TolerancePolytopeFile::from(self)).unwrap()
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, serde_json::Error> {
        let file: TolerancePolytopeFile = serde_json::from_value(value.clone())?;
        Ok(file.into())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TolerancePolytopeFile {
    #[serde(rename = "P_v")]
    p_v: Vec<Vec<f64>>,
    b_v: Vec<f64>,
    scene_id: String,
}

impl From<&TolerancePolytope> for TolerancePolytopeFile {
    fn from(t: &TolerancePolytope) -> Self {
        TolerancePolytopeFile {
            p_v: (0..t.p_v.nrows())
                .map(|i| t.p_v.row(i).iter().cloned().collect())
                .collect(),
            b_v: t.b_v.iter().cloned().collect(),
            scene_id: t.scene_id.clone(),
        }
    }
}

impl From<TolerancePolytopeFile> for TolerancePolytope {
    fn from(f: TolerancePolytopeFile) -> Self {
        let rows = f.p_v.len();
        let cols = f.p_v.first().map_or(0, |r| r.len());
        let p_v = DMatrix::from_fn(rows, cols, |i, j| f.p_v[i][j]);
        TolerancePolytope {
            p_v,
            b_v: DVector::from_vec(f.b_v),
            scene_id: f.scene_id,
        }
    }
}

/// `P_v = P_xi M~`, `b_v = b_xi`, collapsed to the two-sided form.
pub fn keypoint_polytope(
    m_tilde: &DMatrix<f64>,
    budget: &PoseErrorBudget,
    scene_id: &str,
) -> TolerancePolytope {
    let b6 = budget.bound_vector();
    TolerancePolytope {
        p_v: m_tilde.clone(),
        b_v: DVector::from_row_slice(&b6),
        scene_id: scene_id.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::pnp::{objective, solve_pnp};
    use nalgebra::Vector3;

    fn test_scene() -> KeypointScene {
        let intr = CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0).unwrap();
        let mut pts = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.3, 0.3] {
                for &z in &[-0.2, 0.2] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        let pose = Pose::from_xi(&[0.2, -0.1, 0.15, 0.05, -0.02, 3.0]);
        KeypointScene::noiseless(intr, pts, pose).unwrap()
    }

    #[test]
    fn gradient_vanishes_at_noiseless_optimum() {
        let scene = test_scene();
        let xi = scene.pose.xi();
        let mats = nls_derivatives(&scene, &xi).unwrap();
        assert!(mats.g_xi.amax() < 1e-8, "|G_xi| = {}", mats.g_xi.amax());
        assert!(!mats.gradient_warning);
    }

    #[test]
    fn analytic_gradient_matches_objective_finite_differences() {
        let scene = test_scene();
        // Evaluate off-optimum so the gradient is non-trivial.
        let mut xi = scene.pose.xi();
        xi[0] += 0.01;
        xi[4] -= 0.02;
        let mats = nls_derivatives(&scene, &xi).unwrap();
        for j in 0..6 {
            let h = 1e-6 * (1.0 + xi[j].abs());
            let mut xp = xi;
            let mut xm = xi;
            xp[j] += h;
            xm[j] -= h;
            let fd = (objective(&scene.intrinsics, &scene.points3d, &scene.points2d, &xp)
                - objective(&scene.intrinsics, &scene.points3d, &scene.points2d, &xm))
                / (2.0 * h);
            let denom = 1.0 + mats.g_xi[j].abs();
            assert!(
                (mats.g_xi[j] - fd).abs() / denom < 1e-5,
                "component {j}: analytic {} fd {}",
                mats.g_xi[j],
                fd
            );
        }
    }

    #[test]
    fn hessian_symmetric_and_psd_at_optimum() {
        let scene = test_scene();
        let mats = nls_derivatives(&scene, &scene.pose.xi()).unwrap();
        // Relative to the Hessian scale: finite-difference rounding error is
        // proportional to the entry magnitudes (~1e6 with pixel-scale focal
        // lengths).
        let asym = (&mats.g_xixi - mats.g_xixi.transpose()).amax() / mats.g_xixi.amax();
        assert!(asym < 1e-8, "relative asymmetry {asym}");
        let sym = (&mats.g_xixi + mats.g_xixi.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        let min_eig = eig.eigenvalues.min();
        assert!(min_eig > -1e-6, "min eigenvalue {min_eig}");
    }

    #[test]
    fn cross_derivative_matches_transposed_order() {
        // d2G/(dxi dv) computed by differentiating G_xi over v must match
        // differentiating G_v over xi, transposed.
        let scene = test_scene();
        let xi = scene.pose.xi();
        let mats = nls_derivatives(&scene, &xi).unwrap();
        let n2 = 2 * scene.keypoint_count();
        let mut g_vxi = DMatrix::zeros(n2, 6);
        for j in 0..6 {
            let h = 1e-6 * (1.0 + xi[j].abs());
            let mut xp = xi;
            let mut xm = xi;
            xp[j] += h;
            xm[j] -= h;
            let gv = |x: &[f64; 6]| {
                let r = residuals(&scene.intrinsics, &scene.points3d, &scene.points2d, x);
                2.0 * jacobian_v(&scene.intrinsics, &scene.points3d, x).transpose() * r
            };
            let col = (gv(&xp) - gv(&xm)) / (2.0 * h);
            g_vxi.set_column(j, &col);
        }
        let diff = (&mats.g_xiv - g_vxi.transpose()).amax();
        assert!(diff < 1e-5, "cross-derivative mismatch {diff}");
    }

    #[test]
    fn zero_perturbation_predicts_zero_pose_change() {
        let scene = test_scene();
        let mats = nls_derivatives(&scene, &scene.pose.xi()).unwrap();
        let jac = pose_jacobian(&mats).unwrap();
        let dv = DVector::zeros(2 * scene.keypoint_count());
        assert_eq!((&jac.m_tilde * dv).amax(), 0.0);
        assert!(jac.condition < CONDITION_CUTOFF);
    }

    #[test]
    fn prediction_is_linear_in_dv() {
        let scene = test_scene();
        let mats = nls_derivatives(&scene, &scene.pose.xi()).unwrap();
        let jac = pose_jacobian(&mats).unwrap();
        let dv = DVector::from_fn(2 * scene.keypoint_count(), |i, _| (i as f64 * 0.37).sin());
        let lhs = &jac.m_tilde * (2.5 * &dv);
        let rhs = 2.5 * (&jac.m_tilde * &dv);
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn pose_jacobian_predicts_resolve_direction() {
        // Small keypoint shift: the linear prediction must agree with a full
        // PnP re-solve up to second order.
        let scene = test_scene();
        let xi = scene.pose.xi();
        let mats = nls_derivatives(&scene, &xi).unwrap();
        let jac = pose_jacobian(&mats).unwrap();
        let n2 = 2 * scene.keypoint_count();
        let dv = DVector::from_fn(n2, |i, _| 0.1 * ((i as f64 + 1.0) * 0.7).cos());
        let mut v2 = scene.points2d.clone();
        for k in 0..scene.keypoint_count() {
            v2[k][0] += dv[2 * k];
            v2[k][1] += dv[2 * k + 1];
        }
        let sol = solve_pnp(&scene.intrinsics, &scene.points3d, &v2, &scene.pose).unwrap();
        let actual = {
            let nx = sol.pose.xi();
            DVector::from_fn(6, |i, _| nx[i] - xi[i])
        };
        let predicted = &jac.m_tilde * &dv;
        let err = (&actual - &predicted).norm();
        assert!(
            err < 0.05 * actual.norm().max(1e-6),
            "prediction error {err}, |actual| {}",
            actual.norm()
        );
    }

    #[test]
    fn collinear_scene_is_ill_conditioned() {
        let intr = CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0).unwrap();
        let pts: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let pose = Pose::from_xi(&[0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let scene = KeypointScene::noiseless(intr, pts, pose).unwrap();
        let mats = nls_derivatives(&scene, &scene.pose.xi()).unwrap();
        assert!(matches!(
            pose_jacobian(&mats),
            Err(SensitivityError::IllConditioned(_))
        ));
    }

    #[test]
    fn polytope_agrees_with_two_step_membership() {
        use rand::{Rng, SeedableRng};
        let scene = test_scene();
        let mats = nls_derivatives(&scene, &scene.pose.xi()).unwrap();
        let jac = pose_jacobian(&mats).unwrap();
        let budget = PoseErrorBudget::new([10.0, 10.0, 10.0], [4.0, 4.0, 20.0]).unwrap();
        let tol = keypoint_polytope(&jac.m_tilde, &budget, "test");
        let (p_xi, b_xi) = budget.to_polytope();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let dv = DVector::from_fn(2 * scene.keypoint_count(), |_, _| {
                rng.gen_range(-5.0..5.0)
            });
            let direct = {
                let y = &p_xi * (&jac.m_tilde * &dv);
                y.iter().zip(b_xi.iter()).all(|(v, b)| v <= b)
            };
            assert_eq!(tol.contains(&dv), direct);
        }
    }

    #[test]
    fn polytope_json_roundtrip() {
        let scene = test_scene();
        let mats = nls_derivatives(&scene, &scene.pose.xi()).unwrap();
        let jac = pose_jacobian(&mats).unwrap();
        let budget = PoseErrorBudget::new([10.0, 10.0, 10.0], [4.0, 4.0, 20.0]).unwrap();
        let tol = keypoint_polytope(&jac.m_tilde, &budget, "scene-0");
        let back = TolerancePolytope::from_json(&tol.to_json()).unwrap();
        assert_eq!(back.scene_id, "scene-0");
        assert!((&back.p_v - &tol.p_v).amax() < 1e-15);
        assert!((&back.b_v - &tol.b_v).amax() < 1e-15);
    }
}
