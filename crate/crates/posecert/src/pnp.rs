//! Nonlinear-least-squares PnP.
//!
//! The objective is `G(xi; V) = sum_k || r_k ||^2` with the scaled residual
//! `r_k = (h0 - h2*vx_k, h1 - h2*vy_k)` where `h = K (R p_k + t)`. This is
//! the homogeneous form of the reprojection error: it vanishes exactly when
//! `lambda_k [v_k; 1] = K (R p_k + t)` and keeps the objective polynomial in
//! the pose, which the sensitivity analysis relies on.

use nalgebra::{DMatrix, DVector, Matrix3, SVD, Vector3, Vector6};
use thiserror::Error;

use crate::camera::{
    euler_from_rotation, rotation_from_euler, CameraIntrinsics, EulerAngles, Pose,
};

#[derive(Debug, Error)]
pub enum PnpError {
    #[error("underdetermined: PnP needs at least 4 points, got {0}")]
    Underdetermined(usize),
    #[error("degenerate keypoint geometry (Jacobian singular value ratio {ratio:.3e})")]
    Degenerate { ratio: f64 },
    #[error("did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("{0} 3d points but {1} 2d observations")]
    CountMismatch(usize, usize),
    #[error("DLT needs at least 6 points, got {0}")]
    DltUnderdetermined(usize),
}

const MAX_ITERS: usize = 200;
const GRAD_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-12;
const SINGULARITY_RATIO: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PnpSolution {
    pub pose: Pose,
    /// Final value of the least-squares objective.
    pub objective: f64,
    pub gradient_inf_norm: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting at the initial value.
    pub objective_history: Vec<f64>,
}

/// Residual vector (length 2 K_pts) of the homogeneous reprojection error.
pub fn residuals(
    intrinsics: &CameraIntrinsics,
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    xi: &[f64; 6],
) -> DVector<f64> {
    let k = intrinsics.matrix();
    let pose = Pose::from_xi(xi);
    let mut r = DVector::zeros(2 * points3d.len());
    for (i, (p, v)) in points3d.iter().zip(points2d).enumerate() {
        let h = k * (pose.rotation * p + pose.translation);
        r[2 * i] = h.x - h.z * v[0];
        r[2 * i + 1] = h.y - h.z * v[1];
    }
    r
}

/// Scalar objective of the least-squares problem.
pub fn objective(
    intrinsics: &CameraIntrinsics,
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    xi: &[f64; 6],
) -> f64 {
    residuals(intrinsics, points3d, points2d, xi).norm_squared()
}

fn rotation_partials(e: &EulerAngles) -> [Matrix3<f64>; 3] {
    let (sy, cy) = e.yaw.sin_cos();
    let (sp, cp) = e.pitch.sin_cos();
    let (sr, cr) = e.roll.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let dz = Matrix3::new(-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0);
    let dy = Matrix3::new(-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp);
    let dx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr);
    [dz * ry * rx, rz * dy * rx, rz * ry * dx]
}

/// Analytic Jacobian of the residual vector w.r.t. the pose parameters xi
/// (2 K_pts x 6).
pub fn jacobian_xi(
    intrinsics: &CameraIntrinsics,
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    xi: &[f64; 6],
) -> DMatrix<f64> {
    let k = intrinsics.matrix();
    let e = EulerAngles {
        yaw: xi[0],
        pitch: xi[1],
        roll: xi[2],
    };
    let dr = rotation_partials(&e);
    let mut j = DMatrix::zeros(2 * points3d.len(), 6);
    for (i, (p, v)) in points3d.iter().zip(points2d).enumerate() {
        for c in 0..6 {
            // dh/dxi_c: rotation of the point for angles, K column for t.
            let dh = if c < 3 {
                k * (dr[c] * p)
            } else {
                Vector3::new(k[(0, c - 3)], k[(1, c - 3)], k[(2, c - 3)])
            };
            j[(2 * i, c)] = dh.x - dh.z * v[0];
            j[(2 * i + 1, c)] = dh.y - dh.z * v[1];
        }
    }
    j
}

/// Analytic Jacobian of the residual vector w.r.t. the stacked pixel
/// observations `v = (vx_1, vy_1, ..., vx_K, vy_K)` (2 K_pts x 2 K_pts).
/// Block-diagonal: `dr_k/dv_k = -h2_k * I_2`.
pub fn jacobian_v(
    intrinsics: &CameraIntrinsics,
    points3d: &[Vector3<f64>],
    xi: &[f64; 6],
) -> DMatrix<f64> {
    let k = intrinsics.matrix();
    let pose = Pose::from_xi(xi);
    let n = points3d.len();
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for (i, p) in points3d.iter().enumerate() {
        let h = k * (pose.rotation * p + pose.translation);
        j[(2 * i, 2 * i)] = -h.z;
        j[(2 * i + 1, 2 * i + 1)] = -h.z;
    }
    j
}

/// Levenberg–Marquardt minimization of the PnP objective from `init`.
pub fn solve_pnp(
    intrinsics: &CameraIntrinsics,
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    init: &Pose,
) -> Result<PnpSolution, PnpError> {
    if points3d.len() < 4 {
        return Err(PnpError::Underdetermined(points3d.len()));
    }
    if points3d.len() != points2d.len() {
        return Err(PnpError::CountMismatch(points3d.len(), points2d.len()));
    }

    let mut xi = init.xi();
    let mut r = residuals(intrinsics, points3d, points2d, &xi);
    let mut obj = r.norm_squared();
    let mut history = vec![obj];
    let mut damping = 1e-3;

    for iter in 0..MAX_ITERS {
        let j = jacobian_xi(intrinsics, points3d, points2d, &xi);

        let svd = SVD::new(j.clone(), false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smax <= 0.0 || smin / smax < SINGULARITY_RATIO {
            return Err(PnpError::Degenerate {
                ratio: if smax > 0.0 { smin / smax } else { 0.0 },
            });
        }

        let grad = j.transpose() * &r;
        let grad_inf = grad.amax();
        if grad_inf < GRAD_TOL {
            return Ok(PnpSolution {
                pose: Pose::from_xi(&xi),
                objective: obj,
                gradient_inf_norm: grad_inf,
                iterations: iter,
                objective_history: history,
            });
        }

        let jtj = j.transpose() * &j;
        let mut accepted = false;
        for _ in 0..25 {
            let mut a = jtj.clone();
            for d in 0..6 {
                a[(d, d)] += damping;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                damping *= 10.0;
                continue;
            };
            let step6 = Vector6::from_iterator(step.iter().cloned());
            let mut cand = xi;
            for d in 0..6 {
                cand[d] += step6[d];
            }
            let rc = residuals(intrinsics, points3d, points2d, &cand);
            let oc = rc.norm_squared();
            if oc < obj {
                xi = cand;
                r = rc;
                obj = oc;
                history.push(obj);
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                if step6.norm() < STEP_TOL {
                    return Ok(PnpSolution {
                        pose: Pose::from_xi(&xi),
                        objective: obj,
                        gradient_inf_norm: grad_inf,
                        iterations: iter + 1,
                        objective_history: history,
                    });
                }
                break;
            }
            if step6.norm() < STEP_TOL {
                // Cannot improve with an infinitesimal step: local optimum.
                return Ok(PnpSolution {
                    pose: Pose::from_xi(&xi),
                    objective: obj,
                    gradient_inf_norm: grad_inf,
                    iterations: iter + 1,
                    objective_history: history,
                });
            }
            damping *= 10.0;
        }
        if !accepted {
            return Ok(PnpSolution {
                pose: Pose::from_xi(&xi),
                objective: obj,
                gradient_inf_norm: grad.amax(),
                iterations: iter + 1,
                objective_history: history,
            });
        }
    }
    Err(PnpError::NotConverged(MAX_ITERS))
}

/// Direct linear transform initialization for standalone use when no nominal
/// pose is available. Needs >= 6 non-degenerate points; the result should be
/// refined with [`solve_pnp`].
pub fn solve_pnp_dlt(
    intrinsics: &CameraIntrinsics,
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
) -> Result<Pose, PnpError> {
    let n = points3d.len();
    if n < 6 {
        return Err(PnpError::DltUnderdetermined(n));
    }
    if n != points2d.len() {
        return Err(PnpError::CountMismatch(n, points2d.len()));
    }
    // Rows of the homogeneous system A m = 0 for the 3x4 projection matrix.
    let mut a = DMatrix::zeros(2 * n, 12);
    for (i, (p, v)) in points3d.iter().zip(points2d).enumerate() {
        let ph = [p.x, p.y, p.z, 1.0];
        for c in 0..4 {
            a[(2 * i, c)] = ph[c];
            a[(2 * i, 8 + c)] = -v[0] * ph[c];
            a[(2 * i + 1, 4 + c)] = ph[c];
            a[(2 * i + 1, 8 + c)] = -v[1] * ph[c];
        }
    }
    let svd = SVD::new(a, false, true);
    let vt = svd.v_t.expect("svd with v_t");
    let m = vt.row(vt.nrows() - 1);
    let proj = Matrix3x4::from_row_slice(m.transpose().as_slice());

    let kinv = intrinsics
        .matrix()
        .try_inverse()
        .expect("intrinsics invertible");
    let ext = kinv * proj;
    let b = ext.fixed_view::<3, 3>(0, 0).into_owned();
    // Scale so the rotation block has unit singular values.
    let bs = SVD::new(b, false, false);
    let scale = bs.singular_values.iter().sum::<f64>() / 3.0;
    if scale < 1e-12 {
        return Err(PnpError::Degenerate { ratio: 0.0 });
    }
    let mut sign = 1.0;
    // Fix the projective sign so depths are positive.
    let t = ext.column(3) / scale;
    let mean_depth: f64 = points3d
        .iter()
        .map(|p| (b * p / scale + Vector3::new(t[0], t[1], t[2])).z)
        .sum::<f64>()
        / n as f64;
    if mean_depth < 0.0 {
        sign = -1.0;
    }
    // Nearest rotation in the Frobenius sense.
    let bsvd = SVD::new(sign * b, true, true);
    let u = bsvd.u.expect("u");
    let vt2 = bsvd.v_t.expect("v_t");
    let mut r = u * &vt2;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt2;
    }
    let t = sign * ext.column(3) / scale;
    Pose::new(r, Vector3::new(t[0], t[1], t[2])).map_err(|_| PnpError::Degenerate { ratio: 0.0 })
}

type Matrix3x4 = nalgebra::Matrix3x4<f64>;

/// Perturbs a pose by the given rotation (radians, per Euler axis) and
/// translation offsets; used to build LM initial guesses in tests and demos.
pub fn perturb_pose(pose: &Pose, d_angles: [f64; 3], d_t: [f64; 3]) -> Pose {
    let (e, _) = euler_from_rotation(&pose.rotation);
    let r = rotation_from_euler(&EulerAngles {
        yaw: e.yaw + d_angles[0],
        pitch: e.pitch + d_angles[1],
        roll: e.roll + d_angles[2],
    });
    Pose {
        rotation: r,
        translation: pose.translation + Vector3::new(d_t[0], d_t[1], d_t[2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{pose_error, project};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_points() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.3, 0.3] {
                for &z in &[-0.2, 0.2] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        pts
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::from_xi(&[
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(2.0..4.0),
        ])
    }

    #[test]
    fn recovers_pose_from_perturbed_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let intr = camera();
        let pts = box_points();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let (v, _) = project(&intr, &pose, &pts).unwrap();
            let init = perturb_pose(&pose, [2f64.to_radians(); 3], [0.05; 3]);
            let sol = solve_pnp(&intr, &pts, &v, &init).unwrap();
            let (dr, dt) = pose_error(&sol.pose, &pose);
            for d in dr {
                assert!(d.to_radians() < 1e-6, "rotation error {d} deg");
            }
            for d in dt {
                assert!(d < 1e-6, "translation error {d}");
            }
            assert!(sol.objective < 1e-16, "objective {}", sol.objective);
        }
    }

    #[test]
    fn objective_history_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let intr = camera();
        let pts = box_points();
        let pose = random_pose(&mut rng);
        let (v, _) = project(&intr, &pose, &pts).unwrap();
        let init = perturb_pose(&pose, [0.1, -0.08, 0.05], [0.1, -0.1, 0.2]);
        let sol = solve_pnp(&intr, &pts, &v, &init).unwrap();
        for w in sol.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-18);
        }
    }

    #[test]
    fn three_points_is_underdetermined() {
        let intr = camera();
        let pts = box_points()[..3].to_vec();
        let v = vec![[0.0, 0.0]; 3];
        assert!(matches!(
            solve_pnp(&intr, &pts, &v, &Pose::identity()),
            Err(PnpError::Underdetermined(3))
        ));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let intr = camera();
        let pts: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let pose = Pose::from_xi(&[0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let (v, _) = project(&intr, &pose, &pts).unwrap();
        match solve_pnp(&intr, &pts, &v, &pose) {
            Err(PnpError::Degenerate { .. }) => {}
            other => panic!("expected degenerate, got {other:?}"),
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let intr = camera();
        let pts = box_points();
        let pose = random_pose(&mut rng);
        let (v, _) = project(&intr, &pose, &pts).unwrap();
        let xi = perturb_pose(&pose, [0.05; 3], [0.02; 3]).xi();
        let j = jacobian_xi(&intr, &pts, &v, &xi);
        for c in 0..6 {
            let h = 1e-6 * (1.0 + xi[c].abs());
            let mut xp = xi;
            let mut xm = xi;
            xp[c] += h;
            xm[c] -= h;
            let rp = residuals(&intr, &pts, &v, &xp);
            let rm = residuals(&intr, &pts, &v, &xm);
            let fd = (rp - rm) / (2.0 * h);
            for row in 0..fd.len() {
                let denom = 1.0 + j[(row, c)].abs();
                assert!(
                    (j[(row, c)] - fd[row]).abs() / denom < 1e-5,
                    "col {c} row {row}: analytic {} fd {}",
                    j[(row, c)],
                    fd[row]
                );
            }
        }
    }

    #[test]
    fn jacobian_v_is_negative_depth_blocks() {
        let intr = camera();
        let pts = box_points();
        let pose = Pose::from_xi(&[0.1, 0.0, -0.1, 0.0, 0.0, 3.0]);
        let (_, depths) = project(&intr, &pose, &pts).unwrap();
        let jv = jacobian_v(&intr, &pts, &pose.xi());
        for (i, d) in depths.iter().enumerate() {
            assert!((jv[(2 * i, 2 * i)] + d).abs() < 1e-12);
            assert!((jv[(2 * i + 1, 2 * i + 1)] + d).abs() < 1e-12);
            assert_eq!(jv[(2 * i, 2 * i + 1)], 0.0);
        }
    }

    #[test]
    fn dlt_then_lm_without_pose_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let intr = camera();
        let pts = box_points();
        let pose = random_pose(&mut rng);
        let (v, _) = project(&intr, &pose, &pts).unwrap();
        let init = solve_pnp_dlt(&intr, &pts, &v).unwrap();
        let sol = solve_pnp(&intr, &pts, &v, &init).unwrap();
        let (dr, dt) = pose_error(&sol.pose, &pose);
        assert!(dr.iter().all(|&d| d.to_radians() < 1e-6));
        assert!(dt.iter().all(|&d| d < 1e-6));
    }
}
