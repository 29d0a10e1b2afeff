//! Monte Carlo estimates of how well an allocated hyper-rectangle
//! approximates the true tolerable-error sets in keypoint and pose space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pose_error, project, KeypointScene, Pose, PoseErrorBudget};
use crate::pnp::solve_pnp;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SoundnessReport {
    /// Fraction of sampled rectangle vertices whose re-solved pose error
    /// stays within the (alpha-scaled) budget.
    pub ratio: f64,
    /// PnP divergences, counted as failures in `ratio`.
    pub diverged: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompletenessReport {
    /// Fraction of sampled tolerable pose errors whose reprojection lands
    /// inside the hyper-rectangle.
    pub ratio: f64,
    /// Samples excluded because a keypoint fell behind the camera.
    pub behind_camera: usize,
    pub samples: usize,
}

/// Samples sign matrices A in {-1,1}, forms `V_hat = A (.) dv* + V`,
/// re-solves PnP and counts the fraction of pose errors within the
/// alpha-scaled budget.
pub fn probabilistic_soundness_test(
    scene: &KeypointScene,
    deltas: &[u64],
    budget: &PoseErrorBudget,
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> SoundnessReport {
    assert_eq!(deltas.len(), 2 * scene.keypoint_count());
    let results: Vec<(bool, bool)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut v_hat = scene.points2d.clone();
            for (k, v) in v_hat.iter_mut().enumerate() {
                for axis in 0..2 {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    v[axis] += sign * deltas[2 * k + axis] as f64;
                }
            }
            match solve_pnp(&scene.intrinsics, &scene.points3d, &v_hat, &scene.pose) {
                Ok(sol) => {
                    let (dr, dt) = pose_error(&sol.pose, &scene.pose);
                    let ok = dr
                        .iter()
                        .zip(budget.eps_r_deg)
                        .all(|(d, e)| *d <= alpha * e)
                        && dt.iter().zip(budget.eps_t).all(|(d, e)| *d <= alpha * e);
                    (ok, false)
                }
                Err(_) => (false, true),
            }
        })
        .collect();
    let ok = results.iter().filter(|r| r.0).count();
    let diverged = results.iter().filter(|r| r.1).count();
    SoundnessReport {
        ratio: ok as f64 / n_samples as f64,
        diverged,
        samples: n_samples,
    }
}

/// Samples pose deviations uniformly in the alpha-scaled budget box,
/// reprojects the keypoints and counts the fraction of reprojection errors
/// inside the hyper-rectangle.
pub fn probabilistic_completeness_test(
    scene: &KeypointScene,
    deltas: &[u64],
    budget: &PoseErrorBudget,
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> CompletenessReport {
    assert_eq!(deltas.len(), 2 * scene.keypoint_count());
    let b6 = budget.bound_vector().map(|b| b * alpha);
    let xi0 = scene.pose.xi();
    let results: Vec<Option<bool>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut xi = xi0;
            for (x, b) in xi.iter_mut().zip(b6) {
                *x += rng.gen_range(-b..=b);
            }
            let pose = Pose::from_xi(&xi);
            match project(&scene.intrinsics, &pose, &scene.points3d) {
                Ok((pix, _)) => {
                    let inside = pix.iter().zip(&scene.points2d).enumerate().all(
                        |(k, (p, v))| {
                            (p[0] - v[0]).abs() <= deltas[2 * k] as f64
                                && (p[1] - v[1]).abs() <= deltas[2 * k + 1] as f64
                        },
                    );
                    Some(inside)
                }
                Err(_) => None,
            }
        })
        .collect();
    let behind = results.iter().filter(|r| r.is_none()).count();
    let inside = results.iter().filter(|r| **r == Some(true)).count();
    let valid = n_samples - behind;
    CompletenessReport {
        ratio: if valid == 0 {
            0.0
        } else {
            inside as f64 / valid as f64
        },
        behind_camera: behind,
        samples: n_samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::synthetic_scene;
    use rand::SeedableRng;

    fn budget() -> PoseErrorBudget {
        PoseErrorBudget::new([10.0, 10.0, 10.0], [4.0, 4.0, 20.0]).unwrap()
    }

    #[test]
    fn zero_deltas_are_perfectly_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = synthetic_scene(&mut rng).unwrap();
        let deltas = vec![0u64; 2 * scene.keypoint_count()];
        let r = probabilistic_soundness_test(&scene, &deltas, &budget(), 1.0, 50, 7);
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.diverged, 0);
    }

    #[test]
    fn zero_pose_set_is_perfectly_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = synthetic_scene(&mut rng).unwrap();
        let deltas = vec![1u64; 2 * scene.keypoint_count()];
        // alpha ~ 0 collapses the budget box to the origin.
        let r = probabilistic_completeness_test(&scene, &deltas, &budget(), 1e-12, 50, 7);
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.behind_camera, 0);
    }

    #[test]
    fn reports_are_reproducible_from_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = synthetic_scene(&mut rng).unwrap();
        let deltas = vec![2u64; 2 * scene.keypoint_count()];
        let a = probabilistic_soundness_test(&scene, &deltas, &budget(), 1.0, 100, 11);
        let b = probabilistic_soundness_test(&scene, &deltas, &budget(), 1.0, 100, 11);
        assert_eq!(a.ratio, b.ratio);
        let c = probabilistic_completeness_test(&scene, &deltas, &budget(), 1.0, 100, 11);
        let d = probabilistic_completeness_test(&scene, &deltas, &budget(), 1.0, 100, 11);
        assert_eq!(c.ratio, d.ratio);
    }

    #[test]
    fn larger_rectangle_is_more_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = synthetic_scene(&mut rng).unwrap();
        let small = vec![1u64; 2 * scene.keypoint_count()];
        let large = vec![40u64; 2 * scene.keypoint_count()];
        let rs = probabilistic_completeness_test(&scene, &small, &budget(), 1.0, 300, 5);
        let rl = probabilistic_completeness_test(&scene, &large, &budget(), 1.0, 300, 5);
        assert!(rl.ratio >= rs.ratio);
    }
}
