//! Threshold allocation: inscribe the largest axis-aligned, axis-symmetric
//! integer hyper-rectangle inside the (scaled) keypoint-error polytope.
//!
//! Membership uses the absolute-row form `kappa * |P_v| dv <= b_v`, which is
//! equivalent to checking every vertex of the symmetric rectangle against the
//! two-sided polytope.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::sensitivity::TolerancePolytope;

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("infeasible polytope: bound row {row} is negative ({value})")]
    Infeasible { row: usize, value: f64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("brute force dimension {0} too large (max 6)")]
    DimensionTooLarge(usize),
    #[error("brute force cap {0} too large (max 12)")]
    CapTooLarge(u64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AllocationConfig {
    pub w1: f64,
    pub w2: f64,
    pub kappa: f64,
    /// Cap for coordinates whose polytope column is all zeros (keypoint axes
    /// with no pose influence); typically half the heatmap dimension.
    pub zero_column_cap: u64,
}

impl AllocationConfig {
    pub fn new(w1: f64, w2: f64, kappa: f64, zero_column_cap: u64) -> Result<Self, AllocationError> {
        if w1 < 0.0 || w2 < 0.0 || w1 + w2 <= 0.0 {
            return Err(AllocationError::BadConfig(format!(
                "weights must be non-negative with positive sum, got ({w1}, {w2})"
            )));
        }
        if kappa <= 0.0 {
            return Err(AllocationError::BadConfig(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        Ok(Self {
            w1,
            w2,
            kappa,
            zero_column_cap,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocatedThresholds {
    /// Per-axis integer pixel tolerances, stacked (x_1, y_1, ..., x_K, y_K).
    pub deltas: Vec<u64>,
    /// Achieved minimum side.
    pub delta: u64,
    /// Product term of the objective; 0 whenever any coordinate is 0.
    pub product: f64,
    /// w1 * product + w2 * delta.
    pub objective: f64,
}

impl AllocatedThresholds {
    fn from_deltas(deltas: Vec<u64>, cfg: &AllocationConfig) -> Self {
        let delta = deltas.iter().copied().min().unwrap_or(0);
        let product: f64 = deltas.iter().map(|&d| d as f64).product();
        AllocatedThresholds {
            objective: cfg.w1 * product + cfg.w2 * delta as f64,
            deltas,
            delta,
            product,
        }
    }
}

const SLACK: f64 = 1e-9;

/// True iff the symmetric rectangle with half-sides `deltas` fits inside the
/// polytope scaled by `kappa`: `kappa * sum_j |P_ij| dv_j <= b_i` row-wise.
pub fn rect_in_polytope(deltas: &[f64], polytope: &TolerancePolytope, kappa: f64) -> bool {
    debug_assert_eq!(deltas.len(), polytope.p_v.ncols());
    for i in 0..polytope.p_v.nrows() {
        let mut acc = 0.0;
        for (j, d) in deltas.iter().enumerate() {
            acc += polytope.p_v[(i, j)].abs() * d;
        }
        if kappa * acc > polytope.b_v[i] + SLACK {
            return false;
        }
    }
    true
}

fn feasible_ints(deltas: &[u64], polytope: &TolerancePolytope, kappa: f64) -> bool {
    let f: Vec<f64> = deltas.iter().map(|&d| d as f64).collect();
    rect_in_polytope(&f, polytope, kappa)
}

/// Two-phase deterministic solver: uniform maximal side, then grouped greedy
/// integer ascent. Coordinates with identical polytope columns form a group
/// and are always incremented together, so symmetric keypoints receive
/// symmetric thresholds.
pub fn allocate_thresholds(
    polytope: &TolerancePolytope,
    cfg: &AllocationConfig,
) -> Result<AllocatedThresholds, AllocationError> {
    for (i, b) in polytope.b_v.iter().enumerate() {
        if *b < -SLACK {
            return Err(AllocationError::Infeasible { row: i, value: *b });
        }
    }
    let n = polytope.p_v.ncols();
    let rows = polytope.p_v.nrows();

    let col_abs = |j: usize| -> Vec<f64> {
        (0..rows).map(|i| polytope.p_v[(i, j)].abs()).collect()
    };
    let zero_col: Vec<bool> = (0..n).map(|j| col_abs(j).iter().all(|&v| v == 0.0)).collect();

    // Phase 1: the largest uniform side fitting every row.
    let mut uniform = u64::MAX;
    for i in 0..rows {
        let rowsum: f64 = (0..n).map(|j| polytope.p_v[(i, j)].abs()).sum();
        if rowsum > 0.0 {
            let side = ((polytope.b_v[i] + SLACK) / (cfg.kappa * rowsum)).floor();
            uniform = uniform.min(side.max(0.0) as u64);
        }
    }
    if uniform == u64::MAX {
        // No active constraint at all: everything is capped.
        uniform = cfg.zero_column_cap;
    }
    uniform = uniform.min(cfg.zero_column_cap.max(1));
    let mut deltas = vec![uniform; n];
    if !feasible_ints(&deltas, polytope, cfg.kappa) {
        // Defensive: floor arithmetic should guarantee feasibility.
        deltas = vec![0; n];
    }

    // Group coordinates by identical |P_v| columns.
    let mut groups: Vec<Vec<usize>> = {
        let mut map: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
        for j in 0..n {
            let key: Vec<u64> = col_abs(j).iter().map(|v| v.to_bits()).collect();
            map.entry(key).or_default().push(j);
        }
        map.into_values().collect()
    };
    // Deterministic group order: by column content, then first index.
    groups.sort_by(|a, b| {
        let (ca, cb) = (col_abs(a[0]), col_abs(b[0]));
        ca.iter()
            .zip(&cb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a[0].cmp(&b[0]))
    });

    let group_capped = |group: &[usize], value: u64| {
        group.iter().all(|&j| zero_col[j]) && value >= cfg.zero_column_cap
    };
    let ascend = |deltas: &mut Vec<u64>| {
        // Greedy ascent: always raise a group with the smallest current value
        // (greatest marginal log-product gain); ties resolved by the fixed
        // group order.
        loop {
            let mut best: Option<usize> = None;
            for (gi, group) in groups.iter().enumerate() {
                let value = deltas[group[0]];
                if group_capped(group, value) {
                    continue;
                }
                let mut trial = deltas.clone();
                for &j in group {
                    trial[j] = value + 1;
                }
                if !feasible_ints(&trial, polytope, cfg.kappa) {
                    continue;
                }
                if best.is_none_or(|b| value < deltas[groups[b][0]]) {
                    best = Some(gi);
                }
            }
            match best {
                Some(gi) => {
                    for &j in &groups[gi] {
                        deltas[j] += 1;
                    }
                }
                None => break,
            }
        }
    };
    let score = |deltas: &[u64]| AllocatedThresholds::from_deltas(deltas.to_vec(), cfg).objective;

    ascend(&mut deltas);

    // Local search: move one unit of budget from a donor group to a receiver
    // group (raising the receiver as far as it will go), keeping any move
    // that strictly improves the objective. Escapes the plateaus where pure
    // smallest-first ascent parks budget on expensive coordinates.
    let mut rounds = 0;
    loop {
        let mut improved = false;
        for gi in 0..groups.len() {
            if deltas[groups[gi][0]] == 0 {
                continue;
            }
            for gj in 0..groups.len() {
                if gj == gi {
                    continue;
                }
                let mut trial = deltas.clone();
                for &j in &groups[gi] {
                    trial[j] -= 1;
                }
                let mut gained = false;
                loop {
                    let value = trial[groups[gj][0]];
                    if group_capped(&groups[gj], value) {
                        break;
                    }
                    let mut next = trial.clone();
                    for &j in &groups[gj] {
                        next[j] = value + 1;
                    }
                    if !feasible_ints(&next, polytope, cfg.kappa) {
                        break;
                    }
                    trial = next;
                    gained = true;
                }
                if gained && score(&trial) > score(&deltas) + 1e-12 {
                    deltas = trial;
                    ascend(&mut deltas);
                    improved = true;
                }
            }
        }
        // Balance pass: move single units from rich groups to strictly
        // poorer ones whenever the objective does not decrease. This
        // canonicalizes objective ties toward the most even (leximin)
        // allocation; each move shrinks the sum of squares, so it terminates.
        loop {
            let mut moved = false;
            for gi in 0..groups.len() {
                for gj in 0..groups.len() {
                    if gj == gi {
                        continue;
                    }
                    let (vi, vj) = (deltas[groups[gi][0]], deltas[groups[gj][0]]);
                    if vi == 0 || vj + 1 >= vi || group_capped(&groups[gj], vj) {
                        continue;
                    }
                    let mut trial = deltas.clone();
                    for &j in &groups[gi] {
                        trial[j] -= 1;
                    }
                    for &j in &groups[gj] {
                        trial[j] += 1;
                    }
                    if feasible_ints(&trial, polytope, cfg.kappa)
                        && score(&trial) >= score(&deltas) - 1e-12
                    {
                        deltas = trial;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
            ascend(&mut deltas);
            improved = true;
        }
        rounds += 1;
        if !improved || rounds > 1000 {
            break;
        }
    }

    Ok(AllocatedThresholds::from_deltas(deltas, cfg))
}

/// Exhaustive maximizer over `{0..cap}^dims`; test oracle for small problems.
pub fn brute_force_allocate(
    polytope: &TolerancePolytope,
    cfg: &AllocationConfig,
    cap: u64,
) -> Result<AllocatedThresholds, AllocationError> {
    let n = polytope.p_v.ncols();
    if n > 6 {
        return Err(AllocationError::DimensionTooLarge(n));
    }
    if cap > 12 {
        return Err(AllocationError::CapTooLarge(cap));
    }
    for (i, b) in polytope.b_v.iter().enumerate() {
        if *b < -SLACK {
            return Err(AllocationError::Infeasible { row: i, value: *b });
        }
    }
    let mut best: Option<AllocatedThresholds> = None;
    let mut current = vec![0u64; n];
    loop {
        if feasible_ints(&current, polytope, cfg.kappa) {
            let cand = AllocatedThresholds::from_deltas(current.clone(), cfg);
            if best.as_ref().is_none_or(|b| cand.objective > b.objective) {
                best = Some(cand);
            }
        }
        // Odometer increment.
        let mut k = 0;
        loop {
            if k == n {
                return Ok(best.expect("origin is always feasible"));
            }
            if current[k] < cap {
                current[k] += 1;
                break;
            }
            current[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn polytope(p: DMatrix<f64>, b: DVector<f64>) -> TolerancePolytope {
        TolerancePolytope {
            p_v: p,
            b_v: b,
            scene_id: "test".into(),
        }
    }

    fn box2(bx: f64, by: f64) -> TolerancePolytope {
        polytope(DMatrix::identity(2, 2), DVector::from_vec(vec![bx, by]))
    }

    fn cfg(w1: f64, w2: f64, kappa: f64) -> AllocationConfig {
        AllocationConfig::new(w1, w2, kappa, 100).unwrap()
    }

    #[test]
    fn unit_box_membership() {
        let p = box2(2.0, 2.0);
        assert!(rect_in_polytope(&[1.0, 1.0], &p, 1.0));
        assert!(!rect_in_polytope(&[3.0, 1.0], &p, 1.0));
    }

    #[test]
    fn membership_agrees_with_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-2.0..2.0));
            let b = DVector::from_fn(6, |_, _| rng.gen_range(0.0..8.0));
            let tol = polytope(p.clone(), b.clone());
            let deltas: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..3.0)).collect();
            let kappa: f64 = rng.gen_range(0.5..2.0);
            // Oracle: every signed vertex of the rectangle inside |P x| <= b.
            let mut all_in = true;
            for mask in 0..16u32 {
                let x = DVector::from_fn(4, |j, _| {
                    let s = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
                    s * kappa * deltas[j]
                });
                let y = &p * x;
                if !y.iter().zip(b.iter()).all(|(v, bb)| v.abs() <= *bb + 1e-9) {
                    all_in = false;
                    break;
                }
            }
            assert_eq!(rect_in_polytope(&deltas, &tol, kappa), all_in);
        }
    }

    #[test]
    fn box_example_three_five() {
        let p = box2(3.4, 5.2);
        let c = cfg(1.0, 5.0, 1.0);
        let got = allocate_thresholds(&p, &c).unwrap();
        assert_eq!(got.deltas, vec![3, 5]);
        assert_eq!(got.delta, 3);
        let brute = brute_force_allocate(&p, &c, 10).unwrap();
        assert_eq!(brute.deltas, vec![3, 5]);
        assert_eq!(got.objective, brute.objective);
    }

    #[test]
    fn huge_kappa_collapses_to_origin() {
        let p = box2(3.4, 5.2);
        let c = cfg(1.0, 5.0, 1e9);
        let got = allocate_thresholds(&p, &c).unwrap();
        assert_eq!(got.deltas, vec![0, 0]);
        assert_eq!(got.objective, 0.0);
    }

    #[test]
    fn brute_force_1d_floor() {
        let p = polytope(DMatrix::identity(1, 1), DVector::from_vec(vec![4.9]));
        let got = brute_force_allocate(&p, &cfg(1.0, 1.0, 1.0), 12).unwrap();
        assert_eq!(got.deltas, vec![4]);
    }

    #[test]
    fn negative_bound_is_infeasible() {
        let p = polytope(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(
            allocate_thresholds(&p, &cfg(1.0, 1.0, 1.0)),
            Err(AllocationError::Infeasible { row: 1, .. })
        ));
        assert!(brute_force_allocate(&p, &cfg(1.0, 1.0, 1.0), 3).is_err());
    }

    #[test]
    fn solver_result_is_always_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let p = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(6, |_, _| rng.gen_range(0.0..20.0));
            let tol = polytope(p, b);
            let kappa = rng.gen_range(0.5..2.0);
            let c = AllocationConfig::new(1.0, 2.0, kappa, 50).unwrap();
            let got = allocate_thresholds(&tol, &c).unwrap();
            assert!(feasible_ints(&got.deltas, &tol, kappa));
            assert_eq!(got.delta, *got.deltas.iter().min().unwrap());
        }
    }

    #[test]
    fn near_optimal_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for trial in 0..100 {
            let p = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(0.1..1.5));
            // Scale bounds so per-axis upper bounds stay within the cap.
            let b = DVector::from_fn(4, |_, _| rng.gen_range(1.0..10.0));
            let tol = polytope(p, b);
            let c = AllocationConfig::new(1.0, 5.0, 1.0, 12).unwrap();
            let got = allocate_thresholds(&tol, &c).unwrap();
            let brute = brute_force_allocate(&tol, &c, 12).unwrap();
            assert!(
                got.objective >= 0.95 * brute.objective - 1e-12,
                "trial {trial}: greedy {} < 0.95 * brute {} (deltas {:?} vs {:?})",
                got.objective,
                brute.objective,
                got.deltas,
                brute.deltas
            );
        }
    }

    #[test]
    fn monotone_in_kappa() {
        // Larger kappa shrinks the feasible set. The monotone consequences:
        // (1) the rectangle allocated at the larger kappa still fits the
        // polytope at every smaller kappa (nesting), (2) the achieved
        // objective is non-increasing, and (3) the achieved minimum side is
        // non-increasing. Elementwise monotonicity of the full allocation
        // vector does not hold even for the exact integer optimum (budget
        // reshuffles between coordinates as the set shrinks), so it is not a
        // valid property of any near-optimal solver.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..100 {
            let p = DMatrix::from_fn(5, 4, |_, _| rng.gen_range(0.3..1.0));
            let b = DVector::from_fn(5, |_, _| rng.gen_range(8.0..25.0));
            let tol = polytope(p, b);
            let mut prev: Option<(f64, AllocatedThresholds)> = None;
            for kappa in [0.5, 1.0, 2.0] {
                let c = AllocationConfig::new(1.0, 2.0, kappa, 50).unwrap();
                let got = allocate_thresholds(&tol, &c).unwrap();
                let gf: Vec<f64> = got.deltas.iter().map(|&d| d as f64).collect();
                if let Some((prev_kappa, pv)) = &prev {
                    assert!(
                        rect_in_polytope(&gf, &tol, *prev_kappa),
                        "trial {trial}: rectangle at kappa={kappa} not nested"
                    );
                    assert!(
                        got.objective <= pv.objective + 1e-9,
                        "trial {trial}: objective grew ({} -> {}) as kappa grew",
                        pv.objective,
                        got.objective
                    );
                    assert!(
                        got.delta <= pv.delta,
                        "trial {trial}: min side grew ({} -> {}) as kappa grew",
                        pv.delta,
                        got.delta
                    );
                }
                prev = Some((kappa, got));
            }
        }
    }

    #[test]
    fn identical_columns_get_identical_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let mut p = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(0.1..1.0));
            // Duplicate column 1 into column 3.
            for i in 0..4 {
                p[(i, 3)] = p[(i, 1)];
            }
            let b = DVector::from_fn(4, |_, _| rng.gen_range(1.0..10.0));
            let tol = polytope(p, b);
            let c = AllocationConfig::new(1.0, 1.0, 1.0, 50).unwrap();
            let got = allocate_thresholds(&tol, &c).unwrap();
            assert_eq!(got.deltas[1], got.deltas[3], "{:?}", got.deltas);
        }
    }

    #[test]
    fn zero_column_is_capped() {
        // Second coordinate has no pose influence at all.
        let p = polytope(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.0]),
            DVector::from_vec(vec![4.0, 4.0]),
        );
        let c = AllocationConfig::new(1.0, 1.0, 1.0, 16).unwrap();
        let got = allocate_thresholds(&p, &c).unwrap();
        assert_eq!(got.deltas[1], 16);
        assert_eq!(got.deltas[0], 4);
    }
}
