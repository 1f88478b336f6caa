//! Data-driven per-point Lipschitz estimation: each point's bound is the
//! median of difference quotients over its k nearest neighbors, and the
//! resulting radii define one gradient ball per block.

use crate::constraints::{ConstraintSet, QNorm};
use crate::error::{Error, Result};
use crate::par;
use crate::problem::ProblemData;

/// Per-point Lipschitz estimates.
///
/// Neighborhoods are computed under the Euclidean distance; the quotients
/// `|Y_i - Y_j| / ||X_i - X_j||_p` use the requested norm. Ties at the
/// k-th distance are all included. Duplicate predictors (zero distance)
/// are excluded from the median; if every neighbor of some point is a
/// duplicate, this is an error.
pub fn estimate_lipschitz(p: &ProblemData, k: usize, norm_p: QNorm) -> Result<Vec<f64>> {
    let n = p.n();
    let d = p.d();
    if k == 0 || k >= n {
        return Err(Error::Schema(format!("k must lie in 1..n-1, got {k} (n = {n})")));
    }
    let x = p.x();
    let y = p.y();
    let mut out = vec![0.0; n];
    let mut failed = vec![false; n];
    {
        let failed_slice = &mut failed[..];
        par::for_each_block_pair(&mut out, failed_slice, 1, |i, slot, _| {
            let xi = x.col(i);
            let mut dist2: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let xj = x.col(j);
                    let d2: f64 =
                        (0..d).map(|a| (xi[a] - xj[a]) * (xi[a] - xj[a])).sum();
                    (d2, j)
                })
                .collect();
            dist2.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // the first k neighbors plus any ties at the k-th distance
            let kth = dist2[k - 1].0;
            let cutoff = kth * (1.0 + 1e-12) + 1e-300;
            let mut ratios = Vec::new();
            for (rank, &(d2, j)) in dist2.iter().enumerate() {
                if rank >= k && d2 > cutoff {
                    break;
                }
                let xj = x.col(j);
                let diff: Vec<f64> = (0..d).map(|a| xi[a] - xj[a]).collect();
                let denom = norm_p.eval(&diff);
                if denom > 0.0 {
                    ratios.push((y[i] - y[j]).abs() / denom);
                }
            }
            slot[0] = match median(&mut ratios) {
                Some(v) => v,
                None => f64::NAN,
            };
        });
    }
    for i in 0..n {
        if out[i].is_nan() {
            failed[i] = true;
        }
    }
    if failed.iter().any(|&f| f) {
        return Err(Error::Schema(
            "all k neighbors of some point are duplicates; cannot form quotients".into(),
        ));
    }
    Ok(out)
}

fn median(vals: &mut Vec<f64>) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = vals.len();
    Some(if m % 2 == 1 { vals[m / 2] } else { 0.5 * (vals[m / 2 - 1] + vals[m / 2]) })
}

/// Builds the per-point constraint `||xi_i||_q <= L_i` with `q` dual to
/// the quotient norm `p`. Zero or near-zero radii are floored at
/// `1e-8 * max_i L_i` to keep every ball full-dimensional.
pub fn build_perpoint_problem(lvec: &[f64], norm_p: QNorm) -> Result<ConstraintSet> {
    if lvec.is_empty() {
        return Err(Error::Schema("empty Lipschitz vector".into()));
    }
    if lvec.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Schema("Lipschitz estimates must be finite and nonnegative".into()));
    }
    let max_l = lvec.iter().cloned().fold(0.0f64, f64::max);
    if max_l <= 0.0 {
        return Err(Error::Schema(
            "all Lipschitz estimates are zero (constant responses); per-point fit is degenerate"
                .into(),
        ));
    }
    let floor = 1e-8 * max_l;
    let q = norm_p.dual();
    let sets = lvec
        .iter()
        .map(|&l| ConstraintSet::LipschitzBall { q, radius: l.max(floor) })
        .collect();
    Ok(ConstraintSet::PerPoint(sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::rng::SplitMix64;

    #[test]
    fn hand_example() {
        // X = (0,1,2), Y = (0,1,4), k=2: ratios at X_1 are {1/1, 4/2}
        let x = Mat::from_fn(1, 3, |_, j| j as f64);
        let p = ProblemData::new(x, vec![0.0, 1.0, 4.0]).unwrap();
        let l = estimate_lipschitz(&p, 2, QNorm::Two).unwrap();
        assert!((l[0] - 1.5).abs() < 1e-15, "{l:?}");
        // affine-like checks at the others: at X_2: {1, 3} -> 2; at X_3: {3, 2} -> 2.5
        assert!((l[1] - 2.0).abs() < 1e-15);
        assert!((l[2] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn constant_and_affine_responses() {
        let x = Mat::from_fn(1, 5, |_, j| j as f64);
        let p = ProblemData::new(x.clone(), vec![3.0; 5]).unwrap();
        let l = estimate_lipschitz(&p, 2, QNorm::Two).unwrap();
        assert!(l.iter().all(|v| *v == 0.0), "constant responses give zero estimates");
        // degenerate radii rejected when building the constraint
        assert!(build_perpoint_problem(&l, QNorm::Two).is_err());

        // exact slopes for affine data Y = 2X
        let y: Vec<f64> = (0..5).map(|j| 2.0 * j as f64).collect();
        let p = ProblemData::new(x, y).unwrap();
        let l = estimate_lipschitz(&p, 3, QNorm::Two).unwrap();
        assert!(l.iter().all(|v| (*v - 2.0).abs() < 1e-14), "{l:?}");
    }

    #[test]
    fn duplicates_excluded() {
        // X_0 == X_1; their mutual quotient is excluded but other neighbors
        // still provide ratios
        let mut x = Mat::zeros(1, 4);
        x.set(0, 0, 0.0);
        x.set(0, 1, 0.0);
        x.set(0, 2, 1.0);
        x.set(0, 3, 2.0);
        let p = ProblemData::new(x, vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        let l = estimate_lipschitz(&p, 2, QNorm::Two).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scale_and_permutation_equivariance() {
        let mut rng = SplitMix64::new(44);
        let x = Mat::from_fn(2, 12, |_, _| rng.uniform(-1.0, 1.0));
        let y: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let p = ProblemData::new(x.clone(), y.clone()).unwrap();
        let l = estimate_lipschitz(&p, 4, QNorm::Two).unwrap();

        // scaling Y by c > 0 scales every estimate by c exactly
        let c = 3.7;
        let py = ProblemData::new(x.clone(), y.iter().map(|v| c * v).collect()).unwrap();
        let lc = estimate_lipschitz(&py, 4, QNorm::Two).unwrap();
        for i in 0..12 {
            assert!((lc[i] - c * l[i]).abs() < 1e-12 * (1.0 + lc[i]));
        }

        // permutation equivariance
        let perm: Vec<usize> = (0..12).rev().collect();
        let xp = Mat::from_fn(2, 12, |a, j| x.get(a, perm[j]));
        let yp: Vec<f64> = perm.iter().map(|&j| y[j]).collect();
        let pp = ProblemData::new(xp, yp).unwrap();
        let lp = estimate_lipschitz(&pp, 4, QNorm::Two).unwrap();
        for j in 0..12 {
            assert!((lp[j] - l[perm[j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn perpoint_set_uses_dual_norm() {
        let l = vec![1.0, 2.0, 0.0];
        match build_perpoint_problem(&l, QNorm::One).unwrap() {
            ConstraintSet::PerPoint(sets) => {
                assert_eq!(sets.len(), 3);
                match &sets[0] {
                    ConstraintSet::LipschitzBall { q, radius } => {
                        assert_eq!(*q, QNorm::Inf);
                        assert_eq!(*radius, 1.0);
                    }
                    other => panic!("{other:?}"),
                }
                // zero radius floored
                match &sets[2] {
                    ConstraintSet::LipschitzBall { radius, .. } => {
                        assert!((radius - 2e-8).abs() < 1e-20);
                    }
                    other => panic!("{other:?}"),
                }
            }
            other => panic!("{other:?}"),
        }
    }
}
