//! Problem statement, objective and KKT evaluation, and the fitted
//! max-affine model.
//!
//! Primal variables are the fitted values `theta` and stacked gradients
//! `xi`; the splitting adds copies `y` (of `xi`) and `eta` (of
//! `-(A theta + B xi)`). Dual variables are `u` (matrix) and `v`.

use crate::constraints::{self, ConstraintSet};
use crate::data::StandardizationRecord;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::operators::OperatorContext;
use crate::par;

/// Predictors (one column per observation) and responses.
#[derive(Clone, Debug)]
pub struct ProblemData {
    x: Mat, // d x n
    y: Vec<f64>,
}

impl ProblemData {
    pub fn new(x: Mat, y: Vec<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return Err(Error::DimensionMismatch {
                what: "responses",
                expected: x.ncols(),
                got: y.len(),
            });
        }
        if x.ncols() < 2 {
            return Err(Error::Schema("at least 2 observations required".into()));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("problem data"));
        }
        Ok(ProblemData { x, y })
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.x.col(i)
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
}

#[derive(Clone, Debug)]
pub struct PrimalState {
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub y: Vec<f64>,
    pub eta: Mat,
}

#[derive(Clone, Debug)]
pub struct DualState {
    pub u: Mat,
    pub v: Vec<f64>,
}

/// Warm-start pair accepted by both solvers.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub primal: PrimalState,
    pub dual: DualState,
}

/// `1/2 ||theta - Y||^2` together with a feasibility flag: the indicator
/// terms contribute zero iff every gradient block lies in its set and the
/// pairwise convexity inequalities hold, both within `feas_tol` relative
/// tolerance.
pub fn primal_objective(
    ctx: &OperatorContext,
    p: &ProblemData,
    s: &PrimalState,
    c: &ConstraintSet,
    feas_tol: f64,
) -> Result<(f64, bool)> {
    let n = p.n();
    let d = p.d();
    if s.theta.len() != n || s.xi.len() != n * d {
        return Err(Error::DimensionMismatch {
            what: "primal state",
            expected: n,
            got: s.theta.len(),
        });
    }
    let diff: Vec<f64> = s.theta.iter().zip(p.y()).map(|(a, b)| a - b).collect();
    let value = 0.5 * par::norm_sq(&diff);

    let prox = constraints::blockwise_prox(c, &s.xi, d)?;
    let dist: Vec<f64> = s.xi.iter().zip(&prox).map(|(a, b)| a - b).collect();
    let xi_ok = par::norm(&dist) <= feas_tol * (1.0 + par::norm(&s.xi));

    let mut az = Mat::zeros(n, n);
    ctx.apply_a_into(&s.theta, &mut az);
    let mut bz = Mat::zeros(n, n);
    ctx.apply_b_into(&s.xi, &mut bz);
    let scale = 1.0 + az.frob_norm() + bz.frob_norm();
    let mut min_entry = f64::INFINITY;
    for k in 0..n * n {
        min_entry = min_entry.min(az.as_slice()[k] + bz.as_slice()[k]);
    }
    let pair_ok = min_entry >= -feas_tol * scale;

    Ok((value, xi_ok && pair_ok))
}

/// Dual objective `-1/2 ||A*u||^2 - <Y, A*u> - p*(-v) - delta_+(u)`.
/// Returns `f64::NEG_INFINITY` when `u` is not (tolerance-)nonnegative or
/// the support function is unbounded at `-v`.
pub fn dual_objective(
    ctx: &OperatorContext,
    p: &ProblemData,
    dual: &DualState,
    c: &ConstraintSet,
) -> Result<f64> {
    let n = p.n();
    let d = p.d();
    if dual.u.nrows() != n || dual.v.len() != n * d {
        return Err(Error::DimensionMismatch {
            what: "dual state",
            expected: n * d,
            got: dual.v.len(),
        });
    }
    let u_scale = dual.u.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * (1.0 + u_scale);
    if dual.u.as_slice().iter().any(|&v| v < -tol) {
        return Ok(f64::NEG_INFINITY);
    }
    let astar_u = ctx.apply_a_star(&dual.u)?;
    let mut value = -0.5 * par::norm_sq(&astar_u) - par::dot(p.y(), &astar_u);
    for i in 0..n {
        let neg_v: Vec<f64> = dual.v[i * d..(i + 1) * d].iter().map(|v| -v).collect();
        let support = constraints::conjugate_support(c.block_set(i), &neg_v);
        if support.is_infinite() {
            return Ok(f64::NEG_INFINITY);
        }
        value -= support;
    }
    Ok(value)
}

/// Normalized KKT residuals.
#[derive(Clone, Copy, Debug)]
pub struct KktResiduals {
    pub r_p: f64,
    pub r_d: f64,
    pub r_c: f64,
    /// Unnormalized pairwise-constraint violation `||Pi_-(A theta + B xi)||_F`.
    /// The normalized residuals divide by iterate norms, which can mask an
    /// iterate drifting along a near-recession direction; solvers gate
    /// their convergence declaration on this absolute quantity as well.
    pub abs_pair_violation: f64,
}

impl KktResiduals {
    pub fn r_kkt(&self) -> f64 {
        self.r_p.max(self.r_d).max(self.r_c)
    }
}

/// Residuals from precomputed `A theta` and `B xi` (both solvers carry
/// these between steps).
pub(crate) fn kkt_residuals_with(
    ctx: &OperatorContext,
    p: &ProblemData,
    theta: &[f64],
    xi: &[f64],
    atheta: &Mat,
    bxi: &Mat,
    u: &Mat,
    v: &[f64],
    c: &ConstraintSet,
) -> Result<KktResiduals> {
    let n = p.n();
    let d = p.d();
    let norm_xi = par::norm(xi);
    let norm_v = par::norm(v);
    let norm_theta = par::norm(theta);
    let norm_y = par::norm(p.y());
    let norm_u = u.frob_norm();
    let norm_az = atheta.frob_norm();
    let norm_bz = bxi.frob_norm();

    // primal: distance of xi to its sets, negative part of A theta + B xi
    let prox_xi = constraints::blockwise_prox(c, xi, d)?;
    let mut diff = vec![0.0; n * d];
    par::zip_map_into(xi, &prox_xi, &mut diff, |a, b| a - b);
    let rp1 = par::norm(&diff) / (1.0 + norm_xi);
    let mut neg_sq = 0.0;
    for k in 0..n * n {
        let s = atheta.as_slice()[k] + bxi.as_slice()[k];
        if s < 0.0 {
            neg_sq += s * s;
        }
    }
    let abs_pair_violation = neg_sq.sqrt();
    let rp2 = abs_pair_violation / (1.0 + norm_az + norm_bz);

    // dual: first KKT equation and B*u + v
    let astar_u = ctx.apply_a_star(u)?;
    let mut rd1_sq = 0.0;
    for i in 0..n {
        let r = theta[i] - p.y()[i] - astar_u[i];
        rd1_sq += r * r;
    }
    let rd1 = rd1_sq.sqrt() / (1.0 + norm_y + norm_theta + norm_u);
    let bstar_u = ctx.apply_b_star(u)?;
    let mut sum = vec![0.0; n * d];
    par::zip_map_into(&bstar_u, v, &mut sum, |a, b| a + b);
    let rd2 = par::norm(&sum) / (1.0 + norm_u + norm_v);

    // complementarity: prox fixed-point forms
    let mut shifted = vec![0.0; n * d];
    par::zip_map_into(xi, v, &mut shifted, |a, b| a - b);
    let prox_shift = constraints::blockwise_prox(c, &shifted, d)?;
    let mut diff2 = vec![0.0; n * d];
    par::zip_map_into(xi, &prox_shift, &mut diff2, |a, b| a - b);
    let rc1 = par::norm(&diff2) / (1.0 + norm_xi + norm_v);
    let mut rc2_sq = 0.0;
    for k in 0..n * n {
        let s = atheta.as_slice()[k] + bxi.as_slice()[k];
        let proj = (s - u.as_slice()[k]).max(0.0);
        let r = s - proj;
        rc2_sq += r * r;
    }
    let rc2 = rc2_sq.sqrt() / (1.0 + norm_az + norm_bz + norm_u);

    Ok(KktResiduals {
        r_p: rp1.max(rp2),
        r_d: rd1.max(rd2),
        r_c: rc1.max(rc2),
        abs_pair_violation,
    })
}

/// Normalized KKT residuals at `(primal, dual)`.
pub fn kkt_residuals(
    ctx: &OperatorContext,
    p: &ProblemData,
    primal: &PrimalState,
    dual: &DualState,
    c: &ConstraintSet,
) -> Result<KktResiduals> {
    let az = ctx.apply_a(&primal.theta)?;
    let bz = ctx.apply_b(&primal.xi)?;
    kkt_residuals_with(ctx, p, &primal.theta, &primal.xi, &az, &bz, &dual.u, &dual.v, c)
}

/// Fitted max-affine model: value/gradient pairs anchored at the
/// training points.
#[derive(Clone, Debug)]
pub struct FittedModel {
    theta_hat: Vec<f64>,
    xi_hat: Vec<f64>,
    anchors: Mat, // d x n
    constraint: ConstraintSet,
    standardization: Option<StandardizationRecord>,
}

impl FittedModel {
    /// Builds the model from solver iterates.
    ///
    /// Gradients are projected onto their sets, so every block satisfies
    /// its constraint exactly. With a common gradient set, each anchor's
    /// value and gradient are then re-read from the induced max-affine
    /// function (its value and an active piece's slope), which makes the
    /// interpolation property hold to rounding error. With per-point sets
    /// a neighbor's gradient may not lie in a block's own set, so blocks
    /// keep their projected gradients and the values are tightened by
    /// max-affine value passes; the interpolation property then holds to
    /// the order of the solver tolerance.
    pub fn from_solution(
        p: &ProblemData,
        c: &ConstraintSet,
        theta: &[f64],
        xi: &[f64],
    ) -> Result<Self> {
        let n = p.n();
        let d = p.d();
        if theta.len() != n || xi.len() != n * d {
            return Err(Error::DimensionMismatch {
                what: "solution",
                expected: n + n * d,
                got: theta.len() + xi.len(),
            });
        }
        let xi_feas = constraints::blockwise_prox(c, xi, d)?;
        let x = p.x();
        let value_pass = |vals: &[f64], grads: &[f64], out: &mut [f64]| {
            par::for_each_block_mut(out, 1, |i, slot| {
                let xi_pt = x.col(i);
                let mut best = f64::NEG_INFINITY;
                for j in 0..n {
                    let xj = x.col(j);
                    let grad = &grads[j * d..(j + 1) * d];
                    let mut val = vals[j];
                    for a in 0..d {
                        val += grad[a] * (xi_pt[a] - xj[a]);
                    }
                    best = best.max(val);
                }
                slot[0] = best;
            });
        };

        let mut theta_hat = vec![0.0; n];
        let mut xi_hat;
        if c.is_per_point() {
            xi_hat = xi_feas.clone();
            value_pass(theta, &xi_feas, &mut theta_hat);
            // tighten values toward mutual consistency
            let mut current = theta_hat.clone();
            for _ in 0..8 {
                let mut next = vec![0.0; n];
                value_pass(&current, &xi_feas, &mut next);
                let delta = next
                    .iter()
                    .zip(&current)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                current = next;
                if delta <= 1e-14 {
                    break;
                }
            }
            theta_hat = current;
        } else {
            xi_hat = vec![0.0; n * d];
            par::for_each_block_pair(&mut xi_hat, &xi_feas, d, |i, out, _| {
                let xi_pt = x.col(i);
                let mut best = f64::NEG_INFINITY;
                let mut best_j = 0;
                for j in 0..n {
                    let xj = x.col(j);
                    let grad = &xi_feas[j * d..(j + 1) * d];
                    let mut val = theta[j];
                    for a in 0..d {
                        val += grad[a] * (xi_pt[a] - xj[a]);
                    }
                    if val > best {
                        best = val;
                        best_j = j;
                    }
                }
                out.copy_from_slice(&xi_feas[best_j * d..(best_j + 1) * d]);
            });
            value_pass(theta, &xi_feas, &mut theta_hat);
        }
        Ok(FittedModel {
            theta_hat,
            xi_hat,
            anchors: p.x().clone(),
            constraint: c.clone(),
            standardization: None,
        })
    }

    /// Builds a model directly from consistent triplets (used by the
    /// deserializer).
    pub fn from_parts(
        theta_hat: Vec<f64>,
        xi_hat: Vec<f64>,
        anchors: Mat,
        constraint: ConstraintSet,
        standardization: Option<StandardizationRecord>,
    ) -> Result<Self> {
        let n = anchors.ncols();
        let d = anchors.nrows();
        if theta_hat.len() != n || xi_hat.len() != n * d {
            return Err(Error::DimensionMismatch {
                what: "model parts",
                expected: n,
                got: theta_hat.len(),
            });
        }
        Ok(FittedModel { theta_hat, xi_hat, anchors, constraint, standardization })
    }

    pub fn with_standardization(mut self, rec: Option<StandardizationRecord>) -> Self {
        self.standardization = rec;
        self
    }

    pub fn n(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn d(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_hat
    }

    pub fn xi_hat(&self) -> &[f64] {
        &self.xi_hat
    }

    pub fn xi_block(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.xi_hat[i * d..(i + 1) * d]
    }

    pub fn anchors(&self) -> &Mat {
        &self.anchors
    }

    pub fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }

    pub fn standardization(&self) -> Option<&StandardizationRecord> {
        self.standardization.as_ref()
    }

    /// Largest violation of the interpolation property
    /// `max_j { theta_j + <xi_j, x_i - x_j> } = theta_i` over anchors.
    pub fn max_interpolation_violation(&self) -> f64 {
        let n = self.n();
        let d = self.d();
        let mut worst = 0.0f64;
        for i in 0..n {
            let xi_pt = self.anchors.col(i);
            let mut best = f64::NEG_INFINITY;
            for j in 0..n {
                let xj = self.anchors.col(j);
                let grad = self.xi_block(j);
                let mut val = self.theta_hat[j];
                for a in 0..d {
                    val += grad[a] * (xi_pt[a] - xj[a]);
                }
                best = best.max(val);
            }
            worst = worst.max((best - self.theta_hat[i]).abs());
        }
        worst
    }
}
