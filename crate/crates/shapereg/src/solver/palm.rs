//! Proximal augmented Lagrangian outer loop with semismooth Newton inner
//! solves.
//!
//! Each outer step minimizes the strongly convex subproblem in
//! `(theta, xi)` given the multipliers, to the accuracy demanded by the
//! summable-tolerance and relative-error stopping rules, then performs the
//! projection-form multiplier updates. The Newton systems use the masked
//! Gram structure of the active pairwise constraints: dense direct solves
//! for small systems, preconditioned conjugate gradients otherwise.

use crate::constraints::{self, ConstraintSet, JacobianElement};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve, Mat};
use crate::operators::{GramProducts, OperatorContext};
use crate::par;
use crate::problem::{kkt_residuals_with, FittedModel, ProblemData, WarmStart};
use crate::solver::{SolverReport, TerminationReason, TraceRecord, TraceSink};
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct PalmConfig {
    /// Scale of the diagonal proximal term on theta (`H1 = h1_scale I`).
    pub h1_scale: f64,
    /// Scale of the diagonal proximal term on xi (`H2 = h2_scale I`).
    pub h2_scale: f64,
    pub sigma0: f64,
    pub sigma_growth: f64,
    pub sigma_max: f64,
    /// Summable inner tolerances `eps_k = eps0 * eps_decay^k`.
    pub eps0: f64,
    pub eps_decay: f64,
    /// Relative-error sequence `delta_k = delta0 * delta_decay^k` (< 1).
    pub delta0: f64,
    pub delta_decay: f64,
    /// Enforce the relative-error rule alongside the absolute one.
    pub use_criterion_b: bool,
    pub tol: f64,
    pub max_outer: usize,
    pub max_time_secs: f64,
}

impl Default for PalmConfig {
    fn default() -> Self {
        // The inner tolerances start loose (a warm-started Newton step or
        // two per outer iteration) and tighten geometrically; sigma grows
        // gently and is rebalanced against the dual residual. Aggressive
        // schedules make the subproblems stiffer than f64 line searches
        // can resolve.
        PalmConfig {
            h1_scale: 1e-3,
            h2_scale: 1e-3,
            sigma0: 1.0,
            sigma_growth: 1.5,
            sigma_max: 1e4,
            eps0: 100.0,
            eps_decay: 0.7,
            delta0: 0.5,
            delta_decay: 0.7,
            use_criterion_b: true,
            tol: 1e-6,
            max_outer: 200,
            max_time_secs: 7200.0,
        }
    }
}

impl PalmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h1_scale > 0.0 && self.h2_scale > 0.0) {
            return Err(Error::Solver("proximal scales must be positive".into()));
        }
        if !(self.sigma0 > 0.0 && self.sigma_growth > 1.0) {
            return Err(Error::Solver("sigma schedule must increase".into()));
        }
        if !(self.eps_decay > 0.0 && self.eps_decay < 1.0) {
            return Err(Error::Solver("eps sequence must be summable".into()));
        }
        if !(self.delta_decay > 0.0 && self.delta_decay < 1.0 && self.delta0 < 1.0) {
            return Err(Error::Solver("delta sequence must be summable with delta_k < 1".into()));
        }
        Ok(())
    }

    fn lambda_min(&self) -> f64 {
        self.h1_scale.min(self.h2_scale).min(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct SsnConfig {
    /// Newton-system accuracy cap, in (0, 1).
    pub gamma_bar: f64,
    /// Exponent of the residual-dependent accuracy, in (0, 1].
    pub tau_exp: f64,
    /// Backtracking ratio, in (0, 1).
    pub delta_ls: f64,
    /// Armijo slope fraction, in (0, 1/2).
    pub mu_ls: f64,
    pub max_ssn_iters: usize,
    pub max_backtracks: usize,
    pub pcg_max_iters: usize,
    pub pcg_diag_precond: bool,
    /// Use a dense direct solve when `n + d n` is at most this.
    pub direct_threshold: usize,
}

impl Default for SsnConfig {
    fn default() -> Self {
        SsnConfig {
            gamma_bar: 0.1,
            tau_exp: 0.5,
            delta_ls: 0.5,
            mu_ls: 0.1,
            max_ssn_iters: 50,
            max_backtracks: 50,
            pcg_max_iters: 1000,
            pcg_diag_precond: true,
            direct_threshold: 2000,
        }
    }
}

impl SsnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_bar > 0.0 && self.gamma_bar < 1.0)
            || !(self.tau_exp > 0.0 && self.tau_exp <= 1.0)
            || !(self.delta_ls > 0.0 && self.delta_ls < 1.0)
            || !(self.mu_ls > 0.0 && self.mu_ls < 0.5)
        {
            return Err(Error::Solver("SSN constants out of range".into()));
        }
        Ok(())
    }
}

/// The strongly convex inner problem of one outer iteration.
pub struct PalmSubproblem<'a> {
    pub ctx: &'a OperatorContext,
    pub y: &'a [f64],
    pub c: &'a ConstraintSet,
    pub sigma: f64,
    pub h1: f64,
    pub h2: f64,
    pub anchor_theta: &'a [f64],
    pub anchor_xi: &'a [f64],
    pub u_tilde: &'a Mat,
    pub v_tilde: &'a [f64],
}

pub(crate) struct SubWork {
    z: Mat,
    pos: Mat,
    w: Vec<f64>,
    pw: Vec<f64>,
    astar: Vec<f64>,
    bstar: Vec<f64>,
}

impl SubWork {
    pub(crate) fn new(n: usize, d: usize) -> Self {
        SubWork {
            z: Mat::zeros(n, n),
            pos: Mat::zeros(n, n),
            w: vec![0.0; n * d],
            pw: vec![0.0; n * d],
            astar: vec![0.0; n],
            bstar: vec![0.0; n * d],
        }
    }
}

impl PalmSubproblem<'_> {
    fn n(&self) -> usize {
        self.ctx.n()
    }

    fn d(&self) -> usize {
        self.ctx.d()
    }

    /// Fills `z = -A theta - B xi + u~/sigma`, its positive part, and the
    /// shifted gradient blocks `w = xi - v~/sigma` with their projections.
    fn refresh(&self, theta: &[f64], xi: &[f64], wk: &mut SubWork) -> Result<()> {
        let n = self.n();
        self.ctx.apply_a_into(theta, &mut wk.z);
        self.ctx.apply_b_into(xi, &mut wk.pos); // pos used as B xi scratch
        let inv_sigma = 1.0 / self.sigma;
        {
            let z = wk.z.as_mut_slice();
            let bxi = wk.pos.as_slice();
            let u = self.u_tilde.as_slice();
            par::for_each_block_mut(z, n, |j, col| {
                let off = j * n;
                for i in 0..n {
                    col[i] = -col[i] - bxi[off + i] + u[off + i] * inv_sigma;
                }
            });
        }
        {
            let z = wk.z.as_slice();
            let pos = wk.pos.as_mut_slice();
            par::for_each_block_mut(pos, n, |j, col| {
                let off = j * n;
                for i in 0..n {
                    col[i] = z[off + i].max(0.0);
                }
            });
        }
        par::zip_map_into(xi, self.v_tilde, &mut wk.w, |a, b| a - b * inv_sigma);
        constraints::blockwise_prox_into(self.c, &wk.w, self.d(), &mut wk.pw)?;
        Ok(())
    }

    /// Subproblem value at `(theta, xi)` (buffers refreshed), up to the
    /// `-||u~||^2/(2 sigma) - ||v~||^2/(2 sigma)` constants: they cancel in
    /// line-search comparisons and would cost most of the f64 resolution
    /// of the differences.
    pub(crate) fn value(&self, theta: &[f64], xi: &[f64], wk: &mut SubWork) -> Result<f64> {
        self.refresh(theta, xi, wk)?;
        let mut v = 0.0;
        for i in 0..self.n() {
            let r = theta[i] - self.y[i];
            v += 0.5 * r * r;
        }
        let dist_sq = {
            let mut acc = 0.0;
            for k in 0..wk.w.len() {
                let r = wk.w[k] - wk.pw[k];
                acc += r * r;
            }
            acc
        };
        v += 0.5 * self.sigma * dist_sq;
        v += 0.5 * self.sigma * par::norm_sq(wk.pos.as_slice());
        let mut prox = 0.0;
        for i in 0..self.n() {
            let r = theta[i] - self.anchor_theta[i];
            prox += 0.5 * self.h1 / self.sigma * r * r;
        }
        for k in 0..xi.len() {
            let r = xi[k] - self.anchor_xi[k];
            prox += 0.5 * self.h2 / self.sigma * r * r;
        }
        Ok(v + prox)
    }

    /// Gradient at `(theta, xi)` (buffers refreshed).
    pub(crate) fn grad(
        &self,
        theta: &[f64],
        xi: &[f64],
        wk: &mut SubWork,
        g_theta: &mut [f64],
        g_xi: &mut [f64],
    ) -> Result<()> {
        self.refresh(theta, xi, wk)?;
        self.ctx.apply_a_star_into(&wk.pos, &mut wk.astar);
        self.ctx.apply_b_star_into(&wk.pos, &mut wk.bstar);
        let h1s = self.h1 / self.sigma;
        let h2s = self.h2 / self.sigma;
        for i in 0..self.n() {
            g_theta[i] =
                theta[i] - self.y[i] - self.sigma * wk.astar[i] + h1s * (theta[i] - self.anchor_theta[i]);
        }
        for k in 0..xi.len() {
            g_xi[k] = -self.sigma * wk.bstar[k]
                + self.sigma * (wk.w[k] - wk.pw[k])
                + h2s * (xi[k] - self.anchor_xi[k]);
        }
        Ok(())
    }

    /// Multiplier update candidates from the refreshed buffers:
    /// `u = sigma max(z, 0)`, `v = -sigma (w - Prox_p(w))`.
    fn multipliers(&self, wk: &SubWork) -> (Mat, Vec<f64>) {
        let n = self.n();
        let mut u = Mat::zeros(n, n);
        for k in 0..n * n {
            u.as_mut_slice()[k] = self.sigma * wk.pos.as_slice()[k];
        }
        let v: Vec<f64> =
            wk.w.iter().zip(&wk.pw).map(|(a, b)| -self.sigma * (a - b)).collect();
        (u, v)
    }

    /// Selects a generalized Hessian element at `(theta, xi)`.
    pub fn assemble_hessian_action(&self, theta: &[f64], xi: &[f64]) -> Result<HessianAction<'_>> {
        let mut wk = SubWork::new(self.n(), self.d());
        self.refresh(theta, xi, &mut wk)?;
        self.hessian(xi, &wk)
    }

    /// Hessian element from already-refreshed buffers.
    pub(crate) fn hessian<'s>(&'s self, xi: &[f64], wk: &SubWork) -> Result<HessianAction<'s>> {
        let n = self.n();
        let mut wbar = Mat::zeros(n, n);
        {
            let z = wk.z.as_slice();
            let m = wbar.as_mut_slice();
            par::for_each_block_mut(m, n, |j, col| {
                let off = j * n;
                for i in 0..n {
                    col[i] = if z[off + i] > 0.0 { 1.0 } else { 0.0 };
                }
            });
        }
        let gram = self.ctx.gram_products(&wbar)?;
        let jac = constraints::blockwise_jacobian(self.c, &wk.w, self.d())?;
        let _ = xi;
        Ok(HessianAction {
            gram,
            jac,
            sigma: self.sigma,
            h1: self.h1,
            h2: self.h2,
            n,
            d: self.d(),
        })
    }
}

/// Symmetric positive definite generalized Hessian
/// `sigma [A;B]* Wbar [A B] + blkdiag(I + H1/sigma, sigma (I - J) + H2/sigma)`.
pub struct HessianAction<'a> {
    gram: GramProducts<'a>,
    jac: Vec<JacobianElement>,
    sigma: f64,
    h1: f64,
    h2: f64,
    n: usize,
    d: usize,
}

impl HessianAction<'_> {
    pub fn dim(&self) -> usize {
        self.n + self.n * self.d
    }

    /// `out = H (dt; dx)`.
    pub fn apply(&self, dt: &[f64], dx: &[f64], out_t: &mut [f64], out_x: &mut [f64]) {
        self.gram.apply(dt, dx, out_t, out_x);
        let c_t = 1.0 + self.h1 / self.sigma;
        for i in 0..self.n {
            out_t[i] = self.sigma * out_t[i] + c_t * dt[i];
        }
        let d = self.d;
        let sigma = self.sigma;
        let h2s = self.h2 / sigma;
        let jac = &self.jac;
        par::for_each_block_pair(out_x, dx, d, |i, o, s| {
            let mut jd = vec![0.0; d];
            jac[i].apply(s, &mut jd);
            for a in 0..d {
                o[a] = sigma * o[a] + sigma * (s[a] - jd[a]) + h2s * s[a];
            }
        });
    }

    /// Diagonal of the operator (for preconditioning).
    pub fn diag(&self) -> (Vec<f64>, Vec<f64>) {
        let mut dt = vec![0.0; self.n];
        let mut dx = vec![0.0; self.n * self.d];
        self.gram.diag_into(&mut dt, &mut dx);
        let c_t = 1.0 + self.h1 / self.sigma;
        for v in dt.iter_mut() {
            *v = self.sigma * *v + c_t;
        }
        let mut jdiag = vec![0.0; self.n * self.d];
        for i in 0..self.n {
            self.jac[i].diag_into(&mut jdiag[i * self.d..(i + 1) * self.d]);
        }
        let h2s = self.h2 / self.sigma;
        for k in 0..dx.len() {
            dx[k] = self.sigma * dx[k] + self.sigma * (1.0 - jdiag[k]) + h2s;
        }
        (dt, dx)
    }

    /// Dense row-major materialization for the direct solve.
    pub fn materialize(&self) -> Vec<f64> {
        let n = self.n;
        let d = self.d;
        let dim = self.dim();
        let mut h = vec![0.0; dim * dim];
        let ata = self.gram.ata_dense();
        let atb = self.gram.atb_dense();
        let btb = self.gram.btb_blocks();
        for i in 0..n {
            for j in 0..n {
                h[i * dim + j] = self.sigma * ata.get(i, j);
            }
            for j in 0..n * d {
                let v = self.sigma * atb.get(i, j);
                h[i * dim + (n + j)] = v;
                h[(n + j) * dim + i] = v;
            }
            h[i * dim + i] += 1.0 + self.h1 / self.sigma;
        }
        let h2s = self.h2 / self.sigma;
        for i in 0..n {
            let jm = self.jac[i].materialize(d);
            for a in 0..d {
                for b in 0..d {
                    let row = n + i * d + a;
                    let col = n + i * d + b;
                    let mut v = self.sigma * btb[i * d * d + a * d + b];
                    let iden = if a == b { 1.0 } else { 0.0 };
                    v += self.sigma * (iden - jm.get(a, b)) + if a == b { h2s } else { 0.0 };
                    h[row * dim + col] += v;
                }
            }
        }
        h
    }
}

/// Builds the subproblem gradient as one stacked vector (theta part first).
pub fn palm_subproblem_gradient(
    ctx: &OperatorContext,
    p: &ProblemData,
    c: &ConstraintSet,
    theta: &[f64],
    xi: &[f64],
    anchor: (&[f64], &[f64], &Mat, &[f64]),
    sigma: f64,
    h1: f64,
    h2: f64,
) -> Result<Vec<f64>> {
    let sub = PalmSubproblem {
        ctx,
        y: p.y(),
        c,
        sigma,
        h1,
        h2,
        anchor_theta: anchor.0,
        anchor_xi: anchor.1,
        u_tilde: anchor.2,
        v_tilde: anchor.3,
    };
    let mut wk = SubWork::new(p.n(), p.d());
    let mut gt = vec![0.0; p.n()];
    let mut gx = vec![0.0; p.n() * p.d()];
    sub.grad(theta, xi, &mut wk, &mut gt, &mut gx)?;
    gt.extend_from_slice(&gx);
    Ok(gt)
}

/// Projection-form multiplier updates; the returned `u` is entrywise
/// nonnegative exactly.
pub fn multiplier_update(
    ctx: &OperatorContext,
    theta: &[f64],
    xi: &[f64],
    u_prev: &Mat,
    v_prev: &[f64],
    sigma: f64,
    c: &ConstraintSet,
) -> Result<(Mat, Vec<f64>)> {
    let n = ctx.n();
    let d = ctx.d();
    let az = ctx.apply_a(theta)?;
    let bz = ctx.apply_b(xi)?;
    let mut u = Mat::zeros(n, n);
    for k in 0..n * n {
        let z = u_prev.as_slice()[k] / sigma - az.as_slice()[k] - bz.as_slice()[k];
        u.as_mut_slice()[k] = sigma * z.max(0.0);
    }
    let mut w = vec![0.0; n * d];
    par::zip_map_into(xi, v_prev, &mut w, |a, b| a - b / sigma);
    let pw = constraints::blockwise_prox(c, &w, d)?;
    let v: Vec<f64> = w.iter().zip(&pw).map(|(a, b)| -sigma * (a - b)).collect();
    Ok((u, v))
}

// ---------------------------------------------------------------------------
// Newton-system solves
// ---------------------------------------------------------------------------

// One Armijo-guarded Newton step from `(theta, xi)`; returns the candidate
// point and its gradient norm without mutating the inputs. `wk` must hold
// refreshed buffers for the current point.
#[allow(clippy::too_many_arguments)]
fn polish_candidate(
    sub: &PalmSubproblem<'_>,
    theta: &[f64],
    xi: &[f64],
    wk: &SubWork,
    trial: &mut SubWork,
    g_t: &[f64],
    g_x: &[f64],
    cfg: &SsnConfig,
    pcg_total: &mut usize,
) -> Result<Option<(Vec<f64>, Vec<f64>, f64)>> {
    let hess = sub.hessian(xi, wk)?;
    let gn = (par::norm_sq(g_t) + par::norm_sq(g_x)).sqrt();
    let (dt, dx) = if hess.dim() <= cfg.direct_threshold {
        solve_direct(&hess, g_t, g_x, 0.0)?
    } else {
        let tol = cfg.gamma_bar.min(gn.powf(1.0 + cfg.tau_exp));
        let (dt, dx, its) = solve_pcg(&hess, g_t, g_x, 0.0, tol, cfg.pcg_max_iters, cfg.pcg_diag_precond);
        *pcg_total += its;
        (dt, dx)
    };
    let slope = par::dot(g_t, &dt) + par::dot(g_x, &dx);
    if !(slope < 0.0) {
        return Ok(None);
    }
    let f0 = sub.value(theta, xi, trial)?;
    let mut alpha = 1.0;
    for _ in 0..8 {
        let th: Vec<f64> = theta.iter().zip(&dt).map(|(a, b)| a + alpha * b).collect();
        let xx: Vec<f64> = xi.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
        if sub.value(&th, &xx, trial)? <= f0 + cfg.mu_ls * alpha * slope {
            let mut gt2 = vec![0.0; th.len()];
            let mut gx2 = vec![0.0; xx.len()];
            sub.grad(&th, &xx, trial, &mut gt2, &mut gx2)?;
            let gn2 = (par::norm_sq(&gt2) + par::norm_sq(&gx2)).sqrt();
            return Ok(Some((th, xx, gn2)));
        }
        alpha *= cfg.delta_ls;
    }
    Ok(None)
}

// Direct dense solve with Jacobi equilibration and iterative refinement.
// The system couples sigma-weighted active blocks with h/sigma-weighted
// free directions, so plain Cholesky loses digits at large sigma; the
// refinement recovers them using exact matrix-free residuals. `lm` adds
// Levenberg-style diagonal damping.
fn solve_direct(
    hess: &HessianAction,
    g_t: &[f64],
    g_x: &[f64],
    lm: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = g_t.len();
    let nd = g_x.len();
    let dim = hess.dim();
    let mut h = hess.materialize();
    let mut scale = vec![1.0; dim];
    for i in 0..dim {
        h[i * dim + i] += lm;
        let d = h[i * dim + i];
        scale[i] = if d > 0.0 { d.sqrt() } else { 1.0 };
    }
    for i in 0..dim {
        for j in 0..dim {
            h[i * dim + j] /= scale[i] * scale[j];
        }
    }
    // tiny ridge in the scaled metric guards rounding-level indefiniteness
    for i in 0..dim {
        h[i * dim + i] += 1e-14;
    }
    cholesky_in_place(&mut h, dim).map_err(|_| Error::Factorization("Newton system"))?;

    let solve_scaled = |rhs: &[f64]| -> Vec<f64> {
        let mut w: Vec<f64> = rhs.iter().zip(&scale).map(|(r, s)| r / s).collect();
        cholesky_solve(&h, dim, &mut w);
        w.iter().zip(&scale).map(|(v, s)| v / s).collect()
    };

    let rhs: Vec<f64> = g_t.iter().chain(g_x.iter()).map(|v| -v).collect();
    let mut x = solve_scaled(&rhs);
    let mut resid = vec![0.0; dim];
    let mut hx_t = vec![0.0; n];
    let mut hx_x = vec![0.0; nd];
    for _ in 0..2 {
        hess.apply(&x[..n], &x[n..], &mut hx_t, &mut hx_x);
        let mut rnorm = 0.0;
        for i in 0..dim {
            let hx = if i < n { hx_t[i] } else { hx_x[i - n] } + lm * x[i];
            resid[i] = rhs[i] - hx;
            rnorm += resid[i] * resid[i];
        }
        if rnorm.sqrt() <= 1e-14 * par::norm(&rhs) {
            break;
        }
        let corr = solve_scaled(&resid);
        for i in 0..dim {
            x[i] += corr[i];
        }
    }
    let dx = x.split_off(n);
    Ok((x, dx))
}

/// Preconditioned CG on the Hessian action; returns the step and the
/// number of iterations. Stops when the true residual drops below
/// `tol_abs`.
fn solve_pcg(
    hess: &HessianAction,
    g_t: &[f64],
    g_x: &[f64],
    lm: f64,
    tol_abs: f64,
    max_iters: usize,
    diag_precond: bool,
) -> (Vec<f64>, Vec<f64>, usize) {
    let n = g_t.len();
    let nd = g_x.len();
    let (mut pd_t, mut pd_x) = if diag_precond {
        hess.diag()
    } else {
        (vec![1.0; n], vec![1.0; nd])
    };
    if lm > 0.0 && diag_precond {
        pd_t.iter_mut().for_each(|v| *v += lm);
        pd_x.iter_mut().for_each(|v| *v += lm);
    }
    let mut x_t = vec![0.0; n];
    let mut x_x = vec![0.0; nd];
    let mut r_t: Vec<f64> = g_t.iter().map(|v| -v).collect();
    let mut r_x: Vec<f64> = g_x.iter().map(|v| -v).collect();
    let mut z_t: Vec<f64> = r_t.iter().zip(&pd_t).map(|(r, d)| r / d).collect();
    let mut z_x: Vec<f64> = r_x.iter().zip(&pd_x).map(|(r, d)| r / d).collect();
    let mut p_t = z_t.clone();
    let mut p_x = z_x.clone();
    let mut rz = par::dot(&r_t, &z_t) + par::dot(&r_x, &z_x);
    let mut hp_t = vec![0.0; n];
    let mut hp_x = vec![0.0; nd];
    let mut iters = 0;
    for _ in 0..max_iters {
        let rnorm = (par::norm_sq(&r_t) + par::norm_sq(&r_x)).sqrt();
        if rnorm <= tol_abs {
            break;
        }
        hess.apply(&p_t, &p_x, &mut hp_t, &mut hp_x);
        if lm > 0.0 {
            for i in 0..n {
                hp_t[i] += lm * p_t[i];
            }
            for k in 0..nd {
                hp_x[k] += lm * p_x[k];
            }
        }
        let php = par::dot(&p_t, &hp_t) + par::dot(&p_x, &hp_x);
        if php <= 0.0 || !php.is_finite() {
            break;
        }
        let alpha = rz / php;
        for i in 0..n {
            x_t[i] += alpha * p_t[i];
            r_t[i] -= alpha * hp_t[i];
        }
        for k in 0..nd {
            x_x[k] += alpha * p_x[k];
            r_x[k] -= alpha * hp_x[k];
        }
        for i in 0..n {
            z_t[i] = r_t[i] / pd_t[i];
        }
        for k in 0..nd {
            z_x[k] = r_x[k] / pd_x[k];
        }
        let rz_new = par::dot(&r_t, &z_t) + par::dot(&r_x, &z_x);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p_t[i] = z_t[i] + beta * p_t[i];
        }
        for k in 0..nd {
            p_x[k] = z_x[k] + beta * p_x[k];
        }
        iters += 1;
    }
    (x_t, x_x, iters)
}

// ---------------------------------------------------------------------------
// Semismooth Newton inner solver
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SsnOutcome {
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub iterations: usize,
    pub pcg_iterations: usize,
    /// Gradient norms at the start of each iteration (last entry is the
    /// returned point).
    pub grad_norms: Vec<f64>,
    pub u_next: Mat,
    pub v_next: Vec<f64>,
    /// Gradient norm at the returned point.
    pub grad_norm: f64,
    /// Whether the Levenberg-damped fallback engaged during the solve.
    pub used_damping: bool,
    /// Whether the requested gradient target was reached. On strongly
    /// degenerate instances the Newton iteration can freeze above the
    /// target once the line search exhausts f64 resolution; the best
    /// iterate is returned and the caller decides whether it suffices.
    pub met_target: bool,
}

/// Parameters of the relative-error acceptance rule.
struct CriterionB {
    coef: f64, // delta_k * lambda_min / sigma
    h1: f64,
    h2: f64,
}

/// Minimizes the subproblem by semismooth Newton with Armijo line search
/// until the gradient norm falls below `target_abs` (and, when set, the
/// relative-error rule holds).
pub fn ssn_solve(
    sub: &PalmSubproblem<'_>,
    theta0: Vec<f64>,
    xi0: Vec<f64>,
    target_abs: f64,
    cfg: &SsnConfig,
) -> Result<SsnOutcome> {
    ssn_solve_inner(sub, theta0, xi0, target_abs, None, cfg)
}

fn ssn_solve_inner(
    sub: &PalmSubproblem<'_>,
    theta0: Vec<f64>,
    xi0: Vec<f64>,
    target_abs: f64,
    crit_b: Option<&CriterionB>,
    cfg: &SsnConfig,
) -> Result<SsnOutcome> {
    cfg.validate()?;
    let n = sub.n();
    let d = sub.d();
    let mut theta = theta0;
    let mut xi = xi0;
    let mut wk = SubWork::new(n, d);
    let mut trial = SubWork::new(n, d);
    let mut g_t = vec![0.0; n];
    let mut g_x = vec![0.0; n * d];
    let mut grad_norms = Vec::new();
    let mut pcg_total = 0;
    // f64 evaluation noise bounds how small the gradient can get; the
    // stopping rules cannot demand more than that
    let floor = 1e-12 * (1.0 + par::norm(sub.y));
    let target_abs = target_abs.max(floor);
    // flat directions (curvature h/sigma) make undamped Newton steps cross
    // distant kinks once the line search can no longer resolve the
    // predicted decrease in f64; a Levenberg-style damped retry usually
    // restores progress, and a persistent freeze ends the solve with the
    // best iterate
    let mut damped = false;
    let mut used_damping = false;
    let mut stalled = false;
    // the relative-error rule gets a bounded budget of extra iterations
    // once the absolute rule holds; its coefficient shrinks below what f64
    // can certify on converged instances
    let mut b_attempts = 0usize;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;

    let mut iter = 0;
    loop {
        sub.grad(&theta, &xi, &mut wk, &mut g_t, &mut g_x)?;
        let gn = (par::norm_sq(&g_t) + par::norm_sq(&g_x)).sqrt();
        if !gn.is_finite() {
            return Err(Error::Solver("non-finite subproblem gradient".into()));
        }
        if grad_norms.last() != Some(&gn) {
            grad_norms.push(gn);
        }
        if best.as_ref().map_or(true, |(b, _, _)| gn < *b) {
            best = Some((gn, theta.clone(), xi.clone()));
        }
        if gn <= target_abs {
            b_attempts += 1;
            let accept = match crit_b {
                None => true,
                Some(_) if gn <= floor || stalled || b_attempts > 10 => true,
                Some(cb) => {
                    let (u_next, v_next) = sub.multipliers(&wk);
                    let mut sq = 0.0;
                    for i in 0..n {
                        let r = theta[i] - sub.anchor_theta[i];
                        sq += cb.h1 * r * r;
                    }
                    for k in 0..xi.len() {
                        let r = xi[k] - sub.anchor_xi[k];
                        sq += cb.h2 * r * r;
                    }
                    for k in 0..n * n {
                        let r = u_next.as_slice()[k] - sub.u_tilde.as_slice()[k];
                        sq += r * r;
                    }
                    for k in 0..v_next.len() {
                        let r = v_next[k] - sub.v_tilde[k];
                        sq += r * r;
                    }
                    gn <= cb.coef * sq.sqrt()
                }
            };
            if accept {
                // basin polish: one extra Newton step when already deep
                // sharpens the subproblem solution nearly for free
                let mut gn = gn;
                if gn <= 1e-3 && gn > floor && iter < cfg.max_ssn_iters {
                    if let Some((t2, x2, gn2)) =
                        polish_candidate(sub, &theta, &xi, &wk, &mut trial, &g_t, &g_x, cfg, &mut pcg_total)?
                    {
                        if gn2 < gn {
                            theta = t2;
                            xi = x2;
                            gn = gn2;
                            grad_norms.push(gn);
                            sub.grad(&theta, &xi, &mut wk, &mut g_t, &mut g_x)?;
                        }
                    }
                }
                sub.refresh(&theta, &xi, &mut wk)?;
                let (u_next, v_next) = sub.multipliers(&wk);
                return Ok(SsnOutcome {
                    theta,
                    xi,
                    iterations: iter,
                    pcg_iterations: pcg_total,
                    grad_norms,
                    u_next,
                    v_next,
                    grad_norm: gn,
                    used_damping,
                    met_target: true,
                });
            }
        }
        if (stalled && gn > target_abs) || iter >= cfg.max_ssn_iters {
            break;
        }

        let hess = sub.hessian(&xi, &wk)?;
        let lm = if damped { gn.sqrt() } else { 0.0 };
        let mut pcg_now = 0;
        let (dt, dx) = if hess.dim() <= cfg.direct_threshold {
            solve_direct(&hess, &g_t, &g_x, lm)?
        } else {
            let tol = cfg.gamma_bar.min(gn.powf(1.0 + cfg.tau_exp));
            let (dt, dx, its) =
                solve_pcg(&hess, &g_t, &g_x, lm, tol, cfg.pcg_max_iters, cfg.pcg_diag_precond);
            pcg_total += its;
            pcg_now = its;
            (dt, dx)
        };
        let slope = par::dot(&g_t, &dt) + par::dot(&g_x, &dx);
        if !(slope < 0.0) {
            return Err(Error::Solver(format!(
                "Newton direction is not a descent direction (slope {slope:e})"
            )));
        }
        let f0 = sub.value(&theta, &xi, &mut trial)?;
        let resolution = 4.0 * f64::EPSILON * (1.0 + f0.abs());
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..cfg.max_backtracks {
            let th_t: Vec<f64> = theta.iter().zip(&dt).map(|(a, b)| a + alpha * b).collect();
            let xi_t: Vec<f64> = xi.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
            let f_t = sub.value(&th_t, &xi_t, &mut trial)?;
            if f_t <= f0 + cfg.mu_ls * alpha * slope {
                if f0 - f_t > resolution {
                    theta = th_t;
                    xi = xi_t;
                    accepted = true;
                    if alpha == 1.0 {
                        damped = false;
                    }
                }
                break;
            }
            alpha *= cfg.delta_ls;
        }
        if !accepted {
            if !damped {
                damped = true; // retry this iterate with a damped system
                used_damping = true;
            } else {
                stalled = true; // no representable decrease remains
            }
        }
        if std::env::var_os("SHAPEREG_SSN_DEBUG").is_some() {
            eprintln!(
                "    ssn iter {iter}: gn={gn:.3e} pcg={pcg_now} slope={slope:.2e} alpha={alpha:.2e} accepted={accepted} damped={damped}"
            );
        }
        iter += 1;
    }

    // target unmet: hand back the best iterate and let the caller decide
    let (gn, bt, bx) = best.expect("at least one gradient evaluation");
    sub.refresh(&bt, &bx, &mut wk)?;
    let (u_next, v_next) = sub.multipliers(&wk);
    grad_norms.push(gn);
    Ok(SsnOutcome {
        theta: bt,
        xi: bx,
        iterations: iter.min(cfg.max_ssn_iters),
        pcg_iterations: pcg_total,
        grad_norms,
        u_next,
        v_next,
        grad_norm: gn,
        used_damping,
        met_target: false,
    })
}


// ---------------------------------------------------------------------------
// Outer loop
// ---------------------------------------------------------------------------

/// Runs the proximal augmented Lagrangian method.
pub fn palm_fit(
    p: &ProblemData,
    c: &ConstraintSet,
    cfg: &PalmConfig,
    ssn_cfg: &SsnConfig,
    init: Option<&WarmStart>,
    mut trace: Option<&mut dyn TraceSink>,
) -> Result<(FittedModel, SolverReport)> {
    cfg.validate()?;
    ssn_cfg.validate()?;
    c.validate(p.d())?;
    if let Some(len) = c.per_point_len() {
        if len != p.n() {
            return Err(Error::DimensionMismatch {
                what: "per-point sets",
                expected: p.n(),
                got: len,
            });
        }
    }
    let start = Instant::now();
    let ctx = OperatorContext::new(p.x().clone())?;
    let n = p.n();
    let d = p.d();
    let (mut theta, mut xi, mut u, mut v) = match init {
        Some(ws) => (
            ws.primal.theta.clone(),
            ws.primal.xi.clone(),
            ws.dual.u.clone(),
            ws.dual.v.clone(),
        ),
        None => (p.y().to_vec(), vec![0.0; n * d], Mat::zeros(n, n), vec![0.0; n * d]),
    };
    let mut sigma = cfg.sigma0;
    let lambda_min = cfg.lambda_min();

    let mut outer = 0;
    let mut total_inner = 0;
    let mut total_pcg = 0;
    let mut histories = Vec::new();
    let mut damped_flags = Vec::new();
    let mut termination = TerminationReason::MaxIterations;
    let mut last_res = None;
    let mut r_kkt_prev = f64::INFINITY;
    let mut bad_streak = 0usize;
    let mut streak_start_rkkt = f64::INFINITY;

    for k in 0..cfg.max_outer {
        let eps_k = cfg.eps0 * cfg.eps_decay.powi(k as i32);
        let delta_k = cfg.delta0 * cfg.delta_decay.powi(k as i32);
        // theory target, gated from below by the outer progress: the
        // realized tolerance sequence stays summable along convergent runs
        // while never demanding more inner accuracy than the outer
        // residual can use
        let gate = (0.1 * r_kkt_prev).clamp(0.1 * cfg.tol, 0.1);
        let target = (lambda_min * eps_k / sigma).max(gate);
        let sub = PalmSubproblem {
            ctx: &ctx,
            y: p.y(),
            c,
            sigma,
            h1: cfg.h1_scale,
            h2: cfg.h2_scale,
            anchor_theta: &theta,
            anchor_xi: &xi,
            u_tilde: &u,
            v_tilde: &v,
        };
        let crit_b = CriterionB {
            coef: delta_k * lambda_min / sigma,
            h1: cfg.h1_scale,
            h2: cfg.h2_scale,
        };
        let out = ssn_solve_inner(
            &sub,
            theta.clone(),
            xi.clone(),
            target,
            cfg.use_criterion_b.then_some(&crit_b),
            ssn_cfg,
        )
        .map_err(|e| Error::Solver(format!("outer iteration {}: {e}", k + 1)))?;
        if out.met_target || out.grad_norm <= 0.5 * r_kkt_prev {
            // on target, or the shortfall still out-resolves the outer
            // residual: the multiplier update remains productive
            bad_streak = 0;
        } else {
            if bad_streak == 0 {
                streak_start_rkkt = r_kkt_prev;
            }
            bad_streak += 1;
            if bad_streak >= 6 && !(r_kkt_prev <= 0.5 * streak_start_rkkt) {
                // repeated inner shortfalls without outer progress
                return Err(Error::Solver(format!(
                    "outer iteration {}: inner Newton solver frozen at gradient norm {:.3e} \
                     (target {target:.3e}) with the KKT residual stuck near {r_kkt_prev:.3e}; \
                     retry with larger proximal scales",
                    k + 1,
                    out.grad_norm
                )));
            }
        }
        theta = out.theta;
        xi = out.xi;
        u = out.u_next;
        v = out.v_next;
        total_inner += out.iterations;
        total_pcg += out.pcg_iterations;
        let grad_norm = *out.grad_norms.last().unwrap_or(&0.0);
        histories.push(out.grad_norms);
        damped_flags.push(out.used_damping);
        outer = k + 1;

        let az = ctx.apply_a(&theta)?;
        let bz = ctx.apply_b(&xi)?;
        let res = kkt_residuals_with(&ctx, p, &theta, &xi, &az, &bz, &u, &v, c)?;
        last_res = Some(res);
        r_kkt_prev = res.r_kkt();
        let diff: Vec<f64> = theta.iter().zip(p.y()).map(|(a, b)| a - b).collect();
        let objective = 0.5 * par::norm_sq(&diff);
        if let Some(sink) = trace.as_deref_mut() {
            sink.record(&TraceRecord {
                iter: outer,
                inner: total_inner,
                pcg: total_pcg,
                grad_norm,
                r_p: res.r_p,
                r_d: res.r_d,
                r_c: res.r_c,
                objective,
                sigma,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        if res.r_kkt() <= cfg.tol
            && res.abs_pair_violation <= 100.0 * cfg.tol * (1.0 + par::norm(p.y()))
        {
            termination = TerminationReason::Converged;
            break;
        }
        if start.elapsed().as_secs_f64() > cfg.max_time_secs {
            termination = TerminationReason::TimeLimit;
            break;
        }
        sigma = (sigma * cfg.sigma_growth).min(cfg.sigma_max);
    }

    let res = last_res.ok_or_else(|| Error::Solver("no outer iterations performed".into()))?;
    let diff: Vec<f64> = theta.iter().zip(p.y()).map(|(a, b)| a - b).collect();
    let objective = 0.5 * par::norm_sq(&diff);
    let model = FittedModel::from_solution(p, c, &theta, &xi)?;
    let report = SolverReport {
        solver: "pALM",
        iterations: outer,
        inner_iterations: total_inner,
        pcg_iterations: total_pcg,
        r_p: res.r_p,
        r_d: res.r_d,
        r_c: res.r_c,
        objective,
        elapsed_secs: start.elapsed().as_secs_f64(),
        termination,
        sigma_final: sigma,
        ssn_grad_norms: histories,
        ssn_damped: damped_flags,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::QNorm;
    use crate::rng::SplitMix64;

    fn toy() -> ProblemData {
        let x = Mat::from_fn(1, 3, |_, j| j as f64);
        ProblemData::new(x, vec![0.0, 1.0, 0.0]).unwrap()
    }

    fn random_problem(n: usize, d: usize, seed: u64) -> ProblemData {
        let mut rng = SplitMix64::new(seed);
        let x = Mat::from_fn(d, n, |_, _| rng.uniform(-1.0, 1.0));
        let y: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        ProblemData::new(x, y).unwrap()
    }

    #[test]
    fn toy_reaches_analytic_optimum() {
        let p = toy();
        let cfg = PalmConfig { tol: 1e-9, ..Default::default() };
        let (model, report) =
            palm_fit(&p, &ConstraintSet::Free, &cfg, &SsnConfig::default(), None, None).unwrap();
        assert!(report.converged(), "{report:?}");
        for t in model.theta_hat() {
            assert!((t - 1.0 / 3.0).abs() < 1e-7, "theta {t}");
        }
        assert!((report.objective - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = random_problem(6, 2, 31);
        let ctx = OperatorContext::new(p.x().clone()).unwrap();
        let mut rng = SplitMix64::new(32);
        let c = ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 0.8 };
        let n = 6;
        let d = 2;
        let anchor_theta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let anchor_xi: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let u = Mat::from_fn(n, n, |_, _| rng.next_f64());
        let v: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sigma = 1.7;
        let sub = PalmSubproblem {
            ctx: &ctx,
            y: p.y(),
            c: &c,
            sigma,
            h1: 1e-3,
            h2: 1e-3,
            anchor_theta: &anchor_theta,
            anchor_xi: &anchor_xi,
            u_tilde: &u,
            v_tilde: &v,
        };
        let mut wk = SubWork::new(n, d);
        for _ in 0..10 {
            let theta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let xi: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut gt = vec![0.0; n];
            let mut gx = vec![0.0; n * d];
            sub.grad(&theta, &xi, &mut wk, &mut gt, &mut gx).unwrap();
            let h = 1e-6;
            for idx in 0..n + n * d {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                let mut xp = xi.clone();
                let mut xm = xi.clone();
                if idx < n {
                    tp[idx] += h;
                    tm[idx] -= h;
                } else {
                    xp[idx - n] += h;
                    xm[idx - n] -= h;
                }
                let fp = sub.value(&tp, &xp, &mut wk).unwrap();
                let fm = sub.value(&tm, &xm, &mut wk).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = if idx < n { gt[idx] } else { gx[idx - n] };
                assert!(
                    (an - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "grad[{idx}] = {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_subproblem_minimizer() {
        let p = random_problem(5, 2, 33);
        let ctx = OperatorContext::new(p.x().clone()).unwrap();
        let c = ConstraintSet::Free;
        let anchor_theta = p.y().to_vec();
        let anchor_xi = vec![0.0; 10];
        let u = Mat::zeros(5, 5);
        let v = vec![0.0; 10];
        let sub = PalmSubproblem {
            ctx: &ctx,
            y: p.y(),
            c: &c,
            sigma: 2.0,
            h1: 1e-3,
            h2: 1e-3,
            anchor_theta: &anchor_theta,
            anchor_xi: &anchor_xi,
            u_tilde: &u,
            v_tilde: &v,
        };
        let out = ssn_solve(&sub, anchor_theta.clone(), anchor_xi.clone(), 1e-10, &SsnConfig::default())
            .unwrap();
        assert!(*out.grad_norms.last().unwrap() <= 1e-10);
    }

    #[test]
    fn hessian_symmetric_and_matches_dense() {
        let p = random_problem(7, 2, 35);
        let ctx = OperatorContext::new(p.x().clone()).unwrap();
        let mut rng = SplitMix64::new(36);
        let c = ConstraintSet::Box { lower: vec![0.0, 0.0], upper: vec![1.0, 1.0] };
        let (n, d) = (7, 2);
        let anchor_theta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let anchor_xi: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let u = Mat::from_fn(n, n, |_, _| rng.next_f64());
        let v: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sub = PalmSubproblem {
            ctx: &ctx,
            y: p.y(),
            c: &c,
            sigma: 1.3,
            h1: 1e-3,
            h2: 1e-3,
            anchor_theta: &anchor_theta,
            anchor_xi: &anchor_xi,
            u_tilde: &u,
            v_tilde: &v,
        };
        let mut wk = SubWork::new(n, d);
        let theta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xi: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        sub.refresh(&theta, &xi, &mut wk).unwrap();
        let hess = sub.hessian(&xi, &wk).unwrap();
        let dim = hess.dim();
        let dense = hess.materialize();
        // symmetry of the dense form and agreement with the action
        for i in 0..dim {
            for j in 0..dim {
                assert!((dense[i * dim + j] - dense[j * dim + i]).abs() < 1e-12);
            }
        }
        for _ in 0..10 {
            let dt: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let dx: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut ot = vec![0.0; n];
            let mut ox = vec![0.0; n * d];
            hess.apply(&dt, &dx, &mut ot, &mut ox);
            for i in 0..dim {
                let mut want = 0.0;
                for j in 0..dim {
                    let vj = if j < n { dt[j] } else { dx[j - n] };
                    want += dense[i * dim + j] * vj;
                }
                let got = if i < n { ot[i] } else { ox[i - n] };
                assert!((got - want).abs() < 1e-9, "action vs dense at {i}");
            }
            // adjoint symmetry of the action
            let et: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let ex: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut ot2 = vec![0.0; n];
            let mut ox2 = vec![0.0; n * d];
            hess.apply(&et, &ex, &mut ot2, &mut ox2);
            let lhs = par::dot(&ot, &et) + par::dot(&ox, &ex);
            let rhs = par::dot(&dt, &ot2) + par::dot(&dx, &ox2);
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "self-adjoint");
        }
        // diagonal agrees with the dense diagonal
        let (diag_t, diag_x) = hess.diag();
        for i in 0..n {
            assert!((diag_t[i] - dense[i * dim + i]).abs() < 1e-10);
        }
        for k in 0..n * d {
            assert!((diag_x[k] - dense[(n + k) * dim + (n + k)]).abs() < 1e-10);
        }
    }

    #[test]
    fn hessian_collapses_when_mask_empty() {
        // all pair terms on the slack side: operator = blkdiag(I + H1/sigma,
        // sigma (I - J) + H2/sigma)
        let p = random_problem(4, 1, 37);
        let ctx = OperatorContext::new(p.x().clone()).unwrap();
        let c = ConstraintSet::Free;
        let (n, d) = (4, 1);
        let anchor_theta = vec![0.0; n];
        let anchor_xi = vec![0.0; n];
        // huge negative u~ forces z < 0 everywhere
        let u = Mat::from_fn(n, n, |_, _| -100.0);
        let v = vec![0.0; n];
        let sigma = 1.0;
        let sub = PalmSubproblem {
            ctx: &ctx,
            y: p.y(),
            c: &c,
            sigma,
            h1: 1e-3,
            h2: 1e-3,
            anchor_theta: &anchor_theta,
            anchor_xi: &anchor_xi,
            u_tilde: &u,
            v_tilde: &v,
        };
        let mut wk = SubWork::new(n, d);
        sub.refresh(&vec![0.0; n], &vec![0.0; n], &mut wk).unwrap();
        let hess = sub.hessian(&vec![0.0; n], &wk).unwrap();
        let dense = hess.materialize();
        let dim = hess.dim();
        for i in 0..dim {
            for j in 0..dim {
                let want = if i != j {
                    0.0
                } else if i < n {
                    1.0 + 1e-3 / sigma
                } else {
                    // free set: J = I, so sigma (I - J) vanishes
                    1e-3 / sigma
                };
                assert!((dense[i * dim + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hessian_directional_finite_difference() {
        // (grad(x + h dir) - grad(x)) / h ~= H dir away from kinks
        let p = random_problem(6, 2, 39);
        let ctx = OperatorContext::new(p.x().clone()).unwrap();
        let mut rng = SplitMix64::new(40);
        let c = ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 0.7 };
        let (n, d) = (6, 2);
        let anchor_theta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let anchor_xi: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let u = Mat::from_fn(n, n, |_, _| rng.next_f64());
        let v: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sub = PalmSubproblem {
            ctx: &ctx,
            y: p.y(),
            c: &c,
            sigma: 1.1,
            h1: 1e-3,
            h2: 1e-3,
            anchor_theta: &anchor_theta,
            anchor_xi: &anchor_xi,
            u_tilde: &u,
            v_tilde: &v,
        };
        let mut wk = SubWork::new(n, d);
        let theta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xi: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        sub.refresh(&theta, &xi, &mut wk).unwrap();
        let hess = sub.hessian(&xi, &wk).unwrap();
        let h = 1e-7;
        let mut ok = 0;
        for _ in 0..20 {
            let dt: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let dx: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut ht = vec![0.0; n];
            let mut hx = vec![0.0; n * d];
            hess.apply(&dt, &dx, &mut ht, &mut hx);
            let tp: Vec<f64> = theta.iter().zip(&dt).map(|(a, b)| a + h * b).collect();
            let xp: Vec<f64> = xi.iter().zip(&dx).map(|(a, b)| a + h * b).collect();
            let mut g0t = vec![0.0; n];
            let mut g0x = vec![0.0; n * d];
            sub.grad(&theta, &xi, &mut wk, &mut g0t, &mut g0x).unwrap();
            let mut g1t = vec![0.0; n];
            let mut g1x = vec![0.0; n * d];
            sub.grad(&tp, &xp, &mut wk, &mut g1t, &mut g1x).unwrap();
            let mut err: f64 = 0.0;
            let mut scale: f64 = 1.0;
            for i in 0..n {
                let fd = (g1t[i] - g0t[i]) / h;
                err = err.max((fd - ht[i]).abs());
                scale = scale.max(fd.abs());
            }
            for k in 0..n * d {
                let fd = (g1x[k] - g0x[k]) / h;
                err = err.max((fd - hx[k]).abs());
                scale = scale.max(fd.abs());
            }
            if err <= 1e-4 * scale {
                ok += 1;
            }
        }
        // a direction may cross a kink; most must agree
        assert!(ok >= 15, "directional consistency held only {ok}/20 times");
    }

    #[test]
    fn multiplier_update_cases() {
        let p = toy();
        let ctx = OperatorContext::new(p.x().clone()).unwrap();
        // strictly feasible point: flat function, u stays zero
        let theta = vec![0.5; 3];
        let xi = vec![0.0; 3];
        let (u, v) =
            multiplier_update(&ctx, &theta, &xi, &Mat::zeros(3, 3), &[0.0; 3], 1.0, &ConstraintSet::Free)
                .unwrap();
        assert!(u.as_slice().iter().all(|x| *x == 0.0));
        assert!(v.iter().all(|x| *x == 0.0));

        // one violated pair: theta = (0, 1) on x = (0, 1) with xi = (2, 2)
        // violates theta_1 >= theta_2 + xi_2 (x_1 - x_2) = 1 + (-1)*2 = -1?
        // pick a clean case instead: theta = (0, 0), xi slope 1 at point 1
        let x = Mat::from_fn(1, 2, |_, j| j as f64);
        let p2 = ProblemData::new(x, vec![0.0, 0.0]).unwrap();
        let ctx2 = OperatorContext::new(p2.x().clone()).unwrap();
        let theta = vec![0.0, 0.0];
        let xi = vec![0.0, 1.0]; // piece 2: 0 + 1*(x - 1); at x=0 gives -1 <= 0 ok;
                                 // pair (i=0, j=1): theta_0 - theta_1 - xi_1*(x_0 - x_1)
                                 // = 0 - 0 - 1*(-1) = 1 >= 0 ok;
                                 // pair (i=1, j=0): 0 - 0 - 0 = 0 ok; make xi_0 = 1 too:
        let xi = vec![1.0, xi[1]];
        // now pair (i=1, j=0): theta_1 - theta_0 - xi_0*(x_1 - x_0) = -1 < 0 violated
        let (u, _v) = multiplier_update(&ctx2, &theta, &xi, &Mat::zeros(2, 2), &[0.0; 2], 2.0, &ConstraintSet::Free)
            .unwrap();
        assert!(u.as_slice().iter().all(|x| *x >= 0.0), "u nonnegative exactly");
        // exactly one violated pair gets a positive multiplier
        let positives: Vec<(usize, usize)> = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .filter(|&(i, j)| u.get(i, j) > 0.0)
            .collect();
        assert_eq!(positives, vec![(1, 0)]);
        assert!((u.get(1, 0) - 2.0).abs() < 1e-15, "sigma * violation");

        // xi inside D with v_prev = 0 keeps v at zero
        let ball = ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 10.0 };
        let (_, v) = multiplier_update(&ctx2, &theta, &xi, &Mat::zeros(2, 2), &[0.0; 2], 2.0, &ball).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn random_instances_match_reference() {
        let mut seed = 50u64;
        let cases: Vec<(ConstraintSet, refqp::Cons)> = vec![
            (ConstraintSet::Free, refqp::Cons::Free),
            (
                ConstraintSet::Box { lower: vec![-0.5, -0.5], upper: vec![0.5, 0.5] },
                refqp::Cons::Box { lower: vec![-0.5, -0.5], upper: vec![0.5, 0.5] },
            ),
            (
                ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 0.8 },
                refqp::Cons::Ball { q: refqp::Norm::L2, radius: 0.8 },
            ),
        ];
        for (ours, theirs) in &cases {
            seed += 1;
            let p = random_problem(8, 2, seed);
            let points: Vec<Vec<f64>> = (0..8).map(|j| p.x().col(j).to_vec()).collect();
            let reference = refqp::solve_regression(&points, p.y(), theirs);
            let cfg = PalmConfig { tol: 1e-8, ..Default::default() };
            let (_, report) = palm_fit(&p, ours, &cfg, &SsnConfig::default(), None, None).unwrap();
            assert!(report.converged(), "{ours:?}: {report:?}");
            let rel = (report.objective - reference.objective).abs() / (1.0 + reference.objective);
            assert!(rel < 1e-6, "{ours:?}: palm {} vs ref {}", report.objective, reference.objective);
        }
    }

    #[test]
    fn agrees_with_admm() {
        for seed in [71u64, 72, 73] {
            let p = random_problem(9, 2, seed);
            let c = ConstraintSet::LipschitzBall { q: QNorm::One, radius: 1.0 };
            let (_, rp) =
                palm_fit(&p, &c, &PalmConfig::default(), &SsnConfig::default(), None, None).unwrap();
            let (_, ra) =
                crate::solver::admm::admm_fit(&p, &c, &crate::solver::admm::AdmmConfig::default(), None, None)
                    .unwrap();
            assert!(rp.converged() && ra.converged());
            let rel = (rp.objective - ra.objective).abs() / (1.0 + rp.objective.abs());
            assert!(rel <= 1e-5, "cross-solver: {} vs {}", rp.objective, ra.objective);
        }
    }

    #[test]
    fn unit_step_accepted_near_solution() {
        // on the smooth toy subproblem the Newton step is accepted with
        // m_j = 0 once close to the minimizer
        let p = toy();
        let ctx = OperatorContext::new(p.x().clone()).unwrap();
        let c = ConstraintSet::Free;
        let anchor_theta = p.y().to_vec();
        let anchor_xi = vec![0.0; 3];
        let u = Mat::zeros(3, 3);
        let v = vec![0.0; 3];
        let sub = PalmSubproblem {
            ctx: &ctx,
            y: p.y(),
            c: &c,
            sigma: 1.0,
            h1: 1e-3,
            h2: 1e-3,
            anchor_theta: &anchor_theta,
            anchor_xi: &anchor_xi,
            u_tilde: &u,
            v_tilde: &v,
        };
        let out = ssn_solve(&sub, anchor_theta.clone(), anchor_xi.clone(), 1e-9, &SsnConfig::default())
            .unwrap();
        // superlinear tail: a handful of iterations suffices
        assert!(out.iterations <= 10, "iterations {}", out.iterations);
        let gns = &out.grad_norms;
        assert!(gns.windows(2).all(|w| w[1] <= w[0] * 1.01), "monotone-ish decrease");
    }
}
