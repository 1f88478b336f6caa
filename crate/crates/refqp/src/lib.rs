//! Dense reference solver for small shape-constrained least-squares QPs.
//!
//! This crate is an independent oracle used by test suites. It shares no code
//! with the main solver library: constraints are materialized as explicit
//! inequality lists, the regression QP is solved by a log-barrier interior
//! method with damped Newton steps, and Euclidean projections onto the
//! gradient sets are computed by a primal active-set method (polyhedral sets)
//! or KKT bisection (the `l2` ball). Accuracy is limited only by the final
//! barrier parameter: the objective gap is bounded by `m * mu_final`.
//!
//! Problem solved by [`solve_regression`]:
//!
//! ```text
//!     minimize    1/2 * sum_i (theta_i - y_i)^2
//!     subject to  theta_i >= theta_j + <xi_j, x_i - x_j>   for all i != j
//!                 xi_i in D_i                               for i = 1..n
//! ```

/// Norm index for ball-shaped gradient sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
    Linf,
}

/// Description of the gradient set `D` for one block (or all blocks).
#[derive(Clone, Debug)]
pub enum Cons {
    Free,
    /// Coordinates in `incr` constrained nonnegative, `decr` nonpositive.
    Monotone { incr: Vec<usize>, decr: Vec<usize> },
    /// Componentwise bounds; entries may be infinite for one-sided bounds.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{ x : ||x||_q <= radius }`.
    Ball { q: Norm, radius: f64 },
    /// Block `i` uses `sets[i]`.
    PerPoint(Vec<Cons>),
}

impl Cons {
    fn block(&self, i: usize) -> &Cons {
        match self {
            Cons::PerPoint(sets) => &sets[i],
            other => other,
        }
    }
}

/// Result of the barrier solve.
#[derive(Clone, Debug)]
pub struct Solution {
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    /// `1/2 * ||theta - y||^2` at the returned point.
    pub objective: f64,
    /// Upper bound on the objective suboptimality (`m * mu_final`).
    pub gap_bound: f64,
}

// ---------------------------------------------------------------------------
// Inequality representation: a^T z <= b (sparse a) or ||z_block||^2 <= r^2.
// ---------------------------------------------------------------------------

enum Ineq {
    Lin { a: Vec<(usize, f64)>, b: f64 },
    Sphere { offset: usize, len: usize, radius2: f64 },
}

impl Ineq {
    fn slack(&self, z: &[f64]) -> f64 {
        match self {
            Ineq::Lin { a, b } => {
                let mut s = *b;
                for &(k, v) in a {
                    s -= v * z[k];
                }
                s
            }
            Ineq::Sphere { offset, len, radius2 } => {
                let mut s = *radius2;
                for k in *offset..*offset + *len {
                    s -= z[k] * z[k];
                }
                s
            }
        }
    }

    // grad of g where constraint is g(z) <= 0 and slack = -g.
    fn add_grad(&self, z: &[f64], w: f64, out: &mut [f64]) {
        match self {
            Ineq::Lin { a, .. } => {
                for &(k, v) in a {
                    out[k] += w * v;
                }
            }
            Ineq::Sphere { offset, len, .. } => {
                for k in *offset..*offset + *len {
                    out[k] += w * 2.0 * z[k];
                }
            }
        }
    }

    // Adds w1 * grad g grad g^T + w2 * hess g to the dense matrix h (dim x dim).
    fn add_hess(&self, z: &[f64], w1: f64, w2: f64, h: &mut [f64], dim: usize) {
        match self {
            Ineq::Lin { a, .. } => {
                for &(k1, v1) in a {
                    for &(k2, v2) in a {
                        h[k1 * dim + k2] += w1 * v1 * v2;
                    }
                }
            }
            Ineq::Sphere { offset, len, .. } => {
                for k1 in *offset..*offset + *len {
                    for k2 in *offset..*offset + *len {
                        h[k1 * dim + k2] += w1 * 4.0 * z[k1] * z[k2];
                    }
                    h[k1 * dim + k1] += w2 * 2.0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dense Cholesky with ridge escalation.
// ---------------------------------------------------------------------------

fn cholesky(a: &mut [f64], dim: usize) -> Result<(), ()> {
    for j in 0..dim {
        let mut diag = a[j * dim + j];
        for k in 0..j {
            diag -= a[j * dim + k] * a[j * dim + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(());
        }
        let diag = diag.sqrt();
        a[j * dim + j] = diag;
        for i in j + 1..dim {
            let mut v = a[i * dim + j];
            for k in 0..j {
                v -= a[i * dim + k] * a[j * dim + k];
            }
            a[i * dim + j] = v / diag;
        }
    }
    Ok(())
}

fn chol_solve(l: &[f64], dim: usize, rhs: &mut [f64]) {
    for i in 0..dim {
        let mut v = rhs[i];
        for k in 0..i {
            v -= l[i * dim + k] * rhs[k];
        }
        rhs[i] = v / l[i * dim + i];
    }
    for i in (0..dim).rev() {
        let mut v = rhs[i];
        for k in i + 1..dim {
            v -= l[k * dim + i] * rhs[k];
        }
        rhs[i] = v / l[i * dim + i];
    }
}

fn solve_spd(h: &[f64], dim: usize, rhs: &[f64]) -> Vec<f64> {
    let mut ridge = 0.0;
    let scale: f64 = (0..dim).map(|i| h[i * dim + i].abs()).fold(0.0, f64::max);
    loop {
        let mut l = h.to_vec();
        if ridge > 0.0 {
            for i in 0..dim {
                l[i * dim + i] += ridge;
            }
        }
        if cholesky(&mut l, dim).is_ok() {
            let mut x = rhs.to_vec();
            chol_solve(&l, dim, &mut x);
            if x.iter().all(|v| v.is_finite()) {
                return x;
            }
        }
        ridge = if ridge == 0.0 { 1e-14 * scale.max(1.0) } else { ridge * 100.0 };
        assert!(ridge.is_finite() && ridge < 1e20, "refqp: Newton system unsolvable");
    }
}

// ---------------------------------------------------------------------------
// Constraint assembly for the regression QP.
// ---------------------------------------------------------------------------

fn sign_patterns(d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(1 << d);
    for m in 0..(1u32 << d) {
        out.push((0..d).map(|k| if m >> k & 1 == 1 { -1.0 } else { 1.0 }).collect());
    }
    out
}

fn block_ineqs(cons: &Cons, d: usize, offset: usize, out: &mut Vec<Ineq>) {
    match cons {
        Cons::Free => {}
        Cons::Monotone { incr, decr } => {
            for &k in incr {
                out.push(Ineq::Lin { a: vec![(offset + k, -1.0)], b: 0.0 });
            }
            for &k in decr {
                out.push(Ineq::Lin { a: vec![(offset + k, 1.0)], b: 0.0 });
            }
        }
        Cons::Box { lower, upper } => {
            for k in 0..d {
                if lower[k].is_finite() {
                    out.push(Ineq::Lin { a: vec![(offset + k, -1.0)], b: -lower[k] });
                }
                if upper[k].is_finite() {
                    out.push(Ineq::Lin { a: vec![(offset + k, 1.0)], b: upper[k] });
                }
            }
        }
        Cons::Ball { q: Norm::Linf, radius } => {
            for k in 0..d {
                out.push(Ineq::Lin { a: vec![(offset + k, 1.0)], b: *radius });
                out.push(Ineq::Lin { a: vec![(offset + k, -1.0)], b: *radius });
            }
        }
        Cons::Ball { q: Norm::L1, radius } => {
            for s in sign_patterns(d) {
                let a = (0..d).map(|k| (offset + k, s[k])).collect();
                out.push(Ineq::Lin { a, b: *radius });
            }
        }
        Cons::Ball { q: Norm::L2, radius } => {
            out.push(Ineq::Sphere { offset, len: d, radius2: radius * radius });
        }
        Cons::PerPoint(_) => unreachable!("nested per-point sets"),
    }
}

// ---------------------------------------------------------------------------
// Strictly feasible starting point.
//
// Values and gradients of a smooth strongly convex potential whose gradient
// stays strictly inside D give strict slack on every pair constraint
// (Bregman gap) and every block constraint.
// ---------------------------------------------------------------------------

// increasing coordinate potential: h'(s) in (0, 1), h'' > 0
fn pot_incr(s: f64) -> (f64, f64) {
    let v = 0.5 * s + 0.25 * (2.0 * s).cosh().ln();
    let g = 0.5 + 0.5 * (2.0 * s).tanh();
    (v, g)
}

fn coord_potential(cons: &Cons, k: usize, s: f64, scale: f64) -> (f64, f64) {
    match cons {
        Cons::Free => (0.5 * s * s, s),
        Cons::Monotone { incr, decr } => {
            if incr.contains(&k) {
                pot_incr(s)
            } else if decr.contains(&k) {
                let (v, g) = pot_incr(-s);
                (v, -g)
            } else {
                (0.5 * s * s, s)
            }
        }
        Cons::Box { lower, upper } => {
            let (lo, up) = (lower[k], upper[k]);
            match (lo.is_finite(), up.is_finite()) {
                (true, true) => {
                    let mid = 0.5 * (lo + up);
                    let w = 0.45 * (up - lo);
                    (mid * s + w * s.cosh().ln(), mid + w * s.tanh())
                }
                (true, false) => (lo * s + 0.2 * (0.5 * s).exp(), lo + 0.1 * (0.5 * s).exp()),
                (false, true) => (up * s + 0.2 * (-0.5 * s).exp(), up - 0.1 * (-0.5 * s).exp()),
                (false, false) => (0.5 * s * s, s),
            }
        }
        // balls handled jointly via `scale`
        _ => (0.5 * scale * s * s, scale * s),
    }
}

fn ball_scale(points: &[Vec<f64>], cons: &Cons, n: usize) -> f64 {
    // c such that || c * x_i ||_q < radius_i for every i
    let mut c = f64::INFINITY;
    for (i, p) in points.iter().enumerate().take(n) {
        if let Cons::Ball { q, radius } = cons.block(i) {
            let norm = match q {
                Norm::L1 => p.iter().map(|v| v.abs()).sum::<f64>(),
                Norm::L2 => p.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Norm::Linf => p.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            };
            if norm > 0.0 {
                c = c.min(0.5 * radius / norm);
            } else {
                c = c.min(0.5 * radius);
            }
        }
    }
    if c.is_finite() { c } else { 1.0 }
}

fn feasible_start(points: &[Vec<f64>], cons: &Cons) -> (Vec<f64>, Vec<f64>) {
    let n = points.len();
    let d = points[0].len();
    let scale = ball_scale(points, cons, n);
    let mut theta = vec![0.0; n];
    let mut xi = vec![0.0; n * d];
    for i in 0..n {
        let ci = cons.block(i);
        let ball = matches!(ci, Cons::Ball { .. });
        let sc = if ball { ball_scale(points, cons, n).min(scale) } else { scale };
        let mut val = 0.0;
        for k in 0..d {
            let (v, g) = coord_potential(ci, k, points[i][k], sc);
            val += v;
            xi[i * d + k] = g;
        }
        theta[i] = val;
    }
    (theta, xi)
}

// ---------------------------------------------------------------------------
// Log-barrier interior point for the regression QP.
// ---------------------------------------------------------------------------

/// Solves the shape-constrained least-squares QP to high accuracy.
///
/// `points[i]` is the i-th predictor (length `d`), `y` the responses.
pub fn solve_regression(points: &[Vec<f64>], y: &[f64], cons: &Cons) -> Solution {
    let n = points.len();
    assert!(n >= 2 && y.len() == n);
    let d = points[0].len();
    let dim = n + n * d;

    let mut ineqs: Vec<Ineq> = Vec::new();
    // pair constraints: theta_j - theta_i + <xi_j, x_i - x_j> <= 0
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut a = vec![(j, 1.0), (i, -1.0)];
            for k in 0..d {
                let diff = points[i][k] - points[j][k];
                if diff != 0.0 {
                    a.push((n + j * d + k, diff));
                }
            }
            ineqs.push(Ineq::Lin { a, b: 0.0 });
        }
    }
    for i in 0..n {
        block_ineqs(cons.block(i), d, n + i * d, &mut ineqs);
    }
    let m = ineqs.len();

    let (theta0, xi0) = feasible_start(points, cons);
    let mut z = theta0;
    z.extend_from_slice(&xi0);
    let min_slack = ineqs.iter().map(|c| c.slack(&z)).fold(f64::INFINITY, f64::min);
    assert!(min_slack > 0.0, "refqp: start not strictly feasible (slack {min_slack:e})");

    let fval = |z: &[f64]| -> f64 {
        0.5 * (0..n).map(|i| (z[i] - y[i]) * (z[i] - y[i])).sum::<f64>()
    };

    let mut mu = 1.0_f64;
    let mu_final = 1e-12;
    let mut grad = vec![0.0; dim];
    loop {
        // Newton iterations on f + mu * barrier
        for _ in 0..120 {
            let mut slacks = Vec::with_capacity(m);
            for c in &ineqs {
                let s = c.slack(&z);
                debug_assert!(s > 0.0);
                slacks.push(s);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            for i in 0..n {
                grad[i] = z[i] - y[i];
            }
            for (c, &s) in ineqs.iter().zip(&slacks) {
                c.add_grad(&z, mu / s, &mut grad);
            }
            let mut h = vec![0.0; dim * dim];
            for i in 0..n {
                h[i * dim + i] = 1.0;
            }
            for (c, &s) in ineqs.iter().zip(&slacks) {
                c.add_hess(&z, mu / (s * s), mu / s, &mut h, dim);
            }
            // small ridge keeps unconstrained xi directions well posed
            for i in 0..dim {
                h[i * dim + i] += 1e-13;
            }
            let mut step = solve_spd(&h, dim, &grad);
            step.iter_mut().for_each(|v| *v = -*v);
            let decrement = -step.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
            if decrement <= 1e-18 * (1.0 + fval(&z).abs()) {
                break;
            }
            // longest step keeping strict feasibility
            let mut alpha_max = 1.0f64;
            for c in &ineqs {
                let s0 = c.slack(&z);
                let zt: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + b).collect();
                let s1 = c.slack(&zt);
                if s1 < 0.25 * s0 {
                    // backtrack estimate from linear model of the slack
                    let drop = s0 - s1;
                    if drop > 0.0 {
                        alpha_max = alpha_max.min(0.95 * s0 / drop);
                    }
                }
            }
            let barrier_val = |z: &[f64]| -> f64 {
                let mut v = fval(z);
                for c in &ineqs {
                    let s = c.slack(z);
                    if s <= 0.0 {
                        return f64::INFINITY;
                    }
                    v -= mu * s.ln();
                }
                v
            };
            let f0 = barrier_val(&z);
            let mut alpha = alpha_max.min(1.0);
            let mut accepted = false;
            for _ in 0..80 {
                let zt: Vec<f64> =
                    z.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                if barrier_val(&zt) <= f0 - 0.25 * alpha * decrement {
                    z = zt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            if decrement < 1e-14 * (1.0 + mu) {
                break;
            }
        }
        if mu <= mu_final {
            break;
        }
        mu = (mu * 0.15).max(mu_final);
    }

    Solution {
        theta: z[..n].to_vec(),
        xi: z[n..].to_vec(),
        objective: fval(&z),
        gap_bound: m as f64 * mu_final,
    }
}

// ---------------------------------------------------------------------------
// Euclidean projection onto D: active-set for polyhedral sets, KKT bisection
// for the l2 ball.
// ---------------------------------------------------------------------------

/// Euclidean projection of `x0` onto the set described by `cons`
/// (which must not be `PerPoint`).
pub fn project(cons: &Cons, x0: &[f64]) -> Vec<f64> {
    let d = x0.len();
    match cons {
        Cons::Free => x0.to_vec(),
        Cons::Ball { q: Norm::L2, radius } => {
            let norm2: f64 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm2 <= *radius {
                return x0.to_vec();
            }
            // z = x0 / (1 + 2 lambda), ||z|| = radius; bisect on lambda
            let mut lo = 0.0f64;
            let mut hi = 1.0f64;
            while norm2 / (1.0 + 2.0 * hi) > *radius {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if norm2 / (1.0 + 2.0 * mid) > *radius {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let lam = 0.5 * (lo + hi);
            x0.iter().map(|v| v / (1.0 + 2.0 * lam)).collect()
        }
        Cons::PerPoint(_) => panic!("project: resolve per-point blocks first"),
        _ => {
            let mut ineqs = Vec::new();
            block_ineqs(cons, d, 0, &mut ineqs);
            project_polyhedron(&ineqs, x0, d)
        }
    }
}

fn project_polyhedron(ineqs: &[Ineq], x0: &[f64], d: usize) -> Vec<f64> {
    let rows: Vec<(Vec<f64>, f64)> = ineqs
        .iter()
        .map(|c| match c {
            Ineq::Lin { a, b } => {
                let mut row = vec![0.0; d];
                for &(k, v) in a {
                    row[k] = v;
                }
                (row, *b)
            }
            Ineq::Sphere { .. } => unreachable!(),
        })
        .collect();
    let m = rows.len();
    let mut active: Vec<usize> = Vec::new();
    let mut z = x0.to_vec();
    for _ in 0..4 * (m + 1) * (m + 1) {
        // z = x0 - A_active^T lambda with A_active z = b_active
        let na = active.len();
        let mut lambda = vec![0.0; na];
        if na > 0 {
            let mut gram = vec![0.0; na * na];
            let mut rhs = vec![0.0; na];
            for (p, &l1) in active.iter().enumerate() {
                for (q, &l2) in active.iter().enumerate() {
                    gram[p * na + q] =
                        rows[l1].0.iter().zip(&rows[l2].0).map(|(a, b)| a * b).sum();
                }
                gram[p * na + p] += 1e-12;
                rhs[p] =
                    rows[l1].0.iter().zip(x0).map(|(a, b)| a * b).sum::<f64>() - rows[l1].1;
            }
            lambda = solve_spd(&gram, na, &rhs);
            for k in 0..d {
                let mut v = x0[k];
                for (p, &l) in active.iter().enumerate() {
                    v -= lambda[p] * rows[l].0[k];
                }
                z[k] = v;
            }
        } else {
            z.copy_from_slice(x0);
        }
        // drop a constraint with negative multiplier, if any
        if let Some((p, _)) = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < -1e-11)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        {
            active.remove(p);
            continue;
        }
        // add the most violated inactive constraint
        let mut worst = (usize::MAX, 1e-12);
        for (l, (row, b)) in rows.iter().enumerate() {
            if active.contains(&l) {
                continue;
            }
            let viol = row.iter().zip(&z).map(|(a, v)| a * v).sum::<f64>() - b;
            if viol > worst.1 {
                worst = (l, viol);
            }
        }
        if worst.0 == usize::MAX {
            return z;
        }
        active.push(worst.0);
    }
    panic!("refqp: projection active-set did not terminate");
}
