//! Evaluation of the fitted max-affine function: pointwise values,
//! subgradients, the Moreau-envelope smoothing, and the model file format.

use crate::constraints::{ConstraintSet, QNorm};
use crate::data::StandardizationRecord;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::par;
use crate::problem::FittedModel;

/// Affine pieces of the model in raw units: `value = intercepts[j] +
/// <slopes col j, x>`. With a standardization record the pieces absorb the
/// coordinate maps, so evaluation stays a plain max-affine form.
fn raw_pieces(m: &FittedModel) -> (Vec<f64>, Mat) {
    let n = m.n();
    let d = m.d();
    let mut intercepts = vec![0.0; n];
    let mut slopes = Mat::zeros(d, n);
    for j in 0..n {
        let anchor = m.anchors().col(j);
        let grad = m.xi_block(j);
        match m.standardization() {
            None => {
                let mut b = m.theta_hat()[j];
                for a in 0..d {
                    b -= grad[a] * anchor[a];
                    slopes.set(a, j, grad[a]);
                }
                intercepts[j] = b;
            }
            Some(rec) => {
                // standardized piece theta_j + <g, (x - mu)/nu - anchor>
                // mapped through y = nu_y * val + mu_y
                let mut b = rec.y_norm * m.theta_hat()[j] + rec.y_mean;
                for a in 0..d {
                    let s = rec.y_norm * grad[a] / rec.x_norms[a];
                    b -= s * (rec.x_means[a] + rec.x_norms[a] * anchor[a]);
                    slopes.set(a, j, s);
                }
                intercepts[j] = b;
            }
        }
    }
    (intercepts, slopes)
}

fn check_dim(m: &FittedModel, x: &[f64]) -> Result<()> {
    if x.len() != m.d() {
        return Err(Error::DimensionMismatch { what: "query point", expected: m.d(), got: x.len() });
    }
    Ok(())
}

/// Value of the fitted function at `x` (raw units).
pub fn predict(m: &FittedModel, x: &[f64]) -> Result<f64> {
    check_dim(m, x)?;
    let (intercepts, slopes) = raw_pieces(m);
    Ok(max_affine(&intercepts, &slopes, x))
}

fn max_affine(intercepts: &[f64], slopes: &Mat, x: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for j in 0..intercepts.len() {
        let col = slopes.col(j);
        let mut v = intercepts[j];
        for a in 0..x.len() {
            v += col[a] * x[a];
        }
        best = best.max(v);
    }
    best
}

/// Columnwise prediction over a d-by-m matrix of query points.
pub fn predict_batch(m: &FittedModel, queries: &Mat) -> Result<Vec<f64>> {
    if queries.nrows() != m.d() {
        return Err(Error::DimensionMismatch {
            what: "query matrix",
            expected: m.d(),
            got: queries.nrows(),
        });
    }
    let (intercepts, slopes) = raw_pieces(m);
    let nq = queries.ncols();
    let mut out = vec![0.0; nq];
    par::for_each_block_mut(&mut out, 1, |q, slot| {
        slot[0] = max_affine(&intercepts, &slopes, queries.col(q));
    });
    Ok(out)
}

/// A subgradient at `x` (the slope of the smallest-index active piece)
/// together with the active index set (ties within `1e-10` relative).
pub fn subgradient(m: &FittedModel, x: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    check_dim(m, x)?;
    let (intercepts, slopes) = raw_pieces(m);
    let n = m.n();
    let mut vals = vec![0.0; n];
    let mut best = f64::NEG_INFINITY;
    for j in 0..n {
        let col = slopes.col(j);
        let mut v = intercepts[j];
        for a in 0..x.len() {
            v += col[a] * x[a];
        }
        vals[j] = v;
        best = best.max(v);
    }
    let tol = 1e-10 * (1.0 + best.abs());
    let active: Vec<usize> = (0..n).filter(|&j| best - vals[j] <= tol).collect();
    let lead = active[0];
    Ok((slopes.col(lead).to_vec(), active))
}

/// Moreau-envelope smoothing: value and gradient of
/// `min_y { f(y) + tau/2 ||y - x||^2 }` for the fitted max-affine `f`.
///
/// The proximal point is found through the simplex-dual form of the inner
/// problem, solved by accelerated projected gradient with the sort-based
/// simplex projection; the dual gradient mapping is driven below `1e-10`
/// (scaled), falling back to an error carrying the achieved gap.
pub fn moreau_smooth(m: &FittedModel, x: &[f64], tau_reg: f64) -> Result<(f64, Vec<f64>)> {
    check_dim(m, x)?;
    if !(tau_reg > 0.0) {
        return Err(Error::Solver("smoothing parameter must be positive".into()));
    }
    let (intercepts, slopes) = raw_pieces(m);
    let n = m.n();
    let d = m.d();
    // piece values at x form the linear term of the dual
    let mut q = vec![0.0; n];
    let mut qmax = f64::NEG_INFINITY;
    let mut lead = 0;
    for j in 0..n {
        let col = slopes.col(j);
        let mut v = intercepts[j];
        for a in 0..d {
            v += col[a] * x[a];
        }
        q[j] = v;
        if v > qmax {
            qmax = v;
            lead = j;
        }
    }
    // curvature bound: lambda_max(S^T S) via power iteration on S S^T (d x d)
    let mut sst = vec![0.0; d * d];
    for j in 0..n {
        let col = slopes.col(j);
        for a in 0..d {
            for b in 0..d {
                sst[a * d + b] += col[a] * col[b];
            }
        }
    }
    let mut pv = vec![1.0; d];
    let mut lmax = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for a in 0..d {
            for b in 0..d {
                next[a] += sst[a * d + b] * pv[b];
            }
        }
        lmax = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if lmax == 0.0 {
            break;
        }
        next.iter_mut().for_each(|v| *v /= lmax);
        pv = next;
    }
    let lip = (lmax / tau_reg).max(1e-12);

    // dual over the simplex: maximize g(lambda) = <q, lambda> - 1/(2 tau) ||S lambda||^2.
    // Accelerated projected gradient finds the active face; a small
    // active-set refinement on that face then drives the gradient mapping
    // to the tolerance (the support has at most d+1 pieces generically, and
    // the plain accelerated tail is too slow for 1e-10 on degenerate duals).
    let mut lambda = vec![0.0; n];
    lambda[lead] = 1.0; // warm start on the active vertex
    let scale = 1.0 + qmax.abs();
    let tol = 1e-10 * scale;
    // primal-dual gap acceptance: on tie-degenerate duals the gradient
    // mapping floors around 1e-8 while the gap (which directly bounds the
    // value error) still reaches noise level
    let gap_tol = 1e-11 * scale;
    let neg_grad = |lam: &[f64], grad: &mut [f64]| {
        let mut sy = vec![0.0; d];
        for j in 0..n {
            if lam[j] != 0.0 {
                let col = slopes.col(j);
                for a in 0..d {
                    sy[a] += col[a] * lam[j];
                }
            }
        }
        for j in 0..n {
            let col = slopes.col(j);
            let mut v = 0.0;
            for a in 0..d {
                v += col[a] * sy[a];
            }
            grad[j] = -q[j] + v / tau_reg;
        }
    };
    let mapping = |lam: &[f64], grad: &mut [f64]| -> (f64, Vec<f64>) {
        neg_grad(lam, grad);
        let step: Vec<f64> = lam.iter().zip(grad.iter()).map(|(l, g)| l - g / lip).collect();
        let next = crate::constraints::project_simplex(&step);
        let mut map = 0.0;
        for j in 0..n {
            let r = lip * (lam[j] - next[j]);
            map += r * r;
        }
        (map.sqrt(), next)
    };
    let gap_at = |lam: &[f64]| -> f64 {
        let mut sl = vec![0.0; d];
        for j in 0..n {
            if lam[j] != 0.0 {
                let col = slopes.col(j);
                for a in 0..d {
                    sl[a] += col[a] * lam[j];
                }
            }
        }
        let y_star: Vec<f64> = (0..d).map(|a| x[a] - sl[a] / tau_reg).collect();
        let fy = max_affine(&intercepts, &slopes, &y_star);
        let mut dist = 0.0;
        let mut s_norm = 0.0;
        for a in 0..d {
            let r = y_star[a] - x[a];
            dist += r * r;
            s_norm += sl[a] * sl[a];
        }
        let primal = fy + 0.5 * tau_reg * dist;
        let dual: f64 = (0..n).map(|j| q[j] * lam[j]).sum::<f64>() - 0.5 * s_norm / tau_reg;
        primal - dual
    };
    let mut grad = vec![0.0; n];
    let mut achieved = f64::INFINITY;
    let mut converged = false;
    'outer: for _round in 0..4 {
        // accelerated phase with function restarts
        let mut momentum = lambda.clone();
        let mut t_acc = 1.0f64;
        for it in 0..20_000 {
            let (map, next) = mapping(&momentum, &mut grad);
            achieved = map;
            if it == 19_999 && std::env::var_os("SHAPEREG_MOREAU_DEBUG").is_some() {
                eprintln!("    fista end: map={map:.3e}");
            }
            if map <= tol || (map <= 1e-4 * scale && gap_at(&next) <= gap_tol) {
                lambda = next;
                converged = true;
                break 'outer;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
            let accel = (t_acc - 1.0) / t_next;
            let prev = lambda;
            lambda = next;
            // restart the momentum when it points uphill
            let uphill: f64 =
                grad.iter().zip(lambda.iter().zip(&prev)).map(|(g, (c, p))| g * (c - p)).sum();
            if uphill > 0.0 {
                momentum = lambda.clone();
                t_acc = 1.0;
            } else {
                momentum =
                    lambda.iter().zip(&prev).map(|(c, p)| c + accel * (c - p)).collect();
                t_acc = t_next;
            }
        }
        // face refinement: a dual solution with at most d+1 active pieces
        // exists, so prune the support to the strongest pieces, solve that
        // face exactly, and only commit candidates the mapping certifies
        let mut order: Vec<usize> = (0..n).filter(|&j| lambda[j] > 1e-12).collect();
        order.sort_by(|&a, &b| lambda[b].partial_cmp(&lambda[a]).unwrap());
        let mut working: Vec<usize> = order.into_iter().take(d + 1).collect();
        if working.is_empty() {
            working.push(lead);
        }
        let mut best = (achieved, lambda.clone());
        for _ in 0..4 * (d + 2) {
            let m = working.len();
            // face problem: Q_WW mu + nu 1 = q_W, sum mu = 1
            let mut qss = vec![0.0; m * m];
            let mut trace = 0.0;
            for (a, &ja) in working.iter().enumerate() {
                for (b, &jb) in working.iter().enumerate() {
                    let mut v = 0.0;
                    for k in 0..d {
                        v += slopes.get(k, ja) * slopes.get(k, jb);
                    }
                    qss[a * m + b] = v / tau_reg;
                }
                trace += qss[a * m + a];
            }
            // the face system can be singular (more pieces than slope
            // dimensions); iterated Tikhonov centered at the current
            // feasible point converges to the solution-family member
            // nearest it, which keeps optimal supports nonnegative
            let mut center: Vec<f64> = working.iter().map(|&j| lambda[j]).collect();
            let rho = 1e-8 * (1.0 + trace);
            let mut fac = qss.clone();
            for a in 0..m {
                fac[a * m + a] += rho;
            }
            if crate::linalg::cholesky_in_place(&mut fac, m).is_err() {
                break;
            }
            let mut w_1 = vec![1.0; m];
            crate::linalg::cholesky_solve(&fac, m, &mut w_1);
            let sum_1: f64 = w_1.iter().sum();
            if sum_1.abs() < 1e-300 {
                break;
            }
            let mut mu = center.clone();
            let mut nu = 0.0;
            for _ in 0..6 {
                let mut rhs: Vec<f64> = working
                    .iter()
                    .enumerate()
                    .map(|(a, &j)| q[j] + rho * center[a])
                    .collect();
                crate::linalg::cholesky_solve(&fac, m, &mut rhs);
                nu = (rhs.iter().sum::<f64>() - 1.0) / sum_1;
                mu = (0..m).map(|a| rhs[a] - nu * w_1[a]).collect();
                center = mu.clone();
            }
            if let Some((worst, _)) = mu
                .iter()
                .enumerate()
                .filter(|(_, v)| **v < -1e-12)
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            {
                if std::env::var_os("SHAPEREG_MOREAU_DEBUG").is_some() {
                    eprintln!("    refine: drop {} from {working:?}", working[worst]);
                }
                working.remove(worst);
                if working.is_empty() {
                    break;
                }
                continue;
            }
            let mut cand = vec![0.0; n];
            for (a, &j) in working.iter().enumerate() {
                cand[j] = mu[a].max(0.0);
            }
            let (map, _) = mapping(&cand, &mut grad);
            if std::env::var_os("SHAPEREG_MOREAU_DEBUG").is_some() {
                eprintln!("    refine: W={working:?} map={map:.3e} nu={nu:.3e}");
            }
            if map < best.0 {
                best = (map, cand.clone());
            }
            achieved = map;
            if map <= tol || gap_at(&cand) <= gap_tol {
                lambda = cand;
                converged = true;
                break 'outer;
            }
            // admit the strongest violator of the off-face optimality test
            // (grad holds Q lambda - q at the candidate; optimal iff
            // grad_j + nu >= 0)
            let mut add = None;
            let mut worst_violation = 1e-13 * (1.0 + lip);
            for j in 0..n {
                if working.contains(&j) {
                    continue;
                }
                let slack = grad[j] + nu;
                if -slack > worst_violation {
                    worst_violation = -slack;
                    add = Some(j);
                }
            }
            match add {
                Some(j) => working.push(j),
                None => break,
            }
        }
        let (best_map, best_lambda) = best;
        lambda = best_lambda;
        achieved = achieved.min(best_map);
        if best_map <= tol || gap_at(&lambda) <= gap_tol {
            converged = true;
            break 'outer;
        }
    }
    if !converged {
        return Err(Error::Solver(format!(
            "smoothing inner solve stalled with gradient mapping {achieved:e}"
        )));
    }
    // prox point y* = x - S lambda / tau; report the primal value there
    let mut sl = vec![0.0; d];
    for j in 0..n {
        if lambda[j] != 0.0 {
            let col = slopes.col(j);
            for a in 0..d {
                sl[a] += col[a] * lambda[j];
            }
        }
    }
    let y_star: Vec<f64> = (0..d).map(|a| x[a] - sl[a] / tau_reg).collect();
    let fy = max_affine(&intercepts, &slopes, &y_star);
    let mut dist = 0.0;
    for a in 0..d {
        let r = y_star[a] - x[a];
        dist += r * r;
    }
    let value = fy + 0.5 * tau_reg * dist;
    // gradient tau (x - y*) = S lambda
    Ok((value, sl))
}

// ---------------------------------------------------------------------------
// Model file format ("shapereg-model/1")
// ---------------------------------------------------------------------------

/// Solver metadata embedded in a model file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelMeta {
    pub solver: String,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub r_kkt: f64,
    pub objective: f64,
}

const FORMAT_TAG: &str = "shapereg-model/1";

fn fmt_f64(v: f64) -> String {
    // 17 significant digits round-trip any f64 exactly
    format!("{v:.16e}")
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "\"inf\"".to_string()
    } else if v == f64::NEG_INFINITY {
        "\"-inf\"".to_string()
    } else {
        fmt_f64(v)
    }
}

fn fmt_vec(vs: &[f64]) -> String {
    let items: Vec<String> = vs.iter().map(|v| fmt_f64(*v)).collect();
    format!("[{}]", items.join(","))
}

fn constraint_json(c: &ConstraintSet) -> String {
    match c {
        ConstraintSet::Free => "{\"type\":\"free\"}".to_string(),
        ConstraintSet::Monotone { incr, decr } => {
            let i: Vec<String> = incr.iter().map(|k| k.to_string()).collect();
            let d: Vec<String> = decr.iter().map(|k| k.to_string()).collect();
            format!(
                "{{\"type\":\"monotone\",\"incr\":[{}],\"decr\":[{}]}}",
                i.join(","),
                d.join(",")
            )
        }
        ConstraintSet::Box { lower, upper } => {
            let l: Vec<String> = lower.iter().map(|v| fmt_bound(*v)).collect();
            let u: Vec<String> = upper.iter().map(|v| fmt_bound(*v)).collect();
            format!("{{\"type\":\"box\",\"lower\":[{}],\"upper\":[{}]}}", l.join(","), u.join(","))
        }
        ConstraintSet::LipschitzBall { q, radius } => {
            let qs = match q {
                QNorm::One => "1",
                QNorm::Two => "2",
                QNorm::Inf => "inf",
            };
            format!("{{\"type\":\"lipschitz\",\"q\":\"{qs}\",\"radius\":{}}}", fmt_f64(*radius))
        }
        ConstraintSet::PerPoint(sets) => {
            let items: Vec<String> = sets.iter().map(constraint_json).collect();
            format!("{{\"type\":\"per_point\",\"sets\":[{}]}}", items.join(","))
        }
    }
}

/// Serializes a model to the versioned text document. Deterministic:
/// equal models produce byte-identical output.
pub fn write_model_string(m: &FittedModel, meta: &ModelMeta) -> String {
    let n = m.n();
    let d = m.d();
    let mut anchors_cols = Vec::with_capacity(n);
    for j in 0..n {
        anchors_cols.push(fmt_vec(m.anchors().col(j)));
    }
    let std_json = match m.standardization() {
        None => "null".to_string(),
        Some(rec) => {
            let rows: Vec<String> = rec.constant_rows.iter().map(|k| k.to_string()).collect();
            format!(
                "{{\"x_means\":{},\"x_norms\":{},\"y_mean\":{},\"y_norm\":{},\"constant_rows\":[{}]}}",
                fmt_vec(&rec.x_means),
                fmt_vec(&rec.x_norms),
                fmt_f64(rec.y_mean),
                fmt_f64(rec.y_norm),
                rows.join(",")
            )
        }
    };
    format!(
        "{{\n\"format\":\"{FORMAT_TAG}\",\n\"d\":{d},\n\"n\":{n},\n\"theta_hat\":{},\n\"xi_hat\":{},\n\"anchors\":[{}],\n\"constraint\":{},\n\"standardization\":{},\n\"solver\":{{\"name\":\"{}\",\"iterations\":{},\"inner_iterations\":{},\"r_kkt\":{},\"objective\":{}}}\n}}\n",
        fmt_vec(m.theta_hat()),
        fmt_vec(m.xi_hat()),
        anchors_cols.join(","),
        constraint_json(m.constraint()),
        std_json,
        meta.solver,
        meta.iterations,
        meta.inner_iterations,
        fmt_f64(meta.r_kkt),
        fmt_f64(meta.objective),
    )
}

fn bad(msg: &str) -> Error {
    Error::ModelFormat(msg.to_string())
}

fn as_f64(v: &serde_json::Value, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| bad(&format!("{what} is not a number")))
}

fn as_vec_f64(v: &serde_json::Value, what: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| bad(&format!("{what} is not an array")))?
        .iter()
        .map(|x| as_f64(x, what))
        .collect()
}

fn bound_from(v: &serde_json::Value) -> Result<f64> {
    if let Some(s) = v.as_str() {
        return match s {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(bad(&format!("bad bound `{other}`"))),
        };
    }
    as_f64(v, "bound")
}

fn constraint_from(v: &serde_json::Value) -> Result<ConstraintSet> {
    let ty = v
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| bad("constraint missing type"))?;
    match ty {
        "free" => Ok(ConstraintSet::Free),
        "monotone" => {
            let idx = |key: &str| -> Result<Vec<usize>> {
                v.get(key)
                    .and_then(|a| a.as_array())
                    .ok_or_else(|| bad("monotone sets"))?
                    .iter()
                    .map(|x| {
                        x.as_u64().map(|u| u as usize).ok_or_else(|| bad("monotone index"))
                    })
                    .collect()
            };
            Ok(ConstraintSet::Monotone { incr: idx("incr")?, decr: idx("decr")? })
        }
        "box" => {
            let bounds = |key: &str| -> Result<Vec<f64>> {
                v.get(key)
                    .and_then(|a| a.as_array())
                    .ok_or_else(|| bad("box bounds"))?
                    .iter()
                    .map(bound_from)
                    .collect()
            };
            Ok(ConstraintSet::Box { lower: bounds("lower")?, upper: bounds("upper")? })
        }
        "lipschitz" => {
            let q = match v.get("q").and_then(|s| s.as_str()) {
                Some("1") => QNorm::One,
                Some("2") => QNorm::Two,
                Some("inf") => QNorm::Inf,
                _ => return Err(bad("lipschitz q")),
            };
            let radius = as_f64(v.get("radius").ok_or_else(|| bad("lipschitz radius"))?, "radius")?;
            Ok(ConstraintSet::LipschitzBall { q, radius })
        }
        "per_point" => {
            let sets = v
                .get("sets")
                .and_then(|a| a.as_array())
                .ok_or_else(|| bad("per-point sets"))?
                .iter()
                .map(constraint_from)
                .collect::<Result<Vec<_>>>()?;
            Ok(ConstraintSet::PerPoint(sets))
        }
        other => Err(bad(&format!("unknown constraint type `{other}`"))),
    }
}

/// Parses a model document, checking the format tag.
pub fn read_model_str(text: &str) -> Result<(FittedModel, ModelMeta)> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| bad(&format!("invalid JSON: {e}")))?;
    let tag = v.get("format").and_then(|t| t.as_str()).unwrap_or("");
    if tag != FORMAT_TAG {
        return Err(bad(&format!("unsupported format `{tag}` (expected {FORMAT_TAG})")));
    }
    let d = v.get("d").and_then(|x| x.as_u64()).ok_or_else(|| bad("missing d"))? as usize;
    let n = v.get("n").and_then(|x| x.as_u64()).ok_or_else(|| bad("missing n"))? as usize;
    let theta = as_vec_f64(v.get("theta_hat").ok_or_else(|| bad("missing theta_hat"))?, "theta_hat")?;
    let xi = as_vec_f64(v.get("xi_hat").ok_or_else(|| bad("missing xi_hat"))?, "xi_hat")?;
    let anchors_arr =
        v.get("anchors").and_then(|a| a.as_array()).ok_or_else(|| bad("missing anchors"))?;
    if anchors_arr.len() != n {
        return Err(bad("anchor count mismatch"));
    }
    let mut anchors = Mat::zeros(d, n);
    for (j, col) in anchors_arr.iter().enumerate() {
        let vals = as_vec_f64(col, "anchor")?;
        if vals.len() != d {
            return Err(bad("anchor dimension mismatch"));
        }
        for a in 0..d {
            anchors.set(a, j, vals[a]);
        }
    }
    let constraint = constraint_from(v.get("constraint").ok_or_else(|| bad("missing constraint"))?)?;
    let standardization = match v.get("standardization") {
        None | Some(serde_json::Value::Null) => None,
        Some(s) => Some(StandardizationRecord {
            x_means: as_vec_f64(s.get("x_means").ok_or_else(|| bad("x_means"))?, "x_means")?,
            x_norms: as_vec_f64(s.get("x_norms").ok_or_else(|| bad("x_norms"))?, "x_norms")?,
            y_mean: as_f64(s.get("y_mean").ok_or_else(|| bad("y_mean"))?, "y_mean")?,
            y_norm: as_f64(s.get("y_norm").ok_or_else(|| bad("y_norm"))?, "y_norm")?,
            constant_rows: s
                .get("constant_rows")
                .and_then(|a| a.as_array())
                .map(|a| a.iter().filter_map(|x| x.as_u64().map(|u| u as usize)).collect())
                .unwrap_or_default(),
        }),
    };
    let meta_v = v.get("solver").cloned().unwrap_or(serde_json::Value::Null);
    let meta = ModelMeta {
        solver: meta_v.get("name").and_then(|s| s.as_str()).unwrap_or("").to_string(),
        iterations: meta_v.get("iterations").and_then(|x| x.as_u64()).unwrap_or(0) as usize,
        inner_iterations: meta_v.get("inner_iterations").and_then(|x| x.as_u64()).unwrap_or(0)
            as usize,
        r_kkt: meta_v.get("r_kkt").and_then(|x| x.as_f64()).unwrap_or(f64::NAN),
        objective: meta_v.get("objective").and_then(|x| x.as_f64()).unwrap_or(f64::NAN),
    };
    let model = FittedModel::from_parts(theta, xi, anchors, constraint, standardization)?;
    Ok((model, meta))
}

pub fn write_model_file(path: &std::path::Path, m: &FittedModel, meta: &ModelMeta) -> Result<()> {
    std::fs::write(path, write_model_string(m, meta))?;
    Ok(())
}

pub fn read_model_file(path: &std::path::Path) -> Result<(FittedModel, ModelMeta)> {
    let text = std::fs::read_to_string(path)?;
    read_model_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::FittedModel;
    use crate::rng::SplitMix64;

    // verbatim piece families (no feasibility polish), as hand-built cases
    // need exact intercepts
    fn model_from(theta: Vec<f64>, xi: Vec<f64>, anchors: Mat, c: ConstraintSet) -> FittedModel {
        FittedModel::from_parts(theta, xi, anchors, c, None).unwrap()
    }

    fn two_piece() -> FittedModel {
        // pieces: 0 + 1*x anchored at 0, and 1 + 0*x anchored at 1
        let anchors = Mat::from_fn(1, 2, |_, j| j as f64);
        model_from(vec![0.0, 1.0], vec![1.0, 0.0], anchors, ConstraintSet::Free)
    }

    #[test]
    fn predict_known_values() {
        let m = two_piece();
        // max(x, 1) at x = 3
        assert_eq!(predict(&m, &[3.0]).unwrap(), 3.0);
        assert_eq!(predict(&m, &[0.5]).unwrap(), 1.0);
        // single piece is affine
        let single = {
            let anchors = Mat::from_fn(2, 2, |a, j| (a + j) as f64);
            // need n >= 2 for problem data; use equal pieces
            model_from(vec![1.0, 1.0], vec![0.5, -0.5, 0.5, -0.5], anchors, ConstraintSet::Free)
        };
        let v = predict(&single, &[2.0, 3.0]).unwrap();
        // piece 0: 1 + 0.5*(2-0) - 0.5*(3-1) = 1
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_loop() {
        let m = two_piece();
        let q = Mat::from_fn(1, 5, |_, j| j as f64 * 0.7 - 1.0);
        let batch = predict_batch(&m, &q).unwrap();
        for j in 0..5 {
            assert_eq!(batch[j], predict(&m, q.col(j)).unwrap());
        }
    }

    #[test]
    fn subgradient_active_sets() {
        let m = two_piece();
        // interior of the linear piece
        let (g, act) = subgradient(&m, &[3.0]).unwrap();
        assert_eq!(g, vec![1.0]);
        assert_eq!(act, vec![0]);
        // kink at x = 1: both active
        let (_, act) = subgradient(&m, &[1.0]).unwrap();
        assert_eq!(act, vec![0, 1]);
    }

    #[test]
    fn predict_midpoint_convex() {
        let mut rng = SplitMix64::new(91);
        let anchors = Mat::from_fn(2, 6, |_, _| rng.uniform(-1.0, 1.0));
        let theta: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xi: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let m = model_from(theta, xi, anchors, ConstraintSet::Free);
        for _ in 0..200 {
            let a: Vec<f64> = (0..2).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let fm = predict(&m, &mid).unwrap();
            let fa = predict(&m, &a).unwrap();
            let fb = predict(&m, &b).unwrap();
            assert!(fm <= 0.5 * (fa + fb) + 1e-12);
        }
    }

    #[test]
    fn moreau_single_piece_closed_form() {
        // one affine piece: prox = x - slope/tau, value = f(x) - ||slope||^2/(2 tau)
        let anchors = Mat::from_fn(1, 2, |_, j| j as f64);
        let m = model_from(vec![0.0, 1.0], vec![1.0, 1.0], anchors, ConstraintSet::Free);
        // both pieces have slope 1 and agree: effectively a single affine fn
        let tau = 2.5;
        let (val, grad) = moreau_smooth(&m, &[0.3], tau).unwrap();
        let fx = predict(&m, &[0.3]).unwrap();
        assert!((val - (fx - 1.0 / (2.0 * tau))).abs() < 1e-9, "{val}");
        assert!((grad[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn moreau_sandwich_and_gradient() {
        let mut rng = SplitMix64::new(92);
        let anchors = Mat::from_fn(2, 8, |_, _| rng.uniform(-1.0, 1.0));
        let theta: Vec<f64> = (0..8).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let xi: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let m = model_from(theta, xi, anchors, ConstraintSet::Free);
        let lip_sq = (0..8)
            .map(|j| m.xi_block(j).iter().map(|v| v * v).sum::<f64>())
            .fold(0.0f64, f64::max);
        for tau in [1.0, 10.0, 100.0] {
            for _ in 0..30 {
                let x: Vec<f64> = (0..2).map(|_| rng.uniform(-1.5, 1.5)).collect();
                let (val, grad) = moreau_smooth(&m, &x, tau).unwrap();
                let fx = predict(&m, &x).unwrap();
                assert!(val <= fx + 1e-8, "upper bound");
                assert!(val >= fx - lip_sq / (2.0 * tau) - 1e-8, "lower bound");
                // central finite differences of the envelope
                let h = 1e-4;
                for a in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += h;
                    xm[a] -= h;
                    let (vp, _) = moreau_smooth(&m, &xp, tau).unwrap();
                    let (vm, _) = moreau_smooth(&m, &xm, tau).unwrap();
                    let fd = (vp - vm) / (2.0 * h);
                    assert!(
                        (grad[a] - fd).abs() <= 2e-6 * (1.0 + fd.abs()),
                        "grad {} vs fd {fd}",
                        grad[a]
                    );
                }
            }
        }
    }

    #[test]
    fn model_io_round_trip_bit_exact() {
        let mut rng = SplitMix64::new(93);
        let anchors = Mat::from_fn(2, 5, |_, _| rng.uniform(-1.0, 1.0));
        let theta: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xi: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let c = ConstraintSet::Box {
            lower: vec![0.0, f64::NEG_INFINITY],
            upper: vec![1.0, f64::INFINITY],
        };
        let m = model_from(theta, xi, anchors, c);
        let meta = ModelMeta {
            solver: "pALM".into(),
            iterations: 16,
            inner_iterations: 20,
            r_kkt: 3.2e-7,
            objective: 0.125,
        };
        let text = write_model_string(&m, &meta);
        let (m2, meta2) = read_model_str(&text).unwrap();
        assert_eq!(m.theta_hat(), m2.theta_hat());
        assert_eq!(m.xi_hat(), m2.xi_hat());
        assert_eq!(m.anchors().as_slice(), m2.anchors().as_slice());
        assert_eq!(m.constraint(), m2.constraint());
        assert_eq!(meta, meta2);
        // write-back is byte identical
        let text2 = write_model_string(&m2, &meta2);
        assert_eq!(text, text2);
        // version check
        let bad_text = text.replace("shapereg-model/1", "shapereg-model/9");
        assert!(read_model_str(&bad_text).is_err());
    }
}
