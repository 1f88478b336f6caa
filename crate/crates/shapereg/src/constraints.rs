//! Gradient-set constraints: projections, generalized Jacobians, and
//! support functions for the five set families (free, monotone cone,
//! box, Lipschitz balls in the 1/2/inf norms), plus per-point sets and
//! the simplex projection underlying the l1-ball formula.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::par;

/// Norm index `q` of a ball `{ x : ||x||_q <= L }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QNorm {
    One,
    Two,
    Inf,
}

impl QNorm {
    /// Conjugate exponent: 1/p + 1/q = 1.
    pub fn dual(self) -> QNorm {
        match self {
            QNorm::One => QNorm::Inf,
            QNorm::Two => QNorm::Two,
            QNorm::Inf => QNorm::One,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            QNorm::One => x.iter().map(|v| v.abs()).sum(),
            QNorm::Two => par::norm(x),
            QNorm::Inf => x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }

    pub fn parse(s: &str) -> Result<QNorm> {
        match s {
            "1" => Ok(QNorm::One),
            "2" => Ok(QNorm::Two),
            "inf" | "Inf" | "INF" => Ok(QNorm::Inf),
            other => Err(Error::InvalidConstraint(format!("unknown norm `{other}`"))),
        }
    }
}

/// The gradient set `D` (or one set per data point).
#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintSet {
    Free,
    /// Non-decreasing in coordinates `incr`, non-increasing in `decr`
    /// (0-based, disjoint).
    Monotone { incr: Vec<usize>, decr: Vec<usize> },
    /// Componentwise bounds; +/- infinity encodes one-sided bounds.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{ x : ||x||_q <= radius }` with `radius > 0`.
    LipschitzBall { q: QNorm, radius: f64 },
    /// Block `i` uses `sets[i]`; length must equal the number of data points.
    PerPoint(Vec<ConstraintSet>),
}

impl ConstraintSet {
    /// Checks the structural invariants against dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            ConstraintSet::Free => Ok(()),
            ConstraintSet::Monotone { incr, decr } => {
                for &k in incr.iter().chain(decr) {
                    if k >= d {
                        return Err(Error::InvalidConstraint(format!(
                            "monotone coordinate {} out of range (d = {d})",
                            k + 1
                        )));
                    }
                }
                if incr.iter().any(|k| decr.contains(k)) {
                    return Err(Error::InvalidConstraint(
                        "monotone coordinate sets must be disjoint".into(),
                    ));
                }
                Ok(())
            }
            ConstraintSet::Box { lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return Err(Error::DimensionMismatch {
                        what: "box bounds",
                        expected: d,
                        got: lower.len().min(upper.len()),
                    });
                }
                if lower.iter().zip(upper).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
                    return Err(Error::InvalidConstraint("box requires L <= U".into()));
                }
                Ok(())
            }
            ConstraintSet::LipschitzBall { radius, .. } => {
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidConstraint(
                        "Lipschitz radius must be positive and finite".into(),
                    ));
                }
                Ok(())
            }
            ConstraintSet::PerPoint(sets) => {
                for s in sets {
                    if matches!(s, ConstraintSet::PerPoint(_)) {
                        return Err(Error::InvalidConstraint(
                            "per-point sets cannot nest".into(),
                        ));
                    }
                    s.validate(d)?;
                }
                Ok(())
            }
        }
    }

    /// The set governing block `i`.
    pub fn block_set(&self, i: usize) -> &ConstraintSet {
        match self {
            ConstraintSet::PerPoint(sets) => &sets[i],
            other => other,
        }
    }

    pub fn is_per_point(&self) -> bool {
        matches!(self, ConstraintSet::PerPoint(_))
    }

    /// Number of per-point blocks, if applicable.
    pub fn per_point_len(&self) -> Option<usize> {
        match self {
            ConstraintSet::PerPoint(sets) => Some(sets.len()),
            _ => None,
        }
    }

    /// Membership test with absolute tolerance `tol` on each defining
    /// inequality.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            ConstraintSet::Free => true,
            ConstraintSet::Monotone { incr, decr } => {
                incr.iter().all(|&k| x[k] >= -tol) && decr.iter().all(|&k| x[k] <= tol)
            }
            ConstraintSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol),
            ConstraintSet::LipschitzBall { q, radius } => q.eval(x) <= radius + tol,
            ConstraintSet::PerPoint(_) => panic!("contains: resolve per-point blocks first"),
        }
    }
}

// ---------------------------------------------------------------------------
// Projections
// ---------------------------------------------------------------------------

/// Euclidean projection onto the simplex `{ x >= 0, sum x = 1 }` by the
/// sort-and-threshold rule, O(d log d).
pub fn project_simplex(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if k + 1 == d || sorted[k + 1] <= t {
            threshold = t;
            break;
        }
    }
    x.iter().map(|v| (v - threshold).max(0.0)).collect()
}

/// Euclidean projection onto the set, written into `out`.
pub fn project_into(c: &ConstraintSet, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    match c {
        ConstraintSet::Free => out.copy_from_slice(x),
        ConstraintSet::Monotone { incr, decr } => {
            out.copy_from_slice(x);
            for &k in incr {
                if out[k] < 0.0 {
                    out[k] = 0.0;
                }
            }
            for &k in decr {
                if out[k] > 0.0 {
                    out[k] = 0.0;
                }
            }
        }
        ConstraintSet::Box { lower, upper } => {
            for k in 0..x.len() {
                out[k] = x[k].max(lower[k]).min(upper[k]);
            }
        }
        ConstraintSet::LipschitzBall { q: QNorm::Inf, radius } => {
            for k in 0..x.len() {
                out[k] = x[k].clamp(-radius, *radius);
            }
        }
        ConstraintSet::LipschitzBall { q: QNorm::Two, radius } => {
            let norm = par::norm(x);
            if norm <= *radius {
                out.copy_from_slice(x);
            } else {
                let s = radius / norm;
                for k in 0..x.len() {
                    out[k] = s * x[k];
                }
            }
        }
        ConstraintSet::LipschitzBall { q: QNorm::One, radius } => {
            let norm1: f64 = x.iter().map(|v| v.abs()).sum();
            if norm1 <= *radius {
                out.copy_from_slice(x);
            } else {
                let scaled: Vec<f64> = x.iter().map(|v| v.abs() / radius).collect();
                let simplex = project_simplex(&scaled);
                for k in 0..x.len() {
                    out[k] = radius * x[k].signum_zero() * simplex[k];
                }
            }
        }
        ConstraintSet::PerPoint(_) => panic!("project: resolve per-point blocks first"),
    }
}

/// Euclidean projection onto the set.
pub fn project(c: &ConstraintSet, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    project_into(c, x, &mut out);
    out
}

trait SignumZero {
    fn signum_zero(self) -> f64;
}

impl SignumZero for f64 {
    // sign with sign(0) = 0, as in the diagonal sign matrix of the
    // l1-ball formula
    fn signum_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Generalized Jacobians of the projections
// ---------------------------------------------------------------------------

/// Structured element of the generalized Jacobian of a projection.
///
/// Every element is symmetric PSD with spectrum in `[0, 1]`.
#[derive(Clone, Debug)]
pub enum JacobianElement {
    Identity,
    /// Diagonal matrix with 0/1 entries.
    Diagonal(Vec<f64>),
    /// `scale * (I - u u^T)` with a unit vector `u` (l2 ball outside).
    ScaledProjector { scale: f64, unit: Vec<f64> },
    /// `P (Diag(r) - r r^T / nnz(r)) P` with `P = Diag(signs)` (l1 ball
    /// outside).
    SignedSimplex { signs: Vec<f64>, mask: Vec<f64> },
}

impl JacobianElement {
    /// `out = J v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            JacobianElement::Identity => out.copy_from_slice(v),
            JacobianElement::Diagonal(diag) => {
                for k in 0..v.len() {
                    out[k] = diag[k] * v[k];
                }
            }
            JacobianElement::ScaledProjector { scale, unit } => {
                let ip: f64 = unit.iter().zip(v).map(|(a, b)| a * b).sum();
                for k in 0..v.len() {
                    out[k] = scale * (v[k] - ip * unit[k]);
                }
            }
            JacobianElement::SignedSimplex { signs, mask } => {
                let nnz: f64 = mask.iter().sum();
                let mut ip = 0.0;
                for k in 0..v.len() {
                    ip += mask[k] * signs[k] * v[k];
                }
                let shift = if nnz > 0.0 { ip / nnz } else { 0.0 };
                for k in 0..v.len() {
                    out[k] = signs[k] * mask[k] * (signs[k] * v[k] - shift);
                }
            }
        }
    }

    /// Diagonal entries, added into `out`.
    pub fn diag_into(&self, out: &mut [f64]) {
        match self {
            JacobianElement::Identity => out.iter_mut().for_each(|v| *v += 1.0),
            JacobianElement::Diagonal(diag) => {
                for k in 0..out.len() {
                    out[k] += diag[k];
                }
            }
            JacobianElement::ScaledProjector { scale, unit } => {
                for k in 0..out.len() {
                    out[k] += scale * (1.0 - unit[k] * unit[k]);
                }
            }
            JacobianElement::SignedSimplex { signs, mask } => {
                let nnz: f64 = mask.iter().sum();
                for k in 0..out.len() {
                    let s2 = signs[k] * signs[k];
                    let r = mask[k];
                    if nnz > 0.0 {
                        out[k] += s2 * (r - r * r / nnz);
                    }
                }
            }
        }
    }

    /// Dense d-by-d matrix.
    pub fn materialize(&self, d: usize) -> Mat {
        let mut m = Mat::zeros(d, d);
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..d {
                m.set(i, j, col[i]);
            }
            e[j] = 0.0;
        }
        m
    }
}

/// A deterministic element of the generalized Jacobian of the projection
/// at `x`. At boundary or tie points the "inactive" branch (entry 1 /
/// identity) is selected.
pub fn jacobian_element(c: &ConstraintSet, x: &[f64]) -> JacobianElement {
    match c {
        ConstraintSet::Free => JacobianElement::Identity,
        ConstraintSet::Monotone { incr, decr } => {
            let mut diag = vec![1.0; x.len()];
            for &k in incr {
                if x[k] < 0.0 {
                    diag[k] = 0.0;
                }
            }
            for &k in decr {
                if x[k] > 0.0 {
                    diag[k] = 0.0;
                }
            }
            JacobianElement::Diagonal(diag)
        }
        ConstraintSet::Box { lower, upper } => {
            let diag = x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (l, u))| if *v < *l || *v > *u { 0.0 } else { 1.0 })
                .collect();
            JacobianElement::Diagonal(diag)
        }
        ConstraintSet::LipschitzBall { q: QNorm::Inf, radius } => {
            let diag = x.iter().map(|v| if v.abs() > *radius { 0.0 } else { 1.0 }).collect();
            JacobianElement::Diagonal(diag)
        }
        ConstraintSet::LipschitzBall { q: QNorm::Two, radius } => {
            let norm = par::norm(x);
            if norm <= *radius {
                JacobianElement::Identity
            } else {
                let unit: Vec<f64> = x.iter().map(|v| v / norm).collect();
                JacobianElement::ScaledProjector { scale: radius / norm, unit }
            }
        }
        ConstraintSet::LipschitzBall { q: QNorm::One, radius } => {
            let norm1: f64 = x.iter().map(|v| v.abs()).sum();
            if norm1 <= *radius {
                JacobianElement::Identity
            } else {
                let signs: Vec<f64> = x.iter().map(|v| v.signum_zero()).collect();
                let scaled: Vec<f64> =
                    x.iter().zip(&signs).map(|(v, s)| s * v / radius).collect();
                let simplex = project_simplex(&scaled);
                let mask: Vec<f64> =
                    simplex.iter().map(|v| if *v != 0.0 { 1.0 } else { 0.0 }).collect();
                JacobianElement::SignedSimplex { signs, mask }
            }
        }
        ConstraintSet::PerPoint(_) => panic!("jacobian: resolve per-point blocks first"),
    }
}

// ---------------------------------------------------------------------------
// Support functions (conjugates of the set indicators)
// ---------------------------------------------------------------------------

/// Support function `sup { <x, z> : z in D }`. Returns `f64::INFINITY`
/// when the supremum is unbounded; for the monotone cone, a pattern
/// tolerance of `1e-9 * (1 + ||x||_inf)` decides membership in the polar.
pub fn conjugate_support(c: &ConstraintSet, x: &[f64]) -> f64 {
    match c {
        ConstraintSet::Free => {
            let tol = 1e-9 * (1.0 + QNorm::Inf.eval(x));
            if x.iter().all(|v| v.abs() <= tol) {
                0.0
            } else {
                f64::INFINITY
            }
        }
        ConstraintSet::Monotone { incr, decr } => {
            let tol = 1e-9 * (1.0 + QNorm::Inf.eval(x));
            for (k, &v) in x.iter().enumerate() {
                let feasible = if incr.contains(&k) {
                    v <= tol
                } else if decr.contains(&k) {
                    v >= -tol
                } else {
                    v.abs() <= tol
                };
                if !feasible {
                    return f64::INFINITY;
                }
            }
            0.0
        }
        ConstraintSet::Box { lower, upper } => {
            let mut total = 0.0;
            for (k, &v) in x.iter().enumerate() {
                if v > 0.0 {
                    if upper[k].is_infinite() {
                        return f64::INFINITY;
                    }
                    total += upper[k] * v;
                } else if v < 0.0 {
                    if lower[k].is_infinite() {
                        return f64::INFINITY;
                    }
                    total += lower[k] * v;
                }
            }
            total
        }
        ConstraintSet::LipschitzBall { q, radius } => radius * q.dual().eval(x),
        ConstraintSet::PerPoint(_) => panic!("conjugate: resolve per-point blocks first"),
    }
}

// ---------------------------------------------------------------------------
// Blockwise operations (the prox of p and its block-diagonal Jacobian)
// ---------------------------------------------------------------------------

fn check_blocks(c: &ConstraintSet, xi: &[f64], d: usize) -> Result<usize> {
    if d == 0 || xi.len() % d != 0 {
        return Err(Error::DimensionMismatch { what: "xi blocks", expected: d, got: xi.len() });
    }
    let n = xi.len() / d;
    if let Some(len) = c.per_point_len() {
        if len != n {
            return Err(Error::DimensionMismatch { what: "per-point sets", expected: n, got: len });
        }
    }
    Ok(n)
}

/// Blockwise projection: block `i` of the output is the projection of
/// block `i` of `xi` onto its set.
pub fn blockwise_prox_into(c: &ConstraintSet, xi: &[f64], d: usize, out: &mut [f64]) -> Result<()> {
    check_blocks(c, xi, d)?;
    par::for_each_block_pair(out, xi, d, |i, o, s| project_into(c.block_set(i), s, o));
    Ok(())
}

pub fn blockwise_prox(c: &ConstraintSet, xi: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; xi.len()];
    blockwise_prox_into(c, xi, d, &mut out)?;
    Ok(out)
}

/// One generalized Jacobian element per block.
pub fn blockwise_jacobian(c: &ConstraintSet, xi: &[f64], d: usize) -> Result<Vec<JacobianElement>> {
    let n = check_blocks(c, xi, d)?;
    Ok((0..n).map(|i| jacobian_element(c.block_set(i), &xi[i * d..(i + 1) * d])).collect())
}

// ---------------------------------------------------------------------------
// Constraint grammar
// ---------------------------------------------------------------------------

/// Parsed CLI constraint: either a concrete set or the data-driven
/// per-point Lipschitz rule to be resolved against the data.
#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintSpec {
    Set(ConstraintSet),
    DataLipschitz { k: usize, p: QNorm },
}

fn parse_bound_list(s: &str, d: usize, what: &str) -> Result<Vec<f64>> {
    let parse_one = |tok: &str| -> Result<f64> {
        match tok {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            t => t
                .parse::<f64>()
                .map_err(|_| Error::InvalidConstraint(format!("bad {what} value `{t}`"))),
        }
    };
    let parts: Vec<&str> = s.split(';').collect();
    if parts.len() == 1 {
        let v = parse_one(parts[0])?;
        Ok(vec![v; d])
    } else if parts.len() == d {
        parts.iter().map(|t| parse_one(t)).collect()
    } else {
        Err(Error::InvalidConstraint(format!(
            "{what} needs 1 or {d} values, got {}",
            parts.len()
        )))
    }
}

/// Parses the constraint grammar:
/// `free`, `monotone:+1,+2,-3`, `box:L=0,U=1` (scalar broadcast or
/// `;`-separated per-coordinate lists, `inf`/`-inf` allowed),
/// `lip:q=2,L=1.5`, `lip:data,k=5,p=2`.
pub fn parse_constraint(s: &str, d: usize) -> Result<ConstraintSpec> {
    let s = s.trim();
    if s == "free" || s == "none" {
        return Ok(ConstraintSpec::Set(ConstraintSet::Free));
    }
    let (head, rest) = match s.split_once(':') {
        Some((h, r)) => (h, r),
        None => return Err(Error::InvalidConstraint(format!("unknown constraint `{s}`"))),
    };
    match head {
        "monotone" => {
            let mut incr = Vec::new();
            let mut decr = Vec::new();
            for tok in rest.split(',') {
                let tok = tok.trim();
                let (sign, num) = match tok.as_bytes().first() {
                    Some(b'+') => (1, &tok[1..]),
                    Some(b'-') => (-1, &tok[1..]),
                    _ => (1, tok),
                };
                let idx: usize = num.parse().map_err(|_| {
                    Error::InvalidConstraint(format!("bad monotone coordinate `{tok}`"))
                })?;
                if idx == 0 || idx > d {
                    return Err(Error::InvalidConstraint(format!(
                        "monotone coordinate {idx} out of range 1..={d}"
                    )));
                }
                if sign > 0 {
                    incr.push(idx - 1);
                } else {
                    decr.push(idx - 1);
                }
            }
            let set = ConstraintSet::Monotone { incr, decr };
            set.validate(d)?;
            Ok(ConstraintSpec::Set(set))
        }
        "box" => {
            let mut lower = None;
            let mut upper = None;
            for tok in rest.split(',') {
                let (key, val) = tok.split_once('=').ok_or_else(|| {
                    Error::InvalidConstraint(format!("box expects L=..,U=.., got `{tok}`"))
                })?;
                match key.trim() {
                    "L" => lower = Some(parse_bound_list(val, d, "L")?),
                    "U" => upper = Some(parse_bound_list(val, d, "U")?),
                    other => {
                        return Err(Error::InvalidConstraint(format!("unknown box key `{other}`")))
                    }
                }
            }
            let set = ConstraintSet::Box {
                lower: lower.unwrap_or_else(|| vec![f64::NEG_INFINITY; d]),
                upper: upper.unwrap_or_else(|| vec![f64::INFINITY; d]),
            };
            set.validate(d)?;
            Ok(ConstraintSpec::Set(set))
        }
        "lip" => {
            let mut fields = rest.split(',').map(str::trim);
            let first = fields.next().unwrap_or("");
            if first == "data" {
                let mut k = 5usize;
                let mut p = QNorm::Two;
                for tok in fields {
                    let (key, val) = tok.split_once('=').ok_or_else(|| {
                        Error::InvalidConstraint(format!("bad lip:data field `{tok}`"))
                    })?;
                    match key {
                        "k" => {
                            k = val.parse().map_err(|_| {
                                Error::InvalidConstraint(format!("bad k `{val}`"))
                            })?
                        }
                        "p" => p = QNorm::parse(val)?,
                        other => {
                            return Err(Error::InvalidConstraint(format!(
                                "unknown lip:data key `{other}`"
                            )))
                        }
                    }
                }
                return Ok(ConstraintSpec::DataLipschitz { k, p });
            }
            let mut q = None;
            let mut radius = None;
            for tok in std::iter::once(first).chain(fields) {
                let (key, val) = tok.split_once('=').ok_or_else(|| {
                    Error::InvalidConstraint(format!("lip expects q=..,L=.., got `{tok}`"))
                })?;
                match key {
                    "q" => q = Some(QNorm::parse(val)?),
                    "L" => {
                        radius = Some(val.parse::<f64>().map_err(|_| {
                            Error::InvalidConstraint(format!("bad radius `{val}`"))
                        })?)
                    }
                    other => {
                        return Err(Error::InvalidConstraint(format!("unknown lip key `{other}`")))
                    }
                }
            }
            let set = ConstraintSet::LipschitzBall {
                q: q.ok_or_else(|| Error::InvalidConstraint("lip requires q=".into()))?,
                radius: radius.ok_or_else(|| Error::InvalidConstraint("lip requires L=".into()))?,
            };
            set.validate(d)?;
            Ok(ConstraintSpec::Set(set))
        }
        other => Err(Error::InvalidConstraint(format!("unknown constraint kind `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn box01(d: usize) -> ConstraintSet {
        ConstraintSet::Box { lower: vec![0.0; d], upper: vec![1.0; d] }
    }

    // Exact simplex projection by KKT support enumeration: for each
    // support size the threshold is (sum of the largest k entries - 1)/k.
    fn simplex_oracle(x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for m in 1u32..(1 << d) {
            let support: Vec<usize> = (0..d).filter(|k| m >> k & 1 == 1).collect();
            let s: f64 = support.iter().map(|&k| x[k]).sum();
            let t = (s - 1.0) / support.len() as f64;
            let mut z = vec![0.0; d];
            let mut ok = true;
            for &k in &support {
                z[k] = x[k] - t;
                if z[k] < -1e-12 {
                    ok = false;
                }
            }
            // KKT: off-support entries must not exceed the threshold
            for k in 0..d {
                if !support.contains(&k) && x[k] > t + 1e-12 {
                    ok = false;
                }
            }
            if ok {
                let dist: f64 = (0..d).map(|k| (z[k] - x[k]) * (z[k] - x[k])).sum();
                if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
                    best = Some((dist, z));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn simplex_known_values() {
        let z = project_simplex(&[1.0, 0.0, 0.0]);
        assert_eq!(z, vec![1.0, 0.0, 0.0]);
        let z = project_simplex(&[0.8, 0.6]);
        assert!((z[0] - 0.6).abs() < 1e-15 && (z[1] - 0.4).abs() < 1e-15);
        let z = project_simplex(&[-1.0, -1.0]);
        assert!((z[0] - 0.5).abs() < 1e-15 && (z[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn simplex_matches_enumeration_oracle() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..2000 {
            let d = 1 + (rng.next_u64() % 5) as usize;
            let x: Vec<f64> = (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let got = project_simplex(&x);
            let want = simplex_oracle(&x);
            for k in 0..d {
                assert!((got[k] - want[k]).abs() < 1e-10, "{x:?}: {got:?} vs {want:?}");
            }
            let sum: f64 = got.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12 && got.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn projection_known_values() {
        let z = project(&box01(3), &[-0.5, 0.3, 2.0]);
        assert_eq!(z, vec![0.0, 0.3, 1.0]);

        let z = project(&ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 5.0 }, &[6.0, 8.0]);
        assert!((z[0] - 3.0).abs() < 1e-12 && (z[1] - 4.0).abs() < 1e-12);

        let z = project(&ConstraintSet::LipschitzBall { q: QNorm::One, radius: 2.0 }, &[3.0, -1.0]);
        assert!((z[0] - 2.0).abs() < 1e-12 && z[1].abs() < 1e-12);

        let mono = ConstraintSet::Monotone { incr: vec![0], decr: vec![1] };
        let z = project(&mono, &[-2.0, 3.0]);
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn projection_idempotent_and_nonexpansive() {
        let mut rng = SplitMix64::new(5);
        let sets = vec![
            ConstraintSet::Free,
            ConstraintSet::Monotone { incr: vec![0, 2], decr: vec![1] },
            box01(3),
            ConstraintSet::LipschitzBall { q: QNorm::One, radius: 1.3 },
            ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 0.8 },
            ConstraintSet::LipschitzBall { q: QNorm::Inf, radius: 0.5 },
        ];
        for set in &sets {
            for _ in 0..500 {
                let x: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
                let y: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
                let px = project(set, &x);
                let py = project(set, &y);
                let ppx = project(set, &px);
                for k in 0..3 {
                    assert!((ppx[k] - px[k]).abs() < 1e-12, "idempotence {set:?}");
                }
                let dxy: f64 = (0..3).map(|k| (x[k] - y[k]) * (x[k] - y[k])).sum();
                let dp: f64 = (0..3).map(|k| (px[k] - py[k]) * (px[k] - py[k])).sum();
                assert!(dp <= dxy + 1e-12, "nonexpansive {set:?}");
            }
        }
    }

    #[test]
    fn projections_match_reference_solver() {
        let mut rng = SplitMix64::new(21);
        let cases: Vec<(ConstraintSet, refqp::Cons)> = vec![
            (
                ConstraintSet::Monotone { incr: vec![0], decr: vec![2] },
                refqp::Cons::Monotone { incr: vec![0], decr: vec![2] },
            ),
            (
                box01(3),
                refqp::Cons::Box { lower: vec![0.0; 3], upper: vec![1.0; 3] },
            ),
            (
                ConstraintSet::LipschitzBall { q: QNorm::One, radius: 1.5 },
                refqp::Cons::Ball { q: refqp::Norm::L1, radius: 1.5 },
            ),
            (
                ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 1.5 },
                refqp::Cons::Ball { q: refqp::Norm::L2, radius: 1.5 },
            ),
            (
                ConstraintSet::LipschitzBall { q: QNorm::Inf, radius: 0.7 },
                refqp::Cons::Ball { q: refqp::Norm::Linf, radius: 0.7 },
            ),
        ];
        for (ours, theirs) in &cases {
            for _ in 0..300 {
                let x: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
                let a = project(ours, &x);
                let b = refqp::project(theirs, &x);
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-8, "{ours:?} at {x:?}: {a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn jacobian_known_values() {
        let j = jacobian_element(
            &ConstraintSet::LipschitzBall { q: QNorm::Inf, radius: 1.0 },
            &[0.5, -2.0],
        );
        match j {
            JacobianElement::Diagonal(d) => assert_eq!(d, vec![1.0, 0.0]),
            other => panic!("expected diagonal, got {other:?}"),
        }

        let j = jacobian_element(
            &ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 5.0 },
            &[6.0, 8.0],
        );
        let m = j.materialize(2);
        // (1/2)(I - x x^T / 100)
        assert!((m.get(0, 0) - 0.5 * (1.0 - 0.36)).abs() < 1e-12);
        assert!((m.get(0, 1) - 0.5 * (-0.48)).abs() < 1e-12);
        assert!((m.get(1, 1) - 0.5 * (1.0 - 0.64)).abs() < 1e-12);

        let j = jacobian_element(
            &ConstraintSet::LipschitzBall { q: QNorm::One, radius: 2.0 },
            &[3.0, -1.0],
        );
        let m = j.materialize(2);
        for i in 0..2 {
            for k in 0..2 {
                assert!(m.get(i, k).abs() < 1e-12, "expected zero matrix");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        // away from kinks, J = d/dx project(x)
        let mut rng = SplitMix64::new(77);
        let sets = vec![
            ConstraintSet::Monotone { incr: vec![0, 1], decr: vec![] },
            box01(3),
            ConstraintSet::LipschitzBall { q: QNorm::One, radius: 1.2 },
            ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 1.2 },
            ConstraintSet::LipschitzBall { q: QNorm::Inf, radius: 0.9 },
        ];
        let h = 1e-6;
        for set in &sets {
            let mut checked = 0;
            while checked < 60 {
                let x: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
                if !margin_ok(set, &x, 1e-3) {
                    continue;
                }
                checked += 1;
                let j = jacobian_element(set, &x);
                for dir in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[dir] += h;
                    xm[dir] -= h;
                    let pp = project(set, &xp);
                    let pm = project(set, &xm);
                    let mut e = vec![0.0; 3];
                    e[dir] = 1.0;
                    let mut jd = vec![0.0; 3];
                    j.apply(&e, &mut jd);
                    for k in 0..3 {
                        let fd = (pp[k] - pm[k]) / (2.0 * h);
                        assert!(
                            (jd[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                            "{set:?} at {x:?}: jac {} vs fd {}",
                            jd[k],
                            fd
                        );
                    }
                }
            }
        }
    }

    // distance to the nearest nondifferentiability surface exceeds `m`
    pub(super) fn margin_ok(c: &ConstraintSet, x: &[f64], m: f64) -> bool {
        match c {
            ConstraintSet::Free => true,
            ConstraintSet::Monotone { incr, decr } => incr
                .iter()
                .chain(decr)
                .all(|&k| x[k].abs() > m),
            ConstraintSet::Box { lower, upper } => x.iter().enumerate().all(|(k, v)| {
                (v - lower[k]).abs() > m && (v - upper[k]).abs() > m
            }),
            ConstraintSet::LipschitzBall { q: QNorm::Inf, radius } => {
                x.iter().all(|v| (v.abs() - radius).abs() > m)
            }
            ConstraintSet::LipschitzBall { q: QNorm::Two, radius } => {
                (par::norm(x) - radius).abs() > m
            }
            ConstraintSet::LipschitzBall { q: QNorm::One, radius } => {
                let n1: f64 = x.iter().map(|v| v.abs()).sum();
                if (n1 - radius).abs() <= m || x.iter().any(|v| v.abs() <= m) {
                    return false;
                }
                if n1 > *radius {
                    // simplex support must be stable: active entries well
                    // above zero, inactive well below the threshold
                    let signs: Vec<f64> = x.iter().map(|v| v.signum_zero()).collect();
                    let scaled: Vec<f64> =
                        x.iter().zip(&signs).map(|(v, s)| s * v / radius).collect();
                    let z = project_simplex(&scaled);
                    let t = scaled
                        .iter()
                        .zip(&z)
                        .filter(|(_, zv)| **zv > 0.0)
                        .map(|(s, zv)| s - zv)
                        .next()
                        .unwrap_or(0.0);
                    scaled.iter().zip(&z).all(|(s, zv)| {
                        if *zv > 0.0 {
                            *zv > m
                        } else {
                            t - s > m
                        }
                    })
                } else {
                    true
                }
            }
            ConstraintSet::PerPoint(_) => false,
        }
    }

    #[test]
    fn jacobian_spectrum_in_unit_interval() {
        // symmetric PSD with eigenvalues in [0,1]: check via Rayleigh
        // quotients on random directions
        let mut rng = SplitMix64::new(9);
        let sets = vec![
            ConstraintSet::LipschitzBall { q: QNorm::One, radius: 1.0 },
            ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 1.0 },
            box01(4),
        ];
        for set in &sets {
            for _ in 0..200 {
                let x: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
                let j = jacobian_element(set, &x);
                let m = j.materialize(4);
                for i in 0..4 {
                    for k in 0..4 {
                        assert!((m.get(i, k) - m.get(k, i)).abs() < 1e-12, "symmetry");
                    }
                }
                for _ in 0..20 {
                    let v: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
                    let mut jv = vec![0.0; 4];
                    j.apply(&v, &mut jv);
                    let num: f64 = v.iter().zip(&jv).map(|(a, b)| a * b).sum();
                    let den: f64 = v.iter().map(|a| a * a).sum();
                    assert!(num >= -1e-12 && num <= den + 1e-12, "spectrum");
                }
            }
        }
    }

    #[test]
    fn conjugate_known_values() {
        let c = ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 3.0 };
        assert!((conjugate_support(&c, &[1.0, 0.0]) - 3.0).abs() < 1e-15);

        let c = box01(2);
        assert!((conjugate_support(&c, &[-2.0, 5.0]) - 5.0).abs() < 1e-15);

        let c = ConstraintSet::Monotone { incr: vec![0], decr: vec![] };
        assert!(conjugate_support(&c, &[1.0, 0.0]).is_infinite());
        assert_eq!(conjugate_support(&c, &[-1.0, 0.0]), 0.0);
    }

    #[test]
    fn conjugate_dominates_inner_products() {
        // delta*_D(x) >= <x, z> for z in D, with equality approached at the
        // support point
        let mut rng = SplitMix64::new(13);
        let sets = vec![
            box01(3),
            ConstraintSet::LipschitzBall { q: QNorm::One, radius: 2.0 },
            ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 2.0 },
            ConstraintSet::LipschitzBall { q: QNorm::Inf, radius: 2.0 },
        ];
        for set in &sets {
            for _ in 0..50 {
                let x: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
                let sup = conjugate_support(set, &x);
                let mut best = f64::NEG_INFINITY;
                for _ in 0..1000 {
                    let raw: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
                    let z = project(set, &raw);
                    let ip: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
                    assert!(ip <= sup + 1e-10, "support dominated: {ip} > {sup}");
                    best = best.max(ip);
                }
                // the maximizing direction scaled far out projects onto the
                // argmax of the support function
                let far: Vec<f64> = x.iter().map(|v| v * 1e6).collect();
                let z = project(set, &far);
                let ip: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
                assert!(sup - ip <= 1e-6 * (1.0 + sup.abs()), "supremum attained");
                let _ = best;
            }
        }
    }

    #[test]
    fn blockwise_ops_match_per_block_calls() {
        let mut rng = SplitMix64::new(3);
        let d = 3;
        let n = 5;
        let xi: Vec<f64> = (0..n * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let sets: Vec<ConstraintSet> = (0..n)
            .map(|i| ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 0.5 + i as f64 * 0.3 })
            .collect();
        let pp = ConstraintSet::PerPoint(sets.clone());
        let out = blockwise_prox(&pp, &xi, d).unwrap();
        for i in 0..n {
            let single = project(&sets[i], &xi[i * d..(i + 1) * d]);
            assert_eq!(&out[i * d..(i + 1) * d], single.as_slice());
            assert!(QNorm::Two.eval(&out[i * d..(i + 1) * d]) <= 0.5 + i as f64 * 0.3 + 1e-12);
        }
        // wrong per-point length errors
        let bad = ConstraintSet::PerPoint(sets[..n - 1].to_vec());
        assert!(blockwise_prox(&bad, &xi, d).is_err());
        // blocks already inside pass through unchanged
        let free = blockwise_prox(&ConstraintSet::Free, &xi, d).unwrap();
        assert_eq!(free, xi);
    }

    #[test]
    fn grammar_round_trips() {
        match parse_constraint("monotone:+1,+2,-3", 3).unwrap() {
            ConstraintSpec::Set(ConstraintSet::Monotone { incr, decr }) => {
                assert_eq!(incr, vec![0, 1]);
                assert_eq!(decr, vec![2]);
            }
            other => panic!("{other:?}"),
        }
        match parse_constraint("box:L=0,U=1", 2).unwrap() {
            ConstraintSpec::Set(ConstraintSet::Box { lower, upper }) => {
                assert_eq!(lower, vec![0.0, 0.0]);
                assert_eq!(upper, vec![1.0, 1.0]);
            }
            other => panic!("{other:?}"),
        }
        match parse_constraint("box:L=0;-inf,U=inf;2", 2).unwrap() {
            ConstraintSpec::Set(ConstraintSet::Box { lower, upper }) => {
                assert_eq!(lower, vec![0.0, f64::NEG_INFINITY]);
                assert_eq!(upper, vec![f64::INFINITY, 2.0]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            parse_constraint("lip:q=2,L=1.5", 4).unwrap(),
            ConstraintSpec::Set(ConstraintSet::LipschitzBall { q: QNorm::Two, radius: 1.5 })
        );
        assert_eq!(
            parse_constraint("lip:data,k=5,p=2", 4).unwrap(),
            ConstraintSpec::DataLipschitz { k: 5, p: QNorm::Two }
        );
        assert!(parse_constraint("monotone:+9", 3).is_err());
        assert!(parse_constraint("box:L=2,U=1", 3).is_err());
        assert!(parse_constraint("lip:q=3,L=1", 3).is_err());
        assert!(parse_constraint("wat", 3).is_err());
    }
}
