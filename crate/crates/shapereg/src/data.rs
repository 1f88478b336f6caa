//! Dataset construction and preprocessing: synthetic benchmark functions,
//! mean-centering/unit-norm standardization, and CSV ingestion.

use crate::constraints::{ConstraintSet, QNorm};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::problem::ProblemData;
use crate::rng::SplitMix64;
use std::io::BufRead;
use std::path::Path;

/// Named convex test functions for the synthetic benchmark suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestFunction {
    /// `exp(p^T x)`, `p` standard normal.
    Exp,
    /// `max(e^T x, 0)`.
    Relu,
    /// `ln(1 + exp(e^T x))`.
    Softplus,
    /// `sqrt(1 + x^T x)`.
    SqrtQuad,
    /// `sqrt(x^T Q x)`, `Q` random positive definite.
    QForm,
    /// `ln(1 + e^{x_1} + ... + e^{x_d})`.
    LogSumExp,
}

impl TestFunction {
    pub fn parse(name: &str) -> Result<TestFunction> {
        match name {
            "exp" => Ok(TestFunction::Exp),
            "relu" => Ok(TestFunction::Relu),
            "softplus" => Ok(TestFunction::Softplus),
            "sqrtquad" => Ok(TestFunction::SqrtQuad),
            "qform" => Ok(TestFunction::QForm),
            "logsumexp" => Ok(TestFunction::LogSumExp),
            other => Err(Error::Schema(format!("unknown test function `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Exp => "exp",
            TestFunction::Relu => "relu",
            TestFunction::Softplus => "softplus",
            TestFunction::SqrtQuad => "sqrtquad",
            TestFunction::QForm => "qform",
            TestFunction::LogSumExp => "logsumexp",
        }
    }
}

/// Function parameters drawn for a synthetic instance.
#[derive(Clone, Debug)]
pub struct SyntheticMeta {
    pub function: TestFunction,
    /// Direction vector for `exp` (empty otherwise).
    pub p: Vec<f64>,
    /// Positive definite matrix for `qform` (row-major d*d, empty otherwise).
    pub q: Vec<f64>,
    /// Largest eigenvalue of `Q` (power iteration), for `qform`.
    pub q_lambda_max: f64,
    /// Noise standard deviation used.
    pub noise_sigma: f64,
}

fn eval_test_fn(f: TestFunction, meta: &SyntheticMeta, x: &[f64]) -> f64 {
    let d = x.len();
    match f {
        TestFunction::Exp => {
            let ip: f64 = meta.p.iter().zip(x).map(|(a, b)| a * b).sum();
            ip.exp()
        }
        TestFunction::Relu => x.iter().sum::<f64>().max(0.0),
        TestFunction::Softplus => {
            let s: f64 = x.iter().sum();
            (1.0 + s.exp()).ln()
        }
        TestFunction::SqrtQuad => (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt(),
        TestFunction::QForm => {
            let mut quad = 0.0;
            for a in 0..d {
                for b in 0..d {
                    quad += x[a] * meta.q[a * d + b] * x[b];
                }
            }
            quad.max(0.0).sqrt()
        }
        TestFunction::LogSumExp => {
            let s: f64 = x.iter().map(|v| v.exp()).sum();
            (1.0 + s).ln()
        }
    }
}

/// Generates a synthetic instance: predictors uniform on `[-1,1]^d`,
/// responses `psi(X_i) + eps_i` with noise variance
/// `Var({psi(X_i)}) / snr`.
///
/// Streams: point `j` draws its coordinates from the derived stream `j`;
/// function parameters and noise use reserved streams, so the same seed
/// reproduces the dataset bitwise for any thread count.
pub fn generate_synthetic(
    f: TestFunction,
    d: usize,
    n: usize,
    snr: f64,
    seed: u64,
) -> Result<(ProblemData, SyntheticMeta)> {
    if snr <= 0.0 {
        return Err(Error::Schema("snr must be positive".into()));
    }
    let mut param_rng = SplitMix64::derive(seed, 0xFFFF_0001);
    let mut meta = SyntheticMeta {
        function: f,
        p: Vec::new(),
        q: Vec::new(),
        q_lambda_max: 0.0,
        noise_sigma: 0.0,
    };
    match f {
        TestFunction::Exp => {
            meta.p = (0..d).map(|_| param_rng.normal()).collect();
        }
        TestFunction::QForm => {
            // Q = M^T M / d + 0.1 I is positive definite; lambda_max by
            // power iteration
            let m: Vec<f64> = (0..d * d).map(|_| param_rng.normal()).collect();
            let mut q = vec![0.0; d * d];
            for a in 0..d {
                for b in 0..d {
                    let mut v = 0.0;
                    for k in 0..d {
                        v += m[k * d + a] * m[k * d + b];
                    }
                    q[a * d + b] = v / d as f64 + if a == b { 0.1 } else { 0.0 };
                }
            }
            let mut vec_iter = vec![1.0; d];
            let mut lambda = 1.0;
            for _ in 0..200 {
                let mut next = vec![0.0; d];
                for a in 0..d {
                    for b in 0..d {
                        next[a] += q[a * d + b] * vec_iter[b];
                    }
                }
                lambda = next.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in next.iter_mut() {
                    *v /= lambda;
                }
                vec_iter = next;
            }
            meta.q = q;
            meta.q_lambda_max = lambda;
        }
        _ => {}
    }

    let mut x = Mat::zeros(d, n);
    for j in 0..n {
        let mut rng = SplitMix64::derive(seed, j as u64);
        for a in 0..d {
            x.set(a, j, rng.uniform(-1.0, 1.0));
        }
    }
    let psi: Vec<f64> = (0..n).map(|j| eval_test_fn(f, &meta, x.col(j))).collect();
    let mean = psi.iter().sum::<f64>() / n as f64;
    let var = psi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    meta.noise_sigma = (var / snr).sqrt();

    let mut noise_rng = SplitMix64::derive(seed, 0xFFFF_0002);
    let y: Vec<f64> =
        psi.iter().map(|v| v + meta.noise_sigma * noise_rng.normal()).collect();
    Ok((ProblemData::new(x, y)?, meta))
}

/// Centering and scaling applied to the responses and to each predictor
/// row: subtract the mean, then divide by the l2 norm of the centered
/// vector. Rows with zero variance keep a unit divisor and are flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationRecord {
    pub x_means: Vec<f64>,
    pub x_norms: Vec<f64>,
    pub y_mean: f64,
    pub y_norm: f64,
    /// Predictor rows whose centered norm was zero (scaling skipped).
    pub constant_rows: Vec<usize>,
}

impl StandardizationRecord {
    /// Raw point -> standardized point.
    pub fn standardize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(a, v)| (v - self.x_means[a]) / self.x_norms[a])
            .collect()
    }

    /// Standardized prediction -> raw units.
    pub fn destandardize_y(&self, y: f64) -> f64 {
        y * self.y_norm + self.y_mean
    }

    /// Raw-unit gradient bound scale for coordinate `a`: a bound `b` on
    /// `d psi / d x_a` in raw units becomes `b * x_norm_a / y_norm` in
    /// standardized units.
    pub fn gradient_scale(&self, a: usize) -> f64 {
        self.x_norms[a] / self.y_norm
    }
}

fn center_unit_norm(values: &mut [f64]) -> (f64, f64, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter_mut().for_each(|v| *v -= mean);
    let norm = crate::par::norm(values);
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
        (mean, norm, false)
    } else {
        (mean, 1.0, true)
    }
}

/// Mean-centers and scales to unit l2 norm the responses and each
/// predictor row.
pub fn standardize(p: &ProblemData) -> Result<(ProblemData, StandardizationRecord)> {
    let d = p.d();
    let n = p.n();
    let mut x = p.x().clone();
    let mut x_means = vec![0.0; d];
    let mut x_norms = vec![1.0; d];
    let mut constant_rows = Vec::new();
    for a in 0..d {
        let mut row: Vec<f64> = (0..n).map(|j| x.get(a, j)).collect();
        let (mean, norm, skipped) = center_unit_norm(&mut row);
        x_means[a] = mean;
        x_norms[a] = norm;
        if skipped {
            constant_rows.push(a);
        }
        for j in 0..n {
            x.set(a, j, row[j]);
        }
    }
    let mut y = p.y().to_vec();
    let (y_mean, y_norm, _) = center_unit_norm(&mut y);
    let rec = StandardizationRecord { x_means, x_norms, y_mean, y_norm, constant_rows };
    Ok((ProblemData::new(x, y)?, rec))
}

/// Restores raw units from standardized data.
pub fn destandardize(p: &ProblemData, rec: &StandardizationRecord) -> Result<ProblemData> {
    let d = p.d();
    let n = p.n();
    let mut x = p.x().clone();
    for a in 0..d {
        for j in 0..n {
            x.set(a, j, p.x().get(a, j) * rec.x_norms[a] + rec.x_means[a]);
        }
    }
    let y: Vec<f64> = p.y().iter().map(|v| v * rec.y_norm + rec.y_mean).collect();
    ProblemData::new(x, y)
}

/// Maps a constraint given in raw units to standardized units.
///
/// Box bounds transform exactly by the chain rule (coordinate `a` scales
/// by `x_norm_a / y_norm`); monotone patterns are unchanged under the
/// positive scalings; Lipschitz radii use the conservative uniform factor
/// `min_a x_norm_a / y_norm` (exact when all predictor norms are equal).
pub fn constraint_to_standardized(
    c: &ConstraintSet,
    rec: &StandardizationRecord,
) -> Result<ConstraintSet> {
    let map_ball = |q: QNorm, radius: f64| -> ConstraintSet {
        let min_norm = rec.x_norms.iter().cloned().fold(f64::INFINITY, f64::min);
        ConstraintSet::LipschitzBall { q, radius: radius * min_norm / rec.y_norm }
    };
    Ok(match c {
        ConstraintSet::Free => ConstraintSet::Free,
        ConstraintSet::Monotone { incr, decr } => {
            ConstraintSet::Monotone { incr: incr.clone(), decr: decr.clone() }
        }
        ConstraintSet::Box { lower, upper } => ConstraintSet::Box {
            lower: lower
                .iter()
                .enumerate()
                .map(|(a, v)| v * rec.gradient_scale(a))
                .collect(),
            upper: upper
                .iter()
                .enumerate()
                .map(|(a, v)| v * rec.gradient_scale(a))
                .collect(),
        },
        ConstraintSet::LipschitzBall { q, radius } => map_ball(*q, *radius),
        ConstraintSet::PerPoint(sets) => {
            let mapped: Result<Vec<ConstraintSet>> =
                sets.iter().map(|s| constraint_to_standardized(s, rec)).collect();
            ConstraintSet::PerPoint(mapped?)
        }
    })
}

/// Per-predictor transform applied at load time.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnTransform {
    /// `x -> base^x`.
    Pow(f64),
}

impl ColumnTransform {
    fn apply(&self, v: f64) -> f64 {
        match self {
            ColumnTransform::Pow(base) => base.powf(v),
        }
    }
}

/// Row filter `column <op> value` for simple outlier removal.
#[derive(Clone, Debug, PartialEq)]
pub struct RowFilter {
    pub column: String,
    pub op: FilterOp,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterOp {
    Le,
    Ge,
    Lt,
    Gt,
}

impl RowFilter {
    pub fn parse(s: &str) -> Result<RowFilter> {
        for (pat, op) in
            [("<=", FilterOp::Le), (">=", FilterOp::Ge), ("<", FilterOp::Lt), (">", FilterOp::Gt)]
        {
            if let Some((col, val)) = s.split_once(pat) {
                let value = val.trim().parse::<f64>().map_err(|_| {
                    Error::Schema(format!("bad filter value in `{s}`"))
                })?;
                return Ok(RowFilter { column: col.trim().to_string(), op, value });
            }
        }
        Err(Error::Schema(format!("bad filter `{s}` (expected col<=v, col>=v, col<v, col>v)")))
    }

    fn keep(&self, v: f64) -> bool {
        match self.op {
            FilterOp::Le => v <= self.value,
            FilterOp::Ge => v >= self.value,
            FilterOp::Lt => v < self.value,
            FilterOp::Gt => v > self.value,
        }
    }
}

/// Column roles for CSV ingestion.
#[derive(Clone, Debug, Default)]
pub struct CsvSchema {
    /// Response column name.
    pub response: String,
    /// Predictor column names; empty means every non-response column.
    pub predictors: Vec<String>,
    /// Transforms keyed by predictor name.
    pub transforms: Vec<(String, ColumnTransform)>,
    /// Row filters (all must hold).
    pub filters: Vec<RowFilter>,
}

/// Reads a rectangular numeric CSV with a header row.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<ProblemData> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(std::io::BufReader::new(file), schema)
}

pub fn load_csv_reader<R: BufRead>(reader: R, schema: &CsvSchema) -> Result<ProblemData> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Csv { line: 1, msg: "empty file".into() })?
        .map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let col_index = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not in header")))
    };
    let y_col = col_index(&schema.response)?;
    let pred_cols: Vec<usize> = if schema.predictors.is_empty() {
        (0..names.len()).filter(|&k| k != y_col).collect()
    } else {
        schema.predictors.iter().map(|n| col_index(n)).collect::<Result<Vec<_>>>()?
    };
    let mut filter_cols = Vec::new();
    for f in &schema.filters {
        filter_cols.push((col_index(&f.column)?, f));
    }
    let mut transforms: Vec<Option<&ColumnTransform>> = vec![None; pred_cols.len()];
    for (name, t) in &schema.transforms {
        let k = col_index(name)?;
        let pos = pred_cols.iter().position(|&c| c == k).ok_or_else(|| {
            Error::Schema(format!("transform column `{name}` is not a predictor"))
        })?;
        transforms[pos] = Some(t);
    }

    let d = pred_cols.len();
    let mut cols: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line_num = lineno + 2;
        let line = line.map_err(|e| Error::Csv { line: line_num, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != names.len() {
            return Err(Error::Csv {
                line: line_num,
                msg: format!("expected {} cells, got {}", names.len(), cells.len()),
            });
        }
        let parse = |k: usize| -> Result<f64> {
            cells[k].parse::<f64>().map_err(|_| Error::Csv {
                line: line_num,
                msg: format!("non-numeric cell `{}` in column `{}`", cells[k], names[k]),
            })
        };
        let mut keep = true;
        for (k, f) in &filter_cols {
            if !f.keep(parse(*k)?) {
                keep = false;
                break;
            }
        }
        if !keep {
            continue;
        }
        for (pos, &k) in pred_cols.iter().enumerate() {
            let mut v = parse(k)?;
            if let Some(t) = transforms[pos] {
                v = t.apply(v);
            }
            cols.push(v);
        }
        y.push(parse(y_col)?);
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::Schema(format!("need at least 2 rows, got {n}")));
    }
    // cols is row-major (point-major); transpose into d x n column-major
    let x = Mat::from_fn(d, n, |a, j| cols[j * d + a]);
    ProblemData::new(x, y)
}
