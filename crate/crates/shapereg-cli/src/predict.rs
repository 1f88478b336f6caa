use crate::args::Args;
use crate::read_numeric_csv;
use shapereg::estimator::{moreau_smooth, predict_batch, read_model_file};
use shapereg::linalg::Mat;
use std::io::Write;
use std::path::Path;

/// `predict` (optionally with `--smooth`) and `smooth` (forced tau:
/// smoothed values and gradients only).
pub fn run(args: &Args, forced_tau: Option<String>) -> Result<i32, String> {
    let model_path = args.require("model")?;
    let query_path = args.require("query")?;
    let out_path = args.require("out")?;
    let tau: Option<f64> = match forced_tau.as_deref().or_else(|| args.get("smooth")) {
        Some(v) => Some(v.parse().map_err(|_| format!("bad smoothing parameter `{v}`"))?),
        None => None,
    };
    let smooth_only = forced_tau.is_some();

    let (model, _meta) = read_model_file(Path::new(model_path)).map_err(|e| e.to_string())?;
    let (_, rows) = read_numeric_csv(query_path)?;
    if rows.is_empty() {
        return Err(format!("`{query_path}` has no data rows"));
    }
    let d = model.d();
    if rows[0].len() != d {
        return Err(format!(
            "query has {} columns but the model expects {d} predictors",
            rows[0].len()
        ));
    }
    let queries = Mat::from_fn(d, rows.len(), |a, j| rows[j][a]);
    let values = predict_batch(&model, &queries).map_err(|e| e.to_string())?;

    let mut out = std::fs::File::create(out_path).map_err(|e| format!("cannot create output: {e}"))?;
    let mut header = if smooth_only { String::new() } else { "prediction".to_string() };
    if tau.is_some() {
        if !header.is_empty() {
            header.push(',');
        }
        header.push_str("smooth_value");
        for a in 0..d {
            header.push_str(&format!(",smooth_grad_{}", a + 1));
        }
    }
    writeln!(out, "{header}").map_err(|e| e.to_string())?;
    for (j, row) in rows.iter().enumerate() {
        let mut line = if smooth_only { String::new() } else { format!("{:.17e}", values[j]) };
        if let Some(tau) = tau {
            let (val, grad) = moreau_smooth(&model, row, tau).map_err(|e| e.to_string())?;
            if !line.is_empty() {
                line.push(',');
            }
            line.push_str(&format!("{val:.17e}"));
            for g in grad {
                line.push_str(&format!(",{g:.17e}"));
            }
        }
        writeln!(out, "{line}").map_err(|e| e.to_string())?;
    }
    Ok(0)
}
