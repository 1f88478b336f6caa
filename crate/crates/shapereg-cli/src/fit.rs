use crate::args::Args;
use shapereg::constraints::{parse_constraint, ConstraintSet, ConstraintSpec};
use shapereg::data::{
    constraint_to_standardized, load_csv, standardize, ColumnTransform, CsvSchema, RowFilter,
};
use shapereg::estimator::{write_model_file, ModelMeta};
use shapereg::lipschitz::{build_perpoint_problem, estimate_lipschitz};
use shapereg::prelude::{admm_fit, palm_fit, AdmmConfig, PalmConfig, SsnConfig};
use shapereg::solver::{CsvTrace, SolverReport, TraceSink};
use std::path::Path;

pub fn run(args: &Args) -> Result<i32, String> {
    let data_path = args.require("data")?;
    let response = args.require("response")?;
    let out_path = args.require("out")?;

    let mut schema = CsvSchema { response: response.to_string(), ..Default::default() };
    if let Some(preds) = args.get("predictors") {
        schema.predictors = preds.split(',').map(|s| s.trim().to_string()).collect();
    }
    for t in args.get_all("transform") {
        let (col, spec) = t
            .split_once('=')
            .ok_or_else(|| format!("bad --transform `{t}` (expected COL=pow:BASE)"))?;
        let base = spec
            .strip_prefix("pow:")
            .and_then(|b| b.parse::<f64>().ok())
            .ok_or_else(|| format!("bad --transform `{t}` (expected COL=pow:BASE)"))?;
        schema.transforms.push((col.trim().to_string(), ColumnTransform::Pow(base)));
    }
    for f in args.get_all("filter") {
        schema.filters.push(RowFilter::parse(f).map_err(|e| e.to_string())?);
    }

    let raw = load_csv(Path::new(data_path), &schema).map_err(|e| e.to_string())?;
    let (data, record) = if args.has("standardize") {
        let (std_data, rec) = standardize(&raw).map_err(|e| e.to_string())?;
        if !rec.constant_rows.is_empty() {
            eprintln!(
                "warning: predictor rows {:?} are constant; scaling skipped for them",
                rec.constant_rows
            );
        }
        (std_data, Some(rec))
    } else {
        (raw, None)
    };

    let spec = parse_constraint(args.get("constraint").unwrap_or("free"), data.d())
        .map_err(|e| e.to_string())?;
    let constraint: ConstraintSet = match spec {
        ConstraintSpec::Set(set) => match &record {
            Some(rec) => constraint_to_standardized(&set, rec).map_err(|e| e.to_string())?,
            None => set,
        },
        ConstraintSpec::DataLipschitz { k, p } => {
            // estimated directly on the (possibly standardized) fit data
            let radii = estimate_lipschitz(&data, k, p).map_err(|e| e.to_string())?;
            if radii.iter().any(|r| *r == 0.0) {
                eprintln!("warning: zero Lipschitz estimates floored to keep the fit well posed");
            }
            build_perpoint_problem(&radii, p).map_err(|e| e.to_string())?
        }
    };

    let tol: f64 = args.get_parsed("tol", 1e-6)?;
    let max_time: f64 = args.get_parsed("max-time", 7200.0)?;
    let mut trace_file: Option<CsvTrace<std::fs::File>> = match args.get("trace") {
        Some(path) => Some(CsvTrace::new(
            std::fs::File::create(path).map_err(|e| format!("cannot create trace: {e}"))?,
        )),
        None => None,
    };
    let trace: Option<&mut dyn TraceSink> =
        trace_file.as_mut().map(|t| t as &mut dyn TraceSink);

    let solver = args.get("solver").unwrap_or("palm");
    let (model, report): (shapereg::problem::FittedModel, SolverReport) = match solver {
        "palm" => {
            let cfg = PalmConfig {
                tol,
                max_time_secs: max_time,
                max_outer: args.get_parsed("max-iters", PalmConfig::default().max_outer)?,
                ..Default::default()
            };
            palm_fit(&data, &constraint, &cfg, &SsnConfig::default(), None, trace)
                .map_err(|e| e.to_string())?
        }
        "admm" => {
            let cfg = AdmmConfig {
                tol,
                max_time_secs: max_time,
                max_iters: args.get_parsed("max-iters", AdmmConfig::default().max_iters)?,
                ..Default::default()
            };
            admm_fit(&data, &constraint, &cfg, None, trace).map_err(|e| e.to_string())?
        }
        other => return Err(format!("unknown solver `{other}` (expected palm or admm)")),
    };

    let model = model.with_standardization(record);
    let meta = ModelMeta {
        solver: report.solver.to_string(),
        iterations: report.iterations,
        inner_iterations: report.inner_iterations,
        r_kkt: report.r_kkt(),
        objective: report.objective,
    };
    write_model_file(Path::new(out_path), &model, &meta).map_err(|e| e.to_string())?;
    println!(
        "{}: iterations {}, R_KKT {:.2e}, objective {:.6e}, time {:.2}s, {}",
        report.solver,
        report.iters_fmt(),
        report.r_kkt(),
        report.objective,
        report.elapsed_secs,
        report.termination.as_str()
    );
    Ok(if report.converged() { 0 } else { 2 })
}
