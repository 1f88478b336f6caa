use crate::args::Args;
use shapereg::constraints::{parse_constraint, ConstraintSet, ConstraintSpec};
use shapereg::data::{generate_synthetic, standardize, TestFunction};
use shapereg::estimator::predict_batch;
use shapereg::linalg::Mat;
use shapereg::lipschitz::{build_perpoint_problem, estimate_lipschitz};
use shapereg::prelude::{admm_fit, palm_fit, AdmmConfig, PalmConfig, SsnConfig};
use shapereg::pricing::{basket_gradient_bounds, mc_basket_value, sample_basket_data, BasketParams};
use shapereg::problem::ProblemData;
use shapereg::rng::SplitMix64;
use shapereg::solver::SolverReport;
use std::io::Write;

pub fn run(args: &Args) -> Result<i32, String> {
    match args.require("suite")? {
        "synthetic" => synthetic(args),
        "basket" => basket(args),
        other => Err(format!("unknown suite `{other}` (expected synthetic or basket)")),
    }
}

fn out_writer(args: &Args) -> Result<Box<dyn Write>, String> {
    match args.get("out") {
        Some(path) => Ok(Box::new(
            std::fs::File::create(path).map_err(|e| format!("cannot create output: {e}"))?,
        )),
        None => Ok(Box::new(std::io::stdout())),
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| format!("bad {what} value `{v}`")))
        .collect()
}

fn solve(
    data: &ProblemData,
    constraint: &ConstraintSet,
    solver: &str,
    tol: f64,
    max_time: f64,
) -> Result<SolverReport, String> {
    let report = match solver {
        "palm" => {
            let cfg = PalmConfig { tol, max_time_secs: max_time, ..Default::default() };
            palm_fit(data, constraint, &cfg, &SsnConfig::default(), None, None)
                .map_err(|e| e.to_string())?
                .1
        }
        "admm" => {
            let cfg = AdmmConfig { tol, max_time_secs: max_time, ..Default::default() };
            admm_fit(data, constraint, &cfg, None, None).map_err(|e| e.to_string())?.1
        }
        other => return Err(format!("unknown solver `{other}`")),
    };
    Ok(report)
}

fn synthetic(args: &Args) -> Result<i32, String> {
    let f = TestFunction::parse(args.get("fn").unwrap_or("exp")).map_err(|e| e.to_string())?;
    let d: usize = args.get_parsed("d", 10)?;
    let ns = parse_list(args.get("n").unwrap_or("200"), "n")?;
    let snr: f64 = args.get_parsed("snr", 3.0)?;
    let seed: u64 = args.get_parsed("seed", 42)?;
    let tol: f64 = args.get_parsed("tol", 1e-6)?;
    let max_time: f64 = args.get_parsed("max-time", 7200.0)?;
    let solvers: Vec<&str> = match args.get("solver").unwrap_or("both") {
        "both" => vec!["palm", "admm"],
        s => vec![s],
    };

    let mut out = out_writer(args)?;
    writeln!(out, "solver,fn,d,n,iters,inner_iters,time_secs,r_kkt,objective")
        .map_err(|e| e.to_string())?;
    for &n in &ns {
        let (raw, _meta) = generate_synthetic(f, d, n, snr, seed).map_err(|e| e.to_string())?;
        let (data, _rec) = standardize(&raw).map_err(|e| e.to_string())?;
        let constraint =
            match parse_constraint(args.get("constraint").unwrap_or("free"), d)
                .map_err(|e| e.to_string())?
            {
                ConstraintSpec::Set(set) => set,
                ConstraintSpec::DataLipschitz { k, p } => {
                    let radii = estimate_lipschitz(&data, k, p).map_err(|e| e.to_string())?;
                    build_perpoint_problem(&radii, p).map_err(|e| e.to_string())?
                }
            };
        for solver in &solvers {
            let report = solve(&data, &constraint, solver, tol, max_time)?;
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3},{:.3e},{:.9e}",
                report.solver,
                f.name(),
                d,
                n,
                report.iterations,
                report.inner_iterations,
                report.elapsed_secs,
                report.r_kkt(),
                report.objective
            )
            .map_err(|e| e.to_string())?;
        }
    }
    Ok(0)
}

fn basket(args: &Args) -> Result<i32, String> {
    let assets: usize = args.get_parsed("assets", 5)?;
    let ns = parse_list(args.get("n").unwrap_or("200,400,600"), "n")?;
    let paths: usize = args.get_parsed("paths", 100_000)?;
    let test_points: usize = args.get_parsed("test-points", 200)?;
    let seed: u64 = args.get_parsed("seed", 42)?;
    let tol: f64 = args.get_parsed("tol", 1e-6)?;
    let max_time: f64 = args.get_parsed("max-time", 7200.0)?;
    let solver = args.get("solver").unwrap_or("palm");
    let params = BasketParams::standard(assets);

    // shared test grid with Monte Carlo benchmark values
    let mut grid_rng = SplitMix64::derive(seed, 0xBEEF);
    let spots: Vec<Vec<f64>> = (0..test_points)
        .map(|_| (0..assets).map(|_| grid_rng.uniform(0.0, params.spot_max)).collect())
        .collect();
    let truth: Result<Vec<f64>, String> = spots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            mc_basket_value(s, &params, paths, seed.wrapping_add(1 + i as u64), false)
                .map(|(mean, _)| mean)
                .map_err(|e| e.to_string())
        })
        .collect();
    let truth = truth?;
    let queries = Mat::from_fn(assets, test_points, |a, j| spots[j][a]);

    let mut out = out_writer(args)?;
    writeln!(out, "model,num_data,mse,time_secs").map_err(|e| e.to_string())?;
    for &n in &ns {
        let raw = sample_basket_data(&params, n, seed).map_err(|e| e.to_string())?;
        // fits run on standardized data; the box bounds map exactly and the
        // model carries the record, so predictions come back in raw units
        let (data, rec) = standardize(&raw).map_err(|e| e.to_string())?;
        for (label, raw_constraint) in [
            ("UC", ConstraintSet::Free),
            ("SC", basket_gradient_bounds(&params.weights)),
        ] {
            let constraint = shapereg::data::constraint_to_standardized(&raw_constraint, &rec)
                .map_err(|e| e.to_string())?;
            let start = std::time::Instant::now();
            let (model, _report) = match solver {
                "palm" => {
                    let cfg = PalmConfig { tol, max_time_secs: max_time, ..Default::default() };
                    palm_fit(&data, &constraint, &cfg, &SsnConfig::default(), None, None)
                        .map_err(|e| e.to_string())?
                }
                "admm" => {
                    let cfg = AdmmConfig { tol, max_time_secs: max_time, ..Default::default() };
                    admm_fit(&data, &constraint, &cfg, None, None).map_err(|e| e.to_string())?
                }
                other => return Err(format!("unknown solver `{other}`")),
            };
            let model = model.with_standardization(Some(rec.clone()));
            let fitted = predict_batch(&model, &queries).map_err(|e| e.to_string())?;
            let mse: f64 = fitted
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / test_points as f64;
            writeln!(out, "{label},{n},{mse:.6e},{:.3}", start.elapsed().as_secs_f64())
                .map_err(|e| e.to_string())?;
        }
    }
    Ok(0)
}
