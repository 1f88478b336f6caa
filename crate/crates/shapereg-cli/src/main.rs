//! Command-line interface: `fit`, `predict`, `smooth`, `bench`.

mod args;
mod bench;
mod fit;
mod predict;

use args::Args;

const USAGE: &str = "\
shapereg — shape-constrained convex regression

USAGE:
  shapereg fit     --data d.csv --response COL --out model.json [options]
  shapereg predict --model model.json --query q.csv --out yhat.csv [--smooth TAU]
  shapereg smooth  --model model.json --query q.csv --tau TAU --out out.csv
  shapereg bench   --suite synthetic|basket [options]

FIT OPTIONS:
  --data FILE           numeric CSV with a header row
  --response COL        response column name
  --predictors A,B,...  predictor columns (default: all non-response)
  --constraint SPEC     free | monotone:+1,-2 | box:L=0,U=1 |
                        lip:q=2,L=1.5 | lip:data,k=5,p=2   (default free)
  --solver NAME         palm | admm                         (default palm)
  --tol T               KKT tolerance                       (default 1e-6)
  --max-time SECS       wall-clock cap                      (default 7200)
  --max-iters N         iteration cap (admm sweeps / palm outer steps)
  --standardize         center and unit-norm scale the data before fitting;
                        raw-unit constraint bounds are mapped by the chain
                        rule (coordinate a scales by x_norm_a / y_norm;
                        Lipschitz radii use the conservative uniform factor
                        min_a x_norm_a / y_norm)
  --trace FILE          per-iteration CSV trace
  --transform COL=pow:B apply x -> B^x to a predictor (repeatable)
  --filter EXPR         keep rows with COL<=V, COL>=V, COL<V or COL>V
                        (repeatable)
  --seed N              RNG seed where randomness applies   (default 42)
  --threads N           worker threads, 0 = auto; honors SHAPEREG_THREADS
  --config FILE         key=value defaults (flags override)

BENCH OPTIONS (synthetic):
  --fn NAME             exp|relu|softplus|sqrtquad|qform|logsumexp
  --d D --n N[,N...]    problem sizes
  --snr S               signal-to-noise ratio               (default 3)
  --solver NAME         palm | admm | both
  --constraint SPEC     as in fit                           (default free)
BENCH OPTIONS (basket):
  --assets M            number of assets                    (default 5)
  --n N[,N...]          training sizes                      (default 200,400,600)
  --paths P             Monte Carlo paths per test point    (default 100000)
  --test-points T       number of uniform test points       (default 200)

EXIT CODES: 0 success/converged, 2 iteration or time cap hit (model still
written), 1 input or usage error.
";

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let code = run(&argv);
    std::process::exit(code);
}

fn run(argv: &[String]) -> i32 {
    let Some(command) = argv.first().map(String::as_str) else {
        eprint!("{USAGE}");
        return 1;
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{USAGE}");
        return 0;
    }
    let args = match Args::parse(&argv[1..]) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            eprint!("{USAGE}");
            return 1;
        }
    };
    if args.has("help") {
        print!("{USAGE}");
        return 0;
    }
    configure_threads(&args);
    let outcome = match command {
        "fit" => fit::run(&args),
        "predict" => predict::run(&args, None),
        "smooth" => match args.require("tau").map(str::to_string) {
            Ok(tau) => predict::run(&args, Some(tau)),
            Err(e) => Err(e),
        },
        "bench" => bench::run(&args),
        other => {
            eprintln!("error: unknown command `{other}`");
            eprint!("{USAGE}");
            return 1;
        }
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads(args: &Args) {
    let threads = args
        .get("threads")
        .map(str::to_string)
        .or_else(|| std::env::var("SHAPEREG_THREADS").ok())
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    shapereg::configure_threads(threads);
}

/// Reads a numeric CSV with a header row into (headers, row-major cells).
pub(crate) fn read_numeric_csv(path: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read `{path}`: {e}"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| format!("`{path}` is empty"))?;
    let headers: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, String> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("{path}:{}: non-numeric cell `{}`", lineno + 1, c.trim()))
            })
            .collect();
        let row = row?;
        if row.len() != headers.len() {
            return Err(format!(
                "{path}:{}: expected {} cells, got {}",
                lineno + 1,
                headers.len(),
                row.len()
            ));
        }
        rows.push(row);
    }
    Ok((headers, rows))
}
