//! Option-pricing benchmark generators: the closed-form call price,
//! lognormal samplers for single-asset and basket data, Monte Carlo
//! benchmark values, and the gradient box implied by basket weights.

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::problem::ProblemData;
use crate::rng::SplitMix64;

/// Standard normal CDF via the complementary error function
/// (absolute error well below 1e-12).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Closed-form call price `S Phi(d1) - K e^{-r tau} Phi(d2)`.
pub fn bs_call_price(spot: f64, strike: f64, rate: f64, tau: f64, vol: f64) -> Result<f64> {
    if !(spot > 0.0 && strike > 0.0 && tau > 0.0 && vol > 0.0) {
        return Err(Error::Schema("spot, strike, maturity and volatility must be positive".into()));
    }
    let sig_sqrt = vol * tau.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * tau) / sig_sqrt;
    let d2 = d1 - sig_sqrt;
    Ok(spot * normal_cdf(d1) - strike * (-rate * tau).exp() * normal_cdf(d2))
}

/// Parameters of the single-asset experiment.
#[derive(Clone, Debug)]
pub struct CallParams {
    pub t: f64,
    pub maturity: f64,
    pub strike: f64,
    pub rate: f64,
    pub vol: f64,
}

impl Default for CallParams {
    fn default() -> Self {
        CallParams { t: 0.1, maturity: 0.4, strike: 10.0, rate: 0.0, vol: 0.2 }
    }
}

/// Samples `(S_i, V_i)` pairs: `log S_i` is normal around the forward of
/// the strike at time `t`, and the response is the discounted payoff of a
/// terminal price drawn from the lognormal law given `S_i`.
pub fn sample_call_data(params: &CallParams, n: usize, seed: u64) -> Result<ProblemData> {
    let CallParams { t, maturity, strike, rate, vol } = *params;
    let tau = maturity - t;
    if tau <= 0.0 {
        return Err(Error::Schema("maturity must exceed t".into()));
    }
    let mut x = Mat::zeros(1, n);
    let mut y = vec![0.0; n];
    for j in 0..n {
        let mut rng = SplitMix64::derive(seed, j as u64);
        let log_s = strike.ln() + (rate - 0.5 * vol * vol) * t + vol * t.sqrt() * rng.normal();
        let s = log_s.exp();
        let log_st = log_s + (rate - 0.5 * vol * vol) * tau + vol * tau.sqrt() * rng.normal();
        let payoff = (log_st.exp() - strike).max(0.0);
        x.set(0, j, s);
        y[j] = (-rate * tau).exp() * payoff;
    }
    ProblemData::new(x, y)
}

/// Parameters of the M-asset basket experiment.
#[derive(Clone, Debug)]
pub struct BasketParams {
    pub assets: usize,
    pub weights: Vec<f64>,
    pub vols: Vec<f64>,
    pub corr: f64,
    pub strike: f64,
    pub rate: f64,
    pub t: f64,
    pub maturity: f64,
    /// Spots are sampled uniformly on `(0, spot_max)^M`.
    pub spot_max: f64,
}

impl BasketParams {
    /// The experiment defaults: equal weights, staggered volatilities,
    /// spots on `(0, 5K)^M`.
    pub fn standard(assets: usize) -> Self {
        let strike = 10.0;
        BasketParams {
            assets,
            weights: vec![1.0 / assets as f64; assets],
            vols: (0..assets).map(|i| 0.2 + 0.025 * i as f64).collect(),
            corr: 0.1,
            strike,
            rate: 0.0,
            t: 0.0,
            maturity: 0.5,
            spot_max: 5.0 * strike,
        }
    }

    fn validate(&self) -> Result<()> {
        let m = self.assets;
        if self.weights.len() != m || self.vols.len() != m {
            return Err(Error::DimensionMismatch {
                what: "basket params",
                expected: m,
                got: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Schema("weights must be nonnegative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Schema(format!("weights must sum to 1, got {sum}")));
        }
        if self.maturity <= self.t {
            return Err(Error::Schema("maturity must exceed t".into()));
        }
        Ok(())
    }

    /// Cholesky factor of the log-return covariance
    /// `(T - t) [corr sigma_i sigma_j]` (unit diagonal correlation).
    fn chol_cov(&self) -> Result<Vec<f64>> {
        let m = self.assets;
        let tau = self.maturity - self.t;
        let mut cov = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let rho = if i == j { 1.0 } else { self.corr };
                cov[i * m + j] = tau * rho * self.vols[i] * self.vols[j];
            }
        }
        crate::linalg::cholesky_in_place(&mut cov, m)
            .map_err(|_| Error::Factorization("basket covariance (is the correlation valid?)"))?;
        // zero the strict upper triangle for a clean factor
        for i in 0..m {
            for j in i + 1..m {
                cov[i * m + j] = 0.0;
            }
        }
        Ok(cov)
    }
}

fn terminal_prices(
    params: &BasketParams,
    chol: &[f64],
    spot: &[f64],
    rng: &mut SplitMix64,
    flip: bool,
) -> Vec<f64> {
    let m = params.assets;
    let tau = params.maturity - params.t;
    let mut g: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    if flip {
        g.iter_mut().for_each(|v| *v = -*v);
    }
    (0..m)
        .map(|i| {
            let mut z = 0.0;
            for j in 0..=i {
                z += chol[i * m + j] * g[j];
            }
            let drift = (params.rate - 0.5 * params.vols[i] * params.vols[i]) * tau;
            (spot[i].ln() + drift + z).exp()
        })
        .collect()
}

fn basket_payoff(params: &BasketParams, terminal: &[f64]) -> f64 {
    let basket: f64 =
        params.weights.iter().zip(terminal).map(|(w, s)| w * s).sum();
    (basket - params.strike).max(0.0)
}

/// Samples `(spot vector, discounted payoff)` observations: spots uniform
/// on `(0, spot_max)^M`, one correlated terminal draw per observation.
pub fn sample_basket_data(params: &BasketParams, n: usize, seed: u64) -> Result<ProblemData> {
    params.validate()?;
    let m = params.assets;
    let chol = params.chol_cov()?;
    let tau = params.maturity - params.t;
    let disc = (-params.rate * tau).exp();
    let mut x = Mat::zeros(m, n);
    let mut y = vec![0.0; n];
    for j in 0..n {
        let mut rng = SplitMix64::derive(seed, j as u64);
        let spot: Vec<f64> = (0..m).map(|_| rng.uniform(0.0, params.spot_max)).collect();
        let terminal = terminal_prices(params, &chol, &spot, &mut rng, false);
        for a in 0..m {
            x.set(a, j, spot[a]);
        }
        y[j] = disc * basket_payoff(params, &terminal);
    }
    ProblemData::new(x, y)
}

/// Monte Carlo estimate of the basket value at a spot vector: mean and
/// standard error over `num_paths` draws. Paths are generated in fixed
/// chunks with per-chunk derived seeds, so the estimate is deterministic
/// for a given seed regardless of thread count. With `antithetic` each
/// draw is paired with its sign-flipped copy.
pub fn mc_basket_value(
    spot: &[f64],
    params: &BasketParams,
    num_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<(f64, f64)> {
    params.validate()?;
    if spot.len() != params.assets {
        return Err(Error::DimensionMismatch {
            what: "spot vector",
            expected: params.assets,
            got: spot.len(),
        });
    }
    let chol = params.chol_cov()?;
    let tau = params.maturity - params.t;
    let disc = (-params.rate * tau).exp();
    const CHUNK: usize = 4096;
    let n_chunks = num_paths.div_ceil(CHUNK);
    let mut partials = vec![(0.0f64, 0.0f64); n_chunks];
    crate::par::for_each_block_mut(&mut partials, 1, |c, slot| {
        let lo = c * CHUNK;
        let hi = ((c + 1) * CHUNK).min(num_paths);
        let mut rng = SplitMix64::derive(seed, c as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut k = lo;
        while k < hi {
            let value = if antithetic {
                let mut pair_rng = rng.clone();
                let t1 = terminal_prices(params, &chol, spot, &mut rng, false);
                let t2 = terminal_prices(params, &chol, spot, &mut pair_rng, true);
                0.5 * disc * (basket_payoff(params, &t1) + basket_payoff(params, &t2))
            } else {
                let t1 = terminal_prices(params, &chol, spot, &mut rng, false);
                disc * basket_payoff(params, &t1)
            };
            sum += value;
            sum_sq += value * value;
            k += 1;
        }
        slot[0] = (sum, sum_sq);
    });
    let total: f64 = partials.iter().map(|(s, _)| s).sum();
    let total_sq: f64 = partials.iter().map(|(_, s2)| s2).sum();
    let mean = total / num_paths as f64;
    let var = (total_sq / num_paths as f64 - mean * mean).max(0.0);
    let stderr = (var / num_paths as f64).sqrt();
    Ok((mean, stderr))
}

/// Gradient box `0 <= grad V <= w` implied by the basket weights.
pub fn basket_gradient_bounds(weights: &[f64]) -> ConstraintSet {
    ConstraintSet::Box { lower: vec![0.0; weights.len()], upper: weights.to_vec() }
}
