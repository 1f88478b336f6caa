//! Shared solver plumbing: reports, termination reasons, and the
//! per-iteration trace sink.

pub mod admm;
pub mod palm;

use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationReason {
    Converged,
    MaxIterations,
    TimeLimit,
}

impl TerminationReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminationReason::Converged => "converged",
            TerminationReason::MaxIterations => "max_iterations",
            TerminationReason::TimeLimit => "time_limit",
        }
    }
}

/// Outcome summary of a fit.
#[derive(Clone, Debug)]
pub struct SolverReport {
    pub solver: &'static str,
    /// Outer iterations (ADMM sweeps or ALM outer steps).
    pub iterations: usize,
    /// Total inner Newton iterations (zero for ADMM).
    pub inner_iterations: usize,
    /// Total conjugate-gradient iterations across Newton solves.
    pub pcg_iterations: usize,
    pub r_p: f64,
    pub r_d: f64,
    pub r_c: f64,
    /// `1/2 ||theta - Y||^2` at the returned iterate.
    pub objective: f64,
    pub elapsed_secs: f64,
    pub termination: TerminationReason,
    pub sigma_final: f64,
    /// Gradient-norm history of each inner Newton solve (ALM only).
    pub ssn_grad_norms: Vec<Vec<f64>>,
    /// Whether each inner solve engaged the damped fallback (ALM only).
    pub ssn_damped: Vec<bool>,
}

impl SolverReport {
    pub fn r_kkt(&self) -> f64 {
        self.r_p.max(self.r_d).max(self.r_c)
    }

    /// Iteration summary in the `outer(inner)` format.
    pub fn iters_fmt(&self) -> String {
        if self.inner_iterations > 0 {
            format!("{}({})", self.iterations, self.inner_iterations)
        } else {
            format!("{}", self.iterations)
        }
    }

    pub fn converged(&self) -> bool {
        self.termination == TerminationReason::Converged
    }
}

/// One trace row; fields not meaningful for a solver are zero.
#[derive(Clone, Copy, Debug)]
pub struct TraceRecord {
    pub iter: usize,
    pub inner: usize,
    pub pcg: usize,
    pub grad_norm: f64,
    pub r_p: f64,
    pub r_d: f64,
    pub r_c: f64,
    pub objective: f64,
    pub sigma: f64,
    pub elapsed_secs: f64,
}

pub trait TraceSink {
    fn record(&mut self, rec: &TraceRecord);
}

/// CSV trace writer with a fixed header.
pub struct CsvTrace<W: Write> {
    out: W,
    wrote_header: bool,
}

impl<W: Write> CsvTrace<W> {
    pub fn new(out: W) -> Self {
        CsvTrace { out, wrote_header: false }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TraceSink for CsvTrace<W> {
    fn record(&mut self, rec: &TraceRecord) {
        if !self.wrote_header {
            let _ = writeln!(self.out, "iter,inner,pcg,grad_norm,r_p,r_d,r_c,objective,sigma,elapsed_secs");
            self.wrote_header = true;
        }
        let _ = writeln!(
            self.out,
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:.6}",
            rec.iter,
            rec.inner,
            rec.pcg,
            rec.grad_norm,
            rec.r_p,
            rec.r_d,
            rec.r_c,
            rec.objective,
            rec.sigma,
            rec.elapsed_secs
        );
    }
}
