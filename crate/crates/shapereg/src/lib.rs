//! Shape-constrained convex regression.
//!
//! Fits a convex function to scattered data by least squares, with optional
//! shape constraints on its gradients: componentwise monotonicity, gradient
//! boxes, and Lipschitz balls (including data-driven per-point radii). The
//! estimator is the max-affine interpolant of the fitted values and
//! gradients; the underlying constrained QP is solved either by a symmetric
//! Gauss-Seidel ADMM or by a proximal augmented Lagrangian method with
//! semismooth Newton inner solves.
//!
//! ```
//! use shapereg::prelude::*;
//!
//! // noisy samples of |x| on a line
//! let x = Mat::from_fn(1, 5, |_, j| j as f64 - 2.0);
//! let y: Vec<f64> = (0..5).map(|j| (j as f64 - 2.0).abs()).collect();
//! let data = ProblemData::new(x, y).unwrap();
//! let (model, report) = palm_fit(
//!     &data,
//!     &ConstraintSet::Free,
//!     &PalmConfig::default(),
//!     &SsnConfig::default(),
//!     None,
//!     None,
//! )
//! .unwrap();
//! assert!(report.converged());
//! let value = predict(&model, &[0.5]).unwrap();
//! assert!(value >= -1e-6);
//! ```

pub mod constraints;
pub mod data;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod lipschitz;
pub mod operators;
mod par;
pub mod pricing;
pub mod problem;
pub mod rng;
pub mod solver;

pub use crate::error::{Error, Result};

/// Sets the global worker-thread count for data-parallel loops
/// (0 = automatic). A no-op without the `parallel` feature; calling it
/// twice keeps the first pool.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Convenient re-exports of the main entry points.
pub mod prelude {
    pub use crate::constraints::{
        parse_constraint, ConstraintSet, ConstraintSpec, QNorm,
    };
    pub use crate::data::{
        generate_synthetic, load_csv, standardize, CsvSchema, StandardizationRecord, TestFunction,
    };
    pub use crate::error::{Error, Result};
    pub use crate::estimator::{
        moreau_smooth, predict, predict_batch, read_model_file, subgradient, write_model_file,
        ModelMeta,
    };
    pub use crate::linalg::Mat;
    pub use crate::lipschitz::{build_perpoint_problem, estimate_lipschitz};
    pub use crate::operators::OperatorContext;
    pub use crate::pricing::{
        bs_call_price, mc_basket_value, sample_basket_data, sample_call_data, BasketParams,
        CallParams,
    };
    pub use crate::problem::{
        dual_objective, kkt_residuals, primal_objective, DualState, FittedModel, PrimalState,
        ProblemData, WarmStart,
    };
    pub use crate::solver::admm::{admm_fit, AdmmConfig};
    pub use crate::solver::palm::{palm_fit, PalmConfig, SsnConfig};
    pub use crate::solver::{CsvTrace, SolverReport, TerminationReason, TraceSink};
}
