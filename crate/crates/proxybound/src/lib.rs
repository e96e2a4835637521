//! Certified lower and upper bounds on interventional probabilities and
//! average causal effects when the confounder-to-proxy transition matrix is
//! only known up to elementwise bounds.
//!
//! The input is a joint distribution over an outcome, a proxy `W`, and a
//! treatment `X`, together with two matrices that box the unknown
//! conditional `P(W|U)` of the proxy given a latent confounder `U`.  Every
//! transition matrix inside the box induces latent marginals compatible with
//! the data, and the interventional probability `f(Y_x = y)` ranges over a
//! set of values as the latent marginals vary.  [`engine::run`] computes a
//! certified lower or upper bound on that set by branch and bound over
//! simplices: each ratio term of the objective is lifted with a reciprocal
//! variable, split into a difference of convex polynomials, and relaxed to a
//! linear program on each simplex cell.  The gap of the relaxation shrinks
//! with the cell diameter at a known rate, which yields the error
//! certificate reported next to the bound.
//!
//! [`ace::bound_ace`] extends the same machinery to the average causal
//! effect over a numeric outcome, [`tightness`] searches for a joint
//! distribution witnessing that a computed bound is attained, and
//! [`model::identify_exact`] provides the closed-form baseline for the
//! point-identified case.

pub mod ace;
pub mod dc;
pub mod engine;
pub mod geometry;
pub(crate) mod linalg;
pub mod lp;
pub mod model;
pub mod tightness;

#[cfg(test)]
pub(crate) mod testutil;

/// Numeric policy shared by every module.
///
/// Tolerances live here once instead of being scattered: ingest validation
/// is strict because inputs are exact JSON numbers, feasibility checks are
/// looser because they sit downstream of LP floating-point arithmetic.
pub mod consts {
    /// Mass and marginal consistency checks at load time.
    pub const TOL_INGEST: f64 = 1e-12;
    /// Constraint-row satisfaction for any point claimed feasible.
    pub const TOL_FEASIBLE: f64 = 1e-9;
    /// Default lower bound on every denominator coordinate `psi_i`.
    pub const DEFAULT_PSI_MIN: f64 = 1e-2;
    /// Condition-number cap above which exact identification refuses.
    pub const DEFAULT_COND_CAP: f64 = 1e12;
    /// Default target for the certified error of a bound run.
    pub const DEFAULT_DELTA: f64 = 1e-3;
    /// Default iteration cap for a bound run.
    pub const DEFAULT_MAX_ITER: u64 = 1000;
    /// Default restart count for the tightness witness search.
    pub const DEFAULT_RESTARTS: u32 = 32;
}
