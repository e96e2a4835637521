//! Average-causal-effect bounding: one latent block per treatment value,
//! outcome moments in place of event masses, and a signed weight per block
//! steering which side of the convex split linearizes as tangent or secant.

use crate::engine::{self, BoundResult, EngineError, EngineOptions, Program};
use crate::model::{
    build_ir_blocks, IrBlock, LinearConstraintSystem, ModelError, ProblemSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum AceError {
    #[error("effect bounding needs the outcome values (y_values) in the instance")]
    MissingOutcomeValues,
    #[error(
        "no default weights for {0} treatment values: provide weights_pi \
         (the binary default is the sign convention -1, +1)"
    )]
    MissingWeights(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// The assembled effect-bounding problem: per-treatment constraint
/// systems over `(moment, denominator, complement)` blocks, the observed
/// moment vectors, and the signed weights.
#[derive(Debug)]
pub struct AceProgram {
    pub d: usize,
    /// Signed weight per treatment value.
    pub weights: Vec<f64>,
    /// Per-treatment compatibility systems, block order moment/psi/omega.
    pub systems: Vec<LinearConstraintSystem>,
    /// Per-treatment observed moment vectors over the proxy,
    /// `sum_y (y - y_shift) f(y, w, X=x)`.
    pub moments: Vec<Vec<f64>>,
    /// Per-treatment affine part of the weighted objective.
    pub offsets: Vec<f64>,
    /// Outcome shift applied so every moment is nonnegative.
    pub y_shift: f64,
}

/// Weights to use for an instance: the embedded `weights_pi` when
/// present, else the sign convention `(-1, +1)` for binary treatment.
pub fn resolve_weights(spec: &ProblemSpec) -> Result<Vec<f64>, AceError> {
    if let Some(pi) = &spec.weights_pi {
        return Ok(pi.clone());
    }
    if spec.n_x() == 2 {
        Ok(vec![-1.0, 1.0])
    } else {
        Err(AceError::MissingWeights(spec.n_x()))
    }
}

/// Per-treatment ingredients shared by the program view and the engine.
fn block_parts(
    spec: &ProblemSpec,
    pi: &[f64],
) -> Result<(Vec<(LinearConstraintSystem, f64, f64)>, Vec<Vec<f64>>, Vec<f64>, f64), AceError> {
    let Some(y_values) = &spec.y_values else {
        return Err(AceError::MissingOutcomeValues);
    };
    spec.validate()?;
    if pi.len() != spec.n_x() {
        return Err(AceError::Model(ModelError::ValidationError(format!(
            "{} weights for {} treatment values",
            pi.len(),
            spec.n_x()
        ))));
    }
    let d = spec.d();
    let n_w = spec.n_w();
    // Shift the outcome scale so the moment block is nonnegative; the
    // shifted-away mass reappears as a constant because the latent
    // denominator and complement blocks sum to one.
    let y_shift = y_values.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);

    let mut sys_parts = Vec::with_capacity(spec.n_x());
    let mut moments = Vec::with_capacity(spec.n_x());
    let mut offsets = Vec::with_capacity(spec.n_x());
    for x in 0..spec.n_x() {
        let f_x = spec.f_x_at(x);
        if spec.psi_min > f_x / d as f64 + crate::consts::TOL_INGEST {
            return Err(AceError::Model(ModelError::ValidationError(format!(
                "psi_min = {} exceeds f(X={x})/d = {}; no compatible split exists",
                spec.psi_min,
                f_x / d as f64
            ))));
        }
        let moment: Vec<f64> = (0..n_w)
            .map(|w| {
                y_values
                    .iter()
                    .enumerate()
                    .map(|(y, &v)| (v - y_shift) * spec.observed.p[y][w][x])
                    .sum()
            })
            .collect();
        let moment_total: f64 = moment.iter().sum();
        let mut complement = vec![0.0; n_w];
        for other in (0..spec.n_x()).filter(|&o| o != x) {
            for (w, t) in spec.f_w_at(other).into_iter().enumerate() {
                complement[w] += t;
            }
        }
        let blocks = [
            IrBlock {
                name: "moment",
                target: moment.clone(),
                total: moment_total,
                lo: 0.0,
                hi: moment_total,
            },
            IrBlock {
                name: "psi",
                target: spec.f_w_at(x),
                total: f_x,
                lo: spec.psi_min,
                hi: f_x,
            },
            IrBlock {
                name: "omega",
                target: complement,
                total: 1.0 - f_x,
                lo: 0.0,
                hi: 1.0 - f_x,
            },
        ];
        let ir = build_ir_blocks(&spec.transition_bounds, &blocks);
        sys_parts.push((ir, moment_total, f_x));
        moments.push(moment);
        offsets.push(moment_total + y_shift);
    }
    Ok((sys_parts, moments, offsets, y_shift))
}

/// Assemble the effect-bounding problem for inspection or custom runs.
pub fn build_ace_program(spec: &ProblemSpec, pi: &[f64]) -> Result<AceProgram, AceError> {
    let (parts, moments, offsets, y_shift) = block_parts(spec, pi)?;
    Ok(AceProgram {
        d: spec.d(),
        weights: pi.to_vec(),
        systems: parts.into_iter().map(|(ir, _, _)| ir).collect(),
        moments,
        offsets,
        y_shift,
    })
}

fn prepare(spec: &ProblemSpec, pi: &[f64]) -> Result<Program, AceError> {
    let (parts, _, offsets, _) = block_parts(spec, pi)?;
    let offset: f64 = pi.iter().zip(&offsets).map(|(w, o)| w * o).sum();
    let blocks = parts
        .into_iter()
        .zip(pi)
        .map(|((ir, moment_total, f_x), &weight)| engine::BlockSpec {
            ir,
            numerator_total: moment_total,
            f_x,
            weight,
        })
        .collect();
    Ok(engine::assemble_program(blocks, spec.d(), spec.psi_min, offset)?)
}

/// Certified bound on the weighted average effect `sum_x pi(x) E(Y_x)`.
pub fn bound_ace(
    spec: &ProblemSpec,
    pi: &[f64],
    opts: &EngineOptions,
) -> Result<BoundResult, AceError> {
    let program = prepare(spec, pi)?;
    Ok(engine::run_program(&program, opts)?)
}

/// Convenience wrapper resolving the weights from the instance.
pub fn bound_ace_default(
    spec: &ProblemSpec,
    opts: &EngineOptions,
) -> Result<BoundResult, AceError> {
    let pi = resolve_weights(spec)?;
    bound_ace(spec, &pi, opts)
}
