//! Branch-and-bound over nested simplices: per-cell linear relaxation,
//! min-bound node selection, longest-edge bisection, a geometric error
//! certificate from the depth of the selected chain, incumbent refinement
//! by pairwise column mixing, and a grid oracle for cross-checking.

use std::io::{self, Write};

use crate::consts::TOL_FEASIBLE;
use crate::dc::{self, Component, Interpolator};
use crate::geometry::{self, GeometryError, Simplex};
use crate::linalg::dot;
use crate::lp::{self, Direction, LpProblem, LpStatus};
use crate::model::{
    build_ir_phi, LinearConstraintSystem, ModelError, PhiVector, ProblemSpec, Sense,
};

/// Incumbent-based pruning margin: a node survives unless its relaxation
/// bound exceeds the incumbent by more than this.
const PRUNE_MARGIN: f64 = 1e-12;
/// Minimum strict improvement for a local-search move to be kept.
const IMPROVE_MIN: f64 = 1e-12;
/// Line-search resolution of the mixing parameter.
const ALPHA_STEPS: usize = 24;
/// Cap on local-search sweeps; termination normally happens much earlier.
const MAX_SWEEPS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundDirection {
    Lower,
    Upper,
}

impl BoundDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundDirection::Lower => "lower",
            BoundDirection::Upper => "upper",
        }
    }

    /// Multiplying bounds by this sign turns both directions into
    /// "smaller key is better".
    fn sign(self) -> f64 {
        match self {
            BoundDirection::Lower => 1.0,
            BoundDirection::Upper => -1.0,
        }
    }

    /// Bound of an infeasible cell: never selectable, always prunable.
    fn infeasible_bound(self) -> f64 {
        match self {
            BoundDirection::Lower => f64::INFINITY,
            BoundDirection::Upper => f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeStatus {
    Open,
    Split,
    PrunedInfeasible,
    PrunedByIncumbent,
}

/// One cell of the subdivision with its relaxation data.
#[derive(Clone, Debug)]
pub struct BnBNode {
    pub simplex: Simplex,
    /// Relaxation bound of the cell's restricted optimum, clamped against
    /// the parent's so the lineage tightens monotonically.
    pub bound: f64,
    /// Lifted argmin of the cell relaxation, when the LP was feasible.
    pub argmin: Option<Vec<f64>>,
    pub status: NodeStatus,
}

/// Best feasible solution found so far, per latent block.
#[derive(Clone, Debug)]
pub struct Incumbent {
    pub value: f64,
    pub blocks: Vec<PhiVector>,
}

#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub iter: u64,
    pub selected_node_id: u64,
    pub node_bound: f64,
    pub best_bound: f64,
    pub incumbent: f64,
    pub l_n: u32,
    pub geometric_factor: f64,
    pub certified_error: f64,
    pub open_nodes: usize,
}

#[derive(Clone, Debug)]
pub struct BoundResult {
    pub direction: BoundDirection,
    /// Best certified bound: the running best over selected nodes' bounds.
    pub bound: f64,
    pub geometric_factor: f64,
    pub certified_error: f64,
    pub iterations: u64,
    pub l_n: u32,
    pub incumbent: Option<Incumbent>,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug)]
pub struct EngineOptions {
    pub direction: BoundDirection,
    pub tol_delta: f64,
    pub max_iter: u64,
    pub prune: bool,
    pub threads: usize,
    /// Stop on the raw geometric factor instead of the A-scaled error.
    pub raw_factor_stop: bool,
}

impl Default for EngineOptions {
    fn default() -> EngineOptions {
        EngineOptions {
            direction: BoundDirection::Lower,
            tol_delta: crate::consts::DEFAULT_DELTA,
            max_iter: crate::consts::DEFAULT_MAX_ITER,
            prune: true,
            threads: 1,
            raw_factor_stop: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("empty feasible region: the compatibility constraints admit no solution")]
    EmptyFeasibleRegion,
    #[error("iteration budget exhausted before the certificate reached the tolerance")]
    MaxIterReached(Box<BoundResult>),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("local search needs a feasible start: {0}")]
    InfeasibleStart(String),
    #[error("the grid oracle supports two latent states, got d = {0}")]
    UnsupportedDimension(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<GeometryError> for EngineError {
    fn from(e: GeometryError) -> EngineError {
        match e {
            GeometryError::EmptyFeasibleRegion => EngineError::EmptyFeasibleRegion,
            other => EngineError::Numerical(other.to_string()),
        }
    }
}

impl From<lp::LpError> for EngineError {
    fn from(e: lp::LpError) -> EngineError {
        EngineError::Numerical(e.to_string())
    }
}

/// Depth-based convergence certificate: after `l_n` nested bisections in
/// an `ambient_dim`-dimensional cell, diameters shrink by `sqrt(3)/2` per
/// full round of `ambient_dim` splits, and the relaxation gap by the
/// square of that. Returns `(geometric factor, certified absolute error)`.
pub fn global_error(l_n: u32, ambient_dim: usize, a_const: f64, dia0: f64) -> (f64, f64) {
    let rounds = (l_n as usize / ambient_dim) as i32;
    let factor = (3f64.sqrt() / 2.0).powi(rounds);
    let certified = a_const * 0.75f64.powi(rounds) * dia0 * dia0;
    (factor, certified)
}

/// One latent block of a prepared program.
pub(crate) struct BlockContext {
    /// Compatibility polyhedron on this block's `(theta, psi, omega)`.
    pub ir: LinearConstraintSystem,
    pub weight: f64,
}

/// Ingredients for one block, before enclosure.
pub(crate) struct BlockSpec {
    pub ir: LinearConstraintSystem,
    /// Total mass of the numerator block; enters the sum cap.
    pub numerator_total: f64,
    /// Total mass of the denominator block.
    pub f_x: f64,
    pub weight: f64,
}

/// A sum-of-ratios program lifted to the concatenated reciprocal space,
/// with its root simplex and certificate constant precomputed.
pub(crate) struct Program {
    pub d: usize,
    pub n_blocks: usize,
    pub offset: f64,
    /// Node-independent linear rows and boxes over the lifted vector.
    pub sys: LinearConstraintSystem,
    pub blocks: Vec<BlockContext>,
    pub root: Simplex,
    pub a_const: f64,
    pub dia0: f64,
}

/// Curvature constant of the error certificate, evaluated at the upper
/// corner of the root's bounding box. Every term is a polynomial with
/// nonnegative coefficients, so the corner dominates the whole box.
pub(crate) fn compute_a(root: &Simplex, weights: &[f64], d: usize, psi_min: f64) -> f64 {
    let m = root.dim();
    let mut corner = vec![f64::NEG_INFINITY; m];
    for v in &root.vertices {
        for (c, &x) in corner.iter_mut().zip(v) {
            *c = c.max(x);
        }
    }
    let mut g2 = 0.0;
    let mut h1_2 = 0.0;
    let mut h2_2 = 0.0;
    for (b, &w) in weights.iter().enumerate() {
        let slice = &corner[4 * d * b..4 * d * (b + 1)];
        let g = dc::grad_norm_product(slice, d);
        let h1 = dc::hess_frobenius(Component::C1, slice, d);
        let h2 = dc::hess_frobenius(Component::C2, slice, d);
        g2 += w * w * g * g;
        h1_2 += w * w * h1 * h1;
        h2_2 += w * w * h2 * h2;
    }
    let d_eff = (d * weights.len()) as f64;
    let grad_scale = 2.0 * (2f64.sqrt() + 1.0) * d_eff.sqrt() / psi_min;
    grad_scale * g2.sqrt() + h1_2.sqrt() + 0.5 * h2_2.sqrt()
}

/// Build the lifted program: per-block coordinate enclosures, one root
/// simplex over the concatenated space, the embedded constraint rows, and
/// the certificate constant.
pub(crate) fn assemble_program(
    block_specs: Vec<BlockSpec>,
    d: usize,
    psi_min: f64,
    offset: f64,
) -> Result<Program, EngineError> {
    let n_blocks = block_specs.len();
    assert!(n_blocks >= 1);
    let m = 4 * d * n_blocks;
    let mut sys = LinearConstraintSystem::new(m);
    let mut gamma_low = Vec::with_capacity(m);
    let mut alpha_total = 0.0;
    let mut blocks = Vec::with_capacity(n_blocks);

    for (b, bs) in block_specs.into_iter().enumerate() {
        assert_eq!(bs.ir.n_vars, 3 * d);
        let base = 4 * d * b;
        let enc = geometry::enclose_block(&bs.ir, d, bs.numerator_total, bs.f_x, psi_min)?;
        alpha_total += enc.alpha;
        gamma_low.extend_from_slice(&enc.gamma_low);
        for k in 0..4 * d {
            let lo = enc.gamma_low[k];
            sys.set_box(base + k, lo, enc.gamma_high[k].max(lo));
        }
        // Embed the phi-space rows: phi coordinate j lives at lifted
        // column base + d + j (the reciprocal block sits in front).
        for (r, row) in bs.ir.rows.iter().enumerate() {
            let mut wide = vec![0.0; m];
            wide[base + d..base + 4 * d].copy_from_slice(row);
            let label = if n_blocks == 1 {
                bs.ir.labels[r].clone()
            } else {
                format!("b{b}:{}", bs.ir.labels[r])
            };
            sys.push_row(wide, bs.ir.senses[r], bs.ir.rhs[r], label);
        }
        blocks.push(BlockContext { ir: bs.ir, weight: bs.weight });
    }

    let (root, _span) = geometry::span_simplex(&gamma_low, alpha_total);
    let weights: Vec<f64> = blocks.iter().map(|b| b.weight).collect();
    let a_const = compute_a(&root, &weights, d, psi_min);
    let dia0 = root.diameter;
    Ok(Program { d, n_blocks, offset, sys, blocks, root, a_const, dia0 })
}

/// Event-mode program: one block, unit weight, constant term equal to the
/// target event mass at the intervened treatment.
pub(crate) fn prepare_event(spec: &ProblemSpec) -> Result<Program, EngineError> {
    spec.validate()?;
    let ir = build_ir_phi(spec);
    let block = BlockSpec { ir, numerator_total: spec.f_yx(), f_x: spec.f_x(), weight: 1.0 };
    assemble_program(vec![block], spec.d(), spec.psi_min, spec.f_yx())
}

/// Scatter a block-local affine pair `(coeffs over 4d, offset)` into the
/// full lifted width.
fn scatter(coeffs: &[f64], base: usize, m: usize) -> Vec<f64> {
    let mut wide = vec![0.0; m];
    wide[base..base + coeffs.len()].copy_from_slice(coeffs);
    wide
}

/// Tangent plane of one component of one block, anchored at the cell
/// barycenter, expressed over the full lifted width.
fn block_tangent(
    c: Component,
    anchor: &[f64],
    base: usize,
    d: usize,
    m: usize,
) -> (Vec<f64>, f64) {
    let slice = &anchor[base..base + 4 * d];
    let grad = dc::gradient(c, slice, d);
    let offset = dc::eval_component(c, slice, d) - dot(&grad, slice);
    (scatter(&grad, base, m), offset)
}

/// Secant plane of one component of one block over the cell, via the
/// cell's shared vertex interpolation.
fn block_secant(
    c: Component,
    interp: &Interpolator,
    s: &Simplex,
    base: usize,
    d: usize,
) -> (Vec<f64>, f64) {
    let values: Vec<f64> =
        s.vertices.iter().map(|v| dc::eval_component(c, &v[base..base + 4 * d], d)).collect();
    let f = interp.interpolate(&values);
    (f.coeffs, f.offset)
}

/// Relaxation bound of one cell: minimize (or maximize) the linearized
/// objective over the embedded constraint rows, the cell in barycentric
/// coordinates, and the linearized reciprocal couplings. Infeasible cells
/// bound to the never-selected extreme. The result is clamped against the
/// parent's bound so lineages tighten monotonically.
pub(crate) fn bound_node(
    program: &Program,
    s: &Simplex,
    parent: Option<f64>,
    dir: BoundDirection,
) -> Result<(f64, Option<Vec<f64>>), EngineError> {
    let d = program.d;
    let m = program.sys.n_vars;
    let k = s.vertices.len();
    let n_cols = m + k;

    let interp = Interpolator::new(s).map_err(|e| {
        EngineError::Numerical(format!("node {}: {e}", s.id))
    })?;
    let anchor = s.barycenter();

    let mut objective = vec![0.0; n_cols];
    let mut obj_offset = program.offset;
    for (b, ctx) in program.blocks.iter().enumerate() {
        let w = ctx.weight;
        if w == 0.0 {
            continue;
        }
        let base = 4 * d * b;
        // Under-estimate the block's product sum when its signed weight
        // keeps the direction's sense; otherwise over-estimate it.
        let under = (dir == BoundDirection::Lower) == (w > 0.0);
        let (first, second) = if under {
            (
                block_tangent(Component::C1, &anchor, base, d, m),
                block_secant(Component::C2, &interp, s, base, d),
            )
        } else {
            (
                block_secant(Component::C1, &interp, s, base, d),
                block_tangent(Component::C2, &anchor, base, d, m),
            )
        };
        for j in 0..m {
            objective[j] += w * (first.0[j] - second.0[j]);
        }
        obj_offset += w * (first.1 - second.1);
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut senses: Vec<Sense> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for (r, row) in program.sys.rows.iter().enumerate() {
        let mut wide = vec![0.0; n_cols];
        wide[..m].copy_from_slice(row);
        rows.push(wide);
        senses.push(program.sys.senses[r]);
        rhs.push(program.sys.rhs[r]);
    }
    // Cell membership: gamma = V lambda, sum lambda = 1, lambda in [0, 1].
    for j in 0..m {
        let mut row = vec![0.0; n_cols];
        row[j] = 1.0;
        for (kk, v) in s.vertices.iter().enumerate() {
            row[m + kk] = -v[j];
        }
        rows.push(row);
        senses.push(Sense::Eq);
        rhs.push(0.0);
    }
    let mut sum_row = vec![0.0; n_cols];
    sum_row[m..].fill(1.0);
    rows.push(sum_row);
    senses.push(Sense::Eq);
    rhs.push(1.0);
    // Linearized reciprocal couplings, sandwiching psi_knockoff*psi = 1.
    for (b, _) in program.blocks.iter().enumerate() {
        let base = 4 * d * b;
        for i in 0..d {
            let t1 = block_tangent(Component::D1(i), &anchor, base, d, m);
            let s1 = block_secant(Component::D1(i), &interp, s, base, d);
            let t2 = block_tangent(Component::D2(i), &anchor, base, d, m);
            let s2 = block_secant(Component::D2(i), &interp, s, base, d);
            let mut row_a = vec![0.0; n_cols];
            let mut row_b = vec![0.0; n_cols];
            for j in 0..m {
                row_a[j] = t1.0[j] - s2.0[j];
                row_b[j] = s1.0[j] - t2.0[j];
            }
            rows.push(row_a);
            senses.push(Sense::Le);
            rhs.push(1.0 - t1.1 + s2.1);
            rows.push(row_b);
            senses.push(Sense::Ge);
            rhs.push(1.0 - s1.1 + t2.1);
        }
    }

    let mut var_lower = program.sys.var_lower.clone();
    let mut var_upper = program.sys.var_upper.clone();
    var_lower.extend(std::iter::repeat(0.0).take(k));
    var_upper.extend(std::iter::repeat(1.0).take(k));

    let lp_dir = match dir {
        BoundDirection::Lower => Direction::Minimize,
        BoundDirection::Upper => Direction::Maximize,
    };
    let problem = LpProblem::new(lp_dir, objective, rows, senses, rhs, var_lower, var_upper);
    let sol = lp::solve(&problem)
        .map_err(|e| EngineError::Numerical(format!("node {}: {e}", s.id)))?;
    match sol.status {
        LpStatus::Optimal => {
            let own = sol.value + obj_offset;
            let bound = match (parent, dir) {
                (Some(p), BoundDirection::Lower) => own.max(p),
                (Some(p), BoundDirection::Upper) => own.min(p),
                (None, _) => own,
            };
            Ok((bound, Some(sol.point[..m].to_vec())))
        }
        LpStatus::Infeasible => Ok((dir.infeasible_bound(), None)),
        LpStatus::Unbounded => Err(EngineError::Numerical(format!(
            "node {}: boxed relaxation reported unbounded",
            s.id
        ))),
    }
}

/// Ratio sum `sum_i theta_i omega_i / psi_i` on a flat `(theta, psi,
/// omega)` block.
fn ratio_sum(flat: &[f64], d: usize) -> f64 {
    (0..d).map(|i| flat[i] * flat[2 * d + i] / flat[d + i]).sum()
}

/// Recombine latent columns `i` and `j` with retention `alpha`: each of
/// the three rows mixes as `i' = alpha i + (1-alpha) j`, `j' = (1-alpha) i
/// + alpha j`, preserving pair sums. `alpha = 1` is the identity, `alpha =
/// 0` swaps the columns, and values outside `[0, 1]` extrapolate along the
/// same line.
pub(crate) fn mix_columns(flat: &[f64], d: usize, i: usize, j: usize, alpha: f64) -> Vec<f64> {
    let mut out = flat.to_vec();
    for block in 0..3 {
        let (ci, cj) = (block * d + i, block * d + j);
        out[ci] = alpha * flat[ci] + (1.0 - alpha) * flat[cj];
        out[cj] = (1.0 - alpha) * flat[ci] + alpha * flat[cj];
    }
    out
}

/// Largest retention `alpha >= 1` keeping every coordinate of the mixed
/// pair inside its box; the mixed point is affine in `alpha`, so each box
/// face gives a closed-form cap.
fn mixing_alpha_cap(ir: &LinearConstraintSystem, point: &[f64], d: usize, i: usize, j: usize) -> f64 {
    let mut cap = f64::INFINITY;
    for b in 0..3 {
        let (ci, cj) = (b * d + i, b * d + j);
        let m = point[ci] - point[cj];
        for (c, slope) in [(ci, m), (cj, -m)] {
            if slope > 0.0 {
                cap = cap.min(1.0 + (ir.var_upper[c] - point[c]) / slope);
            } else if slope < 0.0 {
                cap = cap.min(1.0 + (ir.var_lower[c] - point[c]) / slope);
            }
        }
    }
    cap.max(1.0)
}

/// Retention values in `(lo, hi)` where the mixing move makes some row or
/// box tight; the mixed point is affine in the retention, so every
/// crossing is closed-form. Searching these alongside the uniform grid
/// lets a move land exactly on the feasible boundary, where ratio
/// extremes live.
fn mixing_breakpoints(
    ir: &LinearConstraintSystem,
    point: &[f64],
    d: usize,
    i: usize,
    j: usize,
    lo: f64,
    hi: f64,
    out: &mut Vec<f64>,
) {
    let mut push = |alpha: f64| {
        if alpha.is_finite() && alpha > lo && alpha < hi {
            out.push(alpha);
        }
    };
    for r in 0..ir.n_rows() {
        let row = &ir.rows[r];
        // Row value is affine in alpha with this slope.
        let slope: f64 = (0..3)
            .map(|b| (point[b * d + i] - point[b * d + j]) * (row[b * d + i] - row[b * d + j]))
            .sum();
        if slope == 0.0 {
            continue;
        }
        let at_one = dot(row, point);
        push(1.0 + (ir.rhs[r] - at_one) / slope);
    }
    for b in 0..3 {
        let (ci, cj) = (b * d + i, b * d + j);
        let m = point[ci] - point[cj];
        if m == 0.0 {
            continue;
        }
        for (c, slope) in [(ci, m), (cj, -m)] {
            for target in [ir.var_lower[c], ir.var_upper[c]] {
                push(1.0 + (target - point[c]) / slope);
            }
        }
    }
}

/// Pairwise column recombination on the ratio sum: line-search the
/// retention over both the interpolation segment `[0, 1]` and the
/// extrapolation ray past 1 (whichever the pair's cross-ratio sign
/// favors holds the improving side), keep only feasible moves with
/// strict improvement, and stop at a pairwise-stationary point.
pub(crate) fn local_search_block(
    ir: &LinearConstraintSystem,
    start: Vec<f64>,
    minimize: bool,
) -> (f64, Vec<f64>) {
    let d = ir.n_vars / 3;
    let mut point = start;
    let mut value = ratio_sum(&point, d);
    let gain = |new: f64, cur: f64| {
        if minimize {
            cur - new
        } else {
            new - cur
        }
    };
    let mut alphas = Vec::new();
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for i in 0..d {
            for j in (i + 1)..d {
                // Extrapolation caps on both sides: past column i (alpha
                // > 1) and past column j (alpha < 0, the reversed pair's
                // ray). Identical columns give unbounded but useless rays.
                let mut hi = mixing_alpha_cap(ir, &point, d, i, j);
                let mut lo = 1.0 - mixing_alpha_cap(ir, &point, d, j, i);
                if !hi.is_finite() {
                    hi = 1.0;
                }
                if !lo.is_finite() {
                    lo = 0.0;
                }
                alphas.clear();
                for step in 0..=ALPHA_STEPS {
                    alphas.push(step as f64 / ALPHA_STEPS as f64);
                }
                if hi > 1.0 {
                    for step in 1..=ALPHA_STEPS {
                        alphas.push(1.0 + (hi - 1.0) * step as f64 / ALPHA_STEPS as f64);
                    }
                }
                if lo < 0.0 {
                    for step in 1..=ALPHA_STEPS {
                        alphas.push(lo * step as f64 / ALPHA_STEPS as f64);
                    }
                }
                mixing_breakpoints(ir, &point, d, i, j, lo, hi, &mut alphas);
                let mut best: Option<(f64, Vec<f64>)> = None;
                for &alpha in &alphas {
                    let cand = mix_columns(&point, d, i, j, alpha);
                    if ir.check_point(&cand, TOL_FEASIBLE).is_err() {
                        continue;
                    }
                    let v = ratio_sum(&cand, d);
                    if gain(v, value) >= IMPROVE_MIN
                        && best.as_ref().map_or(true, |(bv, _)| gain(v, *bv) > 0.0)
                    {
                        best = Some((v, cand));
                    }
                }
                if let Some((v, cand)) = best {
                    value = v;
                    point = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    (value, point)
}

/// Local search on an event-mode instance from a feasible interior point;
/// returns the full objective value (constant event mass included) and
/// the improved point. This is the incumbent side of the bracket: it
/// over-estimates the true minimum, while the relaxation under-estimates.
pub fn local_search(
    spec: &ProblemSpec,
    start: &PhiVector,
) -> Result<(f64, PhiVector), EngineError> {
    let ir = build_ir_phi(spec);
    let flat = start.flat();
    ir.check_point(&flat, TOL_FEASIBLE).map_err(EngineError::InfeasibleStart)?;
    let (value, point) = local_search_block(&ir, flat, true);
    Ok((spec.f_yx() + value, PhiVector::from_flat(&point, spec.d())))
}

/// Try to turn a cell's relaxation argmin into a feasible incumbent: clamp
/// each block into its boxes, verify feasibility, polish by local search,
/// and keep the result if it beats the current incumbent.
fn refresh_incumbent(
    program: &Program,
    gamma: &[f64],
    dir: BoundDirection,
    inc: &mut Option<Incumbent>,
) {
    let d = program.d;
    let mut blocks = Vec::with_capacity(program.n_blocks);
    let mut total = program.offset;
    for (b, ctx) in program.blocks.iter().enumerate() {
        let base = 4 * d * b;
        let mut flat = gamma[base + d..base + 4 * d].to_vec();
        for (j, v) in flat.iter_mut().enumerate() {
            *v = v.clamp(ctx.ir.var_lower[j], ctx.ir.var_upper[j]);
        }
        if ctx.ir.check_point(&flat, TOL_FEASIBLE).is_err() {
            return;
        }
        if ctx.weight == 0.0 {
            blocks.push(PhiVector::from_flat(&flat, d));
            continue;
        }
        let minimize = match dir {
            BoundDirection::Lower => ctx.weight > 0.0,
            BoundDirection::Upper => ctx.weight < 0.0,
        };
        let (value, point) = local_search_block(&ctx.ir, flat, minimize);
        total += ctx.weight * value;
        blocks.push(PhiVector::from_flat(&point, d));
    }
    let better = match (&inc, dir) {
        (None, _) => true,
        (Some(cur), BoundDirection::Lower) => total < cur.value,
        (Some(cur), BoundDirection::Upper) => total > cur.value,
    };
    if better {
        *inc = Some(Incumbent { value: total, blocks });
    }
}

/// Index of the open node with the best selection key `(sign*bound, id)`.
fn select_open(nodes: &[BnBNode], sign: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (idx, node) in nodes.iter().enumerate() {
        if node.status != NodeStatus::Open {
            continue;
        }
        let key = sign * node.bound;
        if best.map_or(true, |(bk, _)| key < bk) {
            best = Some((key, idx));
        }
    }
    best.map(|(_, idx)| idx)
}

/// Mark open nodes that cannot beat the incumbent. The current selection
/// argmin is always kept so pruning never alters which node is examined
/// next, only how much dead pool is carried.
pub(crate) fn prune_pool(nodes: &mut [BnBNode], incumbent: f64, sign: f64) -> usize {
    let protect = select_open(nodes, sign);
    let mut pruned = 0;
    for (idx, node) in nodes.iter_mut().enumerate() {
        if node.status != NodeStatus::Open || Some(idx) == protect {
            continue;
        }
        if sign * node.bound > sign * incumbent + PRUNE_MARGIN {
            node.status = NodeStatus::PrunedByIncumbent;
            pruned += 1;
        }
    }
    pruned
}

/// The branch-and-bound loop over a prepared program.
pub(crate) fn run_program(
    program: &Program,
    opts: &EngineOptions,
) -> Result<BoundResult, EngineError> {
    assert!(opts.tol_delta > 0.0, "tolerance must be positive");
    assert!(opts.max_iter >= 1, "need at least one iteration");
    let dir = opts.direction;
    let sign = dir.sign();
    let ambient = program.root.dim();

    let (root_bound, root_argmin) = bound_node(program, &program.root, None, dir)?;
    if !root_bound.is_finite() {
        return Err(EngineError::EmptyFeasibleRegion);
    }
    let mut nodes = vec![BnBNode {
        simplex: program.root.clone(),
        bound: root_bound,
        argmin: root_argmin,
        status: NodeStatus::Open,
    }];
    let mut next_id: u64 = 1;
    let mut best_bound = -sign * f64::INFINITY;
    let mut l_n: u32 = 0;
    let mut incumbent: Option<Incumbent> = None;
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut converged = false;

    for iter in 1..=opts.max_iter {
        let Some(idx) = select_open(&nodes, sign) else { break };
        let sel_id = nodes[idx].simplex.id;
        let sel_bound = nodes[idx].bound;
        let sel_chain = nodes[idx].simplex.chain_len;
        nodes[idx].status = NodeStatus::Split;

        // The selected node is the pool argmin, so its bound is a valid
        // global bound; keep the best one seen.
        best_bound = if sign * sel_bound > sign * best_bound { sel_bound } else { best_bound };
        l_n = l_n.max(sel_chain);
        let (factor, certified) = global_error(l_n, ambient, program.a_const, program.dia0);

        if let Some(gamma) = nodes[idx].argmin.clone() {
            refresh_incumbent(program, &gamma, dir, &mut incumbent);
        }

        let (child_a, child_b) = nodes[idx].simplex.bisect(next_id, next_id + 1);
        next_id += 2;
        let bounded = if opts.threads >= 2 {
            std::thread::scope(|scope| {
                let hb = scope.spawn(|| bound_node(program, &child_b, Some(sel_bound), dir));
                let ra = bound_node(program, &child_a, Some(sel_bound), dir);
                let rb = hb.join().expect("child bounding panicked");
                ra.and_then(|a| rb.map(|b| [a, b]))
            })?
        } else {
            [
                bound_node(program, &child_a, Some(sel_bound), dir)?,
                bound_node(program, &child_b, Some(sel_bound), dir)?,
            ]
        };
        for (child, (bound, argmin)) in [child_a, child_b].into_iter().zip(bounded) {
            let status = if bound.is_finite() {
                NodeStatus::Open
            } else {
                NodeStatus::PrunedInfeasible
            };
            nodes.push(BnBNode { simplex: child, bound, argmin, status });
        }

        if opts.prune {
            if let Some(inc) = &incumbent {
                prune_pool(&mut nodes, inc.value, sign);
            }
        }

        let open_nodes = nodes.iter().filter(|n| n.status == NodeStatus::Open).count();
        trace.push(TraceRow {
            iter,
            selected_node_id: sel_id,
            node_bound: sel_bound,
            best_bound,
            incumbent: incumbent.as_ref().map_or(sign * f64::INFINITY, |inc| inc.value),
            l_n,
            geometric_factor: factor,
            certified_error: certified,
            open_nodes,
        });

        let stop_metric = if opts.raw_factor_stop { factor } else { certified };
        if stop_metric <= opts.tol_delta {
            converged = true;
            break;
        }
    }

    let (factor, certified) = global_error(l_n, ambient, program.a_const, program.dia0);
    let result = BoundResult {
        direction: dir,
        bound: best_bound,
        geometric_factor: factor,
        certified_error: certified,
        iterations: trace.len() as u64,
        l_n,
        incumbent,
        trace,
    };
    if converged || result.iterations < opts.max_iter {
        // Fewer iterations than budget without convergence means the pool
        // ran dry: every cell was conclusively handled.
        Ok(result)
    } else {
        Err(EngineError::MaxIterReached(Box::new(result)))
    }
}

/// Certified bound on the target interventional event probability.
pub fn run(spec: &ProblemSpec, opts: &EngineOptions) -> Result<BoundResult, EngineError> {
    let program = prepare_event(spec)?;
    run_program(&program, opts)
}

/// Exhaustive scan of the two-state instance's free parameters `(theta_1,
/// psi_1, omega_1)` on a grid, keeping combinations that satisfy the
/// compatibility rows; returns the minimum objective, or `+inf` when the
/// grid holds no feasible point.
pub fn brute_force_min(spec: &ProblemSpec, grid_step: f64) -> Result<f64, EngineError> {
    brute_force_extremes(spec, grid_step).map(|(min, _)| min)
}

/// Grid minimum and maximum of the two-state objective; `(+inf, -inf)`
/// when the grid holds no feasible point.
pub(crate) fn brute_force_extremes(
    spec: &ProblemSpec,
    grid_step: f64,
) -> Result<(f64, f64), EngineError> {
    if spec.d() != 2 {
        return Err(EngineError::UnsupportedDimension(spec.d()));
    }
    assert!(grid_step >= 1e-4, "grid finer than 1e-4 is not tractable");
    spec.validate()?;

    // Feasible values of the first coordinate of one block, given that the
    // second is the remainder of the block total.
    let feasible_axis = |target: &[f64], total: f64, lo: f64, hi: f64| -> Vec<[f64; 2]> {
        let tb = &spec.transition_bounds;
        let mut out = Vec::new();
        let steps = (total / grid_step).floor() as usize;
        let mut candidates: Vec<f64> = (0..=steps).map(|k| k as f64 * grid_step).collect();
        if candidates.last().is_none_or(|&v| v < total) {
            candidates.push(total);
        }
        'grid: for b1 in candidates {
            let pair = [b1, total - b1];
            for v in pair {
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    continue 'grid;
                }
            }
            for w in 0..tb.lower.len() {
                let low = tb.lower[w][0] * pair[0] + tb.lower[w][1] * pair[1];
                let up = tb.upper[w][0] * pair[0] + tb.upper[w][1] * pair[1];
                if low > target[w] + 1e-12 || up < target[w] - 1e-12 {
                    continue 'grid;
                }
            }
            out.push(pair);
        }
        out
    };

    let thetas = feasible_axis(&spec.f_yw_x(), spec.f_yx(), 0.0, spec.f_yx());
    let psis = feasible_axis(&spec.f_w_x(), spec.f_x(), spec.psi_min, spec.f_x());
    let omegas = feasible_axis(&spec.f_w_xc(), spec.f_xc(), 0.0, spec.f_xc());

    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for psi in &psis {
        let inv = [1.0 / psi[0], 1.0 / psi[1]];
        for theta in &thetas {
            let c = [theta[0] * inv[0], theta[1] * inv[1]];
            for omega in &omegas {
                let v = c[0] * omega[0] + c[1] * omega[1];
                if v < min {
                    min = v;
                }
                if v > max {
                    max = v;
                }
            }
        }
    }
    let fyx = spec.f_yx();
    Ok((
        if min.is_finite() { fyx + min } else { f64::INFINITY },
        if max.is_finite() { fyx + max } else { f64::NEG_INFINITY },
    ))
}

/// Write the per-iteration trace in CSV form, floats at full precision.
pub fn write_trace_csv(rows: &[TraceRow], out: &mut impl Write) -> io::Result<()> {
    writeln!(
        out,
        "iter,selected_node_id,node_bound,best_bound,incumbent,l_n,geometric_factor,certified_error,open_nodes"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{}",
            r.iter,
            r.selected_node_id,
            r.node_bound,
            r.best_bound,
            r.incumbent,
            r.l_n,
            r.geometric_factor,
            r.certified_error,
            r.open_nodes
        )?;
    }
    Ok(())
}
