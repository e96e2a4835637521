//! Problem ingestion and validation, the polyhedral compatibility
//! constraints on the latent marginals, the closed-form identified baseline,
//! and a forward simulator used as a round-trip oracle in tests.
//!
//! Variables throughout: `U` is the latent confounder with `d` states, `W`
//! the observed proxy with `n_w` states, `X` the treatment with `n_x`
//! states. Event mode collapses the outcome to {target, complement}; row 0
//! of the observed table is the target event. When `y_values` is present
//! the outcome keeps its full numeric support instead.

use serde::{Deserialize, Serialize};

use crate::consts::{DEFAULT_PSI_MIN, TOL_INGEST};
use crate::linalg;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("validation error: {0}")]
    ValidationError(String),
    #[error("not invertible: {0}")]
    NotInvertible(String),
    #[error("negative recovery: {0}")]
    NegativeRecovery(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Dims {
    pub u: usize,
    pub w: usize,
    pub x: usize,
}

/// Observed joint table `p[y_event][w][x]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObservedDistribution {
    pub p: Vec<Vec<Vec<f64>>>,
}

/// Elementwise box `lower <= P(w|u) <= upper`, rows indexed by w, columns
/// by u.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransitionBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

/// Latent marginals for one treatment value: `theta_i = f(y,u_i,X=x)`,
/// `psi_i = f(u_i,X=x)`, `omega_i = f(u_i,X!=x)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhiVector {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub omega: Vec<f64>,
}

impl PhiVector {
    /// Concatenation `[theta, psi, omega]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.psi);
        v.extend_from_slice(&self.omega);
        v
    }

    pub fn from_flat(v: &[f64], d: usize) -> PhiVector {
        assert_eq!(v.len(), 3 * d);
        PhiVector {
            theta: v[..d].to_vec(),
            psi: v[d..2 * d].to_vec(),
            omega: v[2 * d..].to_vec(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub target_x: usize,
    pub observed: ObservedDistribution,
    pub transition_bounds: TransitionBounds,
    #[serde(default = "default_psi_min")]
    pub psi_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_pi: Option<Vec<f64>>,
    /// Optional candidate solution carried alongside the instance, checked
    /// by the tightness search instead of rerunning the solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<PhiVector>,
}

fn default_psi_min() -> f64 {
    DEFAULT_PSI_MIN
}

impl ProblemSpec {
    pub fn d(&self) -> usize {
        self.dims.u
    }

    pub fn n_w(&self) -> usize {
        self.dims.w
    }

    pub fn n_x(&self) -> usize {
        self.dims.x
    }

    /// Number of outcome rows in the observed table.
    pub fn n_y(&self) -> usize {
        self.observed.p.len()
    }

    /// Full numeric support mode (average-effect problems).
    pub fn is_ace(&self) -> bool {
        self.y_values.is_some()
    }

    /// f(X = x) for an arbitrary treatment value.
    pub fn f_x_at(&self, x: usize) -> f64 {
        self.observed
            .p
            .iter()
            .map(|py| py.iter().map(|pw| pw[x]).sum::<f64>())
            .sum()
    }

    /// f(X = x) at the intervened value.
    pub fn f_x(&self) -> f64 {
        self.f_x_at(self.target_x)
    }

    /// f(X != x) at the intervened value.
    pub fn f_xc(&self) -> f64 {
        (0..self.n_x())
            .filter(|&x| x != self.target_x)
            .map(|x| self.f_x_at(x))
            .sum()
    }

    /// f(y, X = x): target event mass at the intervened value.
    pub fn f_yx(&self) -> f64 {
        self.observed.p[0].iter().map(|pw| pw[self.target_x]).sum()
    }

    /// f(y, W, X = x) as a vector over w.
    pub fn f_yw_x(&self) -> Vec<f64> {
        self.observed.p[0]
            .iter()
            .map(|pw| pw[self.target_x])
            .collect()
    }

    /// f(W, X = x) as a vector over w.
    pub fn f_w_x(&self) -> Vec<f64> {
        self.f_w_at(self.target_x)
    }

    /// f(W, X = x') for an arbitrary treatment value, as a vector over w.
    pub fn f_w_at(&self, x: usize) -> Vec<f64> {
        (0..self.n_w())
            .map(|w| self.observed.p.iter().map(|py| py[w][x]).sum())
            .collect()
    }

    /// f(W, X != x) as a vector over w.
    pub fn f_w_xc(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_w()];
        for x in (0..self.n_x()).filter(|&x| x != self.target_x) {
            for (w, t) in self.f_w_at(x).into_iter().enumerate() {
                v[w] += t;
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::ValidationError(m));
        let (d, n_w, n_x) = (self.dims.u, self.dims.w, self.dims.x);
        if d < 1 {
            return fail("dims.u must be >= 1".into());
        }
        if n_w < 1 {
            return fail("dims.w must be >= 1".into());
        }
        if n_x < 2 {
            return fail(format!("dims.x = {n_x}, need at least 2 treatment values"));
        }
        if self.target_x >= n_x {
            return fail(format!(
                "target_x = {} out of range for dims.x = {n_x}",
                self.target_x
            ));
        }

        let n_y = match &self.y_values {
            Some(ys) => {
                if ys.iter().any(|v| !v.is_finite()) {
                    return fail("y_values contains a non-finite entry".into());
                }
                ys.len()
            }
            None => 2,
        };
        if self.observed.p.len() != n_y {
            return fail(format!(
                "observed.p has {} outcome rows, expected {n_y}",
                self.observed.p.len()
            ));
        }
        let mut mass = 0.0;
        for (y, py) in self.observed.p.iter().enumerate() {
            if py.len() != n_w {
                return fail(format!(
                    "observed.p[{y}] has {} proxy rows, expected {n_w}",
                    py.len()
                ));
            }
            for (w, pw) in py.iter().enumerate() {
                if pw.len() != n_x {
                    return fail(format!(
                        "observed.p[{y}][{w}] has {} entries, expected {n_x}",
                        pw.len()
                    ));
                }
                for (x, &v) in pw.iter().enumerate() {
                    if !v.is_finite() {
                        return fail(format!("observed.p[{y}][{w}][{x}] is not finite"));
                    }
                    if v < 0.0 {
                        return fail(format!("observed.p[{y}][{w}][{x}] = {v} is negative"));
                    }
                    mass += v;
                }
            }
        }
        if (mass - 1.0).abs() > TOL_INGEST {
            return fail(format!("probability mass {mass} != 1"));
        }

        let tb = &self.transition_bounds;
        for (name, m) in [("lower", &tb.lower), ("upper", &tb.upper)] {
            if m.len() != n_w {
                return fail(format!(
                    "transition_bounds.{name} has {} rows, expected {n_w}",
                    m.len()
                ));
            }
            for (w, row) in m.iter().enumerate() {
                if row.len() != d {
                    return fail(format!(
                        "transition_bounds.{name}[{w}] has {} columns, expected {d}",
                        row.len()
                    ));
                }
                for (u, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return fail(format!("transition_bounds.{name}[{w}][{u}] is not finite"));
                    }
                }
            }
        }
        for w in 0..n_w {
            for u in 0..d {
                let (lo, hi) = (tb.lower[w][u], tb.upper[w][u]);
                if lo < 0.0 {
                    return fail(format!("lower[{w}][{u}] = {lo} is negative"));
                }
                if hi > 1.0 {
                    return fail(format!("upper[{w}][{u}] = {hi} exceeds 1"));
                }
                if lo > hi {
                    return fail(format!("lower > upper at ({w},{u})"));
                }
            }
        }
        for u in 0..d {
            let lo_sum: f64 = (0..n_w).map(|w| tb.lower[w][u]).sum();
            let hi_sum: f64 = (0..n_w).map(|w| tb.upper[w][u]).sum();
            if lo_sum > 1.0 + TOL_INGEST {
                return fail(format!("column u={u}: sum of lower bounds {lo_sum} > 1"));
            }
            if hi_sum < 1.0 - TOL_INGEST {
                return fail(format!("column u={u}: sum of upper bounds {hi_sum} < 1"));
            }
        }

        if !self.psi_min.is_finite() || self.psi_min <= 0.0 {
            return fail(format!("psi_min = {} must be positive", self.psi_min));
        }
        let cap = self.f_x() / d as f64;
        if self.psi_min > cap + TOL_INGEST {
            return fail(format!(
                "psi_min = {} exceeds f(X=x)/d = {cap}; no compatible split of f(X=x) exists",
                self.psi_min
            ));
        }

        if let Some(pi) = &self.weights_pi {
            if pi.len() != n_x {
                return fail(format!(
                    "weights_pi has {} entries, expected dims.x = {n_x}",
                    pi.len()
                ));
            }
            if pi.iter().any(|v| !v.is_finite()) {
                return fail("weights_pi contains a non-finite entry".into());
            }
        }
        if let Some(phi) = &self.phi {
            for (name, v) in [("theta", &phi.theta), ("psi", &phi.psi), ("omega", &phi.omega)] {
                if v.len() != d {
                    return fail(format!("phi.{name} has {} entries, expected {d}", v.len()));
                }
                if v.iter().any(|t| !t.is_finite()) {
                    return fail(format!("phi.{name} contains a non-finite entry"));
                }
            }
        }
        Ok(())
    }
}

/// Parse and validate a problem instance from its JSON form.
pub fn load_problem(mut source: impl std::io::Read) -> Result<ProblemSpec, ModelError> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| ModelError::ParseError(e.to_string()))?;
    let spec: ProblemSpec =
        serde_json::from_str(&text).map_err(|e| ModelError::ParseError(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

/// Dense polyhedron: labeled rows `a x (<=|=|>=) b` plus per-variable box
/// bounds.
#[derive(Clone, Debug)]
pub struct LinearConstraintSystem {
    pub n_vars: usize,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub senses: Vec<Sense>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
    pub labels: Vec<String>,
}

impl LinearConstraintSystem {
    pub fn new(n_vars: usize) -> Self {
        LinearConstraintSystem {
            n_vars,
            rows: Vec::new(),
            rhs: Vec::new(),
            senses: Vec::new(),
            var_lower: vec![f64::NEG_INFINITY; n_vars],
            var_upper: vec![f64::INFINITY; n_vars],
            labels: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(
        &mut self,
        coeffs: Vec<f64>,
        sense: Sense,
        rhs: f64,
        label: impl Into<String>,
    ) {
        assert_eq!(coeffs.len(), self.n_vars);
        self.rows.push(coeffs);
        self.senses.push(sense);
        self.rhs.push(rhs);
        self.labels.push(label.into());
    }

    pub fn set_box(&mut self, var: usize, lower: f64, upper: f64) {
        self.var_lower[var] = lower;
        self.var_upper[var] = upper;
    }

    /// Signed violation of one row at a point (positive = violated).
    fn row_violation(&self, i: usize, x: &[f64]) -> f64 {
        let ax = linalg::dot(&self.rows[i], x);
        match self.senses[i] {
            Sense::Le => ax - self.rhs[i],
            Sense::Ge => self.rhs[i] - ax,
            Sense::Eq => (ax - self.rhs[i]).abs(),
        }
    }

    /// Largest violation over all rows and boxes (<= 0 means feasible).
    pub fn residual(&self, x: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.n_rows() {
            worst = worst.max(self.row_violation(i, x));
        }
        for j in 0..self.n_vars {
            worst = worst.max(self.var_lower[j] - x[j]);
            worst = worst.max(x[j] - self.var_upper[j]);
        }
        worst
    }

    /// Check a point against every row and box; the error names the first
    /// violated constraint and by how much.
    pub fn check_point(&self, x: &[f64], tol: f64) -> Result<(), String> {
        assert_eq!(x.len(), self.n_vars);
        for i in 0..self.n_rows() {
            let v = self.row_violation(i, x);
            if v > tol {
                return Err(format!("row '{}' violated by {v:.3e}", self.labels[i]));
            }
        }
        for j in 0..self.n_vars {
            if self.var_lower[j] - x[j] > tol || x[j] - self.var_upper[j] > tol {
                return Err(format!(
                    "variable {j} = {} outside box [{}, {}]",
                    x[j], self.var_lower[j], self.var_upper[j]
                ));
            }
        }
        Ok(())
    }
}

/// One latent block of the compatibility polyhedron: the observed vector it
/// must map into under the transition box, its exact total, and its box.
pub(crate) struct IrBlock<'a> {
    pub name: &'a str,
    /// Observed vector over w that `P * block` must be able to reach.
    pub target: Vec<f64>,
    /// Equality constraint on the block sum.
    pub total: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Assemble the constraint system for any ordered list of latent blocks
/// sharing one transition box: for each block b and proxy state w,
/// `lower[w] . b <= target[w]` and `upper[w] . b >= target[w]`, plus the
/// block-sum equalities and coordinate boxes.
pub(crate) fn build_ir_blocks(
    tb: &TransitionBounds,
    blocks: &[IrBlock<'_>],
) -> LinearConstraintSystem {
    let n_w = tb.lower.len();
    let d = tb.lower.first().map_or(0, |r| r.len());
    let n_vars = d * blocks.len();
    let mut sys = LinearConstraintSystem::new(n_vars);
    for (bi, block) in blocks.iter().enumerate() {
        let off = bi * d;
        for w in 0..n_w {
            let mut row = vec![0.0; n_vars];
            row[off..off + d].copy_from_slice(&tb.lower[w]);
            sys.push_row(
                row,
                Sense::Le,
                block.target[w],
                format!("{}:low:w{w}", block.name),
            );
        }
        for w in 0..n_w {
            let mut row = vec![0.0; n_vars];
            row[off..off + d].copy_from_slice(&tb.upper[w]);
            sys.push_row(
                row,
                Sense::Ge,
                block.target[w],
                format!("{}:up:w{w}", block.name),
            );
        }
        for u in 0..d {
            sys.set_box(off + u, block.lo, block.hi);
        }
    }
    for (bi, block) in blocks.iter().enumerate() {
        let off = bi * d;
        let mut row = vec![0.0; n_vars];
        row[off..off + d].fill(1.0);
        sys.push_row(row, Sense::Eq, block.total, format!("sum:{}", block.name));
    }
    sys
}

/// The compatibility polyhedron on `(theta, psi, omega)` for an event-mode
/// instance: transition rows in both directions for each of the three
/// observed vectors, the three block-sum equalities, and the coordinate
/// boxes (with `psi_min` as the lower box on psi).
pub fn build_ir_phi(spec: &ProblemSpec) -> LinearConstraintSystem {
    let blocks = [
        IrBlock {
            name: "theta",
            target: spec.f_yw_x(),
            total: spec.f_yx(),
            lo: 0.0,
            hi: spec.f_yx(),
        },
        IrBlock {
            name: "psi",
            target: spec.f_w_x(),
            total: spec.f_x(),
            lo: spec.psi_min,
            hi: spec.f_x(),
        },
        IrBlock {
            name: "omega",
            target: spec.f_w_xc(),
            total: spec.f_xc(),
            lo: 0.0,
            hi: spec.f_xc(),
        },
    ];
    build_ir_blocks(&spec.transition_bounds, &blocks)
}

/// Closed-form interventional probability when the transition matrix is
/// known exactly and square: invert it, recover the latent marginals, and
/// plug in. `cond_cap` guards against ill-conditioned inversions.
pub fn identify_exact(spec: &ProblemSpec, cond_cap: f64) -> Result<(f64, PhiVector), ModelError> {
    let d = spec.d();
    let n_w = spec.n_w();
    if n_w != d {
        return Err(ModelError::ValidationError(format!(
            "exact identification needs a square transition matrix, got {n_w} x {d}"
        )));
    }
    let tb = &spec.transition_bounds;
    for w in 0..n_w {
        for u in 0..d {
            if (tb.lower[w][u] - tb.upper[w][u]).abs() > TOL_INGEST {
                return Err(ModelError::ValidationError(format!(
                    "transition matrix not point-identified at ({w},{u})"
                )));
            }
        }
    }
    let mut a = vec![0.0; d * d];
    for w in 0..d {
        a[w * d..(w + 1) * d].copy_from_slice(&tb.lower[w]);
    }
    let cond = linalg::cond1(&a, d);
    if !cond.is_finite() || cond > cond_cap {
        return Err(ModelError::NotInvertible(format!(
            "condition number {cond:.3e} exceeds cap {cond_cap:.3e}"
        )));
    }
    let lu = linalg::Lu::factor(&a, d);
    let recover = |target: Vec<f64>, name: &str| -> Result<Vec<f64>, ModelError> {
        let mut v = lu
            .solve(&target)
            .ok_or_else(|| ModelError::NotInvertible("singular transition matrix".into()))?;
        for (i, t) in v.iter_mut().enumerate() {
            if *t < -1e-9 {
                return Err(ModelError::NegativeRecovery(format!(
                    "{name}[{i}] = {t:.6e} < 0; observed data incompatible with this transition matrix"
                )));
            }
            *t = t.max(0.0);
        }
        Ok(v)
    };
    let theta = recover(spec.f_yw_x(), "theta")?;
    let psi = recover(spec.f_w_x(), "psi")?;
    let omega = recover(spec.f_w_xc(), "omega")?;
    let mut value = spec.f_yx();
    for i in 0..d {
        if theta[i] * omega[i] == 0.0 {
            continue;
        }
        if psi[i] <= 0.0 {
            return Err(ModelError::NotInvertible(format!(
                "recovered psi[{i}] = 0 with a nonzero ratio numerator"
            )));
        }
        value += theta[i] * omega[i] / psi[i];
    }
    Ok((value, PhiVector { theta, psi, omega }))
}

/// A synthetic instance together with the quantities the solver is supposed
/// to recover.
#[derive(Clone, Debug)]
pub struct SimulatedInstance {
    pub spec: ProblemSpec,
    /// Ground-truth f(y | do(x)) for the target event and treatment.
    pub truth: f64,
    /// Strictly positive latent joint `joint[y][u][x]`, mass 1.
    pub joint: Vec<Vec<Vec<f64>>>,
    /// True column-stochastic transition `transition[w][u]`.
    pub transition: Vec<Vec<f64>>,
}

/// Sample a strictly positive latent joint and transition matrix, push the
/// joint through the transition to get the observed table, and wrap the
/// result as a problem instance whose bound box is the true matrix widened
/// by `widening` (clipped to `[0,1]`). The target event is outcome row 0 and
/// the intervened treatment is 0.
pub fn simulate_forward(
    rng: &mut (impl rand::Rng + ?Sized),
    dims: (usize, usize, usize),
    widening: f64,
) -> SimulatedInstance {
    let (d, n_w, n_x) = dims;
    assert!(d >= 1 && n_w >= 1 && n_x >= 2);
    assert!(widening >= 0.0);
    let n_y = 2;

    let mut joint = vec![vec![vec![0.0; n_x]; d]; n_y];
    let mut mass = 0.0;
    for py in joint.iter_mut() {
        for pu in py.iter_mut() {
            for v in pu.iter_mut() {
                *v = rng.gen_range(0.05..1.0);
                mass += *v;
            }
        }
    }
    for py in joint.iter_mut() {
        for pu in py.iter_mut() {
            for v in pu.iter_mut() {
                *v /= mass;
            }
        }
    }

    // Column-stochastic P(w|u), every entry strictly positive.
    let mut transition = vec![vec![0.0; d]; n_w];
    for u in 0..d {
        let col: Vec<f64> = (0..n_w).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = col.iter().sum();
        for w in 0..n_w {
            transition[w][u] = col[w] / s;
        }
    }

    let mut p = vec![vec![vec![0.0; n_x]; n_w]; n_y];
    let mut total = 0.0;
    for y in 0..n_y {
        for w in 0..n_w {
            for x in 0..n_x {
                let v: f64 = (0..d).map(|u| transition[w][u] * joint[y][u][x]).sum();
                p[y][w][x] = v;
                total += v;
            }
        }
    }
    for py in p.iter_mut() {
        for pw in py.iter_mut() {
            for v in pw.iter_mut() {
                *v /= total;
            }
        }
    }

    // Latent marginals at the intervened treatment x = 0.
    let mut truth = 0.0;
    let mut psi_true = vec![0.0; d];
    for u in 0..d {
        let theta = joint[0][u][0];
        let psi: f64 = (0..n_y).map(|y| joint[y][u][0]).sum();
        let omega: f64 = (0..n_y)
            .map(|y| (1..n_x).map(|x| joint[y][u][x]).sum::<f64>())
            .sum();
        truth += theta + theta * omega / psi;
        psi_true[u] = psi;
    }

    let lower: Vec<Vec<f64>> = transition
        .iter()
        .map(|row| row.iter().map(|v| (v - widening).max(0.0)).collect())
        .collect();
    let upper: Vec<Vec<f64>> = transition
        .iter()
        .map(|row| row.iter().map(|v| (v + widening).min(1.0)).collect())
        .collect();

    let f_x: f64 = psi_true.iter().sum();
    let psi_floor = psi_true.iter().cloned().fold(f64::INFINITY, f64::min);
    let psi_min = (0.5 * psi_floor).min(f_x / d as f64).min(DEFAULT_PSI_MIN);

    let spec = ProblemSpec {
        dims: Dims { u: d, w: n_w, x: n_x },
        target_x: 0,
        observed: ObservedDistribution { p },
        transition_bounds: TransitionBounds { lower, upper },
        psi_min,
        y_values: None,
        weights_pi: None,
        phi: None,
    };
    debug_assert!(spec.validate().is_ok());
    SimulatedInstance { spec, truth, joint, transition }
}

/// `simulate_forward` with a self-contained deterministic generator, so
/// callers reproducing an instance only need the seed.
pub fn simulate_seeded(
    seed: u64,
    dims: (usize, usize, usize),
    widening: f64,
) -> SimulatedInstance {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    simulate_forward(&mut rng, dims, widening)
}
