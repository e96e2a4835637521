//! Self-contained dense linear-program solver: two-phase tableau simplex
//! with Bland's anti-cycling rule.
//!
//! Box bounds are handled by substitution (shift finite lower bounds to
//! zero, flip variables with only an upper bound, split free variables)
//! plus one extra `<=` row per two-sided box, so the core always sees the
//! standard form `A x (<=|=|>=) b, x >= 0`. Equality rows are kept native
//! rather than split into two inequalities, so the block-sum constraints of
//! the compatibility polyhedron do not drift apart by a tolerance.
//!
//! Everything is deterministic: entering and leaving variables are chosen
//! by smallest index (Bland's rule), and no randomness or hashing is
//! involved anywhere. Speed is irrelevant at the sizes that occur here
//! (tens of variables); predictability is not.

use crate::linalg::dot;
use crate::model::{LinearConstraintSystem, Sense};

/// Entering columns need a reduced cost below `-TOL_REDUCED_COST`.
const TOL_REDUCED_COST: f64 = 1e-9;
/// Smallest pivot magnitude the ratio test accepts.
const TOL_PIVOT: f64 = 1e-11;
/// Phase-1 objective above this (scaled by `1 + max |b|`) means infeasible.
const TOL_PHASE1: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, thiserror::Error)]
pub enum LpError {
    /// Every candidate pivot in some column was below 1e-11: the tableau
    /// has degraded numerically. Reported distinctly from Infeasible.
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
}

#[derive(Clone, Debug)]
pub struct LpProblem {
    pub direction: Direction,
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub senses: Vec<Sense>,
    pub rhs: Vec<f64>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
}

impl LpProblem {
    pub fn new(
        direction: Direction,
        objective: Vec<f64>,
        rows: Vec<Vec<f64>>,
        senses: Vec<Sense>,
        rhs: Vec<f64>,
        var_lower: Vec<f64>,
        var_upper: Vec<f64>,
    ) -> LpProblem {
        let n = objective.len();
        assert!(rows.iter().all(|r| r.len() == n), "row width != objective width");
        assert_eq!(rows.len(), senses.len());
        assert_eq!(rows.len(), rhs.len());
        assert_eq!(var_lower.len(), n);
        assert_eq!(var_upper.len(), n);
        LpProblem { direction, objective, rows, senses, rhs, var_lower, var_upper }
    }

    /// Optimize a linear objective over a constraint system's polyhedron.
    pub fn from_system(
        sys: &LinearConstraintSystem,
        objective: Vec<f64>,
        direction: Direction,
    ) -> LpProblem {
        LpProblem::new(
            direction,
            objective,
            sys.rows.clone(),
            sys.senses.clone(),
            sys.rhs.clone(),
            sys.var_lower.clone(),
            sys.var_upper.clone(),
        )
    }

    fn n_vars(&self) -> usize {
        self.objective.len()
    }
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Optimal point in the original variables; empty unless Optimal.
    pub point: Vec<f64>,
    /// Objective value at `point`; NaN unless Optimal.
    pub value: f64,
    /// Simplex pivots across both phases.
    pub iterations: u64,
}

impl LpSolution {
    fn non_optimal(status: LpStatus, iterations: u64) -> LpSolution {
        LpSolution { status, point: Vec::new(), value: f64::NAN, iterations }
    }
}

/// Solve to vertex optimality.
pub fn solve(p: &LpProblem) -> Result<LpSolution, LpError> {
    solve_with_duals(p).map(|(s, _)| s)
}

/// As [`solve`], additionally returning the dual multipliers of the
/// original rows (read off the final cost row) when the LP is Optimal.
/// Rows dropped as redundant during phase 1 get a zero multiplier.
pub(crate) fn solve_with_duals(
    p: &LpProblem,
) -> Result<(LpSolution, Option<Vec<f64>>), LpError> {
    run(p, false)
}

/// Phase 1 only: any point of the polyhedron, or None if it is empty.
pub fn feasible_point(
    rows: &[Vec<f64>],
    senses: &[Sense],
    rhs: &[f64],
    var_lower: &[f64],
    var_upper: &[f64],
) -> Result<Option<Vec<f64>>, LpError> {
    let n = var_lower.len();
    let p = LpProblem::new(
        Direction::Minimize,
        vec![0.0; n],
        rows.to_vec(),
        senses.to_vec(),
        rhs.to_vec(),
        var_lower.to_vec(),
        var_upper.to_vec(),
    );
    let (sol, _) = run(&p, true)?;
    Ok(match sol.status {
        LpStatus::Optimal => Some(sol.point),
        _ => None,
    })
}

/// Convenience wrapper over a labeled constraint system.
pub fn feasible_point_of(sys: &LinearConstraintSystem) -> Result<Option<Vec<f64>>, LpError> {
    feasible_point(&sys.rows, &sys.senses, &sys.rhs, &sys.var_lower, &sys.var_upper)
}

/// How one original variable maps into the nonnegative standard form.
#[derive(Clone, Copy)]
enum VarMap {
    /// `x = lo + x'`.
    Shifted { col: usize, lo: f64 },
    /// `x = hi - x'` (upper bound only).
    Flipped { col: usize, hi: f64 },
    /// `x = x+ - x-` (free).
    Split { pos: usize, neg: usize },
    /// Degenerate box `lo == hi`.
    Fixed { value: f64 },
}

struct Standardized {
    n_cols: usize,
    map: Vec<VarMap>,
    rows: Vec<Vec<f64>>,
    senses: Vec<Sense>,
    rhs: Vec<f64>,
    /// Index of the original row, None for generated box rows.
    origin: Vec<Option<usize>>,
    /// Minimization cost over standard columns.
    cost: Vec<f64>,
}

/// Rewrite boxes by substitution. Returns None if some box is empty
/// (`lo > hi`), which makes the whole program trivially infeasible.
fn standardize(p: &LpProblem) -> Option<Standardized> {
    let n = p.n_vars();
    let min_cost: Vec<f64> = match p.direction {
        Direction::Minimize => p.objective.clone(),
        Direction::Maximize => p.objective.iter().map(|c| -c).collect(),
    };

    let mut map = Vec::with_capacity(n);
    let mut n_cols = 0;
    for j in 0..n {
        let (lo, hi) = (p.var_lower[j], p.var_upper[j]);
        if lo > hi {
            return None;
        }
        let vm = if lo.is_finite() && hi.is_finite() && lo == hi {
            VarMap::Fixed { value: lo }
        } else if lo.is_finite() {
            let col = n_cols;
            n_cols += 1;
            VarMap::Shifted { col, lo }
        } else if hi.is_finite() {
            let col = n_cols;
            n_cols += 1;
            VarMap::Flipped { col, hi }
        } else {
            let pos = n_cols;
            n_cols += 2;
            VarMap::Split { pos, neg: pos + 1 }
        };
        map.push(vm);
    }

    let translate = |coeffs: &[f64], out: &mut [f64]| -> f64 {
        // Rewrites one row; returns the constant to subtract from its rhs.
        let mut shift = 0.0;
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            match map[j] {
                VarMap::Shifted { col, lo } => {
                    out[col] += c;
                    shift += c * lo;
                }
                VarMap::Flipped { col, hi } => {
                    out[col] -= c;
                    shift += c * hi;
                }
                VarMap::Split { pos, neg } => {
                    out[pos] += c;
                    out[neg] -= c;
                }
                VarMap::Fixed { value } => shift += c * value,
            }
        }
        shift
    };

    let mut rows = Vec::with_capacity(p.rows.len());
    let mut senses = Vec::with_capacity(p.rows.len());
    let mut rhs = Vec::with_capacity(p.rows.len());
    let mut origin = Vec::with_capacity(p.rows.len());
    for (i, row) in p.rows.iter().enumerate() {
        let mut out = vec![0.0; n_cols];
        let shift = translate(row, &mut out);
        rows.push(out);
        senses.push(p.senses[i]);
        rhs.push(p.rhs[i] - shift);
        origin.push(Some(i));
    }
    // Two-sided boxes need one extra row for the far side.
    for j in 0..n {
        if let VarMap::Shifted { col, lo } = map[j] {
            let hi = p.var_upper[j];
            if hi.is_finite() {
                let mut out = vec![0.0; n_cols];
                out[col] = 1.0;
                rows.push(out);
                senses.push(Sense::Le);
                rhs.push(hi - lo);
                origin.push(None);
            }
        }
    }

    let mut cost = vec![0.0; n_cols];
    let _ = translate(&min_cost, &mut cost);

    Some(Standardized { n_cols, map, rows, senses, rhs, origin, cost })
}

/// Role of the auxiliary columns attached to one tableau row.
#[derive(Clone, Copy)]
struct RowCols {
    slack: Option<usize>,
    surplus: Option<usize>,
    artificial: Option<usize>,
}

struct Tableau {
    m: usize,
    n_total: usize,
    art_start: usize,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    basis: Vec<usize>,
    /// Artificial columns that have left the basis and must not re-enter.
    banned: Vec<bool>,
    /// Reduced-cost rows and objective cells for both phases.
    z1: Vec<f64>,
    v1: f64,
    z2: Vec<f64>,
    v2: f64,
    row_cols: Vec<RowCols>,
    origin: Vec<Option<usize>>,
    /// Original row index -> was the row multiplied by -1.
    flipped: Vec<bool>,
    pivots: u64,
    pivot_cap: u64,
}

enum Step {
    Done,
    Pivoted,
    Unbounded,
}

impl Tableau {
    fn build(std: &Standardized) -> Tableau {
        let m = std.rows.len();
        let n_struct = std.n_cols;

        // Normalize signs so every rhs is nonnegative.
        let mut a: Vec<Vec<f64>> = std.rows.clone();
        let mut b = std.rhs.clone();
        let mut senses = std.senses.clone();
        let mut flipped = vec![false; m];
        for i in 0..m {
            if b[i] < 0.0 {
                for v in a[i].iter_mut() {
                    *v = -*v;
                }
                b[i] = -b[i];
                flipped[i] = true;
                senses[i] = match senses[i] {
                    Sense::Le => Sense::Ge,
                    Sense::Ge => Sense::Le,
                    Sense::Eq => Sense::Eq,
                };
            }
        }

        // Count auxiliary columns: slack/surplus first, artificials last.
        let n_aux: usize = senses.iter().map(|s| matches!(s, Sense::Le | Sense::Ge) as usize).sum();
        let n_art: usize =
            senses.iter().map(|s| matches!(s, Sense::Ge | Sense::Eq) as usize).sum();
        let art_start = n_struct + n_aux;
        let n_total = art_start + n_art;

        let mut row_cols = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let mut next_aux = n_struct;
        let mut next_art = art_start;
        for i in 0..m {
            a[i].resize(n_total, 0.0);
            let rc = match senses[i] {
                Sense::Le => {
                    let s = next_aux;
                    next_aux += 1;
                    a[i][s] = 1.0;
                    basis.push(s);
                    RowCols { slack: Some(s), surplus: None, artificial: None }
                }
                Sense::Ge => {
                    let s = next_aux;
                    next_aux += 1;
                    let t = next_art;
                    next_art += 1;
                    a[i][s] = -1.0;
                    a[i][t] = 1.0;
                    basis.push(t);
                    RowCols { slack: None, surplus: Some(s), artificial: Some(t) }
                }
                Sense::Eq => {
                    let t = next_art;
                    next_art += 1;
                    a[i][t] = 1.0;
                    basis.push(t);
                    RowCols { slack: None, surplus: None, artificial: Some(t) }
                }
            };
            row_cols.push(rc);
        }

        // Phase-1 reduced costs: cost 1 on artificials, reduced against the
        // artificial rows that start basic.
        let mut z1 = vec![0.0; n_total];
        for j in art_start..n_total {
            z1[j] = 1.0;
        }
        let mut v1 = 0.0;
        for i in 0..m {
            if basis[i] >= art_start {
                for j in 0..n_total {
                    z1[j] -= a[i][j];
                }
                v1 += b[i];
            }
        }
        // Phase-2 reduced costs: the initial basis (slacks, artificials)
        // has zero phase-2 cost, so the raw costs are already reduced.
        let mut z2 = vec![0.0; n_total];
        z2[..n_struct].copy_from_slice(&std.cost);

        let pivot_cap = 50_000 + 200 * (m as u64 + n_total as u64);
        Tableau {
            m,
            n_total,
            art_start,
            a,
            b,
            basis,
            banned: vec![false; n_total],
            z1,
            v1,
            z2,
            v2: 0.0,
            row_cols,
            origin: std.origin.clone(),
            flipped,
            pivots: 0,
            pivot_cap,
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let piv = self.a[r][j];
        let t = self.b[r].max(0.0) / piv;
        self.v1 += self.z1[j] * t;
        self.v2 += self.z2[j] * t;

        let inv = 1.0 / piv;
        for v in self.a[r].iter_mut() {
            *v *= inv;
        }
        self.b[r] = t;
        self.a[r][j] = 1.0; // kill residual rounding on the pivot cell

        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.a[i][j];
            if f == 0.0 {
                continue;
            }
            let (head, tail) = self.a.split_at_mut(r.max(i));
            let (row_i, row_r) = if i < r {
                (&mut head[i], &tail[0])
            } else {
                (&mut tail[0], &head[r])
            };
            for (vi, vr) in row_i.iter_mut().zip(row_r.iter()) {
                *vi -= f * vr;
            }
            row_i[j] = 0.0;
            self.b[i] -= f * self.b[r];
        }
        let f1 = self.z1[j];
        if f1 != 0.0 {
            for (z, vr) in self.z1.iter_mut().zip(self.a[r].iter()) {
                *z -= f1 * vr;
            }
            self.z1[j] = 0.0;
        }
        let f2 = self.z2[j];
        if f2 != 0.0 {
            for (z, vr) in self.z2.iter_mut().zip(self.a[r].iter()) {
                *z -= f2 * vr;
            }
            self.z2[j] = 0.0;
        }

        let leaving = self.basis[r];
        if leaving >= self.art_start {
            self.banned[leaving] = true;
        }
        self.basis[r] = j;
        self.pivots += 1;
    }

    /// One Bland step for the given phase. `phase1` also controls which
    /// columns may enter: artificials never re-enter once banned, and in
    /// phase 2 they are excluded wholesale.
    fn step(&mut self, phase1: bool) -> Result<Step, LpError> {
        let z = if phase1 { &self.z1 } else { &self.z2 };
        let limit = if phase1 { self.n_total } else { self.art_start };
        let mut enter = None;
        for j in 0..limit {
            if self.banned[j] {
                continue;
            }
            if z[j] < -TOL_REDUCED_COST {
                enter = Some(j);
                break;
            }
        }
        let Some(j) = enter else { return Ok(Step::Done) };

        let mut leave: Option<(usize, f64)> = None;
        let mut saw_positive = false;
        for r in 0..self.m {
            let arj = self.a[r][j];
            if arj > 0.0 {
                saw_positive = true;
            }
            if arj <= TOL_PIVOT {
                continue;
            }
            let ratio = self.b[r].max(0.0) / arj;
            leave = match leave {
                None => Some((r, ratio)),
                Some((br, best)) => {
                    if ratio < best - 1e-12
                        || (ratio <= best + 1e-12 && self.basis[r] < self.basis[br])
                    {
                        Some((r, ratio))
                    } else {
                        Some((br, best))
                    }
                }
            };
        }
        match leave {
            Some((r, _)) => {
                self.pivot(r, j);
                if self.pivots > self.pivot_cap {
                    return Err(LpError::NumericalBreakdown(format!(
                        "pivot cap {} exceeded; simplex is cycling numerically",
                        self.pivot_cap
                    )));
                }
                Ok(Step::Pivoted)
            }
            None if saw_positive => Err(LpError::NumericalBreakdown(format!(
                "all candidate pivots in column {j} are below {TOL_PIVOT:.0e}"
            ))),
            None if phase1 => Err(LpError::NumericalBreakdown(
                "phase-1 objective unbounded, tableau corrupted".into(),
            )),
            None => Ok(Step::Unbounded),
        }
    }

    /// Drive artificial variables out of the basis after phase 1; rows
    /// where no real pivot exists are redundant and get dropped.
    fn purge_artificials(&mut self) {
        let mut drop_rows = Vec::new();
        for r in 0..self.m {
            if self.basis[r] < self.art_start {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.art_start {
                let mag = self.a[r][j].abs();
                if mag > TOL_PIVOT && best.map_or(true, |(_, b)| mag > b) {
                    best = Some((j, mag));
                }
            }
            match best {
                Some((j, _)) => self.pivot(r, j),
                None => drop_rows.push(r),
            }
        }
        for &r in drop_rows.iter().rev() {
            self.a.remove(r);
            self.b.remove(r);
            self.basis.remove(r);
            self.row_cols.remove(r);
            self.origin.remove(r);
            self.m -= 1;
        }
        for j in self.art_start..self.n_total {
            self.banned[j] = true;
        }
    }

    fn standard_point(&self, n_struct: usize) -> Vec<f64> {
        let mut x = vec![0.0; n_struct];
        for r in 0..self.m {
            let j = self.basis[r];
            if j < n_struct {
                x[j] = self.b[r].max(0.0);
            }
        }
        x
    }

    /// Dual multipliers of the original rows, from the phase-2 cost row.
    fn duals(&self, n_original_rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; n_original_rows];
        for r in 0..self.m {
            let Some(orig) = self.origin[r] else { continue };
            let rc = self.row_cols[r];
            let mut yi = if let Some(s) = rc.slack {
                -self.z2[s]
            } else if let Some(s) = rc.surplus {
                self.z2[s]
            } else if let Some(t) = rc.artificial {
                -self.z2[t]
            } else {
                0.0
            };
            if self.flipped[orig] {
                yi = -yi;
            }
            y[orig] = yi;
        }
        y
    }
}

fn run(p: &LpProblem, phase1_only: bool) -> Result<(LpSolution, Option<Vec<f64>>), LpError> {
    debug_assert!(
        p.objective.iter().all(|v| v.is_finite())
            && p.rows.iter().flatten().all(|v| v.is_finite())
            && p.rhs.iter().all(|v| v.is_finite()),
        "non-finite problem data"
    );
    let Some(std) = standardize(p) else {
        return Ok((LpSolution::non_optimal(LpStatus::Infeasible, 0), None));
    };
    let mut t = Tableau::build(&std);

    let has_artificials = t.art_start < t.n_total;
    if has_artificials {
        loop {
            match t.step(true)? {
                Step::Done => break,
                Step::Pivoted => {}
                Step::Unbounded => unreachable!("phase 1 is bounded below"),
            }
        }
        let scale = 1.0 + t.b.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if t.v1 > TOL_PHASE1 * scale {
            return Ok((LpSolution::non_optimal(LpStatus::Infeasible, t.pivots), None));
        }
        t.purge_artificials();
    }

    if !phase1_only {
        loop {
            match t.step(false)? {
                Step::Done => break,
                Step::Pivoted => {}
                Step::Unbounded => {
                    let value = match p.direction {
                        Direction::Minimize => f64::NEG_INFINITY,
                        Direction::Maximize => f64::INFINITY,
                    };
                    let mut sol = LpSolution::non_optimal(LpStatus::Unbounded, t.pivots);
                    sol.value = value;
                    return Ok((sol, None));
                }
            }
        }
    }

    // Map the standard-form vertex back to the original variables and clamp
    // into the boxes; the clamp only absorbs rounding, never moves a
    // coordinate by more than the solver tolerances.
    let xs = t.standard_point(std.n_cols);
    let mut x = vec![0.0; p.n_vars()];
    for (j, vm) in std.map.iter().enumerate() {
        x[j] = match *vm {
            VarMap::Shifted { col, lo } => lo + xs[col],
            VarMap::Flipped { col, hi } => hi - xs[col],
            VarMap::Split { pos, neg } => xs[pos] - xs[neg],
            VarMap::Fixed { value } => value,
        };
        x[j] = x[j].clamp(p.var_lower[j], p.var_upper[j]);
    }
    let value = dot(&p.objective, &x);
    let duals = t.duals(p.rows.len());
    Ok((
        LpSolution { status: LpStatus::Optimal, point: x, value, iterations: t.pivots },
        Some(duals),
    ))
}
