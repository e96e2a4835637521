//! Tightness certification for a computed bound: search for a full joint
//! distribution over (event, proxy, confounder, treatment) that realizes a
//! candidate optimizer. Finding one proves the bound is attained by an
//! actual model, so the certificate is one-sided: a verified witness means
//! "tight", absence means "unknown".

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consts::TOL_FEASIBLE;
use crate::lp::{self, Direction, LpProblem, LpStatus};
use crate::model::{build_ir_phi, PhiVector, ProblemSpec, Sense};

/// Accept an alternating-search candidate when its total absolute
/// residual over all soft constraint families drops below this.
const ACCEPT_VIOLATION: f64 = 1e-7;
/// Stop alternating when a full round improves the residual by less.
const STAGNATION: f64 = 1e-10;
/// Hard cap on alternating rounds per restart.
const MAX_ROUNDS: usize = 60;

/// A full joint model: `q[y][w][u][x]` plus the transition matrix
/// `transition[w][u]` that ties the proxy to the confounder.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JointWitness {
    pub q: Vec<Vec<Vec<Vec<f64>>>>,
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum TightnessError {
    #[error("witness shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Worst violation observed in one constraint family.
#[derive(Clone, Debug, Serialize)]
pub struct CategoryCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    /// Where the worst violation occurred, empty when the family is clean.
    pub location: String,
}

impl CategoryCheck {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Outcome of checking every witness invariant, one entry per family.
#[derive(Clone, Debug, Serialize)]
pub struct WitnessReport {
    pub ok: bool,
    pub categories: Vec<CategoryCheck>,
}

impl WitnessReport {
    pub fn worst_failure(&self) -> Option<&CategoryCheck> {
        self.categories
            .iter()
            .filter(|c| !c.passed())
            .max_by(|a, b| (a.worst / a.tolerance).total_cmp(&(b.worst / b.tolerance)))
    }
}

struct Shape {
    n_y: usize,
    n_w: usize,
    n_u: usize,
    n_x: usize,
}

fn check_shape(
    witness: &JointWitness,
    phi: &PhiVector,
    spec: &ProblemSpec,
) -> Result<Shape, TightnessError> {
    let shape = Shape {
        n_y: spec.n_y(),
        n_w: spec.n_w(),
        n_u: spec.d(),
        n_x: spec.n_x(),
    };
    if witness.q.len() != shape.n_y {
        return Err(TightnessError::ShapeMismatch(format!(
            "q has {} outcome rows, instance has {}",
            witness.q.len(),
            shape.n_y
        )));
    }
    for (y, qy) in witness.q.iter().enumerate() {
        if qy.len() != shape.n_w {
            return Err(TightnessError::ShapeMismatch(format!(
                "q[{y}] has {} proxy rows, instance has {}",
                qy.len(),
                shape.n_w
            )));
        }
        for (w, qyw) in qy.iter().enumerate() {
            if qyw.len() != shape.n_u {
                return Err(TightnessError::ShapeMismatch(format!(
                    "q[{y}][{w}] has {} confounder rows, instance has {}",
                    qyw.len(),
                    shape.n_u
                )));
            }
            for (u, qywu) in qyw.iter().enumerate() {
                if qywu.len() != shape.n_x {
                    return Err(TightnessError::ShapeMismatch(format!(
                        "q[{y}][{w}][{u}] has {} treatment entries, instance has {}",
                        qywu.len(),
                        shape.n_x
                    )));
                }
            }
        }
    }
    if witness.transition.len() != shape.n_w
        || witness.transition.iter().any(|row| row.len() != shape.n_u)
    {
        return Err(TightnessError::ShapeMismatch(
            "transition matrix does not match (proxy, confounder) dimensions".into(),
        ));
    }
    if phi.theta.len() != shape.n_u
        || phi.psi.len() != shape.n_u
        || phi.omega.len() != shape.n_u
    {
        return Err(TightnessError::ShapeMismatch(
            "phi length does not match the confounder dimension".into(),
        ));
    }
    Ok(shape)
}

/// Check every invariant a tightness witness must satisfy against the
/// candidate optimizer and the observed tables. Returns one worst-violation
/// entry per constraint family; `ok` iff all families pass.
pub fn verify_witness(
    witness: &JointWitness,
    phi: &PhiVector,
    spec: &ProblemSpec,
) -> Result<WitnessReport, TightnessError> {
    let s = check_shape(witness, phi, spec)?;
    let q = &witness.q;
    let p = &witness.transition;
    let mut categories = Vec::with_capacity(7);

    let mut track = |name: &'static str, tolerance: f64, worst: f64, location: String| {
        categories.push(CategoryCheck { name, worst, tolerance, location });
    };

    let mut worst = 0.0f64;
    let mut at = String::new();
    let mut total = 0.0;
    for y in 0..s.n_y {
        for w in 0..s.n_w {
            for u in 0..s.n_u {
                for x in 0..s.n_x {
                    let v = q[y][w][u][x];
                    total += v;
                    if -v > worst {
                        worst = -v;
                        at = format!("q[{y}][{w}][{u}][{x}]");
                    }
                }
            }
        }
    }
    track("nonnegativity", 1e-9, worst, at);
    track(
        "normalization",
        1e-9,
        (total - 1.0).abs(),
        format!("sum(q) = {total}"),
    );

    let mut worst = 0.0f64;
    let mut at = String::new();
    for u in 0..s.n_u {
        let col: f64 = (0..s.n_w).map(|w| p[w][u]).sum();
        if (col - 1.0).abs() > worst {
            worst = (col - 1.0).abs();
            at = format!("column u={u} sums to {col}");
        }
    }
    track("column-stochastic", 1e-9, worst, at);

    let mut worst = 0.0f64;
    let mut at = String::new();
    for w in 0..s.n_w {
        for u in 0..s.n_u {
            let below = spec.transition_bounds.lower[w][u] - p[w][u];
            let above = p[w][u] - spec.transition_bounds.upper[w][u];
            let v = below.max(above);
            if v > worst {
                worst = v;
                at = format!("P[{w}][{u}] = {}", p[w][u]);
            }
        }
    }
    track("transition-bounds", 1e-9, worst, at);

    // f(W = w | U = u) must be constant in the treatment: the event slice
    // of the joint factorizes through the transition matrix.
    let mut worst = 0.0f64;
    let mut at = String::new();
    for u in 0..s.n_u {
        for x in 0..s.n_x {
            let mass_ux: f64 = (0..s.n_y)
                .map(|y| (0..s.n_w).map(|w| q[y][w][u][x]).sum::<f64>())
                .sum();
            for w in 0..s.n_w {
                let lhs: f64 = (0..s.n_y).map(|y| q[y][w][u][x]).sum();
                let v = (lhs - p[w][u] * mass_ux).abs();
                if v > worst {
                    worst = v;
                    at = format!("(w={w}, u={u}, x={x})");
                }
            }
        }
    }
    track("conditional-independence", 1e-8, worst, at);

    let mut worst = 0.0f64;
    let mut at = String::new();
    for y in 0..s.n_y {
        for w in 0..s.n_w {
            for x in 0..s.n_x {
                let lhs: f64 = (0..s.n_u).map(|u| q[y][w][u][x]).sum();
                let v = (lhs - spec.observed.p[y][w][x]).abs();
                if v > worst {
                    worst = v;
                    at = format!("(y={y}, w={w}, x={x})");
                }
            }
        }
    }
    track("marginal-match", 1e-8, worst, at);

    let xs = spec.target_x;
    let mut worst = 0.0f64;
    let mut at = String::new();
    for u in 0..s.n_u {
        let theta: f64 = (0..s.n_w).map(|w| q[0][w][u][xs]).sum();
        let psi: f64 = (0..s.n_y)
            .map(|y| (0..s.n_w).map(|w| q[y][w][u][xs]).sum::<f64>())
            .sum();
        let omega: f64 = (0..s.n_y)
            .map(|y| {
                (0..s.n_w)
                    .map(|w| {
                        (0..s.n_x)
                            .filter(|&x| x != xs)
                            .map(|x| q[y][w][u][x])
                            .sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .sum();
        for (label, got, want) in [
            ("theta", theta, phi.theta[u]),
            ("psi", psi, phi.psi[u]),
            ("omega", omega, phi.omega[u]),
        ] {
            let v = (got - want).abs();
            if v > worst {
                worst = v;
                at = format!("{label}[{u}] = {got}, candidate has {want}");
            }
        }
    }
    track("phi-compatibility", 1e-8, worst, at);

    let ok = categories.iter().all(CategoryCheck::passed);
    Ok(WitnessReport { ok, categories })
}

/// Flat index into the stacked q variables.
fn q_index(s: &Shape, y: usize, w: usize, u: usize, x: usize) -> usize {
    ((y * s.n_w + w) * s.n_u + u) * s.n_x + x
}

/// The soft equality families of the witness system, as rows over the q
/// variables for a fixed transition matrix: conditional independence,
/// marginal match, and compatibility with the candidate optimizer.
fn soft_rows_for_q(
    s: &Shape,
    spec: &ProblemSpec,
    phi: &PhiVector,
    p: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_q = s.n_y * s.n_w * s.n_u * s.n_x;
    let mut rows = Vec::new();
    let mut rhs = Vec::new();

    for w in 0..s.n_w {
        for u in 0..s.n_u {
            for x in 0..s.n_x {
                let mut row = vec![0.0; n_q];
                for y in 0..s.n_y {
                    row[q_index(s, y, w, u, x)] += 1.0;
                    for wp in 0..s.n_w {
                        row[q_index(s, y, wp, u, x)] -= p[w][u];
                    }
                }
                rows.push(row);
                rhs.push(0.0);
            }
        }
    }

    for y in 0..s.n_y {
        for w in 0..s.n_w {
            for x in 0..s.n_x {
                let mut row = vec![0.0; n_q];
                for u in 0..s.n_u {
                    row[q_index(s, y, w, u, x)] = 1.0;
                }
                rows.push(row);
                rhs.push(spec.observed.p[y][w][x]);
            }
        }
    }

    let xs = spec.target_x;
    for u in 0..s.n_u {
        let mut row = vec![0.0; n_q];
        for w in 0..s.n_w {
            row[q_index(s, 0, w, u, xs)] = 1.0;
        }
        rows.push(row);
        rhs.push(phi.theta[u]);

        let mut row = vec![0.0; n_q];
        for y in 0..s.n_y {
            for w in 0..s.n_w {
                row[q_index(s, y, w, u, xs)] = 1.0;
            }
        }
        rows.push(row);
        rhs.push(phi.psi[u]);

        let mut row = vec![0.0; n_q];
        for y in 0..s.n_y {
            for w in 0..s.n_w {
                for x in (0..s.n_x).filter(|&x| x != xs) {
                    row[q_index(s, y, w, u, x)] = 1.0;
                }
            }
        }
        rows.push(row);
        rhs.push(phi.omega[u]);
    }

    (rows, rhs)
}

/// Append a +/- slack pair to each row and solve for the minimum total
/// absolute residual subject to the hard rows. Returns the solution's
/// structural part and the attained residual.
fn min_violation_lp(
    n_structural: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    hard_rows: Vec<Vec<f64>>,
    hard_rhs: Vec<f64>,
    soft_rows: &[Vec<f64>],
    soft_rhs: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let n_soft = soft_rows.len();
    let n = n_structural + 2 * n_soft;
    let mut rows = Vec::with_capacity(hard_rows.len() + n_soft);
    let mut rhs = Vec::with_capacity(hard_rhs.len() + n_soft);
    let mut senses = Vec::with_capacity(hard_rows.len() + n_soft);
    for (row, b) in hard_rows.into_iter().zip(hard_rhs) {
        let mut padded = row;
        padded.resize(n, 0.0);
        rows.push(padded);
        rhs.push(b);
        senses.push(Sense::Eq);
    }
    for (k, (row, b)) in soft_rows.iter().zip(soft_rhs).enumerate() {
        let mut padded = row.clone();
        padded.resize(n, 0.0);
        padded[n_structural + 2 * k] = -1.0;
        padded[n_structural + 2 * k + 1] = 1.0;
        rows.push(padded);
        rhs.push(*b);
        senses.push(Sense::Eq);
    }
    let mut var_lower = lower;
    var_lower.resize(n, 0.0);
    let mut var_upper = upper;
    var_upper.resize(n, f64::INFINITY);
    let mut objective = vec![0.0; n];
    for c in objective.iter_mut().skip(n_structural) {
        *c = 1.0;
    }
    let problem = LpProblem::new(
        Direction::Minimize,
        objective,
        rows,
        senses,
        rhs,
        var_lower,
        var_upper,
    );
    let sol = lp::solve(&problem).ok()?;
    if sol.status != LpStatus::Optimal {
        return None;
    }
    Some((sol.point[..n_structural].to_vec(), sol.value))
}

/// Best q for a fixed transition matrix.
fn q_step(
    s: &Shape,
    spec: &ProblemSpec,
    phi: &PhiVector,
    p: &[Vec<f64>],
) -> Option<Vec<f64>> {
    let n_q = s.n_y * s.n_w * s.n_u * s.n_x;
    let (soft_rows, soft_rhs) = soft_rows_for_q(s, spec, phi, p);
    let (point, _) = min_violation_lp(
        n_q,
        vec![0.0; n_q],
        vec![1.0; n_q],
        vec![vec![1.0; n_q]],
        vec![1.0],
        &soft_rows,
        &soft_rhs,
    )?;
    Some(point)
}

/// Best transition matrix for a fixed q: only the conditional-independence
/// family involves it, subject to the bound box and column sums.
fn p_step(s: &Shape, spec: &ProblemSpec, q: &[f64]) -> Option<Vec<Vec<f64>>> {
    let n_p = s.n_w * s.n_u;
    let p_index = |w: usize, u: usize| w * s.n_u + u;
    let mut lower = vec![0.0; n_p];
    let mut upper = vec![0.0; n_p];
    for w in 0..s.n_w {
        for u in 0..s.n_u {
            lower[p_index(w, u)] = spec.transition_bounds.lower[w][u];
            upper[p_index(w, u)] = spec.transition_bounds.upper[w][u];
        }
    }
    let mut hard_rows = Vec::with_capacity(s.n_u);
    let mut hard_rhs = Vec::with_capacity(s.n_u);
    for u in 0..s.n_u {
        let mut row = vec![0.0; n_p];
        for w in 0..s.n_w {
            row[p_index(w, u)] = 1.0;
        }
        hard_rows.push(row);
        hard_rhs.push(1.0);
    }
    let mut soft_rows = Vec::new();
    let mut soft_rhs = Vec::new();
    for w in 0..s.n_w {
        for u in 0..s.n_u {
            for x in 0..s.n_x {
                let mass_ux: f64 = (0..s.n_y)
                    .map(|y| {
                        (0..s.n_w)
                            .map(|wp| q[q_index(s, y, wp, u, x)])
                            .sum::<f64>()
                    })
                    .sum();
                let slice: f64 = (0..s.n_y).map(|y| q[q_index(s, y, w, u, x)]).sum();
                let mut row = vec![0.0; n_p];
                row[p_index(w, u)] = -mass_ux;
                soft_rows.push(row);
                soft_rhs.push(-slice);
            }
        }
    }
    let (point, _) = min_violation_lp(
        n_p,
        lower,
        upper,
        hard_rows,
        hard_rhs,
        &soft_rows,
        &soft_rhs,
    )?;
    let mut p = vec![vec![0.0; s.n_u]; s.n_w];
    for w in 0..s.n_w {
        for u in 0..s.n_u {
            p[w][u] = point[p_index(w, u)];
        }
    }
    Some(p)
}

/// Total absolute residual of the soft families at (q, p).
fn total_violation(
    s: &Shape,
    spec: &ProblemSpec,
    phi: &PhiVector,
    q: &[f64],
    p: &[Vec<f64>],
) -> f64 {
    let (rows, rhs) = soft_rows_for_q(s, spec, phi, p);
    rows.iter()
        .zip(&rhs)
        .map(|(row, b)| {
            let lhs: f64 = row.iter().zip(q).map(|(a, v)| a * v).sum();
            (lhs - b).abs()
        })
        .sum()
}

/// A column-stochastic matrix inside the bound box, built by topping up
/// the lower bounds in a shuffled row order. None when no such matrix
/// exists for some column.
fn seed_transition(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    let n_w = spec.n_w();
    let n_u = spec.d();
    let mut p = vec![vec![0.0; n_u]; n_w];
    let mut order: Vec<usize> = (0..n_w).collect();
    for u in 0..n_u {
        let mut deficit = 1.0;
        for w in 0..n_w {
            p[w][u] = spec.transition_bounds.lower[w][u];
            deficit -= p[w][u];
        }
        if deficit < -TOL_FEASIBLE {
            return None;
        }
        order.shuffle(rng);
        for &w in &order {
            let room = spec.transition_bounds.upper[w][u] - p[w][u];
            let add = deficit.min(room).max(0.0);
            p[w][u] += add;
            deficit -= add;
        }
        if deficit > TOL_FEASIBLE {
            return None;
        }
    }
    Some(p)
}

fn reshape_q(s: &Shape, q: &[f64]) -> Vec<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![vec![vec![vec![0.0; s.n_x]; s.n_u]; s.n_w]; s.n_y];
    for y in 0..s.n_y {
        for w in 0..s.n_w {
            for u in 0..s.n_u {
                for x in 0..s.n_x {
                    out[y][w][u][x] = q[q_index(s, y, w, u, x)];
                }
            }
        }
    }
    out
}

/// Search for a joint witness compatible with `phi` by alternating two
/// linear programs: the best q for a fixed transition matrix, then the
/// best transition matrix for a fixed q, until the residual stagnates.
/// Restarts re-seed the initial matrix; the first restart index whose
/// candidate passes the verifier wins. Absence of a witness is an
/// inconclusive outcome, not an error.
pub fn find_witness(
    phi: &PhiVector,
    spec: &ProblemSpec,
    restarts: u32,
) -> Option<JointWitness> {
    find_witness_seeded(phi, spec, restarts, 0)
}

/// `find_witness` with an explicit seed for the restart sequence.
pub fn find_witness_seeded(
    phi: &PhiVector,
    spec: &ProblemSpec,
    restarts: u32,
    seed: u64,
) -> Option<JointWitness> {
    spec.validate().ok()?;
    let d = spec.d();
    if phi.theta.len() != d || phi.psi.len() != d || phi.omega.len() != d {
        return None;
    }
    let ir = build_ir_phi(spec);
    ir.check_point(&phi.flat(), TOL_FEASIBLE).ok()?;
    let s = Shape { n_y: spec.n_y(), n_w: spec.n_w(), n_u: d, n_x: spec.n_x() };

    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let Some(mut p) = seed_transition(spec, &mut rng) else {
            return None;
        };
        let mut best_effort: Option<(Vec<f64>, Vec<Vec<f64>>)> = None;
        let mut prev = f64::INFINITY;
        for _ in 0..MAX_ROUNDS {
            let Some(q) = q_step(&s, spec, phi, &p) else {
                break;
            };
            let Some(p_next) = p_step(&s, spec, &q) else {
                break;
            };
            p = p_next;
            let violation = total_violation(&s, spec, phi, &q, &p);
            best_effort = Some((q, p.clone()));
            if violation < ACCEPT_VIOLATION || prev - violation < STAGNATION {
                break;
            }
            prev = violation;
        }
        if let Some((q, p)) = best_effort {
            let witness = JointWitness { q: reshape_q(&s, &q), transition: p };
            if let Ok(report) = verify_witness(&witness, phi, spec) {
                if report.ok {
                    return Some(witness);
                }
            }
        }
    }
    None
}
