//! The difference-of-convex split of the lifted objective and its affine
//! under- and over-estimators.
//!
//! The lifted vector gamma stacks four blocks of length d: the reciprocal
//! block psi_knockoff, then theta, psi, omega. Each ratio term
//! `theta_i omega_i / psi_i` of the objective becomes the triple product
//! `psi_knockoff_i * theta_i * omega_i`, which splits as `C1 - C2` with
//! both parts convex polynomials; the coupling `psi_knockoff_i * psi_i = 1`
//! splits likewise as `D1 - D2`. Convexity sandwiches every part between
//! its tangent plane (below) and its vertex-interpolating secant plane
//! (above) on any simplex, which is what the per-node linear relaxation is
//! built from.

use crate::geometry::Simplex;
use crate::linalg::{dot, Lu};

/// Pivot threshold for the vertex interpolation system.
const DEGENERACY_TOL: f64 = 1e-10;
/// Slack allowed below `psi_min` before the objective refuses to evaluate.
const PSI_SLACK: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DcError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("degenerate simplex: {0}")]
    DegenerateSimplex(String),
}

/// Lifted decision vector `(psi_knockoff, theta, psi, omega)`, stored
/// contiguously in that block order.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaVector {
    data: Vec<f64>,
    d: usize,
}

impl GammaVector {
    pub fn new(data: Vec<f64>, d: usize) -> GammaVector {
        assert_eq!(data.len(), 4 * d);
        GammaVector { data, d }
    }

    pub fn from_blocks(
        psi_knockoff: &[f64],
        theta: &[f64],
        psi: &[f64],
        omega: &[f64],
    ) -> GammaVector {
        let d = psi_knockoff.len();
        assert!(d == theta.len() && d == psi.len() && d == omega.len());
        let mut data = Vec::with_capacity(4 * d);
        data.extend_from_slice(psi_knockoff);
        data.extend_from_slice(theta);
        data.extend_from_slice(psi);
        data.extend_from_slice(omega);
        GammaVector { data, d }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn psi_knockoff(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn theta(&self, i: usize) -> f64 {
        self.data[self.d + i]
    }

    pub fn psi(&self, i: usize) -> f64 {
        self.data[2 * self.d + i]
    }

    pub fn omega(&self, i: usize) -> f64 {
        self.data[3 * self.d + i]
    }
}

/// `c . x + offset` with exact affine arithmetic.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFunction {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl AffineFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.coeffs, x) + self.offset
    }
}

/// The convex pieces of the decomposition. `D1`/`D2` carry the coordinate
/// index of the reciprocal pair they constrain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    C1,
    C2,
    D1(usize),
    D2(usize),
}

/// Sum-of-ratios part of the objective, `sum_i theta_i omega_i / psi_i`
/// (callers add the constant event mass themselves).
pub fn eval_sos(phi: &crate::model::PhiVector, psi_min: f64) -> Result<f64, DcError> {
    let mut total = 0.0;
    for i in 0..phi.psi.len() {
        if phi.psi[i] < psi_min - PSI_SLACK {
            return Err(DcError::DomainError(format!(
                "psi[{i}] = {} below the floor {psi_min}",
                phi.psi[i]
            )));
        }
        total += phi.theta[i] * phi.omega[i] / phi.psi[i];
    }
    Ok(total)
}

/// Per-triple term of C1 at `(a, b, c) = (psi_knockoff_i, theta_i, omega_i)`.
fn c1_term(a: f64, b: f64, c: f64) -> f64 {
    let s = a + b + c;
    s * s * s / 6.0
        + 0.5 * (a.powi(4) + b.powi(4) + c.powi(4))
        + 0.5 * (a * a + b * b + c * c)
}

/// Per-triple term of C2: cyclic cubes plus both cyclic square groups.
fn c2_term(a: f64, b: f64, c: f64) -> f64 {
    let cubes = (a.powi(3) + b.powi(3) + c.powi(3)) / 6.0;
    let sq = |x: f64| x * x;
    let first = sq(a * a + b) + sq(b * b + c) + sq(c * c + a);
    let second = sq(a + b * b) + sq(b + c * c) + sq(c + a * a);
    cubes + 0.25 * first + 0.25 * second
}

fn triple(gamma: &[f64], d: usize, i: usize) -> (f64, f64, f64) {
    (gamma[i], gamma[d + i], gamma[3 * d + i])
}

/// Both convex halves of the objective split; their difference is the
/// triple-product sum exactly.
pub fn eval_c(g: &GammaVector) -> (f64, f64) {
    let (mut c1, mut c2) = (0.0, 0.0);
    for i in 0..g.d {
        let (a, b, c) = triple(&g.data, g.d, i);
        c1 += c1_term(a, b, c);
        c2 += c2_term(a, b, c);
    }
    (c1, c2)
}

/// Both convex halves of the reciprocal coupling at coordinate `i`; their
/// difference is `psi_knockoff_i * psi_i` exactly.
pub fn eval_d(g: &GammaVector, i: usize) -> (f64, f64) {
    assert!(i < g.d);
    let (a, p) = (g.psi_knockoff(i), g.psi(i));
    (0.5 * (a + p) * (a + p), 0.5 * (a * a + p * p))
}

/// Evaluate one component on a raw gamma slice.
pub(crate) fn eval_component(c: Component, gamma: &[f64], d: usize) -> f64 {
    debug_assert_eq!(gamma.len(), 4 * d);
    match c {
        Component::C1 => (0..d)
            .map(|i| {
                let (a, b, cc) = triple(gamma, d, i);
                c1_term(a, b, cc)
            })
            .sum(),
        Component::C2 => (0..d)
            .map(|i| {
                let (a, b, cc) = triple(gamma, d, i);
                c2_term(a, b, cc)
            })
            .sum(),
        Component::D1(i) => {
            let (a, p) = (gamma[i], gamma[2 * d + i]);
            0.5 * (a + p) * (a + p)
        }
        Component::D2(i) => {
            let (a, p) = (gamma[i], gamma[2 * d + i]);
            0.5 * (a * a + p * p)
        }
    }
}

/// Analytic gradient of one component.
pub(crate) fn gradient(c: Component, gamma: &[f64], d: usize) -> Vec<f64> {
    let mut g = vec![0.0; 4 * d];
    match c {
        Component::C1 => {
            for i in 0..d {
                let (a, b, cc) = triple(gamma, d, i);
                let s = a + b + cc;
                let part = |x: f64| 0.5 * s * s + 2.0 * x.powi(3) + x;
                g[i] = part(a);
                g[d + i] = part(b);
                g[3 * d + i] = part(cc);
            }
        }
        Component::C2 => {
            for i in 0..d {
                let (a, b, cc) = triple(gamma, d, i);
                let s = a + b + cc;
                let q = a * a + b * b + cc * cc;
                let part =
                    |x: f64| 2.0 * x.powi(3) + 0.5 * x * x + x + x * (s - x) + 0.5 * (q - x * x);
                g[i] = part(a);
                g[d + i] = part(b);
                g[3 * d + i] = part(cc);
            }
        }
        Component::D1(i) => {
            let (a, p) = (gamma[i], gamma[2 * d + i]);
            g[i] = a + p;
            g[2 * d + i] = a + p;
        }
        Component::D2(i) => {
            g[i] = gamma[i];
            g[2 * d + i] = gamma[2 * d + i];
        }
    }
    g
}

/// Tangent-plane under-estimator of a convex component at an anchor
/// (engine anchors at the simplex barycenter).
pub fn tangent(c: Component, anchor: &GammaVector) -> AffineFunction {
    let coeffs = gradient(c, &anchor.data, anchor.d);
    let offset = eval_component(c, &anchor.data, anchor.d) - dot(&coeffs, &anchor.data);
    AffineFunction { coeffs, offset }
}

/// Shared factorization of one simplex's vertex system, so every secant on
/// that simplex costs a single triangular solve.
pub(crate) struct Interpolator {
    lu: Lu,
    dim: usize,
}

impl Interpolator {
    pub(crate) fn new(s: &Simplex) -> Result<Interpolator, DcError> {
        let (m, n) = s.augmented_matrix();
        let lu = Lu::factor(&m, n);
        let scale = m.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
        if lu.singular || lu.min_abs_diag() <= DEGENERACY_TOL * scale {
            return Err(DcError::DegenerateSimplex(format!(
                "vertex system pivot below {DEGENERACY_TOL:e}"
            )));
        }
        Ok(Interpolator { lu, dim: s.dim() })
    }

    /// The unique affine function matching the given per-vertex values.
    pub(crate) fn interpolate(&self, values: &[f64]) -> AffineFunction {
        assert_eq!(values.len(), self.dim + 1);
        let sol = self.lu.solve(values).expect("nondegeneracy checked at construction");
        AffineFunction { coeffs: sol[..self.dim].to_vec(), offset: sol[self.dim] }
    }
}

/// Secant-plane over-estimator: the affine function agreeing with the
/// component at every vertex of the simplex, which convexity keeps above
/// the component throughout the cell.
pub fn secant(c: Component, s: &Simplex) -> Result<AffineFunction, DcError> {
    assert_eq!(s.dim() % 4, 0, "gamma simplices live in 4d dimensions");
    let d = s.dim() / 4;
    let interp = Interpolator::new(s)?;
    let values: Vec<f64> = s.vertices.iter().map(|v| eval_component(c, v, d)).collect();
    Ok(interp.interpolate(&values))
}

/// Euclidean norm of the gradient of the triple-product sum
/// `sum_i psi_knockoff_i theta_i omega_i`. Every entry is a product of
/// coordinates, so on the nonnegative orthant the norm is monotone in each
/// coordinate; evaluating at a box's upper corner bounds it over the box.
pub(crate) fn grad_norm_product(gamma: &[f64], d: usize) -> f64 {
    let mut sq = 0.0;
    for i in 0..d {
        let (a, b, c) = triple(gamma, d, i);
        sq += (b * c) * (b * c) + (a * c) * (a * c) + (a * b) * (a * b);
    }
    sq.sqrt()
}

/// Frobenius norms of the C1/C2 Hessians. Both have per-triple diagonal
/// `6x^2 + s + 1`; C1 couples off-diagonal pairs by `s`, C2 by `x + y`.
/// All entries are nonnegative-coefficient polynomials, so these norms are
/// also monotone on the nonnegative orthant.
pub(crate) fn hess_frobenius(c: Component, gamma: &[f64], d: usize) -> f64 {
    let mut sq = 0.0;
    for i in 0..d {
        let (a, b, cc) = triple(gamma, d, i);
        let s = a + b + cc;
        for x in [a, b, cc] {
            let diag = 6.0 * x * x + s + 1.0;
            sq += diag * diag;
        }
        match c {
            Component::C1 => sq += 6.0 * s * s,
            Component::C2 => {
                for pair in [a + b, b + cc, a + cc] {
                    sq += 2.0 * pair * pair;
                }
            }
            _ => panic!("Hessian norms are defined for the objective split only"),
        }
    }
    sq.sqrt()
}
