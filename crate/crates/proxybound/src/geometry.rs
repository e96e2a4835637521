//! Simplex geometry for the branch-and-bound engine: construction of the
//! enclosing root simplex from the linearized feasible set, longest-edge
//! bisection, barycentric coordinates, and diameters.

use crate::linalg::Lu;
use crate::lp::{self, Direction, LpProblem, LpStatus};
use crate::model::{LinearConstraintSystem, ProblemSpec};

/// Barycentric membership tolerance; boundary points are members.
pub const MEMBERSHIP_TOL: f64 = 1e-10;
/// Pivot threshold below which the vertex system counts as singular.
const DEGENERACY_TOL: f64 = 1e-10;
/// Relative floor on the root-simplex span. A point-identified instance
/// pins every coordinate, which collapses the span to zero; flooring it
/// keeps the simplex full-dimensional and only enlarges the enclosure.
pub(crate) const MIN_SPAN_FACTOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    /// The linearized feasible set has no point at all.
    #[error("empty feasible region: the compatibility constraints admit no solution")]
    EmptyFeasibleRegion,
    #[error("degenerate simplex: {0}")]
    DegenerateSimplex(String),
    #[error(transparent)]
    Numerical(#[from] lp::LpError),
}

/// A full-dimensional simplex: `dim + 1` vertices in `dim`-space, plus its
/// branch-and-bound bookkeeping (identity, parentage, and how many
/// bisections deep this lineage is).
#[derive(Clone, Debug)]
pub struct Simplex {
    pub id: u64,
    pub parent: Option<u64>,
    /// Number of ancestor bisections along this lineage.
    pub chain_len: u32,
    pub vertices: Vec<Vec<f64>>,
    /// Max pairwise vertex distance, fixed at construction.
    pub diameter: f64,
}

fn max_pairwise_distance(vertices: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..vertices.len() {
        for j in i + 1..vertices.len() {
            let d2: f64 = vertices[i]
                .iter()
                .zip(&vertices[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}

impl Simplex {
    /// Construct and verify nondegeneracy of the vertex system.
    pub fn new(
        id: u64,
        parent: Option<u64>,
        chain_len: u32,
        vertices: Vec<Vec<f64>>,
    ) -> Result<Simplex, GeometryError> {
        let s = Simplex::new_unchecked(id, parent, chain_len, vertices);
        let (m, n) = s.augmented_matrix();
        let lu = Lu::factor(&m, n);
        let scale = m.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
        if lu.singular || lu.min_abs_diag() <= DEGENERACY_TOL * scale {
            return Err(GeometryError::DegenerateSimplex(format!(
                "vertex system pivot below {DEGENERACY_TOL:e}"
            )));
        }
        Ok(s)
    }

    /// Construction without the solvability check, for bisection children
    /// (halving a nondegenerate simplex cannot make it degenerate).
    pub(crate) fn new_unchecked(
        id: u64,
        parent: Option<u64>,
        chain_len: u32,
        vertices: Vec<Vec<f64>>,
    ) -> Simplex {
        let dim = vertices.first().map_or(0, Vec::len);
        assert!(dim >= 1, "simplex needs at least one dimension");
        assert_eq!(vertices.len(), dim + 1, "simplex needs dim+1 vertices");
        assert!(vertices.iter().all(|v| v.len() == dim));
        let diameter = max_pairwise_distance(&vertices);
        Simplex { id, parent, chain_len, vertices, diameter }
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn barycenter(&self) -> Vec<f64> {
        let dim = self.dim();
        let mut c = vec![0.0; dim];
        for v in &self.vertices {
            for (ci, vi) in c.iter_mut().zip(v) {
                *ci += vi;
            }
        }
        let k = self.vertices.len() as f64;
        c.iter_mut().for_each(|ci| *ci /= k);
        c
    }

    /// Vertex-pair indices of the longest edge, ties broken by the
    /// lexicographically smallest pair so traces are reproducible.
    pub fn longest_edge(&self) -> (usize, usize) {
        let mut best = (0, 1);
        let mut best_len = f64::NEG_INFINITY;
        for i in 0..self.vertices.len() {
            for j in i + 1..self.vertices.len() {
                let d2: f64 = self.vertices[i]
                    .iter()
                    .zip(&self.vertices[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 > best_len {
                    best_len = d2;
                    best = (i, j);
                }
            }
        }
        best
    }

    /// Longest-edge bisection: replace each endpoint of the longest edge by
    /// its midpoint in turn. Children extend this lineage by one.
    pub fn bisect(&self, id_first: u64, id_second: u64) -> (Simplex, Simplex) {
        let (i, j) = self.longest_edge();
        let mid: Vec<f64> = self.vertices[i]
            .iter()
            .zip(&self.vertices[j])
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let mut va = self.vertices.clone();
        va[i] = mid.clone();
        let mut vb = self.vertices.clone();
        vb[j] = mid;
        let child = |id: u64, v: Vec<Vec<f64>>| {
            Simplex::new_unchecked(id, Some(self.id), self.chain_len + 1, v)
        };
        (child(id_first, va), child(id_second, vb))
    }

    /// Row-major `(dim+1) x (dim+1)` matrix with rows `[v_i^T, 1]`. Solving
    /// it interpolates an affine function through the vertices; solving its
    /// transpose yields barycentric coordinates.
    pub(crate) fn augmented_matrix(&self) -> (Vec<f64>, usize) {
        let n = self.dim() + 1;
        let mut m = vec![0.0; n * n];
        for (i, v) in self.vertices.iter().enumerate() {
            m[i * n..i * n + n - 1].copy_from_slice(v);
            m[i * n + n - 1] = 1.0;
        }
        (m, n)
    }

    /// Coordinates lambda with `sum lambda_i v_i = point`, `sum lambda = 1`.
    pub fn barycentric(&self, point: &[f64]) -> Result<Vec<f64>, GeometryError> {
        assert_eq!(point.len(), self.dim());
        let (m, n) = self.augmented_matrix();
        let lu = Lu::factor(&m, n);
        let mut rhs = point.to_vec();
        rhs.push(1.0);
        lu.solve_transposed(&rhs).ok_or_else(|| {
            GeometryError::DegenerateSimplex("vertex system is singular".into())
        })
    }

    /// Closed-simplex membership within the barycentric tolerance.
    pub fn contains(&self, point: &[f64]) -> bool {
        match self.barycentric(point) {
            Ok(lambda) => {
                let sum: f64 = lambda.iter().sum();
                lambda.iter().all(|&l| l >= -MEMBERSHIP_TOL) && (sum - 1.0).abs() <= MEMBERSHIP_TOL
            }
            Err(_) => false,
        }
    }
}

/// Per-block coordinate bounds over the linearized feasible set, plus the
/// sum cap `alpha` derived from them.
#[derive(Clone, Debug)]
pub struct BlockEnclosure {
    /// Coordinatewise minima of (psi_knockoff, theta, psi, omega).
    pub gamma_low: Vec<f64>,
    /// Coordinatewise maxima; the theta/omega maxima are diagnostics only,
    /// the construction itself needs just the psi block.
    pub gamma_high: Vec<f64>,
    pub alpha: f64,
    pub psi_low: f64,
    pub psi_high: f64,
}

/// Bound every coordinate of one latent block over its polyhedron by LP,
/// extend to the reciprocal block (`1/psi` reverses and swaps the psi
/// bounds), and assemble the sum cap
/// `alpha = 1 + numerator_total + d^2 (psi_l + psi_u)^2 / (4 f_x psi_l psi_u)`,
/// whose last term caps `sum 1/psi_i` over any feasible split of `f_x`.
pub(crate) fn enclose_block(
    ir: &LinearConstraintSystem,
    d: usize,
    numerator_total: f64,
    f_x: f64,
    psi_min: f64,
) -> Result<BlockEnclosure, GeometryError> {
    assert_eq!(ir.n_vars, 3 * d);
    if lp::feasible_point_of(ir)?.is_none() {
        return Err(GeometryError::EmptyFeasibleRegion);
    }

    let mut phi_low = vec![0.0; 3 * d];
    let mut phi_high = vec![0.0; 3 * d];
    for j in 0..3 * d {
        let mut c = vec![0.0; 3 * d];
        c[j] = 1.0;
        for (dir, out) in [
            (Direction::Minimize, &mut phi_low),
            (Direction::Maximize, &mut phi_high),
        ] {
            let sol = lp::solve(&LpProblem::from_system(ir, c.clone(), dir))?;
            match sol.status {
                LpStatus::Optimal => out[j] = sol.value,
                LpStatus::Infeasible => return Err(GeometryError::EmptyFeasibleRegion),
                LpStatus::Unbounded => {
                    return Err(GeometryError::Numerical(lp::LpError::NumericalBreakdown(
                        format!("coordinate {j} unbounded over a boxed polyhedron"),
                    )))
                }
            }
        }
    }

    let mut gamma_low = vec![0.0; 4 * d];
    let mut gamma_high = vec![0.0; 4 * d];
    for i in 0..d {
        let psi_lo = phi_low[d + i].max(psi_min);
        let psi_hi = phi_high[d + i];
        gamma_low[i] = 1.0 / psi_hi;
        gamma_high[i] = 1.0 / psi_lo;
        gamma_low[d + i] = phi_low[i];
        gamma_high[d + i] = phi_high[i];
        gamma_low[2 * d + i] = psi_lo;
        gamma_high[2 * d + i] = psi_hi;
        gamma_low[3 * d + i] = phi_low[2 * d + i];
        gamma_high[3 * d + i] = phi_high[2 * d + i];
    }
    let psi_low = (0..d).map(|i| gamma_low[2 * d + i]).fold(f64::INFINITY, f64::min);
    let psi_high = (0..d).map(|i| gamma_high[2 * d + i]).fold(0.0f64, f64::max);
    let dd = d as f64;
    let alpha = 1.0
        + numerator_total
        + dd * dd * (psi_low + psi_high).powi(2) / (4.0 * f_x * psi_low * psi_high);
    Ok(BlockEnclosure { gamma_low, gamma_high, alpha, psi_low, psi_high })
}

/// Root simplex spanned from the coordinatewise lows: vertex 0 at the low
/// corner, vertex i shifted by the span along coordinate i. The span is
/// floored so a fully pinned instance still yields a usable simplex.
pub(crate) fn span_simplex(gamma_low: &[f64], alpha: f64) -> (Simplex, f64) {
    let low_sum: f64 = gamma_low.iter().sum();
    let span = (alpha - low_sum).max(MIN_SPAN_FACTOR * (1.0 + alpha.abs()));
    let dim = gamma_low.len();
    let mut vertices = Vec::with_capacity(dim + 1);
    vertices.push(gamma_low.to_vec());
    for i in 0..dim {
        let mut v = gamma_low.to_vec();
        v[i] += span;
        vertices.push(v);
    }
    (Simplex::new_unchecked(0, None, 0, vertices), span)
}

/// The root simplex plus the enclosure data it was built from.
#[derive(Clone, Debug)]
pub struct InitializedSimplex {
    pub simplex: Simplex,
    pub gamma_low: Vec<f64>,
    pub gamma_high: Vec<f64>,
    pub alpha: f64,
    pub psi_low: f64,
    pub psi_high: f64,
    pub span: f64,
}

/// Construct the enclosing root simplex for an event-mode instance: bound
/// every latent coordinate over `ir` by LP, extend to the reciprocal
/// block, cap the coordinate sum by `alpha`, and span a simplex from the
/// low corner. Every feasible lifted vector lies inside it.
pub fn initialize_simplex_full(
    spec: &ProblemSpec,
    ir: &LinearConstraintSystem,
) -> Result<InitializedSimplex, GeometryError> {
    let d = spec.d();
    let enc = enclose_block(ir, d, spec.f_yx(), spec.f_x(), spec.psi_min)?;
    let (simplex, span) = span_simplex(&enc.gamma_low, enc.alpha);
    Ok(InitializedSimplex {
        simplex,
        gamma_low: enc.gamma_low,
        gamma_high: enc.gamma_high,
        alpha: enc.alpha,
        psi_low: enc.psi_low,
        psi_high: enc.psi_high,
        span,
    })
}

/// As [`initialize_simplex_full`], returning only the simplex.
pub fn initialize_simplex(
    spec: &ProblemSpec,
    ir: &LinearConstraintSystem,
) -> Result<Simplex, GeometryError> {
    initialize_simplex_full(spec, ir).map(|init| init.simplex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ir_phi, ObservedDistribution};
    use crate::testutil::{binary_instance, random_simplex, volume};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simplex_from(vertices: Vec<Vec<f64>>) -> Simplex {
        Simplex::new(0, None, 0, vertices).unwrap()
    }

    #[test]
    fn bisects_right_triangle_along_hypotenuse() {
        let s = simplex_from(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (a, b) = s.bisect(1, 2);
        assert_eq!(a.vertices, vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(b.vertices, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert_eq!(a.parent, Some(0));
        assert_eq!(a.chain_len, 1);
        assert_eq!((a.id, b.id), (1, 2));
    }

    #[test]
    fn children_volumes_sum_to_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s = random_simplex(&mut rng, 3);
            let (a, b) = s.bisect(1, 2);
            let (va, vb, vs) = (volume(&a), volume(&b), volume(&s));
            assert!(
                ((va + vb) - vs).abs() <= 1e-9 * vs,
                "{va} + {vb} != {vs}"
            );
        }
    }

    #[test]
    fn nested_chains_shrink_by_fixed_factor() {
        // Every nested descendant `dim` bisections down has diameter at
        // most sqrt(3)/2 of the ancestor's.
        let factor = 3f64.sqrt() / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 4;
        let mut roots = vec![random_simplex(&mut rng, dim), random_simplex(&mut rng, dim)];
        let (unit, _) = span_simplex(&vec![0.0; dim], 1.0);
        roots.push(unit);
        for root in roots {
            let mut frontier = vec![root.clone()];
            for _ in 0..dim {
                frontier = frontier
                    .iter()
                    .flat_map(|s| {
                        let (a, b) = s.bisect(0, 0);
                        [a, b]
                    })
                    .collect();
            }
            for leaf in &frontier {
                assert!(
                    leaf.diameter <= factor * root.diameter + 1e-12,
                    "dia {} vs {}",
                    leaf.diameter,
                    factor * root.diameter
                );
            }
        }
    }

    #[test]
    fn barycentric_of_vertices_and_center() {
        let s = simplex_from(vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]]);
        let lambda = s.barycentric(&s.vertices[1]).unwrap();
        assert_abs_diff_eq!(lambda[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda[2], 0.0, epsilon = 1e-12);
        let center = s.barycenter();
        for l in s.barycentric(&center).unwrap() {
            assert_abs_diff_eq!(l, 1.0 / 3.0, epsilon = 1e-12);
        }
        assert!(s.contains(&s.vertices[0]));
        assert!(!s.contains(&[1.5, 1.5]));
    }

    #[test]
    fn barycentric_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = random_simplex(&mut rng, 5);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..s.vertices.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let lambda: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let mut point = vec![0.0; s.dim()];
            for (l, v) in lambda.iter().zip(&s.vertices) {
                for (p, vi) in point.iter_mut().zip(v) {
                    *p += l * vi;
                }
            }
            let back = s.barycentric(&point).unwrap();
            for (a, b) in back.iter().zip(&lambda) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
            assert!(s.contains(&point));
        }
    }

    #[test]
    fn rejects_degenerate_vertex_system() {
        let r = Simplex::new(
            0,
            None,
            0,
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]],
        );
        assert!(matches!(r, Err(GeometryError::DegenerateSimplex(_))));
    }

    #[test]
    fn initializes_benchmark_enclosure() {
        let spec = binary_instance(0.4);
        let ir = build_ir_phi(&spec);
        let init = initialize_simplex_full(&spec, &ir).unwrap();
        let s = &init.simplex;
        assert_eq!(s.dim(), 8);
        assert_eq!(s.vertices.len(), 9);
        assert_eq!(s.chain_len, 0);
        // The cap reproduces the closed form evaluated at the LP psi range.
        let (pl, pu) = (init.psi_low, init.psi_high);
        let want = 1.0 + 0.2 + 4.0 * (pl + pu).powi(2) / (4.0 * 0.5 * pl * pu);
        assert_abs_diff_eq!(init.alpha, want, epsilon = 1e-9);
        assert!(init.alpha > 1.2);
        assert!(init.span > 0.0);
    }

    #[test]
    fn alpha_collapses_when_psi_is_pinned_and_uniform() {
        // Identity transition bounds and a symmetric table pin psi at
        // (0.25, 0.25); the cap then reduces to 1 + f(y,x) + d^2/f(x).
        let mut spec = binary_instance(0.0);
        spec.observed = ObservedDistribution {
            p: vec![
                vec![vec![0.10, 0.125], vec![0.15, 0.125]],
                vec![vec![0.15, 0.125], vec![0.10, 0.125]],
            ],
        };
        spec.transition_bounds.lower = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        spec.transition_bounds.upper = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        spec.validate().unwrap();
        let ir = build_ir_phi(&spec);
        let init = initialize_simplex_full(&spec, &ir).unwrap();
        assert_abs_diff_eq!(init.psi_low, 0.25, epsilon = 1e-9);
        assert_abs_diff_eq!(init.psi_high, 0.25, epsilon = 1e-9);
        let want = 1.0 + spec.f_yx() + 4.0 / 0.5;
        assert_abs_diff_eq!(init.alpha, want, epsilon = 1e-7);
        // Every coordinate is pinned, so the raw span collapses and the
        // floor keeps the simplex usable.
        assert!(init.span > 0.0);
        assert!(init.span < 1e-3);
    }

    #[test]
    fn feasible_lifts_are_enclosed() {
        let spec = binary_instance(0.4);
        let ir = build_ir_phi(&spec);
        let init = initialize_simplex_full(&spec, &ir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = spec.d();

        // Vertices of the linearized set under random objectives, then
        // random pairwise mixtures; each point is lifted by 1/psi.
        let mut points = Vec::new();
        for _ in 0..20 {
            let c: Vec<f64> = (0..ir.n_vars).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sol = crate::lp::solve(&LpProblem::from_system(&ir, c, Direction::Minimize))
                .unwrap();
            assert_eq!(sol.status, LpStatus::Optimal);
            points.push(sol.point);
        }
        let lift = |phi: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; 4 * d];
            for i in 0..d {
                g[i] = 1.0 / phi[d + i];
                g[d + i] = phi[i];
                g[2 * d + i] = phi[d + i];
                g[3 * d + i] = phi[2 * d + i];
            }
            g
        };
        let mut checked = 0;
        for _ in 0..1000 {
            let a = &points[rng.gen_range(0..points.len())];
            let b = &points[rng.gen_range(0..points.len())];
            let t: f64 = rng.gen_range(0.0..1.0);
            let phi: Vec<f64> =
                a.iter().zip(b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let gamma = lift(&phi);
            assert!(
                init.simplex.contains(&gamma),
                "feasible lift escaped the root simplex: {gamma:?}"
            );
            checked += 1;
        }
        assert_eq!(checked, 1000);
    }
}
