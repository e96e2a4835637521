//! Shared fixtures for unit tests.

use crate::geometry::Simplex;
use crate::linalg::Lu;
use crate::model::{Dims, ObservedDistribution, ProblemSpec, TransitionBounds};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Simplex volume via the edge-matrix determinant.
pub(crate) fn volume(s: &Simplex) -> f64 {
    let dim = s.dim();
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            m[i * dim + j] = s.vertices[i + 1][j] - s.vertices[0][j];
        }
    }
    let det = Lu::factor(&m, dim).det_abs();
    let fact: f64 = (1..=dim).map(|k| k as f64).product();
    det / fact
}

/// A well-conditioned random simplex in the strictly positive orthant.
/// Vertex 0 sits anywhere in the box and vertex i is offset along axis i
/// with a little jitter, so the edge matrix stays diagonally dominant (and
/// the simplex nondegenerate) at any dimension.
pub(crate) fn random_simplex(rng: &mut ChaCha8Rng, dim: usize) -> Simplex {
    let v0: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut vertices = vec![v0.clone()];
    for i in 0..dim {
        let mut v: Vec<f64> = v0.iter().map(|&x| x + rng.gen_range(-0.05..0.05)).collect();
        v[i] += rng.gen_range(0.6..1.0);
        vertices.push(v);
    }
    Simplex::new(0, None, 0, vertices).unwrap()
}

/// The two-state benchmark instance: binary confounder, proxy, and
/// treatment, observed table fixed, transition box parameterized by the
/// contamination level `eps` (diagonal at least `1 - eps`, off-diagonal at
/// most `eps`).
pub(crate) fn binary_instance(eps: f64) -> ProblemSpec {
    ProblemSpec {
        dims: Dims { u: 2, w: 2, x: 2 },
        target_x: 0,
        observed: ObservedDistribution {
            p: vec![
                vec![vec![0.08, 0.15], vec![0.12, 0.10]],
                vec![vec![0.18, 0.15], vec![0.12, 0.10]],
            ],
        },
        transition_bounds: TransitionBounds {
            lower: vec![vec![1.0 - eps, 0.0], vec![0.0, 1.0 - eps]],
            upper: vec![vec![1.0, eps], vec![eps, 1.0]],
        },
        psi_min: 1e-2,
        y_values: None,
        weights_pi: None,
        phi: None,
    }
}
