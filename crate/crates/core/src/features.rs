//! Linear value-function features `V_x = Phi x` and their norm bounds.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::chain::PolicyChain;
use crate::linalg::{dot, norm};
use crate::{Error, Result};

/// Smallest singular value below which `Phi` is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;
/// Minimum smallest singular value accepted for random dictionaries.
pub const RANDOM_SIGMA_MIN: f64 = 1e-6;
pub const RANDOM_MAX_ATTEMPTS: usize = 100;

/// An `|S| x d` feature dictionary of full column rank.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
    /// `phi` in row-major order so that `phi(s)` is a contiguous slice.
    rows: Vec<f64>,
}

/// Norm bounds on the per-sample quantities entering the gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureBounds {
    /// `max_{j,s} |R_j(s)| ||phi(s)||`
    pub beta0: f64,
    /// `max_{P(s,s')>0} ||phi(s) (phi(s) - gamma phi(s'))^T||`
    pub beta1: f64,
    /// `max_s ||phi(s) phi(s)^T|| = max_s ||phi(s)||^2`
    pub beta2: f64,
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values().min()
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        let (n, d) = phi.shape();
        if n == 0 || d == 0 || d > n {
            return Err(Error::Dimension(format!(
                "feature matrix must be |S| x d with 1 <= d <= |S|, got {n}x{d}"
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        let smin = smallest_singular_value(&phi);
        if smin <= RANK_TOL {
            return Err(Error::Assumption(format!(
                "feature matrix is not of full column rank (sigma_min = {smin:e})"
            )));
        }
        let rows = (0..n)
            .flat_map(|s| (0..d).map(move |k| (s, k)))
            .map(|(s, k)| phi[(s, k)])
            .collect();
        Ok(Self { phi, rows })
    }

    /// Identity features: one indicator per state.
    pub fn tabular(n_states: usize) -> Result<Self> {
        Self::new(DMatrix::identity(n_states, n_states))
    }

    /// Gaussian features with unit-norm rows, redrawn until well conditioned.
    pub fn random(n_states: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim > n_states {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= d <= |S|, got d = {dim}, |S| = {n_states}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..RANDOM_MAX_ATTEMPTS {
            let mut phi =
                DMatrix::from_fn(n_states, dim, |_, _| StandardNormal.sample(&mut rng));
            for mut row in phi.row_iter_mut() {
                let n = row.norm();
                if n > 0.0 {
                    row /= n;
                }
            }
            if smallest_singular_value(&phi) > RANDOM_SIGMA_MIN {
                return Self::new(phi);
            }
        }
        Err(Error::Exhausted {
            what: format!("well-conditioned {n_states}x{dim} random features"),
            attempts: RANDOM_MAX_ATTEMPTS,
        })
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Feature vector of state `s`.
    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        let d = self.dim();
        &self.rows[s * d..(s + 1) * d]
    }

    /// Bounds over the support of `chain`, using the rank-one identity
    /// `||u v^T|| = ||u|| ||v||` for the spectral norm.
    pub fn bounds(&self, chain: &PolicyChain) -> Result<FeatureBounds> {
        if chain.n_states() != self.n_states() {
            return Err(Error::Dimension(format!(
                "chain has {} states, features have {}",
                chain.n_states(),
                self.n_states()
            )));
        }
        let gamma = chain.gamma();
        let p = chain.transition();
        let n = self.n_states();
        let mut b = FeatureBounds {
            beta0: 0.0,
            beta1: 0.0,
            beta2: 0.0,
        };
        let mut diff = vec![0.0; self.dim()];
        for s in 0..n {
            let phi_s = self.row(s);
            let ns = norm(phi_s);
            b.beta2 = b.beta2.max(dot(phi_s, phi_s));
            for j in 0..chain.n_agents() {
                b.beta0 = b.beta0.max(chain.reward(j, s).abs() * ns);
            }
            for s2 in 0..n {
                if p[(s, s2)] > 0.0 {
                    for ((d, a), c) in diff.iter_mut().zip(phi_s).zip(self.row(s2)) {
                        *d = a - gamma * c;
                    }
                    b.beta1 = b.beta1.max(ns * norm(&diff));
                }
            }
        }
        Ok(b)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_matrix_csv(path, &self.phi)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::new(crate::io::read_matrix_csv(path)?)
    }
}
