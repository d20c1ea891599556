//! The MSPBE `f(x) = 1/2 ||Ax - b||^2_{C^-1}`, its per-agent pieces `f_j`
//! and the Fenchel saddle functions
//! `psi_j(x, y) = y^T (Ax - b_j) - 1/2 y^T C y`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::chain::{PolicyChain, SampleTransition};
use crate::features::{FeatureBounds, FeatureMap};
use crate::io::{read_matrix_csv, write_matrix_csv, KeyValues};
use crate::linalg::{dot, spectral_norm, sym_lambda_min};
use crate::{Error, Result};

/// Tolerance on `C - C^T` before symmetrisation is refused.
const SYMMETRY_TOL: f64 = 1e-10;
/// `A` is treated as singular when `sigma_min(A) <= SINGULAR_TOL * sigma_max(A)`.
const SINGULAR_TOL: f64 = 1e-13;
/// Primal radius used when the solution is exactly zero.
const RADIUS_FLOOR: f64 = 1.0;

/// How the primal and dual ball radii are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RadiiPolicy {
    /// `R_x = 2 ||A^-1 b||` and
    /// `R_y = 1.5 / lambda_min(C) * max_j (||A|| R_x + ||b_j||)`.
    #[default]
    Auto,
    /// Explicit radii; the dual radius must still keep the maximiser interior.
    Fixed { primal: f64, dual: f64 },
}

#[derive(Debug, Clone)]
pub struct SaddleModel {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    b_locals: Vec<DVector<f64>>,
    b: DVector<f64>,
    gamma: f64,
    radius_x: f64,
    radius_y: f64,
    c_chol: Cholesky<f64, Dyn>,
    a_lu: LU<f64, Dyn, Dyn>,
    lambda_min_c: f64,
}

/// A primal point with one dual vector per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualPoint {
    pub x: DVector<f64>,
    pub y_locals: Vec<DVector<f64>>,
}

/// Strong-convexity, gradient and smoothness constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    /// `2 lambda + sigma_max(A)^2 / sigma_min(C)`, reported only.
    pub rho_x: f64,
    /// `lambda_min(A^T C^-1 A)`, the modulus of `f`; used by every check.
    pub rho_cert: f64,
    /// `lambda_min(C)`.
    pub rho_y: f64,
    /// Bound on every sampled gradient norm.
    pub g: f64,
    pub l: f64,
    pub lambda_reg: f64,
    /// `max(R_x, R_y)`.
    pub radius: f64,
}

/// Gradient-norm bound `sqrt((2 b1^2 + b2^2 + 4 l^2) R^2 + b0^2)`.
pub fn gradient_bound_formula(bounds: &FeatureBounds, radius: f64, lambda_reg: f64) -> f64 {
    let FeatureBounds { beta0, beta1, beta2 } = *bounds;
    ((2.0 * beta1 * beta1 + beta2 * beta2 + 4.0 * lambda_reg * lambda_reg) * radius * radius
        + beta0 * beta0)
        .sqrt()
}

/// Smoothness constant `max(sqrt(b1^2 + b2^2), sqrt(4 lambda^2 + b1^2))`.
pub fn smoothness_formula(bounds: &FeatureBounds, lambda_reg: f64) -> f64 {
    bounds.beta1.hypot(bounds.beta2).max(bounds.beta1.hypot(2.0 * lambda_reg))
}

impl SaddleModel {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        b_locals: Vec<DVector<f64>>,
        gamma: f64,
        radii: RadiiPolicy,
    ) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d || c.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "A is {}x{}, C is {}x{}; both must be d x d",
                a.nrows(),
                a.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        if b_locals.is_empty() || b_locals.iter().any(|b| b.len() != d) {
            return Err(Error::Dimension(format!(
                "need at least one local vector b_j of length {d}"
            )));
        }
        if a.iter().chain(c.iter()).chain(b_locals.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("model entries must be finite".into()));
        }
        let asym = (&c - c.transpose()).amax();
        if asym > SYMMETRY_TOL * c.amax().max(1.0) {
            return Err(Error::Assumption(format!(
                "C is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let c = (&c + c.transpose()) * 0.5;
        let lambda_min_c = sym_lambda_min(&c);
        let c_chol = match Cholesky::new(c.clone()) {
            Some(ch) if lambda_min_c > 0.0 => ch,
            _ => {
                return Err(Error::Assumption(format!(
                    "C is not positive definite (lambda_min = {lambda_min_c:e})"
                )))
            }
        };
        let sv = a.singular_values();
        if sv.min() <= SINGULAR_TOL * sv.max() {
            return Err(Error::Assumption(format!(
                "A is not full rank (sigma_min = {:e}, sigma_max = {:e})",
                sv.min(),
                sv.max()
            )));
        }
        let a_lu = a.clone().lu();
        let n = b_locals.len() as f64;
        let b = b_locals.iter().fold(DVector::zeros(d), |acc, bj| acc + bj) / n;

        let x_star = a_lu.solve(&b).ok_or_else(|| Error::Assumption("A is singular".into()))?;
        let a_norm = spectral_norm(&a);
        let dual_needed = |rx: f64| {
            b_locals
                .iter()
                .map(|bj| a_norm * rx + bj.norm())
                .fold(0.0, f64::max)
                / lambda_min_c
        };
        let (radius_x, radius_y) = match radii {
            RadiiPolicy::Auto => {
                let xn = x_star.norm();
                let rx = if xn > 0.0 { 2.0 * xn } else { RADIUS_FLOOR };
                (rx, 1.5 * dual_needed(rx))
            }
            RadiiPolicy::Fixed { primal, dual } => {
                if !(primal > 0.0 && dual > 0.0 && primal.is_finite() && dual.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "radii must be positive, got ({primal}, {dual})"
                    )));
                }
                let need = dual_needed(primal);
                if dual < need {
                    return Err(Error::InvalidArgument(format!(
                        "dual radius {dual:e} is below the interior-maximiser bound {need:e}"
                    )));
                }
                (primal, dual)
            }
        };
        Ok(Self {
            a,
            c,
            b_locals,
            b,
            gamma,
            radius_x,
            radius_y,
            c_chol,
            a_lu,
            lambda_min_c,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_agents(&self) -> usize {
        self.b_locals.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn b_local(&self, j: usize) -> &DVector<f64> {
        &self.b_locals[j]
    }

    pub fn b_locals(&self) -> &[DVector<f64>] {
        &self.b_locals
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn radius_x(&self) -> f64 {
        self.radius_x
    }

    pub fn radius_y(&self) -> f64 {
        self.radius_y
    }

    pub fn lambda_min_c(&self) -> f64 {
        self.lambda_min_c
    }

    /// `C^-1 v` through the Cholesky factor.
    pub fn c_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.c_chol.solve(v)
    }

    fn half_c_inv_norm_sq(&self, r: &DVector<f64>) -> f64 {
        0.5 * r.dot(&self.c_solve(r))
    }

    pub fn mspbe(&self, x: &DVector<f64>) -> f64 {
        self.half_c_inv_norm_sq(&(&self.a * x - &self.b))
    }

    pub fn local_mspbe(&self, j: usize, x: &DVector<f64>) -> f64 {
        self.half_c_inv_norm_sq(&(&self.a * x - &self.b_locals[j]))
    }

    /// `(1/N) sum_j f_j(x)`.
    pub fn mean_local_mspbe(&self, x: &DVector<f64>) -> f64 {
        (0..self.n_agents()).map(|j| self.local_mspbe(j, x)).sum::<f64>() / self.n_agents() as f64
    }

    pub fn psi(&self, j: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        y.dot(&(&self.a * x - &self.b_locals[j])) - 0.5 * y.dot(&(&self.c * y))
    }

    /// `(grad_x psi_j, grad_y psi_j) = (A^T y, Ax - b_j - Cy)`.
    pub fn grad_psi(
        &self,
        j: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        (
            self.a.tr_mul(y),
            &self.a * x - &self.b_locals[j] - &self.c * y,
        )
    }

    /// Unconstrained maximiser `C^-1 (Ax - b_j)` of `psi_j(x, .)`.
    pub fn dual_maximizer(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        self.c_solve(&(&self.a * x - &self.b_locals[j]))
    }

    /// `x* = A^-1 b`, `y_j* = C^-1 (b - b_j)`.
    pub fn saddle_solution(&self) -> Result<PrimalDualPoint> {
        let x = self
            .a_lu
            .solve(&self.b)
            .ok_or_else(|| Error::Assumption("A is singular".into()))?;
        let xn = x.norm();
        if xn > self.radius_x {
            return Err(Error::OutsideDomain {
                norm: xn,
                radius: self.radius_x,
            });
        }
        let y_locals = self
            .b_locals
            .iter()
            .map(|bj| self.c_solve(&(&self.b - bj)))
            .collect();
        Ok(PrimalDualPoint { x, y_locals })
    }

    /// Hessian `A^T C^-1 A` of `f`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let c_inv_a = self.c_chol.solve(&self.a);
        let h = self.a.tr_mul(&c_inv_a);
        (&h + h.transpose()) * 0.5
    }

    /// Strong-convexity modulus `lambda_min(A^T C^-1 A)` of `f`.
    pub fn certified_modulus(&self) -> f64 {
        sym_lambda_min(&self.hessian())
    }

    /// Constants with `lambda = 0`. `G` is the larger of the closed-form bound
    /// and a direct bound on `||(g_x, g_y)||` over the two balls, so that it
    /// dominates every sampled gradient even when `R_x` and `R_y` differ.
    pub fn constants(&self, bounds: &FeatureBounds) -> ProblemConstants {
        let lambda_reg = 0.0;
        let radius = self.radius_x.max(self.radius_y);
        let sv = self.a.singular_values();
        let rho_x = 2.0 * lambda_reg + sv.max().powi(2) / self.lambda_min_c;
        let formula = gradient_bound_formula(bounds, radius, lambda_reg);
        let FeatureBounds { beta0, beta1, beta2 } = *bounds;
        let direct = (beta1 * self.radius_y)
            .hypot(beta1 * self.radius_x + beta0 + beta2 * self.radius_y);
        ProblemConstants {
            rho_x,
            rho_cert: self.certified_modulus(),
            rho_y: self.lambda_min_c,
            g: formula.max(direct),
            l: smoothness_formula(bounds, lambda_reg),
            lambda_reg,
            radius,
        }
    }

    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        write_matrix_csv(&dir.join("A.csv"), &self.a)?;
        write_matrix_csv(&dir.join("C.csv"), &self.c)?;
        let d = self.dim();
        let bj = DMatrix::from_fn(self.n_agents(), d, |j, k| self.b_locals[j][k]);
        write_matrix_csv(&dir.join("b_j.csv"), &bj)?;
        let mut kv = KeyValues::new();
        kv.push_real("gamma", self.gamma);
        kv.push_real("radius_x", self.radius_x);
        kv.push_real("radius_y", self.radius_y);
        kv.push("n_agents", self.n_agents());
        kv.push("dim", d);
        kv.write(&dir.join("model.meta"))
    }

    /// Reads a bundle written by [`SaddleModel::write_bundle`]; the stored
    /// radii are revalidated.
    pub fn read_bundle(dir: &Path) -> Result<Self> {
        let a = read_matrix_csv(&dir.join("A.csv"))?;
        let c = read_matrix_csv(&dir.join("C.csv"))?;
        let bj = read_matrix_csv(&dir.join("b_j.csv"))?;
        let kv = KeyValues::read(&dir.join("model.meta"))?;
        let n = kv.require_usize("n_agents")?;
        let d = kv.require_usize("dim")?;
        if bj.shape() != (n, d) {
            return Err(Error::Dimension(format!(
                "b_j.csv is {}x{}, expected {n}x{d}",
                bj.nrows(),
                bj.ncols()
            )));
        }
        let b_locals = (0..n).map(|j| bj.row(j).transpose()).collect();
        Self::new(
            a,
            c,
            b_locals,
            kv.require_real("gamma")?,
            RadiiPolicy::Fixed {
                primal: kv.require_real("radius_x")?,
                dual: kv.require_real("radius_y")?,
            },
        )
    }
}

/// Exact model under the stationary distribution of `chain`:
/// `A = Phi^T D (I - gamma P) Phi`, `C = Phi^T D Phi`, `b_j = Phi^T D R_j`.
pub fn population_model(
    chain: &PolicyChain,
    features: &FeatureMap,
    radii: RadiiPolicy,
) -> Result<SaddleModel> {
    if chain.n_states() != features.n_states() {
        return Err(Error::Dimension(format!(
            "chain has {} states, features have {}",
            chain.n_states(),
            features.n_states()
        )));
    }
    let n = chain.n_states();
    let pi = chain.stationary_distribution()?;
    let phi = features.matrix();
    let d_phi = DMatrix::from_fn(n, phi.ncols(), |s, k| pi[s] * phi[(s, k)]);
    let m = DMatrix::identity(n, n) - chain.transition() * chain.gamma();
    let a = d_phi.tr_mul(&(m * phi));
    let c = d_phi.tr_mul(phi);
    let b_locals = (0..chain.n_agents())
        .map(|j| d_phi.tr_mul(&chain.rewards().row(j).transpose()))
        .collect();
    SaddleModel::new(a, c, b_locals, chain.gamma(), radii)
}

/// Sample-average model over a dataset of transitions.
///
/// Averages are accumulated through per-`(s, s')` counts so that the result
/// depends only on the empirical transition frequencies and per-state
/// reward means.
pub fn empirical_model(
    dataset: &[SampleTransition],
    features: &FeatureMap,
    gamma: f64,
    radii: RadiiPolicy,
) -> Result<SaddleModel> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    let n_agents = first.local_rewards.len();
    let n = features.n_states();
    let d = features.dim();
    let mut pair_counts = DMatrix::<f64>::zeros(n, n);
    let mut reward_sums = DMatrix::<f64>::zeros(n_agents, n);
    for x in dataset {
        if x.s >= n || x.s_next >= n || x.local_rewards.len() != n_agents {
            return Err(Error::Dimension(format!(
                "transition ({}, {}) with {} rewards is inconsistent with {n} states and {n_agents} agents",
                x.s,
                x.s_next,
                x.local_rewards.len()
            )));
        }
        pair_counts[(x.s, x.s_next)] += 1.0;
        for (j, r) in x.local_rewards.iter().enumerate() {
            reward_sums[(j, x.s)] += r;
        }
    }
    let total = dataset.len() as f64;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut c = DMatrix::<f64>::zeros(d, d);
    let mut b_locals = vec![DVector::<f64>::zeros(d); n_agents];
    let mut u = vec![0.0; d];
    for s in 0..n {
        let phi_s = features.row(s);
        let state_count: f64 = pair_counts.row(s).sum();
        if state_count == 0.0 {
            continue;
        }
        let ws = state_count / total;
        for k in 0..d {
            for l in 0..d {
                c[(k, l)] += ws * phi_s[k] * phi_s[l];
            }
        }
        for s2 in 0..n {
            let cnt = pair_counts[(s, s2)];
            if cnt == 0.0 {
                continue;
            }
            let w = cnt / total;
            for (uk, (a_, b_)) in u.iter_mut().zip(phi_s.iter().zip(features.row(s2))) {
                *uk = a_ - gamma * b_;
            }
            for k in 0..d {
                for l in 0..d {
                    a[(k, l)] += w * phi_s[k] * u[l];
                }
            }
        }
        for (j, bj) in b_locals.iter_mut().enumerate() {
            let r = reward_sums[(j, s)] / total;
            for k in 0..d {
                bj[k] += r * phi_s[k];
            }
        }
    }
    SaddleModel::new(a, c, b_locals, gamma, radii)
}

/// Per-sample gradients of `psi_j` written into `gx`, `gy`:
/// with `u = phi(s) - gamma phi(s')`,
/// `g_x = u (phi(s)^T y)` and `g_y = phi(s) (u^T x - r - phi(s)^T y)`.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn sample_gradient_into(
    phi_s: &[f64],
    phi_next: &[f64],
    gamma: f64,
    reward: f64,
    x: &[f64],
    y: &[f64],
    gx: &mut [f64],
    gy: &mut [f64],
) {
    let phi_y = dot(phi_s, y);
    let mut u_x = 0.0;
    for k in 0..phi_s.len() {
        let uk = phi_s[k] - gamma * phi_next[k];
        gx[k] = uk * phi_y;
        u_x += uk * x[k];
    }
    let scale = u_x - reward - phi_y;
    for k in 0..phi_s.len() {
        gy[k] = phi_s[k] * scale;
    }
}

/// Stochastic gradient of `psi_j` at `(x, y)` from one transition.
pub fn stochastic_gradient(
    features: &FeatureMap,
    gamma: f64,
    j: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    xi: &SampleTransition,
) -> (DVector<f64>, DVector<f64>) {
    let d = features.dim();
    let mut gx = DVector::zeros(d);
    let mut gy = DVector::zeros(d);
    sample_gradient_into(
        features.row(xi.s),
        features.row(xi.s_next),
        gamma,
        xi.local_rewards[j],
        x.as_slice(),
        y.as_slice(),
        gx.as_mut_slice(),
        gy.as_mut_slice(),
    );
    (gx, gy)
}
