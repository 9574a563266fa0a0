//! A-priori convergence certificates for the Gaussian-kernel (`α = 2`)
//! fixed-point iteration on a regression `T ≈ W x`.
//!
//! Given per-row data `(w_i, t_i)` and a radius `γ`, the certificates bound
//! the behaviour of the reweighted normal-equations map on the ball
//! `‖x‖₁ ≤ γ`:
//!
//! * `ξ` — the infinite-bandwidth limit of the map's norm bound; a necessary
//!   condition for the certificate is `γ > ξ`.
//! * `φ(β)` — a decreasing function with `φ(β) → ξ`; bandwidths with
//!   `φ(β) ≤ γ` keep the map inside the ball. `β*` solves `φ(β) = γ`.
//! * `ψ(β)` — a decreasing bound on the map's contraction modulus; `β⁺`
//!   solves `ψ(β) = η` for a chosen modulus `η ∈ (0, 1)`.
//!
//! Choosing every channel bandwidth at or above `max(β*, β⁺)` guarantees the
//! iteration stays in the ball and converges at rate `η`. The bounds are
//! specific to the Gaussian kernel; [`certify`] declines other shapes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::correntropy::{ggd_kernel, Bandwidth};
use crate::error::{Error, Result};
use crate::filters::RegressionForm;

/// Regression data and certificate parameters: rows `w_i` of `W`, targets
/// `t_i`, ball radius `γ`, and contraction modulus `η`.
#[derive(Debug, Clone)]
pub struct ConvergenceQuery {
    w: DMatrix<f64>,
    t: DVector<f64>,
    gamma: f64,
    eta: f64,
}

impl ConvergenceQuery {
    /// Default contraction modulus.
    pub const DEFAULT_ETA: f64 = 0.5;

    /// Builds a validated query. Requires at least as many rows as unknowns,
    /// finite entries, `γ > 0`, and `η ∈ (0, 1)`.
    pub fn new(w: DMatrix<f64>, t: DVector<f64>, gamma: f64, eta: f64) -> Result<Self> {
        if w.nrows() != t.len() {
            return Err(Error::DimensionMismatch(
                "W row count must equal t length".into(),
            ));
        }
        if w.ncols() == 0 || w.nrows() < w.ncols() {
            return Err(Error::InvalidConfig(
                "W must be tall: at least as many rows as columns".into(),
            ));
        }
        if !w.iter().all(|v| v.is_finite()) || !t.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("regression data".into()));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::InvalidConfig("eta must lie in (0, 1)".into()));
        }
        Ok(Self { w, t, gamma, eta })
    }

    /// Builds a query from a whitened filter regression. `γ` defaults to
    /// `2ξ` (or 1 when `ξ = 0`); `η` defaults to
    /// [`Self::DEFAULT_ETA`].
    pub fn from_regression(
        reg: &RegressionForm,
        gamma: Option<f64>,
        eta: Option<f64>,
    ) -> Result<Self> {
        let eta = eta.unwrap_or(Self::DEFAULT_ETA);
        let gamma = match gamma {
            Some(g) => g,
            None => {
                let probe = Self::new(reg.w.clone(), reg.t.clone(), 1.0, 0.5)?;
                let xi = xi_bound(&probe)?;
                if xi > 0.0 {
                    2.0 * xi
                } else {
                    1.0
                }
            }
        };
        Self::new(reg.w.clone(), reg.t.clone(), gamma, eta)
    }

    /// Design matrix `W` (rows `w_i`).
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Target vector `t`.
    pub fn t(&self) -> &DVector<f64> {
        &self.t
    }

    /// Ball radius `γ`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Contraction modulus `η`.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `Σᵢ ‖w_iᵀ‖₁ |t_i|` — the shared certificate numerator.
    fn numerator_sum(&self) -> f64 {
        (0..self.w.nrows())
            .map(|i| row_l1(&self.w, i) * self.t[i].abs())
            .sum()
    }

    /// `Σᵢ w_iᵀ G_β(γ‖w_iᵀ‖₁ + |t_i|) w_i` — the kernel-weighted Gram matrix
    /// appearing in both `φ` and `ψ`.
    fn weighted_gram(&self, beta: f64) -> Result<DMatrix<f64>> {
        let n = self.w.ncols();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..self.w.nrows() {
            let z = self.gamma * row_l1(&self.w, i) + self.t[i].abs();
            let g = ggd_kernel(z, 2.0, Bandwidth::Finite(beta))?;
            let row = self.w.row(i);
            for p in 0..n {
                for q in 0..n {
                    a[(p, q)] += g * row[p] * row[q];
                }
            }
        }
        Ok(a)
    }
}

/// ℓ₁ norm of row `i` of `m` (equivalently of the column `w_iᵀ`).
fn row_l1(m: &DMatrix<f64>, i: usize) -> f64 {
    m.row(i).iter().map(|v| v.abs()).sum()
}

/// Operator 1-norm (maximum absolute column sum).
fn operator_l1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
///
/// The input must be symmetric within an absolute tolerance of `1e-10`
/// (scaled by the matrix magnitude); asymmetric inputs are rejected rather
/// than silently symmetrized.
pub fn min_eigen_sym(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSymmetric);
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::NonSymmetric);
            }
        }
    }
    let eig = SymmetricEigen::new(m.clone());
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// The infinite-bandwidth certificate constant
/// `ξ = √n · Σᵢ‖w_iᵀ‖₁|t_i| / λ_min(Σᵢ w_iᵀw_i)`.
///
/// A ball radius `γ > ξ` is necessary for the bandwidth certificates to have
/// solutions.
pub fn xi_bound(q: &ConvergenceQuery) -> Result<f64> {
    let gram = q.w.transpose() * &q.w;
    let lam = min_eigen_sym(&gram)?;
    if lam <= 0.0 {
        return Err(Error::RankDeficient(
            "Σ w_iᵀw_i must be positive definite".into(),
        ));
    }
    let n = q.w.ncols() as f64;
    Ok(n.sqrt() * q.numerator_sum() / lam)
}

/// The self-map bound
/// `φ(β) = √n · Σᵢ‖w_iᵀ‖₁|t_i| / λ_min[Σᵢ w_iᵀ G_β(γ‖w_iᵀ‖₁+|t_i|) w_i]`
/// with the Gaussian kernel `G_β(z) = exp(−z²/β²)`.
///
/// Strictly decreasing in `β` with limit `ξ`; errors when the weighted Gram
/// matrix is not positive definite (bandwidth too small for the data).
pub fn phi(q: &ConvergenceQuery, beta: f64) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidConfig("beta must be positive".into()));
    }
    let gram = q.weighted_gram(beta)?;
    let lam = min_eigen_sym(&gram)?;
    if lam <= 0.0 {
        return Err(Error::RankDeficient(
            "kernel-weighted Gram matrix must be positive definite".into(),
        ));
    }
    let n = q.w.ncols() as f64;
    Ok(n.sqrt() * q.numerator_sum() / lam)
}

/// The contraction-modulus bound
/// `ψ(β) = 2√n · Σᵢ(|t_i|+γ‖w_iᵀ‖₁)‖w_iᵀ‖₁(γ‖w_iᵀw_i‖₁+‖w_iᵀt_i‖₁)
///          / (β² λ_min[Σᵢ w_iᵀ G_β(γ‖w_iᵀ‖₁+|t_i|) w_i])`,
/// where `‖·‖₁` on the outer product is the operator 1-norm.
///
/// Strictly decreasing in `β` with limits `∞` at `0⁺` and `0` at `∞`.
pub fn psi(q: &ConvergenceQuery, beta: f64) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidConfig("beta must be positive".into()));
    }
    let mut num = 0.0;
    for i in 0..q.w.nrows() {
        let wl1 = row_l1(&q.w, i);
        let ti = q.t[i].abs();
        let outer = q.w.row(i).transpose() * q.w.row(i);
        let wtw = operator_l1(&outer);
        let wtt = wl1 * ti; // ‖w_iᵀ t_i‖₁ for scalar t_i
        num += (ti + q.gamma * wl1) * wl1 * (q.gamma * wtw + wtt);
    }
    let n = q.w.ncols() as f64;
    num *= 2.0 * n.sqrt();

    let gram = q.weighted_gram(beta)?;
    let lam = min_eigen_sym(&gram)?;
    if lam <= 0.0 {
        return Err(Error::RankDeficient(
            "kernel-weighted Gram matrix must be positive definite".into(),
        ));
    }
    Ok(num / (beta * beta * lam))
}

/// Relative bisection tolerance for the bandwidth roots.
const ROOT_REL_TOL: f64 = 1e-10;
/// Cap on bracketing/bisection iterations.
const ROOT_MAX_ITER: usize = 200;

/// Finds the root of a strictly decreasing `f` (with `f(β) → limit < target`
/// as `β → ∞`) equal to `target`. Evaluation errors are treated as `+∞`
/// (they occur only at small `β` where the weighted Gram matrix degenerates).
fn decreasing_root<F>(f: F, target: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let value = |beta: f64| f(beta).unwrap_or(f64::INFINITY);

    // Bracket: lo with f(lo) > target, hi with f(hi) < target.
    let mut lo = 1.0;
    let mut guard = 0;
    while value(lo) <= target {
        lo *= 0.5;
        guard += 1;
        if guard > ROOT_MAX_ITER {
            return Err(Error::NonConvergence(
                "could not bracket the bandwidth root from below".into(),
            ));
        }
    }
    let mut hi = lo;
    guard = 0;
    while value(hi) >= target {
        hi *= 2.0;
        guard += 1;
        if guard > ROOT_MAX_ITER {
            return Err(Error::NonConvergence(
                "could not bracket the bandwidth root from above".into(),
            ));
        }
    }

    for _ in 0..ROOT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if value(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= ROOT_REL_TOL * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Smallest bandwidth with `φ(β) = γ` (the self-map threshold), or `None`
/// when `γ ≤ ξ` and no bandwidth can work.
pub fn beta_star(q: &ConvergenceQuery) -> Result<Option<f64>> {
    let xi = xi_bound(q)?;
    if q.gamma <= xi {
        return Ok(None);
    }
    decreasing_root(|b| phi(q, b), q.gamma).map(Some)
}

/// Bandwidth with `ψ(β) = η` (the contraction threshold), or `None` when
/// `γ ≤ ξ` and the certificate hypotheses fail.
pub fn beta_plus(q: &ConvergenceQuery) -> Result<Option<f64>> {
    let xi = xi_bound(q)?;
    if q.gamma <= xi {
        return Ok(None);
    }
    decreasing_root(|b| psi(q, b), q.eta).map(Some)
}

/// Outcome of a certification attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    /// Both bandwidth thresholds exist; `recommended_min_beta` applies.
    Certified,
    /// `γ ≤ ξ`: no bandwidth satisfies the hypotheses at this radius.
    InfeasibleGamma,
    /// The kernel shape is outside the certificate's scope (`α ≠ 2`).
    Uncertified,
}

/// Certification report; threshold fields are present only when the
/// corresponding hypothesis holds.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    /// Outcome classification.
    pub status: CertificateStatus,
    /// Ball radius the certificate was evaluated at.
    pub gamma: f64,
    /// Contraction modulus the certificate was evaluated at.
    pub eta: f64,
    /// Infinite-bandwidth constant `ξ` (absent when out of scope).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    /// Self-map threshold `β*`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_star: Option<f64>,
    /// Contraction threshold `β⁺`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_plus: Option<f64>,
    /// `max(β*, β⁺)` — every channel bandwidth at or above this value is
    /// certified.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recommended_min_beta: Option<f64>,
}

/// Evaluates the full certificate for a query and a kernel shape.
///
/// The bounds are derived for the Gaussian kernel only, so any `alpha ≠ 2`
/// yields an [`CertificateStatus::Uncertified`] report rather than a bogus
/// number.
pub fn certify(q: &ConvergenceQuery, alpha: f64) -> Result<Certificate> {
    if (alpha - 2.0).abs() > 1e-12 {
        return Ok(Certificate {
            status: CertificateStatus::Uncertified,
            gamma: q.gamma,
            eta: q.eta,
            xi: None,
            beta_star: None,
            beta_plus: None,
            recommended_min_beta: None,
        });
    }
    let xi = xi_bound(q)?;
    if q.gamma <= xi {
        return Ok(Certificate {
            status: CertificateStatus::InfeasibleGamma,
            gamma: q.gamma,
            eta: q.eta,
            xi: Some(xi),
            beta_star: None,
            beta_plus: None,
            recommended_min_beta: None,
        });
    }
    let bs = beta_star(q)?.expect("gamma > xi ensures a self-map threshold");
    let bp = beta_plus(q)?.expect("gamma > xi ensures a contraction threshold");
    Ok(Certificate {
        status: CertificateStatus::Certified,
        gamma: q.gamma,
        eta: q.eta,
        xi: Some(xi),
        beta_star: Some(bs),
        beta_plus: Some(bp),
        recommended_min_beta: Some(bs.max(bp)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// n=1, single row w=1, t=1 — every certificate factor is unity.
    fn unit_query(gamma: f64, eta: f64) -> ConvergenceQuery {
        ConvergenceQuery::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            gamma,
            eta,
        )
        .unwrap()
    }

    fn random_query(rng: &mut StdRng, l: usize, n: usize) -> ConvergenceQuery {
        let w = DMatrix::from_fn(l, n, |_, _| rng.gen_range(-2.0..2.0));
        let t = DVector::from_fn(l, |_, _| rng.gen_range(-2.0..2.0));
        let probe = ConvergenceQuery::new(w.clone(), t.clone(), 1.0, 0.5).unwrap();
        let xi = xi_bound(&probe).unwrap();
        let gamma = xi * rng.gen_range(1.5..4.0) + 1e-6;
        let eta = rng.gen_range(0.1..0.9);
        ConvergenceQuery::new(w, t, gamma, eta).unwrap()
    }

    // ---- min_eigen_sym -------------------------------------------------------

    #[test]
    fn min_eigen_identity_and_diagonal() {
        assert_relative_eq!(
            min_eigen_sym(&DMatrix::identity(3, 3)).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0, 0.5]));
        assert_relative_eq!(min_eigen_sym(&d).unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn min_eigen_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(min_eigen_sym(&m), Err(Error::NonSymmetric)));
    }

    #[test]
    fn min_eigen_matches_charpoly_root_oracle() {
        // Oracle: smallest root of det(M − λI) found by sign-change bisection.
        let mut rng = StdRng::seed_from_u64(71);
        for _ in 0..20 {
            let b = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-2.0..2.0_f64));
            let m = (&b + b.transpose()) * 0.5;
            let lam = min_eigen_sym(&m).unwrap();

            let det = |l: f64| (m.clone() - DMatrix::identity(4, 4) * l).determinant();
            let bound = operator_l1(&m) + 1.0;
            // det(M − λI) > 0 below λ_min (even dimension) and < 0 just above.
            let mut lo = -bound;
            let mut hi = lo;
            let step = 2.0 * bound / 20_000.0;
            while det(hi) > 0.0 {
                hi += step;
                assert!(hi < bound, "oracle failed to find a sign change");
            }
            lo = hi - step;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if det(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let oracle = 0.5 * (lo + hi);
            assert!(
                (lam - oracle).abs() < 1e-8 * lam.abs().max(1.0),
                "eigen {lam} vs charpoly oracle {oracle}"
            );
        }
    }

    // ---- xi_bound --------------------------------------------------------------

    #[test]
    fn xi_unit_query_is_one() {
        assert_relative_eq!(xi_bound(&unit_query(2.0, 0.5)).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn xi_scalar_hand_value() {
        // w = (2), t = (3): ξ = 1·(2·3)/4 = 1.5.
        let q = ConvergenceQuery::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, 3.0),
            2.0,
            0.5,
        )
        .unwrap();
        assert_relative_eq!(xi_bound(&q).unwrap(), 1.5, max_relative = 1e-14);
    }

    #[test]
    fn xi_halves_when_w_doubles() {
        let mut rng = StdRng::seed_from_u64(73);
        for _ in 0..10 {
            let q = random_query(&mut rng, 5, 2);
            let doubled = ConvergenceQuery::new(q.w() * 2.0, q.t().clone(), q.gamma(), q.eta())
                .unwrap();
            assert_relative_eq!(
                xi_bound(&doubled).unwrap(),
                0.5 * xi_bound(&q).unwrap(),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn xi_rank_deficient_rejected() {
        // Two identical columns → singular Gram matrix.
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, -1.0, -1.0]);
        let q = ConvergenceQuery::new(w, DVector::zeros(3), 1.0, 0.5).unwrap();
        assert!(matches!(xi_bound(&q), Err(Error::RankDeficient(_))));
    }

    // ---- phi ----------------------------------------------------------------------

    #[test]
    fn phi_unit_query_closed_form() {
        // γ=2 → kernel argument z = 2·1 + 1 = 3 → φ(β) = exp(9/β²); φ(3) = e.
        let q = unit_query(2.0, 0.5);
        assert_relative_eq!(
            phi(&q, 3.0).unwrap(),
            std::f64::consts::E,
            max_relative = 1e-12
        );
        assert_relative_eq!(phi(&q, 1.0).unwrap(), 9.0_f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn phi_approaches_xi_for_large_beta() {
        let mut rng = StdRng::seed_from_u64(79);
        for _ in 0..10 {
            let q = random_query(&mut rng, 6, 2);
            let xi = xi_bound(&q).unwrap();
            let p = phi(&q, 1e10).unwrap();
            assert_relative_eq!(p, xi, max_relative = 1e-6);
        }
    }

    #[test]
    fn phi_strictly_decreasing() {
        let mut rng = StdRng::seed_from_u64(83);
        for _ in 0..10 {
            let q = random_query(&mut rng, 6, 3);
            let grid = [0.8, 1.5, 3.0, 6.0, 12.0, 25.0, 50.0];
            let vals: Vec<f64> = grid
                .iter()
                .filter_map(|&b| phi(&q, b).ok())
                .collect();
            for pair in vals.windows(2) {
                assert!(pair[0] > pair[1], "phi must decrease: {vals:?}");
            }
        }
    }

    // ---- beta_star -----------------------------------------------------------------

    #[test]
    fn beta_star_unit_query_frozen_values() {
        // φ(β) = exp((γ+1)²/β²) = γ has the analytic root β* = (γ+1)/√ln γ.
        let b = beta_star(&unit_query(2.0, 0.5)).unwrap().unwrap();
        assert_relative_eq!(b, 3.603367226359349, max_relative = 1e-8);
        let e = std::f64::consts::E;
        let b = beta_star(&unit_query(e, 0.5)).unwrap().unwrap();
        assert_relative_eq!(b, e + 1.0, max_relative = 1e-8);
    }

    #[test]
    fn beta_star_infeasible_gamma_is_none() {
        // ξ = 1 for the unit query; γ = 0.5 ≤ ξ.
        assert!(beta_star(&unit_query(0.5, 0.5)).unwrap().is_none());
        assert!(beta_plus(&unit_query(0.5, 0.5)).unwrap().is_none());
    }

    #[test]
    fn beta_star_satisfies_equation_on_random_queries() {
        let mut rng = StdRng::seed_from_u64(89);
        for _ in 0..20 {
            let q = random_query(&mut rng, 5, 2);
            let b = beta_star(&q).unwrap().expect("gamma chosen > xi");
            let back = phi(&q, b).unwrap();
            assert_relative_eq!(back, q.gamma(), max_relative = 1e-8);
        }
    }

    // ---- psi / beta_plus -----------------------------------------------------------

    #[test]
    fn psi_unit_query_closed_form() {
        // ψ(β) = 2·(1+2)·1·(2+1)·exp(9/β²)/β² = 18 e^{9/β²}/β²; ψ(6) = e^{1/4}/2.
        let q = unit_query(2.0, 0.5);
        assert_relative_eq!(
            psi(&q, 6.0).unwrap(),
            0.25_f64.exp() / 2.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            psi(&q, 6.0).unwrap(),
            0.642012708343871,
            max_relative = 1e-12
        );
    }

    #[test]
    fn psi_decreasing_with_extreme_limits() {
        let q = unit_query(2.0, 0.5);
        let grid = [2.0, 4.0, 8.0, 16.0, 64.0];
        let vals: Vec<f64> = grid.iter().map(|&b| psi(&q, b).unwrap()).collect();
        for pair in vals.windows(2) {
            assert!(pair[0] > pair[1]);
        }
        assert!(psi(&q, 1e8).unwrap() < 1e-10);
        assert!(psi(&q, 0.9).unwrap() > 1e3);
    }

    #[test]
    fn beta_plus_unit_query_frozen_value() {
        // Root of 18 e^{9/β²}/β² = 0.5.
        let b = beta_plus(&unit_query(2.0, 0.5)).unwrap().unwrap();
        assert_relative_eq!(b, 6.643929938247481, max_relative = 1e-8);
    }

    #[test]
    fn beta_plus_satisfies_equation_on_random_queries() {
        let mut rng = StdRng::seed_from_u64(97);
        for _ in 0..20 {
            let q = random_query(&mut rng, 5, 2);
            let b = beta_plus(&q).unwrap().expect("gamma chosen > xi");
            let back = psi(&q, b).unwrap();
            assert_relative_eq!(back, q.eta(), max_relative = 1e-8);
        }
    }

    // ---- certify ---------------------------------------------------------------------

    #[test]
    fn certify_feasible_reports_max_threshold() {
        let q = unit_query(2.0, 0.5);
        let cert = certify(&q, 2.0).unwrap();
        assert_eq!(cert.status, CertificateStatus::Certified);
        assert_relative_eq!(cert.xi.unwrap(), 1.0, max_relative = 1e-12);
        let bs = cert.beta_star.unwrap();
        let bp = cert.beta_plus.unwrap();
        assert_relative_eq!(
            cert.recommended_min_beta.unwrap(),
            bs.max(bp),
            max_relative = 1e-14
        );
        // For this query the contraction threshold dominates.
        assert!(bp > bs);
    }

    #[test]
    fn certify_infeasible_gamma_has_markers() {
        let cert = certify(&unit_query(0.5, 0.5), 2.0).unwrap();
        assert_eq!(cert.status, CertificateStatus::InfeasibleGamma);
        assert!(cert.xi.is_some());
        assert!(cert.beta_star.is_none());
        assert!(cert.beta_plus.is_none());
        assert!(cert.recommended_min_beta.is_none());
        let json = serde_json::to_string(&cert).unwrap();
        assert!(!json.contains("beta_star"));
        assert!(json.contains("infeasible_gamma"));
    }

    #[test]
    fn certify_non_gaussian_shape_declines() {
        let cert = certify(&unit_query(2.0, 0.5), 1.6).unwrap();
        assert_eq!(cert.status, CertificateStatus::Uncertified);
        assert!(cert.xi.is_none());
        assert!(cert.recommended_min_beta.is_none());
    }

    // ---- from_regression ---------------------------------------------------------------

    #[test]
    fn from_regression_defaults() {
        use crate::filters::{build_regression, FilterState, LinearModel};
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let s = FilterState::new(
            DVector::from_element(1, 2.0),
            DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        let reg = build_regression(&s, &model, &DVector::from_element(1, 3.0)).unwrap();
        let q = ConvergenceQuery::from_regression(&reg, None, None).unwrap();
        let xi = xi_bound(&q).unwrap();
        assert_relative_eq!(q.gamma(), 2.0 * xi, max_relative = 1e-12);
        assert_relative_eq!(q.eta(), 0.5, max_relative = 1e-15);

        // Zero targets → ξ = 0 → default radius 1.
        let reg0 = build_regression(
            &FilterState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 4.0)).unwrap(),
            &model,
            &DVector::zeros(1),
        )
        .unwrap();
        let q0 = ConvergenceQuery::from_regression(&reg0, None, None).unwrap();
        assert_relative_eq!(q0.gamma(), 1.0, max_relative = 1e-15);
    }
}
