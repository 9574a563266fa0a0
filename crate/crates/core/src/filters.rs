//! Kalman recursion and the generalized multi-kernel fixed-point update.
//!
//! The robust update is an iterated reweighted least-squares step on the
//! whitened linear regression that stacks the prior and the measurement:
//!
//! ```text
//! T = blockdiag(B_p, B_r)^{-1} [x̂⁻; y],   W = blockdiag(B_p, B_r)^{-1} [I; C],
//! ```
//!
//! where `B_p B_pᵀ = P⁻` and `B_r B_rᵀ = R` are Cholesky factors. Each pass
//! scales the factors by the inverse diagonal weight matrix built from the
//! channel weights `g(e_i)` ([`crate::correntropy::fixed_point_weight`]),
//! producing a modified gain
//!
//! ```text
//! K̃ = P̃⁻Cᵀ (C P̃⁻ Cᵀ + R̃)^{-1},   P̃⁻ = B_p M_p^{-1} B_pᵀ,   R̃ = B_r M_r^{-1} B_rᵀ,
//! ```
//!
//! and the iterate `x_t = x̂⁻ + K̃ (y − C x̂⁻)`.
//!
//! **Loop order.** The iteration starts from `x_0 = x̂⁻`, where the `n`
//! process-channel residuals of the stacked regression are identically zero;
//! for shape `α < 2` the weight `g` has a pole there, so evaluating weights
//! at `x_0` would start every update from a degenerate weight matrix. The
//! first pass therefore uses unit weights (`M = I`, a plain Kalman step) and
//! weights are refreshed from the residuals of the newest iterate after each
//! state update. For `α = 2` the two orderings coincide exactly (`g(0) = 1`),
//! so the Kalman/single-kernel equivalences are unaffected.
//!
//! The final a-posteriori covariance uses the Joseph form with the **original**
//! `P⁻` and `R` and the last gain:
//! `P⁺ = (I − K̃C) P⁻ (I − K̃C)ᵀ + K̃ R K̃ᵀ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::correntropy::{fixed_point_weight, KernelConfig};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Discrete linear time-invariant model
/// `x_{k+1} = A x_k + F u_k + w_k`, `y_k = C x_k + v_k`
/// with `w ~ (0, Q)` and `v ~ (0, R)`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    f: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LinearModel {
    /// Builds a validated model. `R` must be symmetric positive definite and
    /// `Q` symmetric positive semidefinite; all dimensions must agree.
    pub fn new(
        a: DMatrix<f64>,
        f: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidConfig("A must be square".into()));
        }
        if f.nrows() != n {
            return Err(Error::InvalidConfig("F must have n rows".into()));
        }
        if c.ncols() != n {
            return Err(Error::InvalidConfig("C must have n columns".into()));
        }
        let m = c.nrows();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::InvalidConfig("Q must be n×n".into()));
        }
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::InvalidConfig("R must be m×m".into()));
        }
        check_symmetric(&q, "Q")?;
        check_symmetric(&r, "R")?;
        if Cholesky::new(r.clone()).is_none() {
            return Err(Error::InvalidConfig("R must be positive definite".into()));
        }
        Ok(Self { a, f, c, q, r })
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Measurement dimension `m`.
    pub fn measurement_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Input dimension `p`.
    pub fn input_dim(&self) -> usize {
        self.f.ncols()
    }

    /// Transition matrix `A`.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Input map `F`.
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// Observation matrix `C`.
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Process covariance `Q`.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Measurement covariance `R`.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// A base model augmented with a leading disturbance block.
///
/// Over the augmented state `[d; x]` (disturbance first) the model becomes
///
/// ```text
/// Ā = [ I    0 ]      F̄ = [ 0 ]      C̄ = [ 0  C ]      Q̄ = blockdiag(Q_d, Q)
///     [ Γ    A ]          [ F ]
/// ```
///
/// i.e. the disturbance follows a random walk with covariance `Q_d` and
/// enters the base dynamics through the map `Γ`.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    base: LinearModel,
    gamma: DMatrix<f64>,
    q_d: DMatrix<f64>,
}

impl AugmentedModel {
    /// Builds a validated augmented model; `gamma` is `n×q`, `q_d` is `q×q`
    /// symmetric PSD.
    pub fn new(base: LinearModel, gamma: DMatrix<f64>, q_d: DMatrix<f64>) -> Result<Self> {
        if gamma.nrows() != base.state_dim() {
            return Err(Error::InvalidConfig(
                "gamma must have the base state dimension as row count".into(),
            ));
        }
        let q = gamma.ncols();
        if q_d.nrows() != q || q_d.ncols() != q {
            return Err(Error::InvalidConfig("Q_d must be q×q".into()));
        }
        check_symmetric(&q_d, "Q_d")?;
        Ok(Self { base, gamma, q_d })
    }

    /// Disturbance dimension `q`.
    pub fn disturbance_dim(&self) -> usize {
        self.gamma.ncols()
    }

    /// Base (unaugmented) model.
    pub fn base(&self) -> &LinearModel {
        &self.base
    }

    /// Disturbance input map `Γ`.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Assembles the augmented model as a plain [`LinearModel`] over `[d; x]`.
    pub fn to_linear(&self) -> LinearModel {
        let n = self.base.state_dim();
        let q = self.disturbance_dim();
        let m = self.base.measurement_dim();
        let p = self.base.input_dim();
        let nq = n + q;

        let mut a = DMatrix::zeros(nq, nq);
        a.view_mut((0, 0), (q, q)).fill_with_identity();
        a.view_mut((q, 0), (n, q)).copy_from(&self.gamma);
        a.view_mut((q, q), (n, n)).copy_from(self.base.a());

        let mut f = DMatrix::zeros(nq, p);
        f.view_mut((q, 0), (n, p)).copy_from(self.base.f());

        let mut c = DMatrix::zeros(m, nq);
        c.view_mut((0, q), (m, n)).copy_from(self.base.c());

        let mut qm = DMatrix::zeros(nq, nq);
        qm.view_mut((0, 0), (q, q)).copy_from(&self.q_d);
        qm.view_mut((q, q), (n, n)).copy_from(self.base.q());

        LinearModel::new(a, f, c, qm, self.base.r().clone())
            .expect("augmented model assembled from a validated base is valid")
    }
}

// ---------------------------------------------------------------------------
// Filter state
// ---------------------------------------------------------------------------

/// State estimate and error covariance (a-priori or a-posteriori depending
/// on position in the predict/update cycle).
#[derive(Debug, Clone)]
pub struct FilterState {
    /// State estimate `x̂`.
    pub x: DVector<f64>,
    /// Error covariance `P` (kept symmetric by re-symmetrization each step).
    pub p: DMatrix<f64>,
}

impl FilterState {
    /// Initial state with covariance `Π₀`.
    pub fn new(x0: DVector<f64>, pi0: DMatrix<f64>) -> Result<Self> {
        if pi0.nrows() != x0.len() || pi0.ncols() != x0.len() {
            return Err(Error::DimensionMismatch(
                "initial covariance must be n×n".into(),
            ));
        }
        check_symmetric(&pi0, "Π₀")?;
        Ok(Self { x: x0, p: pi0 })
    }

    /// Zero state with `Π₀ = pi0_scale · I`.
    pub fn zero(n: usize, pi0_scale: f64) -> Self {
        Self {
            x: DVector::zeros(n),
            p: DMatrix::identity(n, n) * pi0_scale,
        }
    }
}

/// Symmetry check with an absolute tolerance scaled by the matrix magnitude.
fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidConfig(format!("{what} is not symmetric")));
            }
        }
    }
    Ok(())
}

/// `(M + Mᵀ)/2` — enforces exact symmetry after covariance updates.
fn symmetrize(m: &mut DMatrix<f64>) {
    let mt = m.transpose();
    *m += mt;
    *m *= 0.5;
}

// ---------------------------------------------------------------------------
// Kalman recursion
// ---------------------------------------------------------------------------

/// Time update: `x̂⁻ = A x̂⁺ + F u`, `P⁻ = A P⁺ Aᵀ + Q`.
pub fn kf_predict(state: &FilterState, model: &LinearModel, u: &DVector<f64>) -> Result<FilterState> {
    if state.x.len() != model.state_dim() {
        return Err(Error::DimensionMismatch("state/model".into()));
    }
    if u.len() != model.input_dim() {
        return Err(Error::DimensionMismatch("input/model".into()));
    }
    let x = model.a() * &state.x + model.f() * u;
    let mut p = model.a() * &state.p * model.a().transpose() + model.q();
    symmetrize(&mut p);
    Ok(FilterState { x, p })
}

/// Measurement update:
/// `K = P⁻Cᵀ(CP⁻Cᵀ+R)^{-1}`, `x̂⁺ = x̂⁻ + K(y − Cx̂⁻)`, `P⁺ = (I−KC)P⁻`.
pub fn kf_update(state: &FilterState, model: &LinearModel, y: &DVector<f64>) -> Result<FilterState> {
    if y.len() != model.measurement_dim() {
        return Err(Error::DimensionMismatch("measurement/model".into()));
    }
    let c = model.c();
    let mut s = c * &state.p * c.transpose() + model.r();
    symmetrize(&mut s);
    let chol = Cholesky::new(s).ok_or(Error::SingularInnovation)?;
    // K = P⁻Cᵀ S⁻¹  ⇔  Kᵀ = S⁻¹ C P⁻ (S symmetric).
    let k = chol.solve(&(c * &state.p)).transpose();
    let innovation = y - c * &state.x;
    let x = &state.x + &k * innovation;
    let n = model.state_dim();
    let ikc = DMatrix::identity(n, n) - &k * c;
    let mut p = ikc * &state.p;
    symmetrize(&mut p);
    Ok(FilterState { x, p })
}

// ---------------------------------------------------------------------------
// Whitened regression form
// ---------------------------------------------------------------------------

/// The stacked whitened regression `T = W x + ζ` built from an a-priori state
/// and a measurement; the first `n` rows are the (whitened) prior channels,
/// the last `m` rows the measurement channels.
#[derive(Debug, Clone)]
pub struct RegressionForm {
    /// Stacked whitened observations, length `n + m`.
    pub t: DVector<f64>,
    /// Stacked whitened design matrix, `(n + m) × n`.
    pub w: DMatrix<f64>,
    /// Lower Cholesky factor of `P⁻`.
    pub b_p: DMatrix<f64>,
    /// Lower Cholesky factor of `R`.
    pub b_r: DMatrix<f64>,
}

impl RegressionForm {
    /// Number of state channels `n`.
    pub fn state_channels(&self) -> usize {
        self.b_p.nrows()
    }

    /// Number of measurement channels `m`.
    pub fn measurement_channels(&self) -> usize {
        self.b_r.nrows()
    }
}

/// Cholesky with escalating diagonal jitter.
///
/// If plain factorization fails (the matrix is numerically semidefinite),
/// adds `1e-12 · trace/n · I` and retries, escalating the jitter tenfold up
/// to three times before giving up.
fn chol_with_jitter(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let base = 1e-12 * m.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut jitter = base;
    for _ in 0..3 {
        let jittered = m + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::CholeskyFailure(what))
}

/// Builds the whitened regression from an a-priori state and a measurement:
/// `T = blockdiag(B_p, B_r)^{-1}[x̂⁻; y]`,
/// `W = blockdiag(B_p, B_r)^{-1}[I; C]`.
pub fn build_regression(
    state: &FilterState,
    model: &LinearModel,
    y: &DVector<f64>,
) -> Result<RegressionForm> {
    if y.len() != model.measurement_dim() {
        return Err(Error::DimensionMismatch("measurement/model".into()));
    }
    let n = model.state_dim();
    let m = model.measurement_dim();
    let b_p = chol_with_jitter(&state.p, "P⁻").map(|c| c.l())?;
    let b_r = chol_with_jitter(model.r(), "R").map(|c| c.l())?;

    let t_p = b_p
        .solve_lower_triangular(&state.x)
        .ok_or(Error::CholeskyFailure("P⁻ factor solve"))?;
    let t_r = b_r
        .solve_lower_triangular(y)
        .ok_or(Error::CholeskyFailure("R factor solve"))?;
    let w_p = b_p
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::CholeskyFailure("P⁻ factor solve"))?;
    let w_r = b_r
        .solve_lower_triangular(model.c())
        .ok_or(Error::CholeskyFailure("R factor solve"))?;

    let mut t = DVector::zeros(n + m);
    t.rows_mut(0, n).copy_from(&t_p);
    t.rows_mut(n, m).copy_from(&t_r);
    let mut w = DMatrix::zeros(n + m, n);
    w.view_mut((0, 0), (n, n)).copy_from(&w_p);
    w.view_mut((n, 0), (m, n)).copy_from(&w_r);

    Ok(RegressionForm { t, w, b_p, b_r })
}

// ---------------------------------------------------------------------------
// Fixed-point (iterated reweighted) update
// ---------------------------------------------------------------------------

/// Settings of the fixed-point update: the kernel over the `n + m` stacked
/// channels (process channels first), the iteration cap, and the relative
/// stopping threshold.
#[derive(Debug, Clone)]
pub struct GmkmckfConfig {
    /// Kernel over `n + m` channels, process channels first.
    pub kernel: KernelConfig,
    /// Maximum number of gain/state passes (`≥ 1`).
    pub m_iter: usize,
    /// Relative-change stopping threshold (`> 0`).
    pub eps_stop: f64,
}

impl GmkmckfConfig {
    /// Default stopping threshold for the fixed-point iteration.
    pub const DEFAULT_EPS_STOP: f64 = 1e-6;

    /// Builds a validated configuration.
    pub fn new(kernel: KernelConfig, m_iter: usize, eps_stop: f64) -> Result<Self> {
        if m_iter == 0 {
            return Err(Error::InvalidConfig("m_iter must be >= 1".into()));
        }
        if !(eps_stop.is_finite() && eps_stop > 0.0) {
            return Err(Error::InvalidConfig("eps_stop must be positive".into()));
        }
        kernel.validate()?;
        Ok(Self {
            kernel,
            m_iter,
            eps_stop,
        })
    }
}

/// Relative change `‖x_new − x_old‖ / ‖x_new‖`, falling back to the absolute
/// change when the new iterate is exactly zero.
fn relative_change(x_new: &DVector<f64>, x_old: &DVector<f64>) -> f64 {
    let diff = (x_new - x_old).norm();
    let denom = x_new.norm();
    if denom > 0.0 {
        diff / denom
    } else {
        diff
    }
}

/// `B diag(1/m) Bᵀ` — the weight-modified covariance reconstruction.
fn weighted_cov(b: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut scaled = b.clone();
    for (j, &w) in weights.iter().enumerate() {
        let inv = 1.0 / w;
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= inv;
        }
    }
    let mut out = scaled * b.transpose();
    symmetrize(&mut out);
    out
}

/// Robust measurement update by fixed-point iteration.
///
/// Returns the a-posteriori state, the number of gain/state passes executed,
/// and whether the relative-change criterion was met (`false` means the
/// iteration cap stopped it — reported, not an error).
///
/// See the module docs for the loop-order convention; the final covariance is
/// the Joseph form over the original `P⁻` and `R` with the last gain.
pub fn gmkmckf_update(
    state: &FilterState,
    model: &LinearModel,
    y: &DVector<f64>,
    cfg: &GmkmckfConfig,
) -> Result<(FilterState, usize, bool)> {
    let n = model.state_dim();
    let m = model.measurement_dim();
    if cfg.kernel.channels() != n + m {
        return Err(Error::DimensionMismatch(format!(
            "kernel has {} channels, model needs n+m = {}",
            cfg.kernel.channels(),
            n + m
        )));
    }
    if !y.iter().all(|v| v.is_finite()) || !state.x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput("state or measurement".into()));
    }

    let reg = build_regression(state, model, y)?;
    let c = model.c();
    let innovation = y - c * &state.x;

    let alpha = cfg.kernel.alpha;
    let mut w_proc = vec![1.0; n];
    let mut w_meas = vec![1.0; m];
    let mut x_prev = state.x.clone();
    let mut k_last = DMatrix::<f64>::zeros(n, m);
    let mut iterations = 0;
    let mut converged = false;

    for t in 1..=cfg.m_iter {
        iterations = t;
        let p_mod = weighted_cov(&reg.b_p, &w_proc);
        let r_mod = weighted_cov(&reg.b_r, &w_meas);
        let mut s = c * &p_mod * c.transpose() + &r_mod;
        symmetrize(&mut s);
        // Collapsed channel weights inflate S by up to 1/WEIGHT_FLOOR, and the
        // resulting scale disparity can cancel a pivot to ≤ 0 in f64 even
        // though S is PD exactly; the trace-scaled jitter restores the factor
        // while preserving the discarded-channel semantics.
        let chol = chol_with_jitter(&s, "weighted innovation")
            .map_err(|_| Error::SingularInnovation)?;
        let k = chol.solve(&(c * &p_mod)).transpose();
        let x_t = &state.x + &k * &innovation;
        if !x_t.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("fixed-point iterate".into()));
        }
        k_last = k;

        let change = relative_change(&x_t, &x_prev);
        converged = change <= cfg.eps_stop;
        if t < cfg.m_iter && !converged {
            // Refresh weights from the residuals of the newest iterate.
            let e = &reg.t - &reg.w * &x_t;
            for (i, w) in w_proc.iter_mut().enumerate() {
                *w = fixed_point_weight(e[i], alpha, cfg.kernel.betas[i]);
            }
            for (j, w) in w_meas.iter_mut().enumerate() {
                *w = fixed_point_weight(e[n + j], alpha, cfg.kernel.betas[n + j]);
            }
        }
        x_prev = x_t;
        if converged {
            break;
        }
    }

    // Joseph form with the original P⁻ and R and the final gain.
    let ikc = DMatrix::identity(n, n) - &k_last * c;
    let mut p = &ikc * &state.p * ikc.transpose() + &k_last * model.r() * k_last.transpose();
    symmetrize(&mut p);

    Ok((FilterState { x: x_prev, p }, iterations, converged))
}

// ---------------------------------------------------------------------------
// Raw normal-equations fixed-point map
// ---------------------------------------------------------------------------

/// One application of the reweighted normal-equations map on a raw regression
/// `T ≈ W x`:
///
/// ```text
/// f(x) = (Σ_i g(e_i) w_iᵀ w_i)^{-1} (Σ_i g(e_i) w_iᵀ t_i),   e = T − W x.
/// ```
///
/// This is the map whose fixed points the gain-form update
/// ([`gmkmckf_update`]) computes; it is exposed directly so convergence
/// certificates can be exercised on arbitrary regressions.
pub fn gl_fixed_point(
    t: &DVector<f64>,
    w: &DMatrix<f64>,
    cfg: &KernelConfig,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let l = t.len();
    let n = w.ncols();
    if w.nrows() != l {
        return Err(Error::DimensionMismatch("T and W row counts differ".into()));
    }
    if x.len() != n {
        return Err(Error::DimensionMismatch("x and W column counts differ".into()));
    }
    if cfg.channels() != l {
        return Err(Error::DimensionMismatch(format!(
            "kernel has {} channels, regression has {l}",
            cfg.channels()
        )));
    }
    let e = t - w * x;
    let mut lhs = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for i in 0..l {
        let g = fixed_point_weight(e[i], cfg.alpha, cfg.betas[i]);
        let wi = w.row(i);
        for a in 0..n {
            rhs[a] += g * wi[a] * t[i];
            for b in 0..n {
                lhs[(a, b)] += g * wi[a] * wi[b];
            }
        }
    }
    symmetrize(&mut lhs);
    let chol = Cholesky::new(lhs)
        .ok_or_else(|| Error::RankDeficient("weighted normal equations".into()))?;
    Ok(chol.solve(&rhs))
}

/// Iterates [`gl_fixed_point`] from `x0` until the relative change drops to
/// `tol` or `max_iter` applications are spent. Returns the final iterate, the
/// number of applications, and the convergence flag.
pub fn iterate_fixed_point(
    t: &DVector<f64>,
    w: &DMatrix<f64>,
    cfg: &KernelConfig,
    x0: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<(DVector<f64>, usize, bool)> {
    let mut x = x0.clone();
    for it in 1..=max_iter {
        let x_next = gl_fixed_point(t, w, cfg, &x)?;
        let change = relative_change(&x_next, &x);
        x = x_next;
        if change < tol {
            return Ok((x, it, true));
        }
    }
    Ok((x, max_iter, false))
}

// ---------------------------------------------------------------------------
// Trajectory folding
// ---------------------------------------------------------------------------

/// Observer run by [`filter_trajectory`].
#[derive(Debug, Clone)]
pub enum TrajectoryObserver {
    /// Plain Kalman predict/update.
    Kf,
    /// Fixed-point robust update with the given settings.
    Gmkmckf(GmkmckfConfig),
}

/// One step of a folded trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    /// A-posteriori state after this step's update (the initial state for
    /// index 0).
    pub state: FilterState,
    /// Fixed-point passes spent in the update (0 for the initial entry,
    /// 1 for plain Kalman steps).
    pub iterations: usize,
    /// Whether the update's stopping criterion was met.
    pub converged: bool,
}

/// Folds predict + update over paired input/measurement sequences.
///
/// Element 0 of the result is the initial state; element `k ≥ 1` is the
/// a-posteriori state after consuming `inputs[k-1]` and `measurements[k-1]`.
pub fn filter_trajectory(
    model: &LinearModel,
    init: FilterState,
    observer: &TrajectoryObserver,
    inputs: &[DVector<f64>],
    measurements: &[DVector<f64>],
) -> Result<Vec<TrajectoryStep>> {
    if inputs.len() != measurements.len() {
        return Err(Error::DimensionMismatch(
            "inputs and measurements must have equal length".into(),
        ));
    }
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(TrajectoryStep {
        state: init,
        iterations: 0,
        converged: true,
    });
    for (u, y) in inputs.iter().zip(measurements) {
        let prior = kf_predict(&out.last().expect("non-empty").state, model, u)?;
        let step = match observer {
            TrajectoryObserver::Kf => TrajectoryStep {
                state: kf_update(&prior, model, y)?,
                iterations: 1,
                converged: true,
            },
            TrajectoryObserver::Gmkmckf(cfg) => {
                let (state, iterations, converged) = gmkmckf_update(&prior, model, y, cfg)?;
                TrajectoryStep {
                    state,
                    iterations,
                    converged,
                }
            }
        };
        out.push(step);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correntropy::Bandwidth;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_model(a: f64, q: f64, r: f64) -> LinearModel {
        LinearModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    /// Random stable model with PD covariances, n ≤ 4, m ≤ 2.
    pub(crate) fn random_model(rng: &mut StdRng) -> LinearModel {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=2);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        // Rescale to spectral radius ≤ 0.95 via the Frobenius norm bound.
        let norm = a.norm();
        if norm > 0.95 {
            a *= 0.95 / norm;
        }
        let c = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let lq = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
        let q = &lq * lq.transpose() + DMatrix::identity(n, n) * 1e-3;
        let lr = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-0.5..0.5));
        let r = &lr * lr.transpose() + DMatrix::identity(m, m) * 1e-3;
        LinearModel::new(a, DMatrix::zeros(n, 1), c, q, r).unwrap()
    }

    // ---- kf_predict ---------------------------------------------------------

    #[test]
    fn predict_identity_no_noise_is_noop() {
        let model = LinearModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let s = FilterState::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2)).unwrap();
        let out = kf_predict(&s, &model, &DVector::zeros(1)).unwrap();
        assert_eq!(out.x, s.x);
        assert_eq!(out.p, s.p);
    }

    #[test]
    fn predict_scalar_hand_value() {
        let model = scalar_model(0.9, 0.1, 1.0);
        let s = FilterState::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0))
            .unwrap();
        let out = kf_predict(&s, &model, &DVector::zeros(1)).unwrap();
        assert_relative_eq!(out.x[0], 0.9, max_relative = 1e-15);
        assert_relative_eq!(out.p[(0, 0)], 0.91, max_relative = 1e-15);
    }

    // ---- kf_update ----------------------------------------------------------

    #[test]
    fn update_zero_prior_covariance_keeps_prior() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let s = FilterState::new(DVector::from_element(1, 0.5), DMatrix::zeros(1, 1)).unwrap();
        let out = kf_update(&s, &model, &DVector::from_element(1, 100.0)).unwrap();
        assert_relative_eq!(out.x[0], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn update_scalar_hand_values() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let s = FilterState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let out = kf_update(&s, &model, &DVector::from_element(1, 2.0)).unwrap();
        assert_relative_eq!(out.x[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(out.p[(0, 0)], 0.5, max_relative = 1e-14);
    }

    #[test]
    fn update_huge_r_ignores_measurement() {
        let model = scalar_model(1.0, 0.0, 1e12);
        let s = FilterState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let out = kf_update(&s, &model, &DVector::from_element(1, 5.0)).unwrap();
        assert!(out.x[0].abs() < 1e-9);
    }

    // ---- build_regression ----------------------------------------------------

    #[test]
    fn regression_identity_whitening() {
        let model = LinearModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let s = FilterState::new(DVector::from_vec(vec![2.0, -1.0]), DMatrix::identity(2, 2))
            .unwrap();
        let y = DVector::from_element(1, 3.0);
        let reg = build_regression(&s, &model, &y).unwrap();
        assert_relative_eq!(reg.t[0], 2.0, max_relative = 1e-14);
        assert_relative_eq!(reg.t[1], -1.0, max_relative = 1e-14);
        assert_relative_eq!(reg.t[2], 3.0, max_relative = 1e-14);
        assert_relative_eq!(reg.w[(2, 0)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(reg.w[(2, 1)], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn regression_scalar_hand_values() {
        // P⁻ = 4, R = 1, x̂⁻ = 2, C = 1, y = 3 → T = (1, 3), W = (0.5, 1)ᵀ.
        let model = scalar_model(1.0, 0.0, 1.0);
        let s = FilterState::new(DVector::from_element(1, 2.0), DMatrix::from_element(1, 1, 4.0))
            .unwrap();
        let reg = build_regression(&s, &model, &DVector::from_element(1, 3.0)).unwrap();
        assert_relative_eq!(reg.t[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(reg.t[1], 3.0, max_relative = 1e-14);
        assert_relative_eq!(reg.w[(0, 0)], 0.5, max_relative = 1e-14);
        assert_relative_eq!(reg.w[(1, 0)], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn regression_factors_reconstruct() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let model = random_model(&mut rng);
            let n = model.state_dim();
            let lp = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let p = &lp * lp.transpose() + DMatrix::identity(n, n) * 0.1;
            let s = FilterState::new(DVector::zeros(n), p.clone()).unwrap();
            let y = DVector::zeros(model.measurement_dim());
            let reg = build_regression(&s, &model, &y).unwrap();
            let recon = &reg.b_p * reg.b_p.transpose();
            assert!((recon - &p).amax() < 1e-10 * p.amax().max(1.0));
            let recon_r = &reg.b_r * reg.b_r.transpose();
            assert!((recon_r - model.r()).amax() < 1e-10);
        }
    }

    #[test]
    fn regression_semidefinite_prior_gets_jitter() {
        // Rank-deficient P⁻ (PSD, not PD) must still factor via jitter.
        let model = LinearModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]); // rank 1
        let s = FilterState::new(DVector::zeros(2), p).unwrap();
        let reg = build_regression(&s, &model, &DVector::zeros(1));
        assert!(reg.is_ok());
    }

    // ---- gmkmckf_update -------------------------------------------------------

    #[test]
    fn robust_update_alpha_two_unbounded_equals_kf() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let model = random_model(&mut rng);
            let n = model.state_dim();
            let m = model.measurement_dim();
            let s = FilterState::zero(n, 1.0);
            let prior = kf_predict(&s, &model, &DVector::zeros(1)).unwrap();
            let y = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
            let kf = kf_update(&prior, &model, &y).unwrap();
            let cfg = GmkmckfConfig::new(
                KernelConfig::unbounded(2.0, n + m).unwrap(),
                5,
                1e-9,
            )
            .unwrap();
            let (robust, _, _) = gmkmckf_update(&prior, &model, &y, &cfg).unwrap();
            assert!((robust.x - kf.x).amax() < 1e-9);
            assert!((robust.p - kf.p).amax() < 1e-9);
        }
    }

    #[test]
    fn robust_update_scalar_matches_grid_argmin() {
        // n = m = 1: the converged iterate must minimize the stacked
        // generalized loss over x (dense grid, step 1e-4).
        let model = scalar_model(1.0, 0.1, 0.5);
        for (alpha, beta) in [(2.0, 2.0), (1.6, 1.5)] {
            let prior =
                FilterState::new(DVector::from_element(1, 0.3), DMatrix::from_element(1, 1, 0.8))
                    .unwrap();
            let y = DVector::from_element(1, 4.0); // clear outlier vs prior
            let kernel = KernelConfig::uniform(alpha, beta, 2).unwrap();
            let cfg = GmkmckfConfig::new(kernel.clone(), 200, 1e-13).unwrap();
            let (out, _, converged) = gmkmckf_update(&prior, &model, &y, &cfg).unwrap();
            assert!(converged);

            let reg = build_regression(&prior, &model, &y).unwrap();
            let loss = |x: f64| {
                let e = [reg.t[0] - reg.w[(0, 0)] * x, reg.t[1] - reg.w[(1, 0)] * x];
                crate::correntropy::gl_loss(&e, &kernel).unwrap()
            };
            let mut best_x = -6.0;
            let mut best_v = f64::INFINITY;
            let mut x = -6.0;
            while x <= 6.0 {
                let v = loss(x);
                if v < best_v {
                    best_v = v;
                    best_x = x;
                }
                x += 1e-4;
            }
            assert!(
                (out.x[0] - best_x).abs() < 1e-3,
                "fixed point {} vs grid argmin {best_x} (α={alpha})",
                out.x[0]
            );
        }
    }

    #[test]
    fn robust_update_iteration_cap_and_flag() {
        let model = scalar_model(1.0, 0.1, 0.5);
        let prior = FilterState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let y = DVector::from_element(1, 30.0);
        let kernel = KernelConfig::uniform(1.6, 0.5, 2).unwrap();
        // One pass: must report 1 iteration; a fresh update from a prior with
        // a large innovation will not have converged in a single pass.
        let cfg = GmkmckfConfig::new(kernel, 1, 1e-12).unwrap();
        let (_, iters, converged) = gmkmckf_update(&prior, &model, &y, &cfg).unwrap();
        assert_eq!(iters, 1);
        assert!(!converged);
    }

    #[test]
    fn robust_update_covariance_symmetric_psd() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..10 {
            let model = random_model(&mut rng);
            let n = model.state_dim();
            let m = model.measurement_dim();
            let mut state = FilterState::zero(n, 1.0);
            let cfg = GmkmckfConfig::new(
                KernelConfig::uniform(1.6, 2.0, n + m).unwrap(),
                5,
                1e-6,
            )
            .unwrap();
            for _ in 0..50 {
                state = kf_predict(&state, &model, &DVector::zeros(1)).unwrap();
                let y = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
                let (next, iters, _) = gmkmckf_update(&state, &model, &y, &cfg).unwrap();
                assert!(iters <= 5);
                state = next;
                assert!((state.p.clone() - state.p.transpose()).amax() < 1e-12);
                assert!(Cholesky::new(
                    state.p.clone() + DMatrix::identity(n, n) * 1e-12
                )
                .is_some());
            }
        }
    }

    #[test]
    fn joseph_form_matches_standard_form_for_kf_gain() {
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..20 {
            let model = random_model(&mut rng);
            let n = model.state_dim();
            let m = model.measurement_dim();
            let prior = {
                let s = FilterState::zero(n, 1.0);
                kf_predict(&s, &model, &DVector::zeros(1)).unwrap()
            };
            let y = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
            let kf = kf_update(&prior, &model, &y).unwrap();
            let cfg = GmkmckfConfig::new(
                KernelConfig::unbounded(2.0, n + m).unwrap(),
                3,
                1e-9,
            )
            .unwrap();
            let (robust, _, _) = gmkmckf_update(&prior, &model, &y, &cfg).unwrap();
            assert!((robust.p - kf.p).amax() < 1e-9);
        }
    }

    // ---- gl_fixed_point --------------------------------------------------------

    #[test]
    fn fixed_point_map_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..50 {
            let l = 5;
            let n = 2;
            let t = DVector::from_fn(l, |_, _| rng.gen_range(-2.0..2.0));
            let w = DMatrix::from_fn(l, n, |_, _| rng.gen_range(-2.0..2.0));
            let betas: Vec<Bandwidth> = (0..l)
                .map(|_| Bandwidth::Finite(rng.gen_range(0.5..3.0)))
                .collect();
            let cfg = KernelConfig::new(1.8, betas.clone()).unwrap();
            let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let base = gl_fixed_point(&t, &w, &cfg, &x).unwrap();

            // Cyclic shift of rows and betas together.
            let perm: Vec<usize> = (0..l).map(|i| (i + 2) % l).collect();
            let t2 = DVector::from_fn(l, |i, _| t[perm[i]]);
            let mut w2 = DMatrix::zeros(l, n);
            for i in 0..l {
                w2.row_mut(i).copy_from(&w.row(perm[i]));
            }
            let betas2: Vec<Bandwidth> = perm.iter().map(|&i| betas[i]).collect();
            let cfg2 = KernelConfig::new(1.8, betas2).unwrap();
            let permuted = gl_fixed_point(&t2, &w2, &cfg2, &x).unwrap();
            assert!((base - permuted).amax() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_map_unweighted_is_least_squares() {
        let mut rng = StdRng::seed_from_u64(43);
        let l = 6;
        let n = 3;
        let t = DVector::from_fn(l, |_, _| rng.gen_range(-2.0..2.0));
        let w = DMatrix::from_fn(l, n, |_, _| rng.gen_range(-2.0..2.0));
        let cfg = KernelConfig::unbounded(2.0, l).unwrap();
        let x0 = DVector::zeros(n);
        let fx = gl_fixed_point(&t, &w, &cfg, &x0).unwrap();
        let ls = (w.transpose() * &w)
            .cholesky()
            .unwrap()
            .solve(&(w.transpose() * &t));
        assert!((fx - ls).amax() < 1e-12);
    }

    // ---- filter_trajectory -------------------------------------------------------

    #[test]
    fn trajectory_empty_gives_initial_only() {
        let model = scalar_model(0.9, 0.1, 1.0);
        let init = FilterState::zero(1, 1.0);
        let out = filter_trajectory(&model, init, &TrajectoryObserver::Kf, &[], &[]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].iterations, 0);
    }

    #[test]
    fn trajectory_single_step_equals_predict_update() {
        let model = scalar_model(0.9, 0.1, 1.0);
        let init = FilterState::zero(1, 1.0);
        let u = DVector::zeros(1);
        let y = DVector::from_element(1, 1.5);
        let traj = filter_trajectory(
            &model,
            init.clone(),
            &TrajectoryObserver::Kf,
            std::slice::from_ref(&u),
            std::slice::from_ref(&y),
        )
        .unwrap();
        let manual = kf_update(&kf_predict(&init, &model, &u).unwrap(), &model, &y).unwrap();
        assert_eq!(traj.len(), 2);
        assert!((traj[1].state.x.clone() - manual.x).amax() < 1e-15);
    }

    #[test]
    fn trajectory_length_mismatch_rejected() {
        let model = scalar_model(0.9, 0.1, 1.0);
        let init = FilterState::zero(1, 1.0);
        let u = vec![DVector::zeros(1)];
        let err = filter_trajectory(&model, init, &TrajectoryObserver::Kf, &u, &[]);
        assert!(err.is_err());
    }

    // ---- augmented model --------------------------------------------------------

    #[test]
    fn augmented_model_layout() {
        let base = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, -0.01, 0.01, 1.0]),
            DMatrix::from_column_slice(2, 1, &[0.1, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::identity(2, 2) * 1e-4,
            DMatrix::from_element(1, 1, 1e-4),
        )
        .unwrap();
        let gamma = DMatrix::from_column_slice(2, 1, &[0.1, 0.0]);
        let aug = AugmentedModel::new(base, gamma, DMatrix::from_element(1, 1, 0.01)).unwrap();
        let lin = aug.to_linear();
        assert_eq!(lin.state_dim(), 3);
        assert_eq!(lin.a()[(0, 0)], 1.0); // disturbance random walk
        assert_eq!(lin.a()[(1, 0)], 0.1); // Γ in the lower-left block
        assert_eq!(lin.c()[(0, 0)], 0.0);
        assert_eq!(lin.c()[(0, 2)], 1.0);
        assert_eq!(lin.q()[(0, 0)], 0.01);
        assert_eq!(lin.f()[(1, 0)], 0.1);
    }
}
