//! Comparison observers for the manipulator experiments: the Kalman
//! disturbance observer (KF on the augmented model), a pole-placed extended
//! state observer, single-kernel correntropy variants, and a bootstrap
//! particle filter with systematic resampling.
//!
//! All observers share a small driving interface: [`Observer::observe`]
//! consumes the scalar angle measurement and returns the current estimate
//! triple, and [`Observer::advance`] propagates one sampling period with the
//! linear-model input. The estimation model is the 3-state augmented
//! manipulator model over `[d, θ̇, θ]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::correntropy::{fixed_point_weight, Bandwidth, KernelConfig};
use crate::error::{Error, Result};
use crate::filters::{
    build_regression, gmkmckf_update, kf_predict, kf_update, FilterState, GmkmckfConfig,
    LinearModel,
};
use crate::noise::NoiseSpec;
use crate::plant::Estimates;

/// Scalar-measurement observer driven by the experiment loop:
/// `observe` ingests `y_k` and reports the estimates used by the controller
/// at step `k`; `advance` then propagates to step `k + 1` with the
/// model-consistent input `u_k`.
pub trait Observer {
    /// Processes the measurement and returns the current estimate triple.
    fn observe(&mut self, y: f64) -> Result<Estimates>;
    /// Propagates one sampling period under input `u`.
    fn advance(&mut self, u: f64) -> Result<()>;
    /// Inner-iteration count of the most recent `observe` (1 for
    /// non-iterative observers).
    fn last_iterations(&self) -> usize {
        1
    }
}

/// Checks the 3-state/scalar-measurement shape the experiment assumes.
fn check_manipulator_shape(model: &LinearModel) -> Result<()> {
    if model.state_dim() != 3 || model.measurement_dim() != 1 || model.input_dim() != 1 {
        return Err(Error::InvalidConfig(
            "experiment observers need the 3-state, single-output augmented model".into(),
        ));
    }
    Ok(())
}

fn estimates_from(x: &DVector<f64>) -> Estimates {
    Estimates {
        d: x[0],
        dtheta: x[1],
        theta: x[2],
    }
}

// ---------------------------------------------------------------------------
// KF-DOB
// ---------------------------------------------------------------------------

/// Kalman filter on the disturbance-augmented model.
#[derive(Debug, Clone)]
pub struct KfDob {
    model: LinearModel,
    state: FilterState,
}

impl KfDob {
    /// Starts from the zero state with `Π₀ = pi0·I`.
    pub fn new(model: LinearModel, pi0: f64) -> Result<Self> {
        check_manipulator_shape(&model)?;
        let n = model.state_dim();
        Ok(Self {
            model,
            state: FilterState::zero(n, pi0),
        })
    }

    /// Current filter state.
    pub fn state(&self) -> &FilterState {
        &self.state
    }
}

impl Observer for KfDob {
    fn observe(&mut self, y: f64) -> Result<Estimates> {
        self.state = kf_update(&self.state, &self.model, &DVector::from_element(1, y))?;
        Ok(estimates_from(&self.state.x))
    }

    fn advance(&mut self, u: f64) -> Result<()> {
        self.state = kf_predict(&self.state, &self.model, &DVector::from_element(1, u))?;
        Ok(())
    }
}

/// One full predict+update cycle of the Kalman disturbance observer —
/// a thin composition of the generic Kalman recursion on the augmented
/// model.
pub fn kfdob_step(
    state: &FilterState,
    model: &LinearModel,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<FilterState> {
    kf_update(&kf_predict(state, model, u)?, model, y)
}

// ---------------------------------------------------------------------------
// Robust observers
// ---------------------------------------------------------------------------

/// Multi-kernel fixed-point observer (whitened-regression update).
#[derive(Debug, Clone)]
pub struct GmkmckfObserver {
    model: LinearModel,
    state: FilterState,
    cfg: GmkmckfConfig,
    last_iters: usize,
}

impl GmkmckfObserver {
    /// Starts from the zero state with `Π₀ = pi0·I`.
    pub fn new(model: LinearModel, cfg: GmkmckfConfig, pi0: f64) -> Result<Self> {
        check_manipulator_shape(&model)?;
        if cfg.kernel.channels() != model.state_dim() + model.measurement_dim() {
            return Err(Error::DimensionMismatch(
                "kernel channel count must be n + m".into(),
            ));
        }
        let n = model.state_dim();
        Ok(Self {
            model,
            state: FilterState::zero(n, pi0),
            cfg,
            last_iters: 0,
        })
    }

    /// Current filter state.
    pub fn state(&self) -> &FilterState {
        &self.state
    }
}

impl Observer for GmkmckfObserver {
    fn observe(&mut self, y: f64) -> Result<Estimates> {
        let (next, iters, _) =
            gmkmckf_update(&self.state, &self.model, &DVector::from_element(1, y), &self.cfg)?;
        self.state = next;
        self.last_iters = iters;
        Ok(estimates_from(&self.state.x))
    }

    fn advance(&mut self, u: f64) -> Result<()> {
        self.state = kf_predict(&self.state, &self.model, &DVector::from_element(1, u))?;
        Ok(())
    }

    fn last_iterations(&self) -> usize {
        self.last_iters
    }
}

/// One single-kernel (uniform Gaussian) robust update: the multi-kernel
/// update with `α = 2` and every channel bandwidth `β = √2·σ`.
pub fn mckf_step(
    state: &FilterState,
    model: &LinearModel,
    y: &DVector<f64>,
    sigma: f64,
    m_iter: usize,
    eps_stop: f64,
) -> Result<(FilterState, usize, bool)> {
    let channels = model.state_dim() + model.measurement_dim();
    let kernel = KernelConfig::uniform(2.0, std::f64::consts::SQRT_2 * sigma, channels)?;
    let cfg = GmkmckfConfig::new(kernel, m_iter, eps_stop)?;
    gmkmckf_update(state, model, y, &cfg)
}

/// Single-Gaussian-kernel observer.
///
/// With `raw_residuals` unset the update is the whitened fixed point of
/// [`mckf_step`]. With it set, the reweighting uses the **unwhitened**
/// residuals `x̂⁻ − x_t` and `y − C x_t` directly (a common single-kernel
/// variant in which `σ` is calibrated in measurement units rather than
/// whitened units); the gain algebra is unchanged.
#[derive(Debug, Clone)]
pub struct MckfObserver {
    model: LinearModel,
    state: FilterState,
    sigma: f64,
    m_iter: usize,
    eps_stop: f64,
    raw_residuals: bool,
    last_iters: usize,
}

impl MckfObserver {
    /// Starts from the zero state with `Π₀ = pi0·I`.
    pub fn new(
        model: LinearModel,
        sigma: f64,
        m_iter: usize,
        eps_stop: f64,
        raw_residuals: bool,
        pi0: f64,
    ) -> Result<Self> {
        check_manipulator_shape(&model)?;
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if m_iter == 0 {
            return Err(Error::InvalidConfig("m_iter must be >= 1".into()));
        }
        if !(eps_stop.is_finite() && eps_stop > 0.0) {
            return Err(Error::InvalidConfig("eps_stop must be positive".into()));
        }
        let n = model.state_dim();
        Ok(Self {
            model,
            state: FilterState::zero(n, pi0),
            sigma,
            m_iter,
            eps_stop,
            raw_residuals,
            last_iters: 0,
        })
    }

    /// Fixed-point update with Gaussian weights on the raw residuals.
    fn raw_update(&mut self, y: f64) -> Result<()> {
        let model = &self.model;
        let n = model.state_dim();
        let c = model.c();
        let beta = Bandwidth::Finite(std::f64::consts::SQRT_2 * self.sigma);

        let reg = build_regression(&self.state, model, &DVector::from_element(1, y))?;
        let innovation = y - (c * &self.state.x)[0];

        let mut w_proc = vec![1.0; n];
        let mut w_meas = 1.0;
        let mut x_prev = self.state.x.clone();
        let mut k_last = DMatrix::<f64>::zeros(n, 1);
        let mut iters = 0;
        for t in 1..=self.m_iter {
            iters = t;
            if t > 1 {
                // Raw residuals at the newest iterate.
                for (i, w) in w_proc.iter_mut().enumerate() {
                    *w = fixed_point_weight(self.state.x[i] - x_prev[i], 2.0, beta);
                }
                w_meas = fixed_point_weight(y - (c * &x_prev)[0], 2.0, beta);
            }
            let p_mod = {
                let mut scaled = reg.b_p.clone();
                for (j, &w) in w_proc.iter().enumerate() {
                    let inv = 1.0 / w;
                    for i in 0..n {
                        scaled[(i, j)] *= inv;
                    }
                }
                &scaled * reg.b_p.transpose()
            };
            let r_mod = &reg.b_r * reg.b_r.transpose() / w_meas;
            let s = (c * &p_mod * c.transpose() + &r_mod)[(0, 0)];
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::SingularInnovation);
            }
            let k = p_mod * c.transpose() / s;
            let x_new = &self.state.x + &k * innovation;
            if !x_new.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteInput("fixed-point iterate".into()));
            }
            k_last = k;
            let diff = (&x_new - &x_prev).norm();
            let denom = x_new.norm();
            let change = if denom > 0.0 { diff / denom } else { diff };
            x_prev = x_new;
            if change <= self.eps_stop {
                break;
            }
        }

        let ikc = DMatrix::identity(n, n) - &k_last * c;
        let mut p = &ikc * &self.state.p * ikc.transpose() + &k_last * model.r() * k_last.transpose();
        let pt = p.transpose();
        p += pt;
        p *= 0.5;
        self.state = FilterState { x: x_prev, p };
        self.last_iters = iters;
        Ok(())
    }
}

impl Observer for MckfObserver {
    fn observe(&mut self, y: f64) -> Result<Estimates> {
        if self.raw_residuals {
            self.raw_update(y)?;
        } else {
            let (next, iters, _) = mckf_step(
                &self.state,
                &self.model,
                &DVector::from_element(1, y),
                self.sigma,
                self.m_iter,
                self.eps_stop,
            )?;
            self.state = next;
            self.last_iters = iters;
        }
        Ok(estimates_from(&self.state.x))
    }

    fn advance(&mut self, u: f64) -> Result<()> {
        self.state = kf_predict(&self.state, &self.model, &DVector::from_element(1, u))?;
        Ok(())
    }

    fn last_iterations(&self) -> usize {
        self.last_iters
    }
}

// ---------------------------------------------------------------------------
// Extended state observer
// ---------------------------------------------------------------------------

/// Extended-state-observer settings: a single bandwidth placing all observer
/// poles at `exp(−ω₀T)`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsoConfig {
    /// Observer bandwidth ω₀ (rad/s).
    pub omega0: f64,
}

impl Default for EsoConfig {
    fn default() -> Self {
        Self { omega0: 30.0 }
    }
}

/// Luenberger-style predictor observer on the augmented model:
/// `x̂_{k+1} = Ā x̂_k + F̄ u_k + L (y_k − C̄ x̂_k)`.
///
/// `observe` reports the **current** prediction (the innovation is stashed
/// and applied during `advance`), making the estimate at step `k` a function
/// of measurements up to `k − 1` plus the model — the classical predictor
/// form.
#[derive(Debug, Clone)]
pub struct Eso {
    model: LinearModel,
    l: DVector<f64>,
    x: DVector<f64>,
    innovation: f64,
}

impl Eso {
    /// Places all observer poles at `exp(−ω₀T)` via Ackermann's formula.
    pub fn from_bandwidth(model: LinearModel, omega0: f64, t_sample: f64) -> Result<Self> {
        if !(omega0 > 0.0 && omega0.is_finite()) {
            return Err(Error::InvalidConfig("omega0 must be positive".into()));
        }
        if !(t_sample > 0.0 && t_sample.is_finite()) {
            return Err(Error::InvalidConfig("sampling time must be positive".into()));
        }
        let l = ackermann_gain(&model, (-omega0 * t_sample).exp())?;
        Self::with_gain(model, l)
    }

    /// Uses an explicit gain vector; rejects gains that leave `Ā − LC̄`
    /// unstable.
    pub fn with_gain(model: LinearModel, l: DVector<f64>) -> Result<Self> {
        if model.measurement_dim() != 1 {
            return Err(Error::InvalidConfig(
                "the observer assumes a scalar measurement".into(),
            ));
        }
        if l.len() != model.state_dim() {
            return Err(Error::DimensionMismatch(
                "gain length must equal the state dimension".into(),
            ));
        }
        let rho = spectral_radius(&(model.a() - &l * model.c()));
        if !(rho < 1.0) {
            return Err(Error::UnstableObserver(rho));
        }
        let n = model.state_dim();
        Ok(Self {
            model,
            l,
            x: DVector::zeros(n),
            innovation: 0.0,
        })
    }

    /// Observer gain `L`.
    pub fn gain(&self) -> &DVector<f64> {
        &self.l
    }

    /// Spectral radius of the error dynamics `Ā − LC̄`.
    pub fn error_spectral_radius(&self) -> f64 {
        spectral_radius(&(self.model.a() - &self.l * self.model.c()))
    }
}

/// One predictor cycle of the extended state observer (innovation from `y`,
/// propagation with `u`), returning the post-propagation estimate.
pub fn eso_step(
    x: &DVector<f64>,
    model: &LinearModel,
    l: &DVector<f64>,
    y: f64,
    u: f64,
) -> DVector<f64> {
    let innovation = y - (model.c() * x)[0];
    model.a() * x + model.f() * DVector::from_element(1, u) + l * innovation
}

impl Observer for Eso {
    fn observe(&mut self, y: f64) -> Result<Estimates> {
        self.innovation = y - (self.model.c() * &self.x)[0];
        Ok(estimates_from(&self.x))
    }

    fn advance(&mut self, u: f64) -> Result<()> {
        self.x = self.model.a() * &self.x
            + self.model.f() * DVector::from_element(1, u)
            + &self.l * self.innovation;
        Ok(())
    }
}

/// Ackermann observer gain: `L = q(Ā)·O⁻¹·e_n` with `q(z) = (z − p)ⁿ`, where
/// `O` is the observability matrix `[C; CA; …; CAⁿ⁻¹]`.
fn ackermann_gain(model: &LinearModel, pole: f64) -> Result<DVector<f64>> {
    let n = model.state_dim();
    if model.measurement_dim() != 1 {
        return Err(Error::InvalidConfig(
            "pole placement implemented for scalar measurements".into(),
        ));
    }
    let a = model.a();
    let mut obs = DMatrix::zeros(n, n);
    let mut row = model.c().clone();
    for i in 0..n {
        obs.view_mut((i, 0), (1, n)).copy_from(&row);
        row *= a;
    }
    let mut en = DVector::zeros(n);
    en[n - 1] = 1.0;
    let sol = obs
        .lu()
        .solve(&en)
        .ok_or_else(|| Error::RankDeficient("observability matrix".into()))?;
    let mut q = DMatrix::identity(n, n);
    let shifted = a - DMatrix::identity(n, n) * pole;
    for _ in 0..n {
        q = &q * &shifted;
    }
    Ok(q * sol)
}

/// Largest eigenvalue magnitude.
fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Particle filter
// ---------------------------------------------------------------------------

/// Particle-filter settings.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfConfig {
    /// Particle count.
    pub particles: usize,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self { particles: 1000 }
    }
}

/// Bootstrap particle filter: dynamics proposal with per-channel process
/// noise, matched measurement likelihood, unconditional systematic
/// resampling each step, weighted-mean estimate taken before resampling.
pub struct Pf {
    model: LinearModel,
    particles: Vec<DVector<f64>>,
    process_noise: Vec<NoiseSpec>,
    measurement_noise: NoiseSpec,
    rng: ChaCha12Rng,
    degenerate_resets: usize,
    last_estimate: DVector<f64>,
}

impl Pf {
    /// Builds a filter with all particles at the origin.
    pub fn new(
        model: LinearModel,
        cfg: PfConfig,
        process_noise: Vec<NoiseSpec>,
        measurement_noise: NoiseSpec,
        rng: ChaCha12Rng,
    ) -> Result<Self> {
        if cfg.particles == 0 {
            return Err(Error::InvalidConfig("particle count must be >= 1".into()));
        }
        if process_noise.len() != model.state_dim() {
            return Err(Error::DimensionMismatch(
                "one process noise spec per state channel".into(),
            ));
        }
        if model.measurement_dim() != 1 {
            return Err(Error::InvalidConfig(
                "the particle filter assumes a scalar measurement".into(),
            ));
        }
        for spec in process_noise.iter().chain(std::iter::once(&measurement_noise)) {
            spec.validate()?;
        }
        let n = model.state_dim();
        Ok(Self {
            model,
            particles: vec![DVector::zeros(n); cfg.particles],
            process_noise,
            measurement_noise,
            rng,
            degenerate_resets: 0,
            last_estimate: DVector::zeros(n),
        })
    }

    /// Number of degenerate-likelihood events that forced a uniform weight
    /// reset.
    pub fn degenerate_resets(&self) -> usize {
        self.degenerate_resets
    }

    /// Redraws the particle cloud channel-by-channel from the given specs
    /// (one per state channel) — e.g. to match a Gaussian filter's initial
    /// covariance instead of the default point mass at the origin.
    pub fn scatter_particles(&mut self, init: &[NoiseSpec]) -> Result<()> {
        if init.len() != self.model.state_dim() {
            return Err(Error::DimensionMismatch(
                "one initial spec per state channel".into(),
            ));
        }
        for spec in init {
            spec.validate()?;
        }
        for p in &mut self.particles {
            for (i, spec) in init.iter().enumerate() {
                p[i] = spec.draw(&mut self.rng);
            }
        }
        Ok(())
    }
}

impl Observer for Pf {
    fn observe(&mut self, y: f64) -> Result<Estimates> {
        let n_part = self.particles.len();
        let c = self.model.c();

        // Log-likelihoods with max-shift for a stable exponential.
        let mut logw: Vec<f64> = self
            .particles
            .iter()
            .map(|p| self.measurement_noise.log_pdf(y - (c * p)[0]))
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64>;
        let total: f64;
        if max.is_finite() {
            for w in &mut logw {
                *w = (*w - max).exp();
            }
            weights = logw;
            total = weights.iter().sum();
        } else {
            weights = Vec::new();
            total = 0.0;
        }
        if !(total.is_finite() && total > 0.0) {
            // Degenerate likelihood: reset to uniform and count it.
            weights = vec![1.0 / n_part as f64; n_part];
            self.degenerate_resets += 1;
        } else {
            for w in &mut weights {
                *w /= total;
            }
        }

        // Weighted-mean estimate before resampling.
        let mut est = DVector::zeros(self.model.state_dim());
        for (w, p) in weights.iter().zip(&self.particles) {
            est += p * *w;
        }
        self.last_estimate = est;

        let u0: f64 = self.rng.gen();
        let idx = systematic_resample(&weights, n_part, u0)?;
        self.particles = idx.iter().map(|&i| self.particles[i].clone()).collect();

        Ok(estimates_from(&self.last_estimate))
    }

    fn advance(&mut self, u: f64) -> Result<()> {
        let fu = self.model.f() * DVector::from_element(1, u);
        for p in &mut self.particles {
            let mut next = self.model.a() * &*p + &fu;
            for (i, spec) in self.process_noise.iter().enumerate() {
                next[i] += spec.draw(&mut self.rng);
            }
            *p = next;
        }
        Ok(())
    }
}

/// One full particle-filter cycle in the experiment's order: measurement
/// update (weights, estimate, resample) for step `k`, then propagation to
/// step `k + 1` under input `u`.
pub fn pf_step(pf: &mut Pf, y: f64, u: f64) -> Result<Estimates> {
    let est = pf.observe(y)?;
    pf.advance(u)?;
    Ok(est)
}

/// Systematic resampling: strata points `(j + u0)/n_out` for
/// `j = 0..n_out−1` against the cumulative weight distribution; returns the
/// selected ancestor index per stratum.
///
/// Weights must be nonnegative and normalized; `u0 ∈ [0, 1)` is the single
/// uniform offset shared by all strata.
pub fn systematic_resample(weights: &[f64], n_out: usize, u0: f64) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("resampling weights".into()));
    }
    if n_out == 0 {
        return Err(Error::InvalidConfig("n_out must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&u0) {
        return Err(Error::InvalidConfig("u0 must lie in [0, 1)".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidConfig("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "weights must be normalized (sum {total})"
        )));
    }

    let mut indices = Vec::with_capacity(n_out);
    let mut cumulative = weights[0];
    let mut i = 0usize;
    for j in 0..n_out {
        let point = (j as f64 + u0) / n_out as f64;
        while point > cumulative && i + 1 < weights.len() {
            i += 1;
            cumulative += weights[i];
        }
        indices.push(i);
    }
    Ok(indices)
}
