//! Noise models for the experiments: Gaussian / Laplace / uniform / mixture
//! variate generation, the density induced by the generalized loss, and the
//! least-squares Gaussian fit used to motivate bandwidth selection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correntropy::{gl_loss, Bandwidth, KernelConfig};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Noise specifications
// ---------------------------------------------------------------------------

/// Distribution specification; serialized with an external tag
/// (`{"laplace": {"location": 0.0, "scale": 0.007}}`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Normal distribution parameterized by mean and **variance**.
    Gaussian {
        /// Mean μ.
        mean: f64,
        /// Variance σ² (> 0).
        variance: f64,
    },
    /// Laplace distribution (variance `2·scale²`).
    Laplace {
        /// Location μ.
        location: f64,
        /// Scale s (> 0).
        scale: f64,
    },
    /// Continuous uniform on `[lower, upper)`.
    Uniform {
        /// Lower bound a.
        lower: f64,
        /// Upper bound b (> a).
        upper: f64,
    },
    /// Convex mixture of component distributions.
    Mixture {
        /// Component probabilities (positive, summing to 1).
        weights: Vec<f64>,
        /// Component distributions (same length as `weights`).
        components: Vec<NoiseSpec>,
    },
}

impl NoiseSpec {
    /// Validates the distribution parameters (recursively for mixtures).
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gaussian { mean, variance } => {
                if !mean.is_finite() || !(variance.is_finite() && *variance > 0.0) {
                    return Err(Error::InvalidConfig(
                        "gaussian requires finite mean and positive variance".into(),
                    ));
                }
            }
            Self::Laplace { location, scale } => {
                if !location.is_finite() || !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidConfig(
                        "laplace requires finite location and positive scale".into(),
                    ));
                }
            }
            Self::Uniform { lower, upper } => {
                if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                    return Err(Error::InvalidConfig(
                        "uniform requires finite bounds with lower < upper".into(),
                    ));
                }
            }
            Self::Mixture {
                weights,
                components,
            } => {
                if weights.is_empty() || weights.len() != components.len() {
                    return Err(Error::InvalidConfig(
                        "mixture weights and components must be nonempty and equal-length".into(),
                    ));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(Error::InvalidConfig(
                        "mixture weights must be positive".into(),
                    ));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidConfig(format!(
                        "mixture weights must sum to 1 (got {total})"
                    )));
                }
                for c in components {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Distribution mean.
    pub fn mean(&self) -> f64 {
        match self {
            Self::Gaussian { mean, .. } => *mean,
            Self::Laplace { location, .. } => *location,
            Self::Uniform { lower, upper } => 0.5 * (lower + upper),
            Self::Mixture {
                weights,
                components,
            } => weights
                .iter()
                .zip(components)
                .map(|(w, c)| w * c.mean())
                .sum(),
        }
    }

    /// Distribution variance.
    pub fn variance(&self) -> f64 {
        match self {
            Self::Gaussian { variance, .. } => *variance,
            Self::Laplace { scale, .. } => 2.0 * scale * scale,
            Self::Uniform { lower, upper } => (upper - lower).powi(2) / 12.0,
            Self::Mixture {
                weights,
                components,
            } => {
                let m = self.mean();
                weights
                    .iter()
                    .zip(components)
                    .map(|(w, c)| {
                        let mu = c.mean();
                        w * (c.variance() + mu * mu)
                    })
                    .sum::<f64>()
                    - m * m
            }
        }
    }

    /// Probability density at `x` (closed form; mixtures by superposition).
    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Self::Gaussian { mean, variance } => {
                let z = x - mean;
                (-z * z / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
            }
            Self::Laplace { location, scale } => {
                (-(x - location).abs() / scale).exp() / (2.0 * scale)
            }
            Self::Uniform { lower, upper } => {
                if x >= *lower && x <= *upper {
                    1.0 / (upper - lower)
                } else {
                    0.0
                }
            }
            Self::Mixture {
                weights,
                components,
            } => weights
                .iter()
                .zip(components)
                .map(|(w, c)| w * c.pdf(x))
                .sum(),
        }
    }

    /// Log-density at `x` (`−∞` where the density is 0); Gaussian and
    /// Laplace cases are evaluated directly in log space so extreme tails
    /// stay finite.
    pub fn log_pdf(&self, x: f64) -> f64 {
        match self {
            Self::Gaussian { mean, variance } => {
                let z = x - mean;
                -z * z / (2.0 * variance)
                    - 0.5 * (2.0 * std::f64::consts::PI * variance).ln()
            }
            Self::Laplace { location, scale } => {
                -(x - location).abs() / scale - (2.0 * scale).ln()
            }
            _ => self.pdf(x).ln(),
        }
    }

    /// One draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian { mean, variance } => {
                Normal::new(*mean, variance.sqrt())
                    .expect("validated variance is positive")
                    .sample(rng)
            }
            Self::Laplace { location, scale } => {
                laplace_icdf(rng.gen::<f64>(), *location, *scale)
            }
            Self::Uniform { lower, upper } => rng.gen_range(*lower..*upper),
            Self::Mixture {
                weights,
                components,
            } => {
                let idx = Self::pick_component(weights, rng);
                components[idx].draw(rng)
            }
        }
    }

    /// Categorical draw over mixture weights (cumulative-sum walk).
    fn pick_component<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// Laplace inverse CDF: `μ − s·sign(u−½)·ln(1 − 2|u−½|)`.
fn laplace_icdf(u: f64, location: f64, scale: f64) -> f64 {
    let d = u - 0.5;
    location - scale * d.signum() * (1.0 - 2.0 * d.abs()).ln()
}

/// Draws `n` i.i.d. samples from a validated spec.
pub fn sample<R: Rng + ?Sized>(spec: &NoiseSpec, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok((0..n).map(|_| spec.draw(rng)).collect())
}

// ---------------------------------------------------------------------------
// Loss-induced density
// ---------------------------------------------------------------------------

/// Truncation interval for the loss-induced density.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdfDomain {
    /// Lower end of the support.
    pub lower: f64,
    /// Upper end of the support (> lower).
    pub upper: f64,
}

impl PdfDomain {
    /// Builds a validated domain.
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::InvalidConfig(
                "pdf domain requires finite lower < upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Whether `e` lies inside the (closed) domain.
    pub fn contains(&self, e: f64) -> bool {
        e >= self.lower && e <= self.upper
    }
}

/// The density `c·exp(−J(e))` induced by the scalar generalized loss `J`
/// with shape `alpha` and bandwidth `beta`, truncated to `domain` and
/// normalized numerically so it integrates to 1 within `1e-8`.
#[derive(Debug, Clone)]
pub struct GlPdf {
    kernel: KernelConfig,
    domain: PdfDomain,
    norm: f64,
}

impl GlPdf {
    /// Precomputes the normalization constant by adaptive quadrature.
    pub fn new(alpha: f64, beta: Bandwidth, domain: PdfDomain) -> Result<Self> {
        let kernel = KernelConfig::new(alpha, vec![beta])?;
        let unnorm = |e: f64| {
            (-gl_loss(&[e], &kernel).expect("validated kernel, finite point")).exp()
        };
        let mass = adaptive_simpson(&unnorm, domain.lower, domain.upper, 1e-10)?;
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::QuadratureFailure(
                "loss-induced density has no finite mass on the domain".into(),
            ));
        }
        Ok(Self {
            kernel,
            domain,
            norm: 1.0 / mass,
        })
    }

    /// Density at `e` (exactly 0 outside the domain).
    pub fn density(&self, e: f64) -> Result<f64> {
        if !e.is_finite() {
            return Err(Error::NonFiniteInput("density evaluation point".into()));
        }
        if !self.domain.contains(e) {
            return Ok(0.0);
        }
        Ok(self.norm * (-gl_loss(&[e], &self.kernel)?).exp())
    }
}

/// One-shot evaluation of the loss-induced density (builds the normalization
/// each call; use [`GlPdf`] for repeated evaluation).
pub fn gl_pdf(e: f64, alpha: f64, beta: Bandwidth, domain: PdfDomain) -> Result<f64> {
    GlPdf::new(alpha, beta, domain)?.density(e)
}

/// Adaptive Simpson quadrature with an absolute tolerance.
fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> Result<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        if depth == 0 {
            return Err(Error::QuadratureFailure(
                "adaptive quadrature exceeded its recursion depth".into(),
            ));
        }
        Ok(recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 60)
}

// ---------------------------------------------------------------------------
// Gaussian least-squares fit
// ---------------------------------------------------------------------------

/// Result of fitting a Gaussian density to a target density by mean squared
/// error over a grid.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GaussianFit {
    /// Fitted mean.
    pub mean: f64,
    /// Fitted variance.
    pub variance: f64,
    /// Mean squared density error at the optimum.
    pub mse: f64,
}

/// The standard evaluation grid: 1001 uniform points on `[−6, 6]`.
pub fn default_fit_grid() -> Vec<f64> {
    (0..=1000).map(|i| -6.0 + 12.0 * (i as f64) / 1000.0).collect()
}

/// Fits a Gaussian density to `target`'s density by minimizing the mean
/// squared pointwise error over `grid` — a coarse scan to bracket each
/// coordinate followed by golden-section refinement, alternating between
/// mean and variance (the mean is pinned to 0 when the target is symmetric).
pub fn fit_gaussian_mse(target: &NoiseSpec, grid: &[f64]) -> Result<GaussianFit> {
    target.validate()?;
    if grid.is_empty() {
        return Err(Error::EmptyInput("fit grid".into()));
    }
    let p: Vec<f64> = grid.iter().map(|&x| target.pdf(x)).collect();
    let mse = |mu: f64, var: f64| -> f64 {
        let inv2v = 1.0 / (2.0 * var);
        let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
        grid.iter()
            .zip(&p)
            .map(|(&x, &pk)| {
                let z = x - mu;
                let q = norm * (-z * z * inv2v).exp();
                (pk - q) * (pk - q)
            })
            .sum::<f64>()
            / grid.len() as f64
    };

    // Symmetry of the target on the grid pins the mean at 0.
    let symmetric = grid
        .iter()
        .all(|&x| (target.pdf(x) - target.pdf(-x)).abs() < 1e-12);

    let mut mu = if symmetric { 0.0 } else { target.mean() };
    let mut var = target.variance().max(1e-6);
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        // Variance: coarse log-scan for a bracket, then golden section.
        let scan: Vec<f64> = (0..=240)
            .map(|i| 10f64.powf(-4.0 + 8.0 * (i as f64) / 240.0))
            .collect();
        let best = scan
            .iter()
            .enumerate()
            .min_by(|a, b| {
                mse(mu, *a.1)
                    .partial_cmp(&mse(mu, *b.1))
                    .expect("finite mse")
            })
            .map(|(i, _)| i)
            .expect("nonempty scan");
        let lo = scan[best.saturating_sub(1)];
        let hi = scan[(best + 1).min(scan.len() - 1)];
        var = golden_min(|v| mse(mu, v), lo, hi);

        if !symmetric {
            let span = 6.0 * var.sqrt();
            let scan_mu: Vec<f64> = (0..=200)
                .map(|i| mu - span + 2.0 * span * (i as f64) / 200.0)
                .collect();
            let best = scan_mu
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    mse(*a.1, var)
                        .partial_cmp(&mse(*b.1, var))
                        .expect("finite mse")
                })
                .map(|(i, _)| i)
                .expect("nonempty scan");
            let lo = scan_mu[best.saturating_sub(1)];
            let hi = scan_mu[(best + 1).min(scan_mu.len() - 1)];
            mu = golden_min(|m| mse(m, var), lo, hi);
        }

        let now = mse(mu, var);
        if (last - now).abs() <= 1e-16 * now.max(1e-300) {
            break;
        }
        last = now;
    }
    Ok(GaussianFit {
        mean: mu,
        variance: var,
        mse: mse(mu, var),
    })
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
fn golden_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
        if (hi - lo).abs() <= 1e-13 * (hi.abs() + lo.abs()).max(1e-12) {
            break;
        }
    }
    0.5 * (lo + hi)
}
