//! Generalized-Gaussian kernels, multi-kernel correntropy losses, and their
//! influence and fixed-point weight functions.
//!
//! The kernel is the generalized Gaussian density shape
//! `G_{α,β}(e) = exp(−|e/β|^α)` with shape `α > 0` and per-channel bandwidth
//! `β_i > 0`. Three derived objects matter downstream:
//!
//! * the **generalized loss** `Σ_i β_i^α (1 − G_{α,β_i}(e_i))`, a bounded,
//!   outlier-insensitive surrogate for the `ℓ_α` loss that the robust filter
//!   minimizes;
//! * the **induced metric** (square root of the sample-averaged loss), a true
//!   metric on sample space for `0 < α ≤ 2`;
//! * the **fixed-point weight** `g(e) = |e|^{α−2} G_{α,β}(e)`, the diagonal
//!   weight each whitened regression channel receives inside the iterated
//!   reweighted filter update.
//!
//! All functions here are pure; bandwidths may be the distinguished
//! [`Bandwidth::Unbounded`] value, in which case the analytic limits are used
//! (kernel ≡ 1, channel loss `|e|^α`) instead of evaluating a huge finite `β`
//! and losing precision.

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Errors smaller than this are clamped in magnitude inside
/// [`fixed_point_weight`] and the influence functions, where `|e|^{α−2}` or
/// `|e|^{α−1}` would otherwise blow up (`α < 2`, resp. `α ≤ 1`).
pub const EPS_E: f64 = 1e-12;

/// Lower floor applied to the output of [`fixed_point_weight`].
///
/// `exp(−|e/β|^α)` underflows to exactly zero once `|e/β|^α ≳ 745`; a zero
/// weight would make the diagonal weight matrix singular. The floor keeps the
/// weight matrix invertible while still rejecting the channel for all
/// practical purposes, and keeps every downstream intermediate comfortably
/// inside the normal `f64` range.
pub const WEIGHT_FLOOR: f64 = 1e-100;

// ---------------------------------------------------------------------------
// Bandwidth and kernel configuration
// ---------------------------------------------------------------------------

/// A kernel bandwidth: a positive real, or the distinguished unbounded value.
///
/// Unbounded bandwidth is an exact sentinel, not a large number: the kernel
/// becomes identically 1 and the channel loss becomes `|e|^α` analytically.
/// In JSON it serializes as a number or the string `"unbounded"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Finite positive bandwidth.
    Finite(f64),
    /// Infinite-bandwidth limit.
    Unbounded,
}

impl Bandwidth {
    /// True when the bandwidth is the unbounded sentinel.
    pub fn is_unbounded(self) -> bool {
        matches!(self, Bandwidth::Unbounded)
    }

    /// Validates positivity/finiteness of the bandwidth.
    pub fn validate(self) -> Result<()> {
        match self {
            Bandwidth::Finite(b) if b.is_finite() && b > 0.0 => Ok(()),
            Bandwidth::Finite(b) => Err(Error::InvalidKernel(format!(
                "bandwidth must be positive and finite, got {b}"
            ))),
            Bandwidth::Unbounded => Ok(()),
        }
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Finite(b) => serializer.serialize_f64(*b),
            Bandwidth::Unbounded => serializer.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct BandwidthVisitor;

        impl<'de> Visitor<'de> for BandwidthVisitor {
            type Value = Bandwidth;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a positive number or the string \"unbounded\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Bandwidth, E> {
                Ok(Bandwidth::Finite(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Bandwidth, E> {
                Ok(Bandwidth::Finite(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Bandwidth, E> {
                Ok(Bandwidth::Finite(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Bandwidth, E> {
                if v == "unbounded" {
                    Ok(Bandwidth::Unbounded)
                } else {
                    Err(E::custom(format!(
                        "expected a number or \"unbounded\", got {v:?}"
                    )))
                }
            }
        }

        deserializer.deserialize_any(BandwidthVisitor)
    }
}

/// Shape and per-channel bandwidths defining the generalized loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Shape parameter `α > 0` (dimensionless). `α = 2` is the Gaussian case.
    pub alpha: f64,
    /// One bandwidth per channel, in the units of that channel's error.
    pub betas: Vec<Bandwidth>,
}

impl KernelConfig {
    /// Builds a validated configuration.
    pub fn new(alpha: f64, betas: Vec<Bandwidth>) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidKernel(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        if betas.is_empty() {
            return Err(Error::InvalidKernel("betas must be non-empty".into()));
        }
        for b in &betas {
            b.validate()?;
        }
        Ok(Self { alpha, betas })
    }

    /// Uniform finite bandwidth across `channels` channels.
    pub fn uniform(alpha: f64, beta: f64, channels: usize) -> Result<Self> {
        Self::new(alpha, vec![Bandwidth::Finite(beta); channels])
    }

    /// Unbounded bandwidth across `channels` channels (`ℓ_α`-loss limit).
    pub fn unbounded(alpha: f64, channels: usize) -> Result<Self> {
        Self::new(alpha, vec![Bandwidth::Unbounded; channels])
    }

    /// Number of channels this configuration applies to.
    pub fn channels(&self) -> usize {
        self.betas.len()
    }

    /// Validates the configuration (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        Self::new(self.alpha, self.betas.clone()).map(|_| ())
    }
}

// ---------------------------------------------------------------------------
// Sample pairs
// ---------------------------------------------------------------------------

/// Equal-length lists of paired sample vectors in `R^l`.
///
/// Sample `k` of channel `i` contributes the error `e_i(k) = x_k[i] − y_k[i]`.
#[derive(Debug, Clone)]
pub struct SamplePairs {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl SamplePairs {
    /// Builds a validated sample set: `N ≥ 1` pairs, all vectors sharing one
    /// dimension `l ≥ 1`.
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::EmptyInput("sample pairs need N >= 1".into()));
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "x has {} samples, y has {}",
                x.len(),
                y.len()
            )));
        }
        let l = x[0].len();
        if l == 0 {
            return Err(Error::DimensionMismatch("sample dimension l = 0".into()));
        }
        for (k, (xs, ys)) in x.iter().zip(&y).enumerate() {
            if xs.len() != l || ys.len() != l {
                return Err(Error::DimensionMismatch(format!(
                    "sample {k} dimension differs from l = {l}"
                )));
            }
            if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("sample {k}")));
            }
        }
        Ok(Self { x, y })
    }

    /// Number of samples `N`.
    pub fn len(&self) -> usize {
        self.x.len()
    }

    /// True when there are no samples (cannot occur for validated values).
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Sample dimension `l`.
    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    /// Error of channel `i` at sample `k`.
    fn error(&self, i: usize, k: usize) -> f64 {
        self.x[k][i] - self.y[k][i]
    }
}

// ---------------------------------------------------------------------------
// Kernel and losses
// ---------------------------------------------------------------------------

/// `|e/β|^α` with the exponent evaluated in log space so that huge ratios
/// saturate to `+∞` instead of producing intermediate overflow.
fn ratio_pow(abs_e: f64, beta: f64, alpha: f64) -> f64 {
    if abs_e == 0.0 {
        return 0.0;
    }
    let log_ratio = abs_e.ln() - beta.ln();
    let t = alpha * log_ratio;
    // exp(709) is the largest finite f64 exponential; beyond it the power is
    // effectively infinite and the kernel underflows to zero.
    if t >= 709.0 {
        f64::INFINITY
    } else {
        t.exp()
    }
}

/// Generalized-Gaussian kernel `exp(−|e/β|^α)`, in `(0, 1]` mathematically
/// (underflowing to `0.0` for extreme arguments).
///
/// Unbounded `β` returns exactly 1. Non-finite `e` is rejected.
pub fn ggd_kernel(e: f64, alpha: f64, beta: Bandwidth) -> Result<f64> {
    if !e.is_finite() {
        return Err(Error::NonFiniteInput(format!("kernel argument {e}")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidKernel(format!("alpha = {alpha}")));
    }
    beta.validate()?;
    match beta {
        Bandwidth::Unbounded => Ok(1.0),
        Bandwidth::Finite(b) => Ok((-ratio_pow(e.abs(), b, alpha)).exp()),
    }
}

/// Generalized loss of a single error vector:
/// `Σ_i β_i^α (1 − exp(−|e_i/β_i|^α))`, with the unbounded-bandwidth channels
/// contributing the analytic limit `|e_i|^α`.
///
/// The finite-bandwidth term is evaluated through `expm1` so that the
/// large-`β` regime (`|e/β|^α` tiny) keeps full relative precision.
pub fn gl_loss(e: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if e.len() != cfg.channels() {
        return Err(Error::DimensionMismatch(format!(
            "error has {} channels, kernel has {}",
            e.len(),
            cfg.channels()
        )));
    }
    let mut total = 0.0;
    for (&ei, &beta) in e.iter().zip(&cfg.betas) {
        if !ei.is_finite() {
            return Err(Error::NonFiniteInput(format!("loss argument {ei}")));
        }
        total += match beta {
            Bandwidth::Unbounded => ei.abs().powf(cfg.alpha),
            Bandwidth::Finite(b) => {
                let z = ratio_pow(ei.abs(), b, cfg.alpha);
                // β^α (1 − e^{−z}) = −β^α expm1(−z)
                -b.powf(cfg.alpha) * (-z).exp_m1()
            }
        };
    }
    Ok(total)
}

/// Sample-averaged generalized loss:
/// `Σ_i β_i^α (1 − (1/N) Σ_k G_{α,β_i}(e_i(k)))`.
///
/// Equals [`gl_loss`] on the single error vector when `N = 1`. Unbounded
/// channels contribute `(1/N) Σ_k |e_i(k)|^α` (the analytic limit).
pub fn gl_loss_samples(pairs: &SamplePairs, cfg: &KernelConfig) -> Result<f64> {
    if pairs.dim() != cfg.channels() {
        return Err(Error::DimensionMismatch(format!(
            "samples have {} channels, kernel has {}",
            pairs.dim(),
            cfg.channels()
        )));
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for (i, &beta) in cfg.betas.iter().enumerate() {
        match beta {
            Bandwidth::Unbounded => {
                let mean_pow: f64 = (0..pairs.len())
                    .map(|k| pairs.error(i, k).abs().powf(cfg.alpha))
                    .sum::<f64>()
                    / n;
                total += mean_pow;
            }
            Bandwidth::Finite(b) => {
                // β^α (1 − mean_k G(e)) = −β^α mean_k expm1(−|e/β|^α)
                let mean_expm1: f64 = (0..pairs.len())
                    .map(|k| (-ratio_pow(pairs.error(i, k).abs(), b, cfg.alpha)).exp_m1())
                    .sum::<f64>()
                    / n;
                total += -b.powf(cfg.alpha) * mean_expm1;
            }
        }
    }
    Ok(total)
}

/// Correntropy-induced metric: the square root of [`gl_loss_samples`].
///
/// A true metric on the sample space for `0 < α ≤ 2`; values of `α > 2` are
/// accepted but carry no metric guarantee.
pub fn gcim(pairs: &SamplePairs, cfg: &KernelConfig) -> Result<f64> {
    Ok(gl_loss_samples(pairs, cfg)?.sqrt())
}

// ---------------------------------------------------------------------------
// Influence functions
// ---------------------------------------------------------------------------

/// Signed magnitude helper: `|e|^{p} · sign(e)` with `|e|` clamped at
/// [`EPS_E`]. Caller guarantees `e != 0` when the sign matters.
fn signed_pow_clamped(e: f64, p: f64) -> f64 {
    let a = e.abs().max(EPS_E);
    a.powf(p) * e.signum()
}

/// Influence function (componentwise gradient) of the generalized loss:
/// `γ_i(e) = α · exp(−|e_i|^α/β_i^α) · |e_i|^α / e_i`.
///
/// Finite at `e_i = 0` for `α > 1` (value 0). For `α ≤ 1` the magnitude is
/// clamped below at [`EPS_E`]; exactly `e_i = 0` is rejected because the sign
/// (hence the direction of the influence) is undefined there.
pub fn influence_gl(e: &[f64], cfg: &KernelConfig) -> Result<Vec<f64>> {
    if e.len() != cfg.channels() {
        return Err(Error::DimensionMismatch(format!(
            "error has {} channels, kernel has {}",
            e.len(),
            cfg.channels()
        )));
    }
    let alpha = cfg.alpha;
    e.iter()
        .zip(&cfg.betas)
        .map(|(&ei, &beta)| {
            if !ei.is_finite() {
                return Err(Error::NonFiniteInput(format!("influence argument {ei}")));
            }
            if ei == 0.0 {
                if alpha > 1.0 {
                    return Ok(0.0);
                }
                return Err(Error::UndefinedInfluence);
            }
            let kernel = match beta {
                Bandwidth::Unbounded => 1.0,
                Bandwidth::Finite(b) => (-ratio_pow(ei.abs(), b, alpha)).exp(),
            };
            // α G(e) |e|^α / e = α G(e) |e|^{α−1} sign(e)
            Ok(alpha * kernel * signed_pow_clamped(ei, alpha - 1.0))
        })
        .collect()
}

/// Influence function of the least-mean-`p`-power loss:
/// `ρ_i(e) = p · |e_i|^p / e_i`.
///
/// The unbounded-bandwidth generalized-loss influence with `α = p` reduces to
/// this exactly. Same domain rules as [`influence_gl`] with `p` in the role
/// of `α`.
pub fn influence_lmp(e: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p.is_finite() && p > 0.0) {
        return Err(Error::InvalidKernel(format!("power p = {p}")));
    }
    e.iter()
        .map(|&ei| {
            if !ei.is_finite() {
                return Err(Error::NonFiniteInput(format!("influence argument {ei}")));
            }
            if ei == 0.0 {
                if p > 1.0 {
                    return Ok(0.0);
                }
                return Err(Error::UndefinedInfluence);
            }
            Ok(p * signed_pow_clamped(ei, p - 1.0))
        })
        .collect()
}

/// Abscissa at which the one-dimensional generalized-loss influence magnitude
/// peaks, `((α−1)/α)^{1/α} · β`, valid for `α > 1` and finite `β`; also the
/// edge of the loss's convexity region.
pub fn influence_peak_abscissa(alpha: f64, beta: f64) -> f64 {
    ((alpha - 1.0) / alpha).powf(1.0 / alpha) * beta
}

// ---------------------------------------------------------------------------
// Fixed-point weight
// ---------------------------------------------------------------------------

/// Diagonal weight of one whitened regression channel inside the iterated
/// reweighted filter update: `g(e) = |e|^{α−2} · exp(−|e/β|^α)`.
///
/// * `|e|` is clamped below at [`EPS_E`] (the weight has a pole at 0 for
///   `α < 2`);
/// * the output is floored at [`WEIGHT_FLOOR`] so the weight matrix stays
///   invertible when the exponential underflows;
/// * `α = 2` with unbounded `β` gives exactly 1 (the plain least-squares
///   weight);
/// * evaluated in log space throughout, so extreme magnitudes saturate
///   instead of overflowing.
///
/// The argument must be finite; this is a hot-path function and the filter
/// validates residual finiteness before calling it.
pub fn fixed_point_weight(e: f64, alpha: f64, beta: Bandwidth) -> f64 {
    debug_assert!(e.is_finite(), "fixed_point_weight needs finite e");
    let a = e.abs().max(EPS_E);
    let pow_term = match beta {
        Bandwidth::Unbounded => 0.0,
        Bandwidth::Finite(b) => ratio_pow(a, b, alpha),
    };
    if pow_term.is_infinite() {
        return WEIGHT_FLOOR;
    }
    let log_w = (alpha - 2.0) * a.ln() - pow_term;
    if log_w <= WEIGHT_FLOOR.ln() {
        WEIGHT_FLOOR
    } else {
        log_w.exp()
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
