//! Interpolation schedules `x_t = alpha_t x + sigma_t z`.
//!
//! Three families are supported: linear (`alpha = 1 - t`), trigonometric
//! (`alpha = cos t` on `[0, pi/2]`) and the power family
//! `alpha = (1 - gamma_t)^c`, `sigma = gamma_t^c` whose `gamma_t` is the inverse of
//! the regularized incomplete beta function `I_gamma(c, c) = t`. Every schedule
//! here has a constant `nu = alpha sigma' - sigma alpha'`, which is what makes the
//! flow-map parameterization `f = nu^{-1}(A' x - A F)` well defined.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of grid points used when verifying that `nu` is constant.
pub const NU_GRID: usize = 1024;
/// Tolerance for the `nu` constancy check.
pub const NU_TOLERANCE: f64 = 1e-6;

const ROOT_TOL: f64 = 1e-15;
const ROOT_MAX_ITERS: usize = 200;
const SERIES_MAX_TERMS: usize = 400;
const A2_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InterpolantKind {
    Linear,
    Trigonometric,
    Power { c: f64 },
}

/// `(alpha, sigma)` and their first time derivatives at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alpha: f64,
    pub sigma: f64,
    pub dalpha: f64,
    pub dsigma: f64,
}

/// `A_{t,s} = sigma_t alpha_s - sigma_s alpha_t` and its first two derivatives in `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoeffs {
    pub a: f64,
    pub a1: f64,
    pub a2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolant {
    kind: InterpolantKind,
    nu: f64,
}

impl Interpolant {
    pub fn linear() -> Self {
        Self { kind: InterpolantKind::Linear, nu: 1.0 }
    }

    pub fn trigonometric() -> Self {
        Self { kind: InterpolantKind::Trigonometric, nu: 1.0 }
    }

    /// Power family with exponent `c` in `[0.5, 1]`.
    pub fn power(c: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "power interpolant exponent must lie in [0.5, 1], got {c}"
            )));
        }
        let nu = scaled_beta_complete(c);
        Ok(Self { kind: InterpolantKind::Power { c }, nu })
    }

    pub fn kind(&self) -> InterpolantKind {
        self.kind
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, InterpolantKind::Linear)
    }

    /// Closed time domain `[start, end]`.
    pub fn domain(&self) -> (f64, f64) {
        match self.kind {
            InterpolantKind::Trigonometric => (0.0, FRAC_PI_2),
            _ => (0.0, 1.0),
        }
    }

    pub fn domain_end(&self) -> f64 {
        self.domain().1
    }

    /// Maps normalized time in `[0, 1]` into the domain.
    pub fn to_domain(&self, u: f64) -> f64 {
        u * self.domain_end()
    }

    pub fn to_normalized(&self, t: f64) -> f64 {
        t / self.domain_end()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let (start, end) = self.domain();
        if t.is_finite() && t >= start && t <= end {
            Ok(())
        } else {
            Err(Error::Domain { t, start, end })
        }
    }

    /// The cached constant `nu`.
    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Returns `nu` after checking `alpha sigma' - sigma alpha'` against it on a
    /// dense grid.
    pub fn verified_nu(&self) -> Result<f64> {
        let dev = self.max_nu_deviation(NU_GRID)?;
        if dev < NU_TOLERANCE {
            Ok(self.nu)
        } else {
            Err(Error::InvariantViolation(format!(
                "nu varies by {dev:e} over the time domain"
            )))
        }
    }

    /// Largest `|alpha sigma' - sigma alpha' - nu|` over `n` evenly spaced times.
    pub fn max_nu_deviation(&self, n: usize) -> Result<f64> {
        let end = self.domain_end();
        let mut worst = 0.0f64;
        for i in 0..n {
            let t = end * i as f64 / (n - 1).max(1) as f64;
            let sch = self.schedule(t)?;
            let nu_t = sch.alpha * sch.dsigma - sch.sigma * sch.dalpha;
            worst = worst.max((nu_t - self.nu).abs());
        }
        Ok(worst)
    }

    pub fn schedule(&self, t: f64) -> Result<Schedule> {
        self.check_time(t)?;
        Ok(self.schedule_unchecked(t))
    }

    fn schedule_unchecked(&self, t: f64) -> Schedule {
        match self.kind {
            InterpolantKind::Linear => Schedule { alpha: 1.0 - t, sigma: t, dalpha: -1.0, dsigma: 1.0 },
            // cos(FRAC_PI_2) is 6e-17, not 0; pin the noise end exactly.
            InterpolantKind::Trigonometric if t == FRAC_PI_2 => {
                Schedule { alpha: 0.0, sigma: 1.0, dalpha: -1.0, dsigma: 0.0 }
            }
            InterpolantKind::Trigonometric => {
                let (sin, cos) = t.sin_cos();
                Schedule { alpha: cos, sigma: sin, dalpha: -sin, dsigma: cos }
            }
            InterpolantKind::Power { c } => {
                // gamma and 1 - gamma are both tracked accurately by solving for
                // whichever is small.
                let (gamma, one_minus) = if t <= 0.5 {
                    let g = power_gamma(c, self.nu, t);
                    (g, 1.0 - g)
                } else {
                    let g = power_gamma(c, self.nu, 1.0 - t);
                    (1.0 - g, g)
                };
                let nu = self.nu;
                Schedule {
                    alpha: one_minus.powf(c),
                    sigma: gamma.powf(c),
                    dalpha: -nu * gamma.powf(1.0 - c),
                    dsigma: nu * one_minus.powf(1.0 - c),
                }
            }
        }
    }

    pub fn bridge(&self, t: f64, s: f64) -> Result<BridgeCoeffs> {
        self.check_time(t)?;
        self.check_time(s)?;
        Ok(self.bridge_unchecked(t, s))
    }

    fn bridge_unchecked(&self, t: f64, s: f64) -> BridgeCoeffs {
        match self.kind {
            // Closed forms keep the linear case bitwise equal to `t - s`.
            InterpolantKind::Linear => BridgeCoeffs { a: t - s, a1: 1.0, a2: 0.0 },
            InterpolantKind::Trigonometric => {
                let (sin, cos) = (t - s).sin_cos();
                BridgeCoeffs { a: sin, a1: cos, a2: -sin }
            }
            InterpolantKind::Power { .. } => {
                let st = self.schedule_unchecked(t);
                let ss = self.schedule_unchecked(s);
                let a = st.sigma * ss.alpha - ss.sigma * st.alpha;
                let a1 = st.dsigma * ss.alpha - ss.sigma * st.dalpha;
                BridgeCoeffs { a, a1, a2: self.a2_by_differences(t, &ss) }
            }
        }
    }

    fn a2_by_differences(&self, t: f64, ss: &Schedule) -> f64 {
        let a1_at = |tt: f64| {
            let st = self.schedule_unchecked(tt);
            st.dsigma * ss.alpha - ss.sigma * st.dalpha
        };
        let (start, end) = self.domain();
        let h = A2_STEP;
        if t - h >= start && t + h <= end {
            (a1_at(t + h) - a1_at(t - h)) / (2.0 * h)
        } else if t - h < start {
            (-3.0 * a1_at(t) + 4.0 * a1_at(t + h) - a1_at(t + 2.0 * h)) / (2.0 * h)
        } else {
            (3.0 * a1_at(t) - 4.0 * a1_at(t - h) + a1_at(t - 2.0 * h)) / (2.0 * h)
        }
    }

    /// `x_t = alpha_t x + sigma_t z`.
    pub fn interpolate(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        crate::error::check_dim(x.len(), z.len())?;
        let sch = self.schedule(t)?;
        Ok(x.iter().zip(z).map(|(&xi, &zi)| sch.alpha * xi + sch.sigma * zi).collect())
    }

    /// `v_t(x_t | x) = alpha'_t x + sigma'_t z`.
    pub fn conditional_velocity(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        crate::error::check_dim(x.len(), z.len())?;
        let sch = self.schedule(t)?;
        Ok(x.iter().zip(z).map(|(&xi, &zi)| sch.dalpha * xi + sch.dsigma * zi).collect())
    }
}

impl Default for Interpolant {
    fn default() -> Self {
        Self::linear()
    }
}

impl fmt::Display for Interpolant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            InterpolantKind::Linear => f.write_str("linear"),
            InterpolantKind::Trigonometric => f.write_str("trig"),
            InterpolantKind::Power { c } => write!(f, "power:{c}"),
        }
    }
}

impl FromStr for Interpolant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(Self::linear()),
            "trig" => Ok(Self::trigonometric()),
            other => match other.strip_prefix("power:") {
                Some(c) => {
                    let c: f64 = c.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad power exponent in {other:?}"))
                    })?;
                    Self::power(c)
                }
                None => Err(Error::InvalidArgument(format!("unknown interpolant {other:?}"))),
            },
        }
    }
}

/// `c * B(x; c, c)` for `x <= 0.5`, from the hypergeometric series
/// `B(x; a, b) = x^a sum_n (1 - b)_n x^n / (n! (a + n))`, which converges
/// geometrically at rate `x`.
fn scaled_beta_lower(c: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if c == 1.0 {
        return x;
    }
    let mut term = 1.0;
    let mut sum = 1.0 / c;
    for n in 0..SERIES_MAX_TERMS {
        let nf = n as f64;
        term *= (nf + 1.0 - c) / (nf + 1.0) * x;
        let add = term / (c + nf + 1.0);
        sum += add;
        if add.abs() <= f64::EPSILON * 0.25 * sum.abs() {
            break;
        }
    }
    c * x.powf(c) * sum
}

/// `c * B(c, c)`, which is the constant `nu` of the power family.
fn scaled_beta_complete(c: f64) -> f64 {
    2.0 * scaled_beta_lower(c, 0.5)
}

/// Solves `I_gamma(c, c) = t` for `t <= 0.5`: Newton on `c B(gamma; c, c) = t nu`,
/// falling back to bisection whenever a step leaves the current bracket.
fn power_gamma(c: f64, nu: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if c == 1.0 {
        return t;
    }
    let target = t * nu;
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    // Near zero c B(x; c, c) ~ x^c.
    let mut x = target.powf(1.0 / c).clamp(f64::MIN_POSITIVE, 0.5);
    for _ in 0..ROOT_MAX_ITERS {
        let g = scaled_beta_lower(c, x) - target;
        if g == 0.0 {
            return x;
        }
        if g < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = c * (x * (1.0 - x)).powf(c - 1.0);
        let mut next = x - g / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if step <= ROOT_TOL * x || hi - lo <= ROOT_TOL * hi {
            break;
        }
    }
    x
}
