//! Diagonal Gaussian mixtures as data distributions and analytic oracles.
//!
//! Under `x_t = alpha_t x + sigma_t z` with standard normal `z`, the posterior
//! `p(x | x_t)` of a diagonal mixture is again a diagonal mixture with closed-form
//! responsibilities, means and variances. Everything velocity-related (marginal
//! velocity, the ground-truth flow map) is built on that posterior.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::error::{check_dim, Error, Result};
use crate::fieldnet::{Field, Inputs, Tangent};
use crate::interpolant::Interpolant;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    dim: usize,
}

/// Posterior `p(x | x_t)` at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub responsibilities: Vec<f64>,
    pub component_means: Vec<Vec<f64>>,
    pub component_vars: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        check_dim(weights.len(), means.len())?;
        check_dim(weights.len(), variances.len())?;
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("mixture dimension must be positive".into()));
        }
        for (m, v) in means.iter().zip(&variances) {
            check_dim(dim, m.len())?;
            check_dim(dim, v.len())?;
            if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidArgument("mixture variances must be positive".into()));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("mixture means must be finite".into()));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { weights, means, variances, dim })
    }

    /// Equal-weight ring of `k` isotropic components in the plane.
    pub fn ring(k: usize, radius: f64, std: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("ring needs at least one component".into()));
        }
        let w = 1.0 / k as f64;
        let mut weights = vec![w; k];
        // Absorb the rounding of 1/k into the last weight so the sum is 1.
        let head: f64 = weights[..k - 1].iter().sum();
        weights[k - 1] = 1.0 - head;
        let means = (0..k)
            .map(|i| {
                let angle = 2.0 * PI * i as f64 / k as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        let variances = vec![vec![std * std; 2]; k];
        Self::new(weights, means, variances)
    }

    /// The toy dataset used throughout: 8 components, radius 1.5, std 0.12.
    pub fn default_ring() -> Self {
        Self::ring(8, 1.5, 0.12).expect("valid ring parameters")
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![vec![1.0; dim]]).expect("valid gaussian")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// `sum_i pi_i mu_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, &mi) in out.iter_mut().zip(m) {
                *o += w * mi;
            }
        }
        out
    }

    /// Draws `n` points (row-major `n x dim`) and the component each came from.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (Vec<f64>, Vec<usize>) {
        let index = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        let mut points = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = index.sample(rng);
            labels.push(k);
            for (m, v) in self.means[k].iter().zip(&self.variances[k]) {
                let eps: f64 = StandardNormal.sample(rng);
                points.push(m + v.sqrt() * eps);
            }
        }
        (points, labels)
    }

    /// Closed-form posterior `p(x | x_t = y)`.
    pub fn posterior_stats(&self, interp: &Interpolant, y: &[f64], t: f64) -> Result<PosteriorStats> {
        check_dim(self.dim, y.len())?;
        let sch = interp.schedule(t)?;
        if sch.sigma <= 0.0 {
            return Err(Error::SingularTime { t });
        }
        let k = self.n_components();
        let mut responsibilities = vec![0.0; k];
        self.responsibilities_into(sch.alpha, sch.sigma, y, &mut responsibilities);
        let mut component_means = Vec::with_capacity(k);
        let mut component_vars = Vec::with_capacity(k);
        let mut mean = vec![0.0; self.dim];
        let (a, s2) = (sch.alpha, sch.sigma * sch.sigma);
        for i in 0..k {
            let mut mu = Vec::with_capacity(self.dim);
            let mut var = Vec::with_capacity(self.dim);
            for d in 0..self.dim {
                let vi = self.variances[i][d];
                let denom = s2 + vi * a * a;
                mu.push((a * vi * y[d] + self.means[i][d] * s2) / denom);
                var.push(vi * s2 / denom);
            }
            for (m, &mu_d) in mean.iter_mut().zip(&mu) {
                *m += responsibilities[i] * mu_d;
            }
            component_means.push(mu);
            component_vars.push(var);
        }
        Ok(PosteriorStats { responsibilities, component_means, component_vars, mean })
    }

    /// Posterior responsibilities, log-sum-exp stabilized. When every component
    /// evidence ties (e.g. `alpha = 0`) the prior weights are returned unchanged.
    fn responsibilities_into(&self, alpha: f64, sigma: f64, y: &[f64], out: &mut [f64]) {
        let s2 = sigma * sigma;
        let mut max = f64::NEG_INFINITY;
        for (i, o) in out.iter_mut().enumerate() {
            let mut log_ev = 0.0;
            for d in 0..self.dim {
                let var = alpha * alpha * self.variances[i][d] + s2;
                let diff = y[d] - alpha * self.means[i][d];
                log_ev -= 0.5 * ((2.0 * PI * var).ln() + diff * diff / var);
            }
            *o = log_ev;
            max = max.max(log_ev);
        }
        if out.iter().all(|&l| l == max) {
            out.copy_from_slice(&self.weights);
            return;
        }
        let mut total = 0.0;
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w * (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Posterior mean `E[x | x_t = y]`, without materializing per-component stats.
    fn posterior_mean_into(&self, alpha: f64, sigma: f64, y: &[f64], resp: &mut [f64], mean: &mut [f64]) {
        self.responsibilities_into(alpha, sigma, y, resp);
        let s2 = sigma * sigma;
        mean.iter_mut().for_each(|m| *m = 0.0);
        for (i, &r) in resp.iter().enumerate() {
            for d in 0..self.dim {
                let vi = self.variances[i][d];
                let mu = (alpha * vi * y[d] + self.means[i][d] * s2) / (s2 + vi * alpha * alpha);
                mean[d] += r * mu;
            }
        }
    }

    /// `v*_t(x_t) = alpha'_t m + sigma'_t (x_t - alpha_t m) / sigma_t`, `m = E[x | x_t]`.
    pub fn marginal_velocity(&self, interp: &Interpolant, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.marginal_velocity_batch(interp, x_t, &[t], &mut out)?;
        Ok(out)
    }

    /// Row-wise marginal velocity for a batch of points (`ts.len()` rows).
    pub fn marginal_velocity_batch(
        &self,
        interp: &Interpolant,
        xs: &[f64],
        ts: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.dim;
        check_dim(ts.len() * d, xs.len())?;
        check_dim(xs.len(), out.len())?;
        let mut resp = vec![0.0; self.n_components()];
        let mut mean = vec![0.0; d];
        for (row, &t) in ts.iter().enumerate() {
            let sch = interp.schedule(t)?;
            if sch.sigma <= 0.0 {
                return Err(Error::SingularTime { t });
            }
            let y = &xs[row * d..(row + 1) * d];
            self.posterior_mean_into(sch.alpha, sch.sigma, y, &mut resp, &mut mean);
            for k in 0..d {
                out[row * d + k] =
                    sch.dalpha * mean[k] + sch.dsigma * (y[k] - sch.alpha * mean[k]) / sch.sigma;
            }
        }
        Ok(())
    }

    /// Draws `n` samples from `p(x | x_t = y)`.
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        interp: &Interpolant,
        y: &[f64],
        t: f64,
        rng: &mut R,
        n: usize,
    ) -> Result<Vec<f64>> {
        let stats = self.posterior_stats(interp, y, t)?;
        let index = WeightedIndex::new(&stats.responsibilities)
            .map_err(|e| Error::InvariantViolation(format!("bad responsibilities: {e}")))?;
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let k = index.sample(rng);
            for (m, v) in stats.component_means[k].iter().zip(&stats.component_vars[k]) {
                let eps: f64 = StandardNormal.sample(rng);
                out.push(m + v.sqrt() * eps);
            }
        }
        Ok(out)
    }

    /// Ground-truth flow map `f_{t,s}(x_t)`: RK4 on `dx/dtau = v*_tau(x)` from `t`
    /// to `s`. A target time below `T_MIN` is clipped to `T_MIN`.
    pub fn true_flowmap(
        &self,
        interp: &Interpolant,
        x_t: &[f64],
        t: f64,
        s: f64,
        steps: usize,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim, x_t.len())?;
        if steps == 0 {
            return Err(Error::InvalidArgument("flow map integration needs at least one step".into()));
        }
        interp.schedule(t)?;
        interp.schedule(s)?;
        let t_min = interp.to_domain(crate::T_MIN);
        let s = if s < t_min && t > s { t_min } else { s };
        let mut x = x_t.to_vec();
        if s == t {
            return Ok(x);
        }
        let h = (s - t) / steps as f64;
        let d = self.dim;
        let mut k = vec![vec![0.0; d]; 4];
        let mut tmp = vec![0.0; d];
        for i in 0..steps {
            let tau = t + h * i as f64;
            self.marginal_velocity_batch(interp, &x, &[tau], &mut k[0])?;
            for j in 0..d {
                tmp[j] = x[j] + 0.5 * h * k[0][j];
            }
            self.marginal_velocity_batch(interp, &tmp, &[tau + 0.5 * h], &mut k[1])?;
            for j in 0..d {
                tmp[j] = x[j] + 0.5 * h * k[1][j];
            }
            self.marginal_velocity_batch(interp, &tmp, &[tau + 0.5 * h], &mut k[2])?;
            for j in 0..d {
                tmp[j] = x[j] + h * k[2][j];
            }
            let tau_next = if i + 1 == steps { s } else { tau + h };
            self.marginal_velocity_batch(interp, &tmp, &[tau_next], &mut k[3])?;
            for j in 0..d {
                x[j] += h / 6.0 * (k[0][j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]);
            }
        }
        Ok(x)
    }
}

/// Marginal velocity of the empirical distribution `batch` (rows of `x_t.len()`)
/// under the linear interpolant: softmax-weighted average of `(x_t - x_i) / t`
/// with weights from the Gaussian likelihood `N(x_t; (1 - t) x_i, t^2)`.
pub fn batch_marginal_velocity(interp: &Interpolant, batch: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    let d = x_t.len();
    let mut out = vec![0.0; d];
    let mut logits = Vec::new();
    batch_marginal_velocity_into(interp, batch, x_t, t, &mut logits, &mut out)?;
    Ok(out)
}

pub(crate) fn batch_marginal_velocity_into(
    interp: &Interpolant,
    batch: &[f64],
    x_t: &[f64],
    t: f64,
    logits: &mut Vec<f64>,
    out: &mut [f64],
) -> Result<()> {
    if !interp.is_linear() {
        return Err(Error::UnsupportedConfig(
            "batch marginal velocity is defined for the linear interpolant only".into(),
        ));
    }
    let d = x_t.len();
    if d == 0 || batch.is_empty() || batch.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, got: batch.len() });
    }
    check_dim(d, out.len())?;
    if !(t > 0.0) {
        return Err(Error::SingularTime { t });
    }
    logits.clear();
    let mut max = f64::NEG_INFINITY;
    for xi in batch.chunks_exact(d) {
        let mut sq = 0.0;
        for k in 0..d {
            let diff = x_t[k] - (1.0 - t) * xi[k];
            sq += diff * diff;
        }
        let l = -sq / (2.0 * t * t);
        max = max.max(l);
        logits.push(l);
    }
    let mut total = 0.0;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (xi, l) in batch.chunks_exact(d).zip(logits.iter()) {
        let w = (l - max).exp();
        total += w;
        for k in 0..d {
            out[k] += w * (x_t[k] - xi[k]) / t;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(())
}

impl fmt::Display for GaussianMixture {
    /// `weight/m1,m2,.../v1,v2,...` triples joined by `;`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        for i in 0..self.n_components() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{}/{}/{}", self.weights[i], join(&self.means[i]), join(&self.variances[i]))?;
        }
        Ok(())
    }
}

impl FromStr for GaussianMixture {
    type Err = Error;

    /// Accepts `ring:<k>:<radius>:<std>` or the triple list produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |what: &str| Error::InvalidArgument(format!("bad mixture spec {s:?}: {what}"));
        if let Some(rest) = s.strip_prefix("ring:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(bad("expected ring:<k>:<radius>:<sigma>"));
            }
            let k = parts[0].parse().map_err(|_| bad("component count"))?;
            let r = parts[1].parse().map_err(|_| bad("radius"))?;
            let sd = parts[2].parse().map_err(|_| bad("sigma"))?;
            return Self::ring(k, r, sd);
        }
        let list = |v: &str| -> Result<Vec<f64>> {
            v.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad("number"))).collect()
        };
        let (mut weights, mut means, mut variances) = (vec![], vec![], vec![]);
        for triple in s.split(';') {
            let parts: Vec<&str> = triple.split('/').collect();
            if parts.len() != 3 {
                return Err(bad("expected weight/means/variances"));
            }
            weights.push(parts[0].trim().parse().map_err(|_| bad("weight"))?);
            means.push(list(parts[1])?);
            variances.push(list(parts[2])?);
        }
        Self::new(weights, means, variances)
    }
}

/// The exact flow-map field of a mixture: `F = (A' x_t - nu f_{t,s}(x_t)) / A`,
/// with `F = v*` on the diagonal `s = t`. Derivatives are central differences of
/// the integrated flow map, so this is meant for tests and reference curves.
#[derive(Debug, Clone, Copy)]
pub struct OracleField<'a> {
    pub mixture: &'a GaussianMixture,
    pub interp: &'a Interpolant,
    /// RK4 steps per flow-map evaluation.
    pub steps: usize,
}

impl OracleField<'_> {
    const JVP_STEP: f64 = 1e-5;

    fn row(&self, x: &[f64], t: f64, s: f64) -> Result<Vec<f64>> {
        let b = self.interp.bridge(t, s)?;
        if b.a.abs() < 1e-12 {
            return self.mixture.marginal_velocity(self.interp, x, t);
        }
        let f = self.mixture.true_flowmap(self.interp, x, t, s, self.steps)?;
        let nu = self.interp.nu();
        Ok(x.iter().zip(&f).map(|(&x, &f)| (b.a1 * x - nu * f) / b.a).collect())
    }
}

impl Field for OracleField<'_> {
    fn data_dim(&self) -> usize {
        self.mixture.dim
    }

    fn eval(&self, inputs: &Inputs<'_>) -> Result<Vec<f64>> {
        let d = self.mixture.dim;
        let n = inputs.t.len();
        check_dim(n * d, inputs.x.len())?;
        check_dim(n, inputs.s.len())?;
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend(self.row(&inputs.x[i * d..(i + 1) * d], inputs.t[i], inputs.s[i])?);
        }
        Ok(out)
    }

    fn jvp(&self, inputs: &Inputs<'_>, tangent: &Tangent<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.mixture.dim;
        let n = inputs.t.len();
        check_dim(inputs.x.len(), tangent.dx.len())?;
        let value = self.eval(inputs)?;
        let h = Self::JVP_STEP;
        let mut out = Vec::with_capacity(n * d);
        let mut xp = vec![0.0; d];
        let mut xm = vec![0.0; d];
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            for (k, j) in r.clone().enumerate() {
                xp[k] = inputs.x[j] + h * tangent.dx[j];
                xm[k] = inputs.x[j] - h * tangent.dx[j];
            }
            let (t, s) = (inputs.t[i], inputs.s[i]);
            let fp = self.row(&xp, t + h * tangent.dt, s + h * tangent.ds)?;
            let fm = self.row(&xm, t - h * tangent.dt, s - h * tangent.ds)?;
            out.extend(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)));
        }
        Ok((value, out))
    }
}
