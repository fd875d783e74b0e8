//! Measurement tools: the Eulerian-residual proxy, energy distance, gradient-norm
//! summaries and the curvature-direction loss landscape.

use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::fieldnet::{hvp, hvp_step, Field, Inputs};
use crate::interpolant::Interpolant;
use crate::mixture::GaussianMixture;
use crate::objectives::eulerian_residual;
use crate::trainer::{order_times, MetricsRecord, TimeDist};

/// Mean squared Eulerian residual of `field` under the analytic marginal velocity
/// at the given points.
pub fn ed_proxy_at<F: Field + ?Sized>(
    field: &F,
    mixture: &GaussianMixture,
    interp: &Interpolant,
    x_t: &[f64],
    t: &[f64],
    s: &[f64],
) -> Result<f64> {
    let n = t.len();
    if n == 0 {
        return Err(Error::InvalidArgument("proxy needs at least one point".into()));
    }
    let mut v = vec![0.0; x_t.len()];
    mixture.marginal_velocity_batch(interp, x_t, t, &mut v)?;
    let r = eulerian_residual(field, interp, &Inputs::new(x_t, t, s), &v)?;
    Ok(r.iter().map(|x| x * x).sum::<f64>() / n as f64)
}

/// Monte Carlo Eulerian-residual proxy over `n` fresh `(x, z, t, s)` draws.
pub fn ed_proxy<F: Field + ?Sized, R: Rng + ?Sized>(
    field: &F,
    mixture: &GaussianMixture,
    interp: &Interpolant,
    n: usize,
    time_dist: &TimeDist,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("proxy needs at least one sample".into()));
    }
    let d = mixture.dim();
    check_dim(field.data_dim(), d)?;
    let (x, _) = mixture.sample(rng, n);
    let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    let beta = rand_distr::Beta::new(time_dist.a, time_dist.b)
        .map_err(|e| Error::InvalidArgument(format!("bad time distribution: {e}")))?;
    let mut t = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        let (ti, si) = order_times(interp, beta.sample(rng), beta.sample(rng));
        t.push(ti);
        s.push(si);
    }
    let mut x_t = vec![0.0; n * d];
    for i in 0..n {
        let sch = interp.schedule(t[i])?;
        for k in i * d..(i + 1) * d {
            x_t[k] = sch.alpha * x[k] + sch.sigma * z[k];
        }
    }
    ed_proxy_at(field, mixture, interp, &x_t, &t, &s)
}

/// Energy distance `2 E|A - B| - E|A - A'| - E|B - B'|` with unbiased
/// within-sample terms. Rows of length `dim`.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::DimensionMismatch { expected: dim, got: if a.len() % dim.max(1) != 0 { a.len() } else { b.len() } });
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na < 2 || nb < 2 {
        return Err(Error::InvalidArgument("energy distance needs at least two points per sample".into()));
    }
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let rows_a: Vec<&[f64]> = a.chunks_exact(dim).collect();
    let rows_b: Vec<&[f64]> = b.chunks_exact(dim).collect();
    let mut cross = 0.0;
    for p in &rows_a {
        for q in &rows_b {
            cross += dist(p, q);
        }
    }
    let within = |rows: &[&[f64]]| {
        let mut sum = 0.0;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                sum += dist(rows[i], rows[j]);
            }
        }
        2.0 * sum / (rows.len() * (rows.len() - 1)) as f64
    };
    Ok(2.0 * cross / (na * nb) as f64 - within(&rows_a) - within(&rows_b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNormSummary {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// Mean and max gradient norm over records whose step lies in `window`.
pub fn grad_norm_trace(history: &[MetricsRecord], window: RangeInclusive<u64>) -> Result<GradNormSummary> {
    let norms: Vec<f64> = history.iter().filter(|r| window.contains(&r.step)).map(|r| r.grad_norm).collect();
    if norms.is_empty() {
        return Err(Error::EmptyWindow(format!("no records in steps {}..={}", window.start(), window.end())));
    }
    Ok(GradNormSummary {
        mean: norms.iter().sum::<f64>() / norms.len() as f64,
        max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: norms.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeSettings {
    pub resolution: usize,
    pub radius: f64,
    pub max_iters: usize,
    /// Relative change of the Rayleigh quotient that counts as converged.
    pub tol: f64,
}

impl Default for LandscapeSettings {
    fn default() -> Self {
        Self { resolution: 21, radius: 1.0, max_iters: 50, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeReport {
    /// Row-major `resolution x resolution`; row index follows the first direction.
    pub grid: Vec<f64>,
    pub coords: Vec<f64>,
    pub resolution: usize,
    pub mean: f64,
    pub sigma: f64,
    /// Grid values outside `mean +- 1.96 sigma` of this grid.
    pub spikes: usize,
    pub directions: [Eigenpair; 2],
}

impl LandscapeReport {
    /// Warning flag: either eigendirection failed to converge.
    pub fn converged(&self) -> bool {
        self.directions.iter().all(|e| e.converged)
    }

    /// Grid values outside another grid's `mean +- 1.96 sigma` bound.
    pub fn spikes_against(&self, reference: &LandscapeReport) -> usize {
        count_outside(&self.grid, reference.mean, reference.sigma)
    }
}

/// Values outside `mean +- 1.96 sigma`.
pub fn count_outside(values: &[f64], mean: f64, sigma: f64) -> usize {
    let bound = 1.96 * sigma;
    values.iter().filter(|&&v| (v - mean).abs() > bound).count()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

fn project_out(v: &mut [f64], basis: &[&[f64]]) {
    for u in basis {
        let c = dot(v, u);
        v.iter_mut().zip(u.iter()).for_each(|(x, ui)| *x -= c * ui);
    }
}

/// Dominant eigenpair of `apply` restricted to the orthogonal complement of `deflate`.
pub fn power_iteration<H, R>(
    mut apply: H,
    dim: usize,
    deflate: &[&[f64]],
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<Eigenpair>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    project_out(&mut v, deflate);
    normalize(&mut v)?;
    let mut history = Vec::with_capacity(max_iters);
    let mut prev = f64::NAN;
    for it in 1..=max_iters {
        let mut w = apply(&v)?;
        check_dim(dim, w.len())?;
        project_out(&mut w, deflate);
        let rq = dot(&v, &w);
        history.push(rq);
        if normalize(&mut w).is_err() {
            return Ok(Eigenpair { value: rq, vector: v, iterations: it, converged: true, history });
        }
        // Keep a consistent orientation so the iterate settles.
        if dot(&w, &v) < 0.0 && rq >= 0.0 {
            w.iter_mut().for_each(|x| *x = -*x);
        }
        v = w;
        project_out(&mut v, deflate);
        normalize(&mut v)?;
        if (rq - prev).abs() <= tol * rq.abs().max(1e-12) {
            return Ok(Eigenpair { value: rq, vector: v, iterations: it, converged: true, history });
        }
        prev = rq;
    }
    Ok(Eigenpair { value: prev, vector: v, iterations: max_iters, converged: false, history })
}

/// Top-two curvature directions of `loss` at `theta` by power iteration on
/// finite-difference Hessian-vector products of `grad`, then the loss on a grid
/// `theta + a u1 + b u2` over `[-radius, radius]^2`.
pub fn landscape_probe<L, G, R>(
    mut loss: L,
    mut grad: G,
    theta: &[f64],
    settings: &LandscapeSettings,
    rng: &mut R,
) -> Result<LandscapeReport>
where
    L: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if settings.resolution == 0 {
        return Err(Error::InvalidArgument("landscape resolution must be positive".into()));
    }
    if !(settings.radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be non-negative, got {}", settings.radius)));
    }
    let n = theta.len();
    let delta = hvp_step(theta);
    let first = power_iteration(|v| hvp(&mut grad, theta, v, delta), n, &[], settings.max_iters, settings.tol, rng)?;
    let second = {
        let u1 = first.vector.as_slice();
        power_iteration(|v| hvp(&mut grad, theta, v, delta), n, &[u1], settings.max_iters, settings.tol, rng)?
    };
    let res = settings.resolution;
    let coords: Vec<f64> = (0..res)
        .map(|i| if res == 1 { 0.0 } else { -settings.radius + 2.0 * settings.radius * i as f64 / (res - 1) as f64 })
        .collect();
    let mut grid = Vec::with_capacity(res * res);
    let mut point = vec![0.0; n];
    for &a in &coords {
        for &b in &coords {
            for k in 0..n {
                point[k] = theta[k] + a * first.vector[k] + b * second.vector[k];
            }
            grid.push(loss(&point)?);
        }
    }
    let (mean, sigma) = if grid.iter().all(|&v| v == grid[0]) {
        (grid[0], 0.0)
    } else {
        let mean = grid.iter().sum::<f64>() / grid.len() as f64;
        (mean, (grid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / grid.len() as f64).sqrt())
    };
    let spikes = count_outside(&grid, mean, sigma);
    Ok(LandscapeReport { grid, coords, resolution: res, mean, sigma, spikes, directions: [first, second] })
}
