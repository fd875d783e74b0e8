//! The trainable field `F_theta(x; t, s, c, omega)` and its derivatives.
//!
//! A plain MLP over `[x | fourier(t) | fourier(s) | label embedding | omega]`.
//! Forward mode is carried alongside the primal pass (rows `B..2B` of every
//! activation matrix hold the tangent), so an exact JVP costs one extra set of
//! rows in each matrix product. [`GradTape`] records evaluations and runs reverse
//! mode through both the primal and tangent rows, which is what losses with a
//! differentiated JVP term need.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{check_dim, Error, Result};

/// Label value selecting the null (unconditional) embedding row.
pub const NULL_LABEL: usize = usize::MAX;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMLB";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Number of affine layers.
    pub depth: usize,
    /// Fourier frequencies `2^0 .. 2^(num_freqs-1)` per time input.
    pub num_freqs: usize,
    /// `Some(k)` adds a learned embedding with `k` class rows plus one null row.
    pub num_classes: Option<usize>,
    pub label_dim: usize,
    pub omega_channel: bool,
}

impl Default for FieldNetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 256,
            depth: 5,
            num_freqs: 8,
            num_classes: None,
            label_dim: 16,
            omega_channel: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct FieldNet {
    cfg: FieldNetConfig,
    layers: Vec<LayerSlot>,
    emb_offset: usize,
    n_params: usize,
    time_scale: f64,
}

/// A batch of network inputs. Times are in interpolant-domain units.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub x: &'a [f64],
    pub t: &'a [f64],
    pub s: &'a [f64],
    /// Class per row; `None` means the null label on conditional nets.
    pub labels: Option<&'a [usize]>,
    /// Guidance scale per row; `None` means 1.
    pub omega: Option<&'a [f64]>,
}

impl<'a> Inputs<'a> {
    pub fn new(x: &'a [f64], t: &'a [f64], s: &'a [f64]) -> Self {
        Self { x, t, s, labels: None, omega: None }
    }

    pub fn with_labels(mut self, labels: &'a [usize]) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_omega(mut self, omega: &'a [f64]) -> Self {
        self.omega = Some(omega);
        self
    }

    pub fn batch(&self) -> usize {
        self.t.len()
    }
}

/// Input-space direction `(dx, dt, ds)`; `dx` has one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct Tangent<'a> {
    pub dx: &'a [f64],
    pub dt: f64,
    pub ds: f64,
}

/// Anything that can be evaluated like the field: the network bound to
/// parameters, analytic oracles, test stubs.
pub trait Field {
    fn data_dim(&self) -> usize;

    fn eval(&self, inputs: &Inputs<'_>) -> Result<Vec<f64>>;

    /// Returns `(F, dF)` with `dF` the directional derivative along `tangent`.
    fn jvp(&self, inputs: &Inputs<'_>, tangent: &Tangent<'_>) -> Result<(Vec<f64>, Vec<f64>)>;

    fn num_classes(&self) -> Option<usize> {
        None
    }
}

/// A [`FieldNet`] together with a parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct BoundNet<'a> {
    pub net: &'a FieldNet,
    pub theta: &'a [f64],
}

impl Field for BoundNet<'_> {
    fn data_dim(&self) -> usize {
        self.net.cfg.data_dim
    }

    fn eval(&self, inputs: &Inputs<'_>) -> Result<Vec<f64>> {
        self.net.apply(self.theta, inputs)
    }

    fn jvp(&self, inputs: &Inputs<'_>, tangent: &Tangent<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.net.jvp_exact(self.theta, inputs, tangent)
    }

    fn num_classes(&self) -> Option<usize> {
        self.net.cfg.num_classes
    }
}

/// Cached activations of one batched evaluation.
struct Trace {
    batch: usize,
    tangent: bool,
    label_rows: Option<Vec<usize>>,
    /// Stacked `[primal; tangent]` input matrix of every layer.
    inputs: Vec<Vec<f64>>,
    /// Stacked pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl FieldNet {
    pub fn new(cfg: FieldNetConfig) -> Result<Self> {
        if cfg.data_dim == 0 || cfg.depth == 0 || (cfg.depth > 1 && cfg.hidden == 0) {
            return Err(Error::InvalidArgument(format!("degenerate network shape {cfg:?}")));
        }
        if cfg.num_freqs > 52 {
            return Err(Error::InvalidArgument("at most 52 Fourier frequencies".into()));
        }
        if cfg.num_classes.is_some() && cfg.label_dim == 0 {
            return Err(Error::InvalidArgument("conditional net needs label_dim > 0".into()));
        }
        let in_dim = cfg.data_dim
            + 4 * cfg.num_freqs
            + cfg.num_classes.map_or(0, |_| cfg.label_dim)
            + usize::from(cfg.omega_channel);
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut offset = 0;
        for l in 0..cfg.depth {
            let fan_in = if l == 0 { in_dim } else { cfg.hidden };
            let fan_out = if l + 1 == cfg.depth { cfg.data_dim } else { cfg.hidden };
            layers.push(LayerSlot { fan_in, fan_out, w: offset, b: offset + fan_in * fan_out });
            offset += fan_in * fan_out + fan_out;
        }
        let emb_offset = offset;
        if let Some(k) = cfg.num_classes {
            offset += (k + 1) * cfg.label_dim;
        }
        Ok(Self { cfg, layers, emb_offset, n_params: offset, time_scale: 1.0 })
    }

    /// Like [`FieldNet::new`], with time features computed from `t / domain_end`
    /// so that every interpolant sees normalized times.
    pub fn for_domain(cfg: FieldNetConfig, domain_end: f64) -> Result<Self> {
        Self::new(cfg)?.with_domain_end(domain_end)
    }

    /// Checkpoints do not store the time domain; reattach it after loading.
    pub fn with_domain_end(mut self, domain_end: f64) -> Result<Self> {
        if !(domain_end > 0.0) {
            return Err(Error::InvalidArgument(format!("bad time domain end {domain_end}")));
        }
        self.time_scale = 1.0 / domain_end;
        Ok(self)
    }

    pub fn config(&self) -> &FieldNetConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn domain_end(&self) -> f64 {
        1.0 / self.time_scale
    }

    pub fn bind<'a>(&'a self, theta: &'a [f64]) -> BoundNet<'a> {
        BoundNet { net: self, theta }
    }

    /// Uniform `+-1/sqrt(fan_in)` weights and biases, zero final layer, standard
    /// normal label embeddings.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.n_params];
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            if l == last {
                continue;
            }
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let end = slot.b + slot.fan_out;
            for p in &mut theta[slot.w..end] {
                *p = dist.sample(rng);
            }
        }
        for p in &mut theta[self.emb_offset..] {
            *p = StandardNormal.sample(rng);
        }
        theta
    }

    pub fn apply(&self, theta: &[f64], inputs: &Inputs<'_>) -> Result<Vec<f64>> {
        Ok(self.forward(theta, inputs, None)?.out)
    }

    /// Exact forward-mode derivative `d/de F(x + e dx, t + e dt, s + e ds)` at `e = 0`.
    pub fn jvp_exact(
        &self,
        theta: &[f64],
        inputs: &Inputs<'_>,
        tangent: &Tangent<'_>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut trace = self.forward(theta, inputs, Some(tangent))?;
        let dual = trace.out.split_off(trace.batch * self.cfg.data_dim);
        Ok((trace.out, dual))
    }

    /// `[F(x + e v, t + e, s) - F(x - e v, t - e, s)] / (2 e)`.
    pub fn jvp_approx(&self, theta: &[f64], inputs: &Inputs<'_>, v: &[f64], eps: f64) -> Result<Vec<f64>> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
        }
        let (plus, minus) = displaced_pair(inputs, v, eps)?;
        let fp = self.apply(theta, &plus.view(inputs))?;
        let fm = self.apply(theta, &minus.view(inputs))?;
        Ok(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
    }

    /// Reverse-mode input gradient: `J_x(F)^T cot` row by row.
    pub fn input_vjp(&self, theta: &[f64], inputs: &Inputs<'_>, cot: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(theta, inputs, None)?;
        check_dim(trace.out.len(), cot.len())?;
        let mut scratch = vec![0.0; self.n_params];
        let gin = self.backward(theta, &trace, cot, None, &mut scratch, true);
        let (b, d, w) = (trace.batch, self.cfg.data_dim, self.input_dim());
        let gin = gin.expect("input gradient requested");
        Ok((0..b).flat_map(|i| gin[i * w..i * w + d].to_vec()).collect())
    }

    fn check_inputs(&self, theta: &[f64], inputs: &Inputs<'_>) -> Result<Option<Vec<usize>>> {
        check_dim(self.n_params, theta.len())?;
        let b = inputs.batch();
        check_dim(b * self.cfg.data_dim, inputs.x.len())?;
        check_dim(b, inputs.s.len())?;
        if let Some(o) = inputs.omega {
            if !self.cfg.omega_channel {
                return Err(Error::UnsupportedConfig("network has no omega input channel".into()));
            }
            check_dim(b, o.len())?;
        }
        match (self.cfg.num_classes, inputs.labels) {
            (None, Some(_)) => Err(Error::UnsupportedConfig("network has no label pathway".into())),
            (None, None) => Ok(None),
            (Some(k), None) => Ok(Some(vec![k; b])),
            (Some(k), Some(labels)) => {
                check_dim(b, labels.len())?;
                labels
                    .iter()
                    .map(|&c| match c {
                        NULL_LABEL => Ok(k),
                        c if c < k => Ok(c),
                        c => Err(Error::InvalidArgument(format!("label {c} out of range for {k} classes"))),
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            }
        }
    }

    fn forward(&self, theta: &[f64], inputs: &Inputs<'_>, tangent: Option<&Tangent<'_>>) -> Result<Trace> {
        let label_rows = self.check_inputs(theta, inputs)?;
        let b = inputs.batch();
        let d = self.cfg.data_dim;
        if let Some(tan) = tangent {
            check_dim(b * d, tan.dx.len())?;
        }
        let rows = if tangent.is_some() { 2 * b } else { b };
        let width = self.input_dim();
        let nf = self.cfg.num_freqs;
        let mut u = vec![0.0; rows * width];
        for i in 0..b {
            let row = &mut u[i * width..(i + 1) * width];
            row[..d].copy_from_slice(&inputs.x[i * d..(i + 1) * d]);
            fourier(inputs.t[i] * self.time_scale, &mut row[d..d + 2 * nf]);
            fourier(inputs.s[i] * self.time_scale, &mut row[d + 2 * nf..d + 4 * nf]);
            let mut col = d + 4 * nf;
            if let Some(labels) = &label_rows {
                let ld = self.cfg.label_dim;
                let e = self.emb_offset + labels[i] * ld;
                row[col..col + ld].copy_from_slice(&theta[e..e + ld]);
                col += ld;
            }
            if self.cfg.omega_channel {
                row[col] = inputs.omega.map_or(1.0, |o| o[i]);
            }
        }
        if let Some(tan) = tangent {
            let (primal, dual) = u.split_at_mut(b * width);
            for i in 0..b {
                let (p, q) = (&primal[i * width..(i + 1) * width], &mut dual[i * width..(i + 1) * width]);
                q[..d].copy_from_slice(&tan.dx[i * d..(i + 1) * d]);
                fourier_tangent(&p[d..d + 2 * nf], tan.dt * self.time_scale, &mut q[d..d + 2 * nf]);
                fourier_tangent(&p[d + 2 * nf..d + 4 * nf], tan.ds * self.time_scale, &mut q[d + 2 * nf..d + 4 * nf]);
            }
        }

        let n_layers = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut cur = u;
        for (l, slot) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; rows * slot.fan_out];
            let w = &theta[slot.w..slot.w + slot.fan_in * slot.fan_out];
            matmul(rows, slot.fan_in, slot.fan_out, &cur, false, w, false, &mut z, false);
            let bias = &theta[slot.b..slot.b + slot.fan_out];
            for row in z[..b * slot.fan_out].chunks_exact_mut(slot.fan_out) {
                for (zi, bi) in row.iter_mut().zip(bias) {
                    *zi += bi;
                }
            }
            layer_inputs.push(cur);
            if l + 1 == n_layers {
                cur = z;
            } else {
                let h = slot.fan_out;
                let mut next = vec![0.0; rows * h];
                let (top, bottom) = next.split_at_mut(b * h);
                if tangent.is_some() {
                    for (k, &zk) in z[..b * h].iter().enumerate() {
                        let (a, a1) = gate(zk);
                        top[k] = a;
                        bottom[k] = a1 * z[b * h + k];
                    }
                } else {
                    for (o, &zk) in top.iter_mut().zip(&z) {
                        *o = gate(zk).0;
                    }
                }
                pre.push(z);
                cur = next;
            }
        }
        Ok(Trace { batch: b, tangent: tangent.is_some(), label_rows, inputs: layer_inputs, pre, out: cur })
    }

    /// Accumulates `d<g_out, F> + <g_tan, dF>` / `d theta` into `grad`. Returns the
    /// gradient with respect to the primal input matrix when asked.
    fn backward(
        &self,
        theta: &[f64],
        trace: &Trace,
        g_out: &[f64],
        g_tan: Option<&[f64]>,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let b = trace.batch;
        let d = self.cfg.data_dim;
        let rows = if g_tan.is_some() { 2 * b } else { b };
        let mut g = Vec::with_capacity(rows * d);
        g.extend_from_slice(g_out);
        if let Some(gt) = g_tan {
            g.extend_from_slice(gt);
        }
        for l in (0..self.layers.len()).rev() {
            let slot = self.layers[l];
            let input = &trace.inputs[l][..rows * slot.fan_in];
            let gw = &mut grad[slot.w..slot.w + slot.fan_in * slot.fan_out];
            matmul(slot.fan_in, rows, slot.fan_out, input, true, &g, false, gw, true);
            let gb = &mut grad[slot.b..slot.b + slot.fan_out];
            for row in g[..b * slot.fan_out].chunks_exact(slot.fan_out) {
                for (o, v) in gb.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let w = &theta[slot.w..slot.w + slot.fan_in * slot.fan_out];
            if l == 0 {
                if trace.label_rows.is_none() && !want_input_grad {
                    return None;
                }
                // Only primal rows feed parameters (embeddings) or inputs here.
                let mut gin = vec![0.0; b * slot.fan_in];
                matmul(b, slot.fan_out, slot.fan_in, &g[..b * slot.fan_out], false, w, true, &mut gin, false);
                if let Some(labels) = &trace.label_rows {
                    let ld = self.cfg.label_dim;
                    let col = d + 4 * self.cfg.num_freqs;
                    for (i, &c) in labels.iter().enumerate() {
                        let e = self.emb_offset + c * ld;
                        let src = &gin[i * slot.fan_in + col..i * slot.fan_in + col + ld];
                        for (o, v) in grad[e..e + ld].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                return want_input_grad.then_some(gin);
            }
            let mut gin = vec![0.0; rows * slot.fan_in];
            matmul(rows, slot.fan_out, slot.fan_in, &g, false, w, true, &mut gin, false);
            let z = &trace.pre[l - 1];
            let h = slot.fan_in;
            if g_tan.is_some() {
                let (ga, gda) = gin.split_at_mut(b * h);
                for k in 0..b * h {
                    let zk = z[k];
                    let (_, a1) = gate(zk);
                    let a2 = gate_second(zk);
                    let gz = a1 * ga[k] + a2 * z[b * h + k] * gda[k];
                    gda[k] *= a1;
                    ga[k] = gz;
                }
            } else {
                for (gk, &zk) in gin.iter_mut().zip(z) {
                    *gk *= gate(zk).1;
                }
            }
            g = gin;
        }
        None
    }
}

/// `x * (1 + x / sqrt(1 + x^2)) / 2`: a smooth, cheap sigmoidal gate.
/// Returns the value and first derivative.
#[inline]
fn gate(x: f64) -> (f64, f64) {
    let r = 1.0 / (1.0 + x * x).sqrt();
    let xr = x * r;
    (0.5 * x * (1.0 + xr), 0.5 * (1.0 + xr * (1.0 + r * r)))
}

#[inline]
fn gate_second(x: f64) -> f64 {
    let r = 1.0 / (1.0 + x * x).sqrt();
    let r2 = r * r;
    r2 * r * (1.0 - 1.5 * x * x * r2)
}

/// `(sin 2^k tau, cos 2^k tau)` pairs by repeated angle doubling.
fn fourier(tau: f64, out: &mut [f64]) {
    let (mut sin, mut cos) = tau.sin_cos();
    for pair in out.chunks_exact_mut(2) {
        pair[0] = sin;
        pair[1] = cos;
        (sin, cos) = (2.0 * sin * cos, (cos - sin) * (cos + sin));
    }
}

/// Tangent of [`fourier`] given its primal output.
fn fourier_tangent(primal: &[f64], dtau: f64, out: &mut [f64]) {
    for (k, (pair, p)) in out.chunks_exact_mut(2).zip(primal.chunks_exact(2)).enumerate() {
        let f = (1u64 << k) as f64 * dtau;
        pair[0] = f * p[1];
        pair[1] = -f * p[0];
    }
}

/// `C = op(A) op(B)` (or `C += ...`) for row-major `A`, `B`, `C` with `C` of
/// shape `m x n` and inner dimension `k`.
#[allow(clippy::too_many_arguments)]
fn matmul(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], acc: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Owned copies of `x +- eps v` and `t +- eps`.
pub(crate) struct Displaced {
    x: Vec<f64>,
    t: Vec<f64>,
}

impl Displaced {
    pub(crate) fn view<'a>(&'a self, base: &Inputs<'a>) -> Inputs<'a> {
        Inputs { x: &self.x, t: &self.t, ..*base }
    }
}

pub(crate) fn displaced_pair(inputs: &Inputs<'_>, v: &[f64], eps: f64) -> Result<(Displaced, Displaced)> {
    check_dim(inputs.x.len(), v.len())?;
    let plus = Displaced {
        x: inputs.x.iter().zip(v).map(|(x, v)| x + eps * v).collect(),
        t: inputs.t.iter().map(|t| t + eps).collect(),
    };
    let minus = Displaced {
        x: inputs.x.iter().zip(v).map(|(x, v)| x - eps * v).collect(),
        t: inputs.t.iter().map(|t| t - eps).collect(),
    };
    Ok((plus, minus))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalId(usize);

/// Output of a recorded evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub id: EvalId,
    pub value: Vec<f64>,
    pub tangent: Option<Vec<f64>>,
}

struct Record {
    trace: Trace,
    g_out: Vec<f64>,
    g_tan: Option<Vec<f64>>,
}

/// Reverse-mode recorder. Each [`GradTape::eval`] is a node whose output (and
/// tangent output) may receive adjoints via [`GradTape::seed`]; evaluations done
/// outside the tape are constants, which is how stop-gradient is expressed.
pub struct GradTape<'a> {
    net: &'a FieldNet,
    theta: &'a [f64],
    records: Vec<Record>,
}

impl<'a> GradTape<'a> {
    pub fn new(net: &'a FieldNet, theta: &'a [f64]) -> Self {
        Self { net, theta, records: Vec::new() }
    }

    pub fn eval(&mut self, inputs: &Inputs<'_>, tangent: Option<&Tangent<'_>>) -> Result<Evaluation> {
        let trace = self.net.forward(self.theta, inputs, tangent)?;
        let n = trace.batch * self.net.cfg.data_dim;
        let value = trace.out[..n].to_vec();
        let tangent = trace.tangent.then(|| trace.out[n..].to_vec());
        let id = EvalId(self.records.len());
        self.records.push(Record { trace, g_out: vec![0.0; n], g_tan: None });
        Ok(Evaluation { id, value, tangent })
    }

    /// Adds adjoints for the value and/or tangent output of evaluation `id`.
    pub fn seed(&mut self, id: EvalId, g_value: Option<&[f64]>, g_tangent: Option<&[f64]>) -> Result<()> {
        let rec = self
            .records
            .get_mut(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown evaluation {}", id.0)))?;
        if let Some(g) = g_value {
            check_dim(rec.g_out.len(), g.len())?;
            for (o, v) in rec.g_out.iter_mut().zip(g) {
                *o += v;
            }
        }
        if let Some(g) = g_tangent {
            if !rec.trace.tangent {
                return Err(Error::UnsupportedPrimitive(
                    "tangent adjoint on an evaluation recorded without a tangent".into(),
                ));
            }
            check_dim(rec.g_out.len(), g.len())?;
            let acc = rec.g_tan.get_or_insert_with(|| vec![0.0; g.len()]);
            for (o, v) in acc.iter_mut().zip(g) {
                *o += v;
            }
        }
        Ok(())
    }

    /// Gradient over `theta`, accumulated over records in recording order.
    pub fn backward(self) -> Vec<f64> {
        let mut grad = vec![0.0; self.net.n_params];
        for rec in &self.records {
            self.net.backward(self.theta, &rec.trace, &rec.g_out, rec.g_tan.as_deref(), &mut grad, false);
        }
        grad
    }
}

/// Default finite-difference step for [`hvp`]: `1e-4 (1 + |theta|_inf)`.
pub fn hvp_step(theta: &[f64]) -> f64 {
    1e-4 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Hessian-vector product by central differences of the gradient along `v / |v|`,
/// rescaled by `|v|`.
pub fn hvp<G>(mut grad: G, theta: &[f64], v: &[f64], delta: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    check_dim(theta.len(), v.len())?;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("hvp step must be positive, got {delta}")));
    }
    let shifted = |sign: f64| -> Vec<f64> {
        theta.iter().zip(v).map(|(t, vi)| t + sign * delta * vi / norm).collect()
    };
    let gp = grad(&shifted(1.0))?;
    let gm = grad(&shifted(-1.0))?;
    check_dim(theta.len(), gp.len())?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * delta) * norm).collect())
}

/// Writes the network shape, parameters and optional EMA parameters. The time
/// domain is not stored.
pub fn write_checkpoint<W: Write>(w: &mut W, net: &FieldNet, theta: &[f64], ema: Option<&[f64]>) -> Result<()> {
    check_dim(net.n_params, theta.len())?;
    if let Some(e) = ema {
        check_dim(net.n_params, e.len())?;
    }
    let c = &net.cfg;
    let dims = [
        c.data_dim,
        c.hidden,
        c.depth,
        c.num_freqs,
        c.num_classes.unwrap_or(0),
        c.label_dim,
        usize::from(c.omega_channel),
    ];
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    write_f64s(w, theta)?;
    match ema {
        Some(e) => {
            w.write_all(&[1])?;
            write_f64s(w, e)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

/// Parsed checkpoint: the network, its parameters and optional EMA parameters.
pub type Checkpoint = (FieldNet, Vec<f64>, Option<Vec<f64>>);

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = read_u32(r)? as usize;
    if n != 7 {
        return Err(Error::Checkpoint(format!("expected 7 header dims, found {n}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let cfg = FieldNetConfig {
        data_dim: dims[0],
        hidden: dims[1],
        depth: dims[2],
        num_freqs: dims[3],
        num_classes: (dims[4] > 0).then_some(dims[4]),
        label_dim: dims[5],
        omega_channel: dims[6] != 0,
    };
    let net = FieldNet::new(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let theta = read_f64s(r, net.n_params)?;
    let mut flag = [0u8; 1];
    read_exact(r, &mut flag)?;
    let ema = match flag[0] {
        0 => None,
        1 => Some(read_f64s(r, net.n_params)?),
        f => return Err(Error::Checkpoint(format!("bad EMA flag {f}"))),
    };
    Ok((net, theta, ema))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FieldNetConfig {
        FieldNetConfig { data_dim: 2, hidden: 6, depth: 3, num_freqs: 2, ..Default::default() }
    }

    fn random_theta(net: &FieldNet, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..net.n_params()).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); 0.7 * e }).collect()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    struct Case {
        x: Vec<f64>,
        t: Vec<f64>,
        s: Vec<f64>,
        v: Vec<f64>,
    }

    fn case(seed: u64, b: usize, d: usize) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..b).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s = t.iter().map(|&t| t * rng.gen_range(0.0..1.0)).collect();
        Case { x: random_vec(&mut rng, b * d), t, s, v: random_vec(&mut rng, b * d) }
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let c = case(2, 5, 2);
        let out = net.apply(&theta, &Inputs::new(&c.x, &c.t, &c.s)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn evaluation_is_deterministic_and_row_independent() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = random_theta(&net, 3);
        let c = case(4, 6, 2);
        let a = net.apply(&theta, &Inputs::new(&c.x, &c.t, &c.s)).unwrap();
        let b = net.apply(&theta, &Inputs::new(&c.x, &c.t, &c.s)).unwrap();
        assert_eq!(a, b);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let px: Vec<f64> = perm.iter().flat_map(|&i| c.x[2 * i..2 * i + 2].to_vec()).collect();
        let pt: Vec<f64> = perm.iter().map(|&i| c.t[i]).collect();
        let ps: Vec<f64> = perm.iter().map(|&i| c.s[i]).collect();
        let out = net.apply(&theta, &Inputs::new(&px, &pt, &ps)).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(&out[2 * j..2 * j + 2], &a[2 * i..2 * i + 2]);
        }
    }

    #[test]
    fn dimension_and_label_errors() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = random_theta(&net, 1);
        assert!(matches!(
            net.apply(&theta, &Inputs::new(&[0.0; 3], &[0.5], &[0.1])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            net.apply(&theta, &Inputs::new(&[0.0; 2], &[0.5], &[0.1]).with_labels(&[0])),
            Err(Error::UnsupportedConfig(_))
        ));
        let cond = FieldNet::new(FieldNetConfig { num_classes: Some(3), ..small_cfg() }).unwrap();
        let theta = random_theta(&cond, 1);
        assert!(cond.apply(&theta, &Inputs::new(&[0.0; 2], &[0.5], &[0.1]).with_labels(&[3])).is_err());
        let null = cond.apply(&theta, &Inputs::new(&[0.0; 2], &[0.5], &[0.1]).with_labels(&[NULL_LABEL])).unwrap();
        let implicit = cond.apply(&theta, &Inputs::new(&[0.0; 2], &[0.5], &[0.1])).unwrap();
        assert_eq!(null, implicit);
    }

    #[test]
    fn zero_init_squared_output_has_zero_gradient() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = net.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let c = case(6, 4, 2);
        let mut tape = GradTape::new(&net, &theta);
        let e = tape.eval(&Inputs::new(&c.x, &c.t, &c.s), None).unwrap();
        let g: Vec<f64> = e.value.iter().map(|f| 2.0 * f).collect();
        tape.seed(e.id, Some(&g), None).unwrap();
        assert!(tape.backward().iter().all(|&x| x == 0.0));
    }

    /// Loss with a value term and a differentiated JVP term:
    /// `sum a.F + sum (F - 0.3)^2 + sum b.dF + sum dF^2`.
    fn nested_loss(net: &FieldNet, theta: &[f64], c: &Case, a: &[f64], b: &[f64], labels: Option<&[usize]>) -> f64 {
        let mut inputs = Inputs::new(&c.x, &c.t, &c.s);
        if let Some(l) = labels {
            inputs = inputs.with_labels(l);
        }
        let (f, df) = net.jvp_exact(theta, &inputs, &Tangent { dx: &c.v, dt: 1.0, ds: 0.0 }).unwrap();
        let mut loss = 0.0;
        for i in 0..f.len() {
            loss += a[i] * f[i] + (f[i] - 0.3).powi(2) + b[i] * df[i] + df[i] * df[i];
        }
        loss
    }

    fn nested_grad(net: &FieldNet, theta: &[f64], c: &Case, a: &[f64], b: &[f64], labels: Option<&[usize]>) -> Vec<f64> {
        let mut inputs = Inputs::new(&c.x, &c.t, &c.s);
        if let Some(l) = labels {
            inputs = inputs.with_labels(l);
        }
        let mut tape = GradTape::new(net, theta);
        let e = tape.eval(&inputs, Some(&Tangent { dx: &c.v, dt: 1.0, ds: 0.0 })).unwrap();
        let df = e.tangent.as_ref().unwrap();
        let gf: Vec<f64> = e.value.iter().zip(a).map(|(f, a)| a + 2.0 * (f - 0.3)).collect();
        let gdf: Vec<f64> = df.iter().zip(b).map(|(d, b)| b + 2.0 * d).collect();
        tape.seed(e.id, Some(&gf), Some(&gdf)).unwrap();
        tape.backward()
    }

    #[test]
    fn gradient_matches_finite_differences_with_jvp_subterm() {
        for (seed, conditional) in [(7u64, false), (8, true), (9, false)] {
            let cfg = FieldNetConfig { num_classes: conditional.then_some(3), label_dim: 4, ..small_cfg() };
            let net = FieldNet::new(cfg).unwrap();
            let theta = random_theta(&net, seed);
            let c = case(seed + 100, 5, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let a = random_vec(&mut rng, 10);
            let b = random_vec(&mut rng, 10);
            let labels = [0usize, 2, NULL_LABEL, 1, 0];
            let labels = conditional.then_some(&labels[..]);
            let grad = nested_grad(&net, &theta, &c, &a, &b, labels);
            let u = random_vec(&mut rng, net.n_params());
            let h = 1e-4;
            let shift = |sign: f64| -> Vec<f64> { theta.iter().zip(&u).map(|(t, u)| t + sign * h * u).collect() };
            let fd = (nested_loss(&net, &shift(1.0), &c, &a, &b, labels)
                - nested_loss(&net, &shift(-1.0), &c, &a, &b, labels))
                / (2.0 * h);
            let exact: f64 = grad.iter().zip(&u).map(|(g, u)| g * u).sum();
            let rel = (fd - exact).abs() / exact.abs().max(1e-12);
            assert!(rel < 1e-4, "seed {seed}: fd {fd} vs {exact} (rel {rel})");
        }
    }

    #[test]
    fn stop_gradient_target_matches_explicit_jacobian_product() {
        let net = FieldNet::new(FieldNetConfig { hidden: 4, depth: 2, num_freqs: 1, ..small_cfg() }).unwrap();
        let theta = random_theta(&net, 11);
        let other = random_theta(&net, 12);
        let c = case(13, 3, 2);
        let inputs = Inputs::new(&c.x, &c.t, &c.s);
        let f = net.apply(&theta, &inputs).unwrap();
        // Detached target produced by a different parameter vector.
        let target = net.apply(&other, &inputs).unwrap();
        let mut tape = GradTape::new(&net, &theta);
        let e = tape.eval(&inputs, None).unwrap();
        let g: Vec<f64> = e.value.iter().zip(&target).map(|(f, t)| 2.0 * (f - t)).collect();
        tape.seed(e.id, Some(&g), None).unwrap();
        let grad = tape.backward();
        // Explicit Jacobian of F over theta by central differences, column by column.
        let h = 1e-6;
        for p in 0..net.n_params() {
            let mut tp = theta.clone();
            tp[p] += h;
            let fp = net.apply(&tp, &inputs).unwrap();
            tp[p] -= 2.0 * h;
            let fm = net.apply(&tp, &inputs).unwrap();
            let jt_r: f64 = (0..f.len()).map(|i| (fp[i] - fm[i]) / (2.0 * h) * 2.0 * (f[i] - target[i])).sum();
            assert!((jt_r - grad[p]).abs() < 1e-6 * (1.0 + grad[p].abs()), "param {p}: {jt_r} vs {}", grad[p]);
        }
    }

    #[test]
    fn tangent_adjoint_requires_recorded_tangent() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = random_theta(&net, 1);
        let c = case(2, 2, 2);
        let mut tape = GradTape::new(&net, &theta);
        let e = tape.eval(&Inputs::new(&c.x, &c.t, &c.s), None).unwrap();
        assert!(matches!(tape.seed(e.id, None, Some(&[0.0; 4])), Err(Error::UnsupportedPrimitive(_))));
    }

    #[test]
    fn zero_tangent_gives_zero_derivative() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = random_theta(&net, 21);
        let c = case(22, 4, 2);
        let (_, df) = net
            .jvp_exact(&theta, &Inputs::new(&c.x, &c.t, &c.s), &Tangent { dx: &[0.0; 8], dt: 0.0, ds: 0.0 })
            .unwrap();
        assert!(df.iter().all(|&v| v == 0.0));
    }

    fn fd_jvp(net: &FieldNet, theta: &[f64], c: &Case, eps: f64) -> Vec<f64> {
        let xp: Vec<f64> = c.x.iter().zip(&c.v).map(|(x, v)| x + eps * v).collect();
        let xm: Vec<f64> = c.x.iter().zip(&c.v).map(|(x, v)| x - eps * v).collect();
        let tp: Vec<f64> = c.t.iter().map(|t| t + eps).collect();
        let tm: Vec<f64> = c.t.iter().map(|t| t - eps).collect();
        let sp: Vec<f64> = c.s.iter().map(|s| s + 0.5 * eps).collect();
        let sm: Vec<f64> = c.s.iter().map(|s| s - 0.5 * eps).collect();
        let fp = net.apply(theta, &Inputs::new(&xp, &tp, &sp)).unwrap();
        let fm = net.apply(theta, &Inputs::new(&xm, &tm, &sm)).unwrap();
        fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn exact_jvp_converges_like_central_difference() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = random_theta(&net, 31);
        let c = case(32, 6, 2);
        let (_, df) = net
            .jvp_exact(&theta, &Inputs::new(&c.x, &c.t, &c.s), &Tangent { dx: &c.v, dt: 1.0, ds: 0.5 })
            .unwrap();
        let e1 = max_abs_diff(&fd_jvp(&net, &theta, &c, 1e-2), &df);
        let e2 = max_abs_diff(&fd_jvp(&net, &theta, &c, 5e-3), &df);
        let ratio = e1 / e2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn approximate_jvp_error_is_second_order() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = random_theta(&net, 41);
        let c = case(42, 6, 2);
        let inputs = Inputs::new(&c.x, &c.t, &c.s);
        let (_, exact) = net.jvp_exact(&theta, &inputs, &Tangent { dx: &c.v, dt: 1.0, ds: 0.0 }).unwrap();
        let errs: Vec<f64> = [0.02, 0.01, 0.005]
            .iter()
            .map(|&eps| max_abs_diff(&net.jvp_approx(&theta, &inputs, &c.v, eps).unwrap(), &exact))
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..=5.0).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn approximate_jvp_is_exact_for_affine_field() {
        let net = FieldNet::new(FieldNetConfig { depth: 1, num_freqs: 0, ..small_cfg() }).unwrap();
        let theta = random_theta(&net, 51);
        let c = case(52, 4, 2);
        let inputs = Inputs::new(&c.x, &c.t, &c.s);
        let (_, exact) = net.jvp_exact(&theta, &inputs, &Tangent { dx: &c.v, dt: 1.0, ds: 0.0 }).unwrap();
        let approx = net.jvp_approx(&theta, &inputs, &c.v, 0.005).unwrap();
        assert!(max_abs_diff(&exact, &approx) < 1e-12);
    }

    #[test]
    fn jvp_columns_match_reverse_mode_rows() {
        let net = FieldNet::new(small_cfg()).unwrap();
        let theta = random_theta(&net, 61);
        let c = case(62, 3, 2);
        let inputs = Inputs::new(&c.x, &c.t, &c.s);
        let b = 3;
        // jac[i][out][in] from forward mode, one basis tangent per input coordinate.
        let mut jac = vec![[[0.0; 2]; 2]; b];
        for k in 0..2 {
            let dx: Vec<f64> = (0..2 * b).map(|j| if j % 2 == k { 1.0 } else { 0.0 }).collect();
            let (_, col) = net.jvp_exact(&theta, &inputs, &Tangent { dx: &dx, dt: 0.0, ds: 0.0 }).unwrap();
            for i in 0..b {
                for o in 0..2 {
                    jac[i][o][k] = col[2 * i + o];
                }
            }
        }
        for o in 0..2 {
            let cot: Vec<f64> = (0..2 * b).map(|j| if j % 2 == o { 1.0 } else { 0.0 }).collect();
            let row = net.input_vjp(&theta, &inputs, &cot).unwrap();
            for i in 0..b {
                for k in 0..2 {
                    assert!((row[2 * i + k] - jac[i][o][k]).abs() < 1e-8);
                }
            }
        }
    }

    fn quadratic_grad(diag: &[f64]) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
        move |theta: &[f64]| Ok(theta.iter().zip(diag).map(|(t, d)| t * d).collect())
    }

    #[test]
    fn hvp_of_quadratic_is_diagonal_product() {
        let diag = [1.0, 3.0, 0.5, 2.0];
        let theta = [0.3, -1.0, 2.0, 0.1];
        let v = [1.0, -2.0, 0.5, 3.0];
        let hv = hvp(quadratic_grad(&diag), &theta, &v, hvp_step(&theta)).unwrap();
        for i in 0..4 {
            assert!((hv[i] - diag[i] * v[i]).abs() < 1e-9);
        }
        assert!(matches!(hvp(quadratic_grad(&diag), &theta, &[0.0; 4], 1e-4), Err(Error::ZeroVector)));
        let rayleigh: f64 = hv.iter().zip(&v).map(|(h, v)| h * v).sum();
        assert!(rayleigh >= 0.0);
    }

    #[test]
    fn hvp_is_symmetric_on_small_net() {
        let net = FieldNet::new(FieldNetConfig { hidden: 5, depth: 3, num_freqs: 1, ..small_cfg() }).unwrap();
        let theta = random_theta(&net, 71);
        let c = case(72, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let a = random_vec(&mut rng, 8);
        let bvec = random_vec(&mut rng, 8);
        let grad = |th: &[f64]| Ok(nested_grad(&net, th, &c, &a, &bvec, None));
        let u = random_vec(&mut rng, net.n_params());
        let w = random_vec(&mut rng, net.n_params());
        let delta = hvp_step(&theta);
        let hu = hvp(grad, &theta, &u, delta).unwrap();
        let hw = hvp(grad, &theta, &w, delta).unwrap();
        let uhw: f64 = hw.iter().zip(&u).map(|(a, b)| a * b).sum();
        let whu: f64 = hu.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((uhw - whu).abs() < 1e-5 * (1.0 + uhw.abs()), "{uhw} vs {whu}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = FieldNetConfig { num_classes: Some(4), omega_channel: true, ..small_cfg() };
        let net = FieldNet::for_domain(cfg, std::f64::consts::FRAC_PI_2).unwrap();
        let theta = random_theta(&net, 81);
        let ema = random_theta(&net, 82);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, &theta, Some(&ema)).unwrap();
        let (net2, theta2, ema2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(net2.config(), net.config());
        assert_eq!(net2.domain_end(), 1.0);
        assert_eq!(theta2, theta);
        assert_eq!(ema2.unwrap(), ema);

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, &theta, None).unwrap();
        assert!(read_checkpoint(&mut buf.as_slice()).unwrap().2.is_none());
        assert!(matches!(read_checkpoint(&mut &buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn gate_derivatives_match_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let d1 = (gate(x + h).0 - gate(x - h).0) / (2.0 * h);
            let d2 = (gate(x + h).1 - gate(x - h).1) / (2.0 * h);
            assert!((d1 - gate(x).1).abs() < 1e-9);
            assert!((d2 - gate_second(x)).abs() < 1e-9);
        }
    }
}
