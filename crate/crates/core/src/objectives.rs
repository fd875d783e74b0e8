//! Training objectives over the flow-map parameterization
//! `f(x_t; t, s) = nu^{-1}(A'_{t,s} x_t - A_{t,s} F(x_t; t, s))`.
//!
//! Two shapes of loss exist. Residual losses (ED, DT, SD) square the Eulerian
//! residual `d/dt f` along a guiding velocity and differentiate through the JVP.
//! Target losses (CT, CD, SD-R and the iSD family) regress `F` onto a detached
//! target `F + residual`, which has the same fixed points with a far cheaper and
//! better-conditioned gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::fieldnet::{displaced_pair, Evaluation, Field, FieldNet, GradTape, Inputs, Tangent, NULL_LABEL};
use crate::interpolant::{BridgeCoeffs, Interpolant};
use crate::mixture::{batch_marginal_velocity_into, GaussianMixture};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Flow matching at `s = t`.
    Cfm,
    /// Eulerian residual under the analytic marginal velocity.
    Ed,
    /// Eulerian residual under the conditional velocity.
    Dt,
    /// Detached-target regression with conditional guidance.
    Ct,
    /// Detached-target regression with the analytic marginal velocity.
    Cd,
    /// Flow matching plus the Eulerian residual guided by the model's own
    /// instantaneous velocity.
    Sd,
    /// As [`Objective::Sd`] with the spatial part `v . grad_x F` detached.
    SdSg,
    /// Detached-target regression guided by the model's own velocity.
    Sdr,
    /// Flow matching plus SD-R.
    Isd,
    /// iSD with the flow-matching target replaced by a guided velocity.
    IsdT,
    /// iSD whose SD-R term follows a guided velocity built from two model passes.
    IsdU,
    /// iSD-U with the guidance scale as an extra network input.
    IsdC,
}

impl Objective {
    pub const ALL: [Objective; 12] = [
        Self::Cfm,
        Self::Ed,
        Self::Dt,
        Self::Ct,
        Self::Cd,
        Self::Sd,
        Self::SdSg,
        Self::Sdr,
        Self::Isd,
        Self::IsdT,
        Self::IsdU,
        Self::IsdC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cfm => "cfm",
            Self::Ed => "ed",
            Self::Dt => "dt",
            Self::Ct => "ct",
            Self::Cd => "cd",
            Self::Sd => "sd",
            Self::SdSg => "sd-sg",
            Self::Sdr => "sdr",
            Self::Isd => "isd",
            Self::IsdT => "isd-t",
            Self::IsdU => "isd-u",
            Self::IsdC => "isd-c",
        }
    }

    fn has_cfm_term(self) -> bool {
        matches!(self, Self::Cfm | Self::Sd | Self::SdSg | Self::Isd | Self::IsdT | Self::IsdU | Self::IsdC)
    }

    fn shape(self) -> Shape {
        match self {
            Self::Cfm => Shape::FlowMatching,
            Self::Ed | Self::Dt | Self::Sd => Shape::Residual,
            Self::SdSg => Shape::SpatialStopResidual,
            _ => Shape::Target,
        }
    }

    pub fn default_guiding(self) -> Guiding {
        match self {
            Self::Cfm | Self::Dt | Self::Ct => Guiding::Conditional,
            Self::Ed | Self::Cd => Guiding::OracleMarginal,
            Self::Sd | Self::SdSg | Self::Sdr | Self::Isd | Self::IsdT => Guiding::SelfMarginal,
            Self::IsdU | Self::IsdC => Guiding::PreCfg,
        }
    }

    /// Adaptive weighting belongs to the iSD recipe; the other objectives are
    /// plain unweighted means.
    pub fn default_weighting(self) -> Weighting {
        match self {
            Self::Isd | Self::IsdT | Self::IsdU | Self::IsdC => Weighting::DEFAULT_ADAPTIVE,
            _ => Weighting::None,
        }
    }

    /// Whether the objective uses class labels (and so a conditional network).
    pub fn needs_labels(self) -> bool {
        matches!(self, Self::IsdT | Self::IsdU | Self::IsdC)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    FlowMatching,
    Residual,
    SpatialStopResidual,
    Target,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective {s:?}")))
    }
}

/// Velocity that defines the trajectory the flow map is asked to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guiding {
    /// `v_t(x_t | x) = alpha' x + sigma' z`.
    Conditional,
    /// Analytic `v*_t` of the data mixture.
    OracleMarginal,
    /// The model's own `F(x_t; t, t)`, detached.
    SelfMarginal,
    /// Mixture-free marginal velocity estimated from the data mini-batch.
    BatchMarginal,
    /// `F(t, t, null) + omega (F(t, t, c) - F(t, t, null))`, detached.
    PreCfg,
}

impl Guiding {
    fn name(self) -> &'static str {
        match self {
            Self::Conditional => "conditional",
            Self::OracleMarginal => "oracle",
            Self::SelfMarginal => "self",
            Self::BatchMarginal => "batch",
            Self::PreCfg => "pre-cfg",
        }
    }
}

impl fmt::Display for Guiding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Guiding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Conditional, Self::OracleMarginal, Self::SelfMarginal, Self::BatchMarginal, Self::PreCfg]
            .into_iter()
            .find(|g| g.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown guiding velocity {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JvpMode {
    Exact,
    /// Central difference along `(v, 1, 0)` with the given step.
    Approx(f64),
}

/// Default step of the finite-difference JVP.
pub const DEFAULT_JVP_EPS: f64 = 0.005;

impl fmt::Display for JvpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exact => f.write_str("exact"),
            Self::Approx(eps) => write!(f, "approx:{eps}"),
        }
    }
}

impl FromStr for JvpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "exact" => Ok(Self::Exact),
            "approx" => Ok(Self::Approx(DEFAULT_JVP_EPS)),
            _ => {
                let eps: f64 = s
                    .strip_prefix("approx:")
                    .and_then(|e| e.parse().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("bad jvp mode {s:?}")))?;
                if !(eps > 0.0) {
                    return Err(Error::InvalidArgument(format!("jvp step must be positive, got {eps}")));
                }
                Ok(Self::Approx(eps))
            }
        }
    }
}

/// Per-sample weight applied to both loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    None,
    /// `cos(pi t / 2)` with `t` in normalized time.
    Cosine,
    /// `(sg[per-sample loss] + eta)^(-p)`.
    Adaptive { p: f64, eta: f64 },
}

impl Weighting {
    pub const DEFAULT_ADAPTIVE: Weighting = Weighting::Adaptive { p: 1.0, eta: 0.01 };

    /// Weight for one sample given normalized time and its unweighted loss.
    pub fn weight(&self, t_norm: f64, sample_loss: f64) -> f64 {
        match *self {
            Self::None => 1.0,
            Self::Cosine => (std::f64::consts::FRAC_PI_2 * t_norm).cos(),
            Self::Adaptive { p, eta } => (sample_loss + eta).powf(-p),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Cosine => f.write_str("cosine"),
            Self::Adaptive { p, eta } => write!(f, "adaptive:{p}:{eta}"),
        }
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("bad weighting {s:?}"));
        match s {
            "none" => Ok(Self::None),
            "cosine" => Ok(Self::Cosine),
            "adaptive" => Ok(Self::DEFAULT_ADAPTIVE),
            _ => {
                let rest = s.strip_prefix("adaptive:").ok_or_else(bad)?;
                let (p, eta) = rest.split_once(':').ok_or_else(bad)?;
                let p: f64 = p.parse().map_err(|_| bad())?;
                let eta: f64 = eta.parse().map_err(|_| bad())?;
                if !(eta > 0.0) || !p.is_finite() {
                    return Err(bad());
                }
                Ok(Self::Adaptive { p, eta })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub objective: Objective,
    /// `None` uses [`Objective::default_guiding`].
    pub guiding: Option<Guiding>,
    pub jvp: JvpMode,
    /// `None` uses [`Objective::default_weighting`].
    pub weighting: Option<Weighting>,
    /// Guidance scale for the CFG objectives; for iSD-C the upper end of the
    /// sampled training range.
    pub omega: f64,
    pub label_dropout: f64,
    /// Multiply target-loss terms by `A / nu^2`.
    pub ct_weight: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Isd,
            guiding: None,
            jvp: JvpMode::Exact,
            weighting: None,
            omega: 1.0,
            label_dropout: 0.1,
            ct_weight: false,
        }
    }
}

impl LossConfig {
    pub fn with_objective(objective: Objective) -> Self {
        Self { objective, ..Self::default() }
    }

    pub fn guiding(&self) -> Guiding {
        self.guiding.unwrap_or_else(|| self.objective.default_guiding())
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting.unwrap_or_else(|| self.objective.default_weighting())
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.guiding();
        let bad = |msg: String| Err(Error::UnsupportedConfig(msg));
        match self.objective {
            Objective::Cfm if g != Guiding::Conditional => {
                return bad("flow matching regresses onto the conditional velocity only".into())
            }
            Objective::IsdU | Objective::IsdC if g != Guiding::PreCfg => {
                return bad(format!("{} is guided by the pre-cfg velocity", self.objective))
            }
            o if g == Guiding::PreCfg && !matches!(o, Objective::IsdU | Objective::IsdC) => {
                return bad(format!("pre-cfg guidance is only defined for isd-u and isd-c, not {o}"))
            }
            _ => {}
        }
        if !(self.omega >= 1.0) {
            return Err(Error::InvalidArgument(format!("guidance scale must be >= 1, got {}", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::InvalidArgument(format!("label dropout {} outside [0, 1]", self.label_dropout)));
        }
        if let JvpMode::Approx(eps) = self.jvp {
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!("jvp step must be positive, got {eps}")));
            }
        }
        Ok(())
    }
}

/// One training batch. `x`, `z` are row-major `B x d`; times in domain units.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub t: &'a [f64],
    pub s: &'a [f64],
    /// Class labels after dropout (`NULL_LABEL` for dropped rows).
    pub labels: Option<&'a [usize]>,
    /// Per-sample guidance scale fed to an omega-conditioned network.
    pub omega: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    /// Mean of the weighted per-sample total.
    pub total: f64,
    /// Mean unweighted flow-matching term (0 when absent).
    pub cfm: f64,
    /// Mean unweighted distillation term (residual or target; 0 when absent).
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub grad: Option<Vec<f64>>,
}

/// `nu^{-1}(A' x_t - A F)` for one point.
pub fn flow_map(interp: &Interpolant, x_t: &[f64], t: f64, s: f64, f: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_t.len(), f.len())?;
    let b = interp.bridge(t, s)?;
    let nu = interp.nu();
    Ok(x_t.iter().zip(f).map(|(&x, &fv)| (b.a1 * x - b.a * fv) / nu).collect())
}

/// `d/dt f` along `(v, 1, 0)`: `nu^{-1}(A'' x_t + A'(v - F) - A dF)`, elementwise.
pub fn residual_from_parts(b: &BridgeCoeffs, nu: f64, x_t: &[f64], v: &[f64], f: &[f64], df: &[f64]) -> Vec<f64> {
    (0..x_t.len())
        .map(|k| (b.a2 * x_t[k] + b.a1 * (v[k] - f[k]) - b.a * df[k]) / nu)
        .collect()
}

/// `F + nu^{-1}(A'' x_t + A'(v - F) - A dF)`, grouped so that the linear
/// interpolant yields exactly `v - (t - s) dF`.
pub fn target_from_parts(b: &BridgeCoeffs, nu: f64, x_t: &[f64], v: &[f64], f: &[f64], df: &[f64]) -> Vec<f64> {
    let (a, a1, a2) = (b.a / nu, b.a1 / nu, b.a2 / nu);
    (0..x_t.len())
        .map(|k| ((a1 * v[k] + (1.0 - a1) * f[k]) + a2 * x_t[k]) - a * df[k])
        .collect()
}

/// Batched per-row bridge coefficients.
fn bridges(interp: &Interpolant, t: &[f64], s: &[f64]) -> Result<Vec<BridgeCoeffs>> {
    t.iter().zip(s).map(|(&t, &s)| interp.bridge(t, s)).collect()
}

/// Eulerian residual of `field` at `inputs` along the guiding velocity `v`
/// (one row per sample), with an exact JVP.
pub fn eulerian_residual<F: Field + ?Sized>(
    field: &F,
    interp: &Interpolant,
    inputs: &Inputs<'_>,
    v: &[f64],
) -> Result<Vec<f64>> {
    let (f, df) = field.jvp(inputs, &Tangent { dx: v, dt: 1.0, ds: 0.0 })?;
    let d = field.data_dim();
    let bs = bridges(interp, inputs.t, inputs.s)?;
    let nu = interp.nu();
    let mut out = Vec::with_capacity(f.len());
    for (i, b) in bs.iter().enumerate() {
        let r = i * d..(i + 1) * d;
        out.extend(residual_from_parts(b, nu, &inputs.x[r.clone()], &v[r.clone()], &f[r.clone()], &df[r]));
    }
    Ok(out)
}

/// Detached regression target `F_tgt` of `field` along `v`.
pub fn sdr_target(
    net: &FieldNet,
    theta: &[f64],
    interp: &Interpolant,
    inputs: &Inputs<'_>,
    v: &[f64],
    jvp: JvpMode,
) -> Result<Vec<f64>> {
    let (f, df) = match jvp {
        JvpMode::Exact => net.jvp_exact(theta, inputs, &Tangent { dx: v, dt: 1.0, ds: 0.0 })?,
        JvpMode::Approx(eps) => (net.apply(theta, inputs)?, net.jvp_approx(theta, inputs, v, eps)?),
    };
    let d = net.config().data_dim;
    let bs = bridges(interp, inputs.t, inputs.s)?;
    let nu = interp.nu();
    let mut out = Vec::with_capacity(f.len());
    for (i, b) in bs.iter().enumerate() {
        let r = i * d..(i + 1) * d;
        out.extend(target_from_parts(b, nu, &inputs.x[r.clone()], &v[r.clone()], &f[r.clone()], &df[r]));
    }
    Ok(out)
}

/// `F_null + omega (v - F_null)` with `F_null = F(x_t; t, t, null)` detached.
/// At `omega = 1` this returns `v` unchanged.
pub fn pre_cfg_velocity<F: Field + ?Sized>(
    field: &F,
    x_t: &[f64],
    t: &[f64],
    v_cond: &[f64],
    omega: f64,
) -> Result<Vec<f64>> {
    if !(omega >= 1.0) {
        return Err(Error::InvalidArgument(format!("guidance scale must be >= 1, got {omega}")));
    }
    check_dim(x_t.len(), v_cond.len())?;
    if omega == 1.0 {
        return Ok(v_cond.to_vec());
    }
    if field.num_classes().is_none() {
        return Err(Error::UnsupportedConfig("pre-cfg needs a conditional network".into()));
    }
    let nulls = vec![NULL_LABEL; t.len()];
    let f_null = field.eval(&Inputs::new(x_t, t, t).with_labels(&nulls))?;
    Ok(f_null.iter().zip(v_cond).map(|(&fn_, &v)| fn_ + omega * (v - fn_)).collect())
}

/// Everything a loss needs besides the network and batch.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub interp: &'a Interpolant,
    /// Required for oracle guidance.
    pub mixture: Option<&'a GaussianMixture>,
}

/// Loss value and (optionally) its parameter gradient for one batch.
pub fn evaluate_loss(
    net: &FieldNet,
    theta: &[f64],
    cfg: &LossConfig,
    ctx: &LossContext<'_>,
    batch: &LossBatch<'_>,
    want_grad: bool,
) -> Result<LossOutput> {
    cfg.validate()?;
    let d = net.config().data_dim;
    let n = batch.t.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty loss batch".into()));
    }
    check_dim(n * d, batch.x.len())?;
    check_dim(n * d, batch.z.len())?;
    check_dim(n, batch.s.len())?;
    let objective = cfg.objective;
    if objective.needs_labels() && (net.config().num_classes.is_none() || batch.labels.is_none()) {
        return Err(Error::UnsupportedConfig(format!("{objective} needs class labels and a conditional network")));
    }
    if objective == Objective::IsdC && !net.config().omega_channel {
        return Err(Error::UnsupportedConfig("isd-c needs a network with an omega input channel".into()));
    }
    let interp = ctx.interp;
    let nu = interp.nu();
    let scale = 1.0 / n as f64;

    let mut x_t = vec![0.0; n * d];
    let mut v_cond = vec![0.0; n * d];
    for i in 0..n {
        let sch = interp.schedule(batch.t[i])?;
        for k in i * d..(i + 1) * d {
            x_t[k] = sch.alpha * batch.x[k] + sch.sigma * batch.z[k];
            v_cond[k] = sch.dalpha * batch.x[k] + sch.dsigma * batch.z[k];
        }
    }
    let bs = bridges(interp, batch.t, batch.s)?;
    let t_norm: Vec<f64> = batch.t.iter().map(|&t| interp.to_normalized(t)).collect();

    // Flow-matching and guidance passes happen at s = t with omega = 1.
    let ones = vec![1.0; n];
    let mut tt_inputs = Inputs::new(&x_t, batch.t, batch.t);
    let mut ts_inputs = Inputs::new(&x_t, batch.t, batch.s);
    if let Some(l) = batch.labels.filter(|_| net.config().num_classes.is_some()) {
        tt_inputs = tt_inputs.with_labels(l);
        ts_inputs = ts_inputs.with_labels(l);
    }
    if net.config().omega_channel {
        tt_inputs = tt_inputs.with_omega(&ones);
        ts_inputs = ts_inputs.with_omega(batch.omega.unwrap_or(&ones));
    }

    let mut tape = GradTape::new(net, theta);
    let mut cfm = vec![0.0; n];
    let mut g_cfm: Option<(Evaluation, Vec<f64>)> = None;
    if objective.has_cfm_term() {
        let e = tape.eval(&tt_inputs, None)?;
        let target = match objective {
            Objective::IsdT => guided_cfm_target(net, theta, &tt_inputs, &v_cond, cfg.omega)?,
            _ => v_cond.clone(),
        };
        let diff: Vec<f64> = e.value.iter().zip(&target).map(|(f, v)| f - v).collect();
        for i in 0..n {
            cfm[i] = diff[i * d..(i + 1) * d].iter().map(|r| r * r).sum();
        }
        g_cfm = Some((e, diff));
    }

    let shape = objective.shape();
    let mut sd = vec![0.0; n];
    // Adjoint builders for the distillation term: (eval, g_value coefficient, g_tangent coefficient)
    // are materialized below once the weights are known.
    let mut sd_seed: Vec<(Evaluation, Vec<f64>, Option<Vec<f64>>)> = Vec::new();
    if shape != Shape::FlowMatching {
        let v = guide_velocity(net, theta, cfg, ctx, batch, &x_t, &v_cond, &tt_inputs, g_cfm.as_ref().map(|g| &g.0))?;
        match shape {
            Shape::Residual => {
                let (e, f, df, fd_pair) = eval_with_derivative(&mut tape, net, theta, &ts_inputs, &v, cfg.jvp, true)?;
                let mut g_f = vec![0.0; n * d];
                let mut g_df = vec![0.0; n * d];
                for (i, b) in bs.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    let res = residual_from_parts(b, nu, &x_t[r.clone()], &v[r.clone()], &f[r.clone()], &df[r.clone()]);
                    sd[i] = res.iter().map(|x| x * x).sum();
                    for (k, rk) in r.zip(&res) {
                        g_f[k] = -2.0 * b.a1 / nu * rk;
                        g_df[k] = -2.0 * b.a / nu * rk;
                    }
                }
                push_derivative_seeds(&mut sd_seed, e, g_f, g_df, fd_pair);
            }
            Shape::SpatialStopResidual => {
                let zeros = vec![0.0; n * d];
                let (e, f, dt_f, fd_pair) =
                    eval_time_derivative(&mut tape, net, theta, &ts_inputs, &zeros, cfg.jvp)?;
                let spatial = match cfg.jvp {
                    JvpMode::Exact => net.jvp_exact(theta, &ts_inputs, &Tangent { dx: &v, dt: 0.0, ds: 0.0 })?.1,
                    JvpMode::Approx(eps) => spatial_difference(net, theta, &ts_inputs, &v, eps)?,
                };
                let mut g_f = vec![0.0; n * d];
                let mut g_df = vec![0.0; n * d];
                for (i, b) in bs.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    let df: Vec<f64> = r.clone().map(|k| dt_f[k] + spatial[k]).collect();
                    let res = residual_from_parts(b, nu, &x_t[r.clone()], &v[r.clone()], &f[r.clone()], &df);
                    sd[i] = res.iter().map(|x| x * x).sum();
                    for (k, rk) in r.zip(&res) {
                        g_f[k] = -2.0 * b.a1 / nu * rk;
                        g_df[k] = -2.0 * b.a / nu * rk;
                    }
                }
                push_derivative_seeds(&mut sd_seed, e, g_f, g_df, fd_pair);
            }
            Shape::Target => {
                let (e, f, df, _) = eval_with_derivative(&mut tape, net, theta, &ts_inputs, &v, cfg.jvp, false)?;
                let mut g_f = vec![0.0; n * d];
                for (i, b) in bs.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    let tgt = target_from_parts(b, nu, &x_t[r.clone()], &v[r.clone()], &f[r.clone()], &df[r.clone()]);
                    let ct_w = if cfg.ct_weight { b.a / (nu * nu) } else { 1.0 };
                    let mut loss = 0.0;
                    for (k, tk) in r.zip(&tgt) {
                        let diff = f[k] - tk;
                        loss += diff * diff;
                        g_f[k] = 2.0 * ct_w * diff;
                    }
                    sd[i] = ct_w * loss;
                }
                sd_seed.push((e, g_f, None));
            }
            Shape::FlowMatching => unreachable!(),
        }
    }

    let weights: Vec<f64> = (0..n).map(|i| cfg.weighting().weight(t_norm[i], cfm[i] + sd[i])).collect();
    let total = (0..n).map(|i| weights[i] * (cfm[i] + sd[i])).sum::<f64>() * scale;
    let terms = LossTerms {
        total,
        cfm: cfm.iter().sum::<f64>() * scale,
        sd: sd.iter().sum::<f64>() * scale,
    };
    if !want_grad {
        return Ok(LossOutput { terms, grad: None });
    }
    let row_scale = |g: &mut [f64]| {
        for (i, row) in g.chunks_exact_mut(d).enumerate() {
            let w = weights[i] * scale;
            row.iter_mut().for_each(|x| *x *= w);
        }
    };
    if let Some((e, mut diff)) = g_cfm {
        diff.iter_mut().for_each(|x| *x *= 2.0);
        row_scale(&mut diff);
        tape.seed(e.id, Some(&diff), None)?;
    }
    for (e, mut g_value, g_tangent) in sd_seed {
        row_scale(&mut g_value);
        match g_tangent {
            Some(mut g_t) => {
                row_scale(&mut g_t);
                tape.seed(e.id, Some(&g_value), Some(&g_t))?;
            }
            None => tape.seed(e.id, Some(&g_value), None)?,
        }
    }
    Ok(LossOutput { terms, grad: Some(tape.backward()) })
}

/// Guided flow-matching target: conditional rows use `F_null + omega (v - F_null)`,
/// rows whose label was dropped keep `v`.
fn guided_cfm_target(net: &FieldNet, theta: &[f64], tt: &Inputs<'_>, v_cond: &[f64], omega: f64) -> Result<Vec<f64>> {
    let mut guided = pre_cfg_velocity(&net.bind(theta), tt.x, tt.t, v_cond, omega)?;
    let d = net.config().data_dim;
    if let Some(labels) = tt.labels {
        for (i, &c) in labels.iter().enumerate() {
            if c == NULL_LABEL {
                guided[i * d..(i + 1) * d].copy_from_slice(&v_cond[i * d..(i + 1) * d]);
            }
        }
    }
    Ok(guided)
}

#[allow(clippy::too_many_arguments)]
fn guide_velocity(
    net: &FieldNet,
    theta: &[f64],
    cfg: &LossConfig,
    ctx: &LossContext<'_>,
    batch: &LossBatch<'_>,
    x_t: &[f64],
    v_cond: &[f64],
    tt: &Inputs<'_>,
    cfm_eval: Option<&Evaluation>,
) -> Result<Vec<f64>> {
    let d = net.config().data_dim;
    match cfg.guiding() {
        Guiding::Conditional => Ok(v_cond.to_vec()),
        Guiding::OracleMarginal => {
            let mixture = ctx
                .mixture
                .ok_or_else(|| Error::UnsupportedConfig("oracle guidance needs the data mixture".into()))?;
            let mut out = vec![0.0; x_t.len()];
            mixture.marginal_velocity_batch(ctx.interp, x_t, batch.t, &mut out)?;
            Ok(out)
        }
        Guiding::SelfMarginal => match cfm_eval {
            Some(e) => Ok(e.value.clone()),
            None => net.apply(theta, tt),
        },
        Guiding::BatchMarginal => {
            let mut out = vec![0.0; x_t.len()];
            let mut logits = Vec::new();
            for i in 0..batch.t.len() {
                batch_marginal_velocity_into(
                    ctx.interp,
                    batch.x,
                    &x_t[i * d..(i + 1) * d],
                    batch.t[i],
                    &mut logits,
                    &mut out[i * d..(i + 1) * d],
                )?;
            }
            Ok(out)
        }
        Guiding::PreCfg => {
            // Both passes at omega = 1; the per-row scale is the training omega.
            let n = batch.t.len();
            let nulls = vec![NULL_LABEL; n];
            let f_c = match cfm_eval {
                Some(e) => e.value.clone(),
                None => net.apply(theta, tt)?,
            };
            let f_null = net.apply(theta, &Inputs { labels: Some(&nulls), ..*tt })?;
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let w = match (cfg.objective, batch.omega) {
                    (Objective::IsdC, Some(o)) => o[i],
                    _ => cfg.omega,
                };
                for k in i * d..(i + 1) * d {
                    out[k] = f_null[k] + w * (f_c[k] - f_null[k]);
                }
            }
            Ok(out)
        }
    }
}

/// Finite-difference pair recorded on the tape: `(plus, minus, eps)`.
type FdPair = Option<(Evaluation, Evaluation, f64)>;

/// Evaluates `F` and `dF/dt` along `(v, 1, 0)` at `inputs`. With `differentiable`
/// the derivative is recorded on the tape (tangent rows or a recorded
/// difference pair); otherwise it is a constant.
fn eval_with_derivative(
    tape: &mut GradTape<'_>,
    net: &FieldNet,
    theta: &[f64],
    inputs: &Inputs<'_>,
    v: &[f64],
    mode: JvpMode,
    differentiable: bool,
) -> Result<(Evaluation, Vec<f64>, Vec<f64>, FdPair)> {
    match mode {
        // Without a tangent seed the backward pass ignores the tangent rows,
        // so one recorded pass serves both cases.
        JvpMode::Exact => {
            let e = tape.eval(inputs, Some(&Tangent { dx: v, dt: 1.0, ds: 0.0 }))?;
            let (f, df) = (e.value.clone(), e.tangent.clone().expect("tangent requested"));
            Ok((e, f, df, None))
        }
        JvpMode::Approx(eps) => {
            let e = tape.eval(inputs, None)?;
            let f = e.value.clone();
            if differentiable {
                let (plus, minus) = displaced_pair(inputs, v, eps)?;
                let ep = tape.eval(&plus.view(inputs), None)?;
                let em = tape.eval(&minus.view(inputs), None)?;
                let df = central(&ep.value, &em.value, eps);
                Ok((e, f, df, Some((ep, em, eps))))
            } else {
                let df = net.jvp_approx(theta, inputs, v, eps)?;
                Ok((e, f, df, None))
            }
        }
    }
}

/// Like [`eval_with_derivative`] for the pure time derivative `(0, 1, 0)`.
fn eval_time_derivative(
    tape: &mut GradTape<'_>,
    net: &FieldNet,
    theta: &[f64],
    inputs: &Inputs<'_>,
    zeros: &[f64],
    mode: JvpMode,
) -> Result<(Evaluation, Vec<f64>, Vec<f64>, FdPair)> {
    eval_with_derivative(tape, net, theta, inputs, zeros, mode, true)
}

/// `[F(x + e v, t, s) - F(x - e v, t, s)] / (2 e)`, not recorded.
fn spatial_difference(net: &FieldNet, theta: &[f64], inputs: &Inputs<'_>, v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let xp: Vec<f64> = inputs.x.iter().zip(v).map(|(x, v)| x + eps * v).collect();
    let xm: Vec<f64> = inputs.x.iter().zip(v).map(|(x, v)| x - eps * v).collect();
    let fp = net.apply(theta, &Inputs { x: &xp, ..*inputs })?;
    let fm = net.apply(theta, &Inputs { x: &xm, ..*inputs })?;
    Ok(central(&fp, &fm, eps))
}

fn central(plus: &[f64], minus: &[f64], eps: f64) -> Vec<f64> {
    plus.iter().zip(minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
}

fn push_derivative_seeds(
    seeds: &mut Vec<(Evaluation, Vec<f64>, Option<Vec<f64>>)>,
    e: Evaluation,
    g_f: Vec<f64>,
    g_df: Vec<f64>,
    fd_pair: FdPair,
) {
    match fd_pair {
        None => seeds.push((e, g_f, Some(g_df))),
        Some((ep, em, eps)) => {
            let gp: Vec<f64> = g_df.iter().map(|g| g / (2.0 * eps)).collect();
            let gm: Vec<f64> = gp.iter().map(|g| -g).collect();
            seeds.push((e, g_f, None));
            seeds.push((ep, gp, None));
            seeds.push((em, gm, None));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldnet::FieldNetConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::FRAC_PI_2;

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn flow_map_examples() {
        let lin = Interpolant::linear();
        assert_eq!(flow_map(&lin, &[0.3, -1.2], 0.6, 0.6, &[5.0, 7.0]).unwrap(), vec![0.3, -1.2]);
        let out = flow_map(&lin, &[1.0, 2.0], 0.8, 0.3, &[0.4, -2.0]).unwrap();
        assert!((out[0] - (1.0 - 0.5 * 0.4)).abs() < 1e-15 && (out[1] - (2.0 + 0.5 * 2.0)).abs() < 1e-15);
        let trig = Interpolant::trigonometric();
        let out = flow_map(&trig, &[3.0], FRAC_PI_2, 0.0, &[0.25]).unwrap();
        assert!((out[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn residual_and_target_examples() {
        let lin = Interpolant::linear();
        // Constant F: residual v - F.
        let b = lin.bridge(0.7, 0.2).unwrap();
        let r = residual_from_parts(&b, 1.0, &[0.4], &[1.5], &[0.5], &[0.0]);
        assert!((r[0] - 1.0).abs() < 1e-15);
        // s = t: residual v - F and target v.
        let b = lin.bridge(0.4, 0.4).unwrap();
        assert_eq!(residual_from_parts(&b, 1.0, &[2.0], &[1.0], &[3.0], &[9.0]), vec![-2.0]);
        assert_eq!(target_from_parts(&b, 1.0, &[2.0], &[1.0], &[3.0], &[9.0]), vec![1.0]);
        // Scalar stub: F = 2, v = 1, dF/dt = 2, t - s = 0.25.
        let b = lin.bridge(0.75, 0.5).unwrap();
        assert_eq!(target_from_parts(&b, 1.0, &[0.3], &[1.0], &[2.0], &[2.0]), vec![0.5]);
    }

    #[test]
    fn linear_target_is_bitwise_mean_velocity_target() {
        let lin = Interpolant::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let s = t * rng.gen::<f64>();
            let b = lin.bridge(t, s).unwrap();
            let x = normals(&mut rng, 2);
            let v = normals(&mut rng, 2);
            let f = normals(&mut rng, 2);
            let df = normals(&mut rng, 2);
            let got = target_from_parts(&b, lin.nu(), &x, &v, &f, &df);
            for k in 0..2 {
                assert_eq!(got[k].to_bits(), (v[k] - (t - s) * df[k]).to_bits());
            }
        }
    }

    #[test]
    fn pre_cfg_identities() {
        let net = FieldNet::new(FieldNetConfig { hidden: 8, depth: 3, num_classes: Some(3), ..Default::default() })
            .unwrap();
        let theta = net.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let bound = net.bind(&theta);
        let x = [0.1, 0.2, -0.3, 0.5];
        let t = [0.4, 0.9];
        let v = [1.5, -0.5, 0.25, 2.0];
        assert_eq!(pre_cfg_velocity(&bound, &x, &t, &v, 1.0).unwrap(), v.to_vec());
        // Zero-initialized output layer: F_null = 0, so the target is omega v.
        let out = pre_cfg_velocity(&bound, &x, &t, &v, 5.0).unwrap();
        for k in 0..4 {
            assert_eq!(out[k], 5.0 * v[k]);
        }
        assert!(pre_cfg_velocity(&bound, &x, &t, &v, 0.5).is_err());
    }

    #[test]
    fn config_strings_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
        }
        for w in [Weighting::None, Weighting::Cosine, Weighting::Adaptive { p: 0.5, eta: 0.001 }] {
            assert_eq!(w.to_string().parse::<Weighting>().unwrap(), w);
        }
        for j in [JvpMode::Exact, JvpMode::Approx(0.01)] {
            assert_eq!(j.to_string().parse::<JvpMode>().unwrap(), j);
        }
        assert_eq!("approx".parse::<JvpMode>().unwrap(), JvpMode::Approx(0.005));
        assert!("approx:-1".parse::<JvpMode>().is_err());
        assert!("adaptive:1".parse::<Weighting>().is_err());
        assert!("meanflow".parse::<Objective>().is_err());
    }

    #[test]
    fn weighting_examples() {
        assert_eq!(Weighting::Cosine.weight(0.0, 3.0), 1.0);
        assert_eq!(Weighting::DEFAULT_ADAPTIVE.weight(0.3, 0.99), 1.0);
        assert!(Weighting::Cosine.weight(1.0, 0.0).abs() < 1e-15);
        assert_eq!(LossConfig::default().weighting(), Weighting::DEFAULT_ADAPTIVE);
        assert_eq!(LossConfig::with_objective(Objective::IsdC).weighting(), Weighting::DEFAULT_ADAPTIVE);
        assert_eq!(LossConfig::with_objective(Objective::SdSg).weighting(), Weighting::None);
        let mut cfg = LossConfig::with_objective(Objective::Ct);
        cfg.weighting = Some(Weighting::Cosine);
        assert_eq!(cfg.weighting(), Weighting::Cosine);
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::with_objective(Objective::Cfm);
        cfg.guiding = Some(Guiding::OracleMarginal);
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::with_objective(Objective::Isd);
        cfg.guiding = Some(Guiding::PreCfg);
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::with_objective(Objective::IsdT);
        cfg.omega = 0.5;
        assert!(cfg.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    struct Fixture {
        net: FieldNet,
        theta: Vec<f64>,
        x: Vec<f64>,
        z: Vec<f64>,
        t: Vec<f64>,
        s: Vec<f64>,
        labels: Vec<usize>,
        omega: Vec<f64>,
    }

    fn fixture(seed: u64, n: usize, conditional: bool) -> Fixture {
        let cfg = FieldNetConfig {
            hidden: 6,
            depth: 3,
            num_freqs: 2,
            num_classes: conditional.then_some(3),
            label_dim: 3,
            omega_channel: conditional,
            ..Default::default()
        };
        let net = FieldNet::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = normals(&mut rng, net.n_params()).iter().map(|x| 0.5 * x).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s = t.iter().map(|&t| t * rng.gen::<f64>()).collect();
        let labels = (0..n).map(|i| if i % 4 == 3 { NULL_LABEL } else { i % 3 }).collect();
        let omega = (0..n).map(|_| rng.gen_range(1.0..3.0)).collect();
        Fixture { x: normals(&mut rng, 2 * n), z: normals(&mut rng, 2 * n), t, s, labels, omega, net, theta }
    }

    fn batch(f: &Fixture) -> LossBatch<'_> {
        let conditional = f.net.config().num_classes.is_some();
        LossBatch {
            x: &f.x,
            z: &f.z,
            t: &f.t,
            s: &f.s,
            labels: conditional.then_some(&f.labels[..]),
            omega: conditional.then_some(&f.omega[..]),
        }
    }

    /// Directional derivative of the loss *value* must match the gradient for
    /// losses without stop-gradient.
    #[test]
    fn residual_losses_have_consistent_gradients() {
        let mixture = GaussianMixture::default_ring();
        let lin = Interpolant::linear();
        let trig = Interpolant::trigonometric();
        for (objective, jvp, interp) in [
            (Objective::Cfm, JvpMode::Exact, &lin),
            (Objective::Ed, JvpMode::Exact, &lin),
            (Objective::Dt, JvpMode::Exact, &trig),
            (Objective::Dt, JvpMode::Approx(0.01), &lin),
        ] {
            let fx = fixture(3, 6, false);
            let mut t = fx.t.clone();
            let mut s = fx.s.clone();
            if interp.domain_end() != 1.0 {
                t.iter_mut().for_each(|v| *v *= interp.domain_end());
                s.iter_mut().for_each(|v| *v *= interp.domain_end());
            }
            let mut cfg = LossConfig::with_objective(objective);
            cfg.jvp = jvp;
            cfg.weighting = Some(Weighting::Cosine);
            let ctx = LossContext { interp, mixture: Some(&mixture) };
            let b = LossBatch { t: &t, s: &s, ..batch(&fx) };
            let out = evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &b, true).unwrap();
            let grad = out.grad.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let u = normals(&mut rng, fx.net.n_params());
            let h = 1e-5;
            let at = |sign: f64| {
                let th: Vec<f64> = fx.theta.iter().zip(&u).map(|(a, b)| a + sign * h * b).collect();
                evaluate_loss(&fx.net, &th, &cfg, &ctx, &b, false).unwrap().terms.total
            };
            let fd = (at(1.0) - at(-1.0)) / (2.0 * h);
            let exact: f64 = grad.iter().zip(&u).map(|(a, b)| a * b).sum();
            assert!((fd - exact).abs() < 1e-5 * exact.abs().max(1.0), "{objective} {jvp}: {fd} vs {exact}");
        }
    }

    /// Target losses: gradient equals `2 J_F^T (F - F_tgt)` with the target frozen,
    /// checked by differencing `F` alone.
    #[test]
    fn target_loss_gradient_is_frozen_target_regression() {
        let fx = fixture(5, 5, false);
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        let mut cfg = LossConfig::with_objective(Objective::Ct);
        cfg.weighting = Some(Weighting::None);
        let b = batch(&fx);
        let grad = evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &b, true).unwrap().grad.unwrap();

        let sch: Vec<_> = fx.t.iter().map(|&t| lin.schedule(t).unwrap()).collect();
        let mut x_t = vec![0.0; 10];
        let mut v = vec![0.0; 10];
        for i in 0..5 {
            for k in 2 * i..2 * i + 2 {
                x_t[k] = sch[i].alpha * fx.x[k] + sch[i].sigma * fx.z[k];
                v[k] = sch[i].dalpha * fx.x[k] + sch[i].dsigma * fx.z[k];
            }
        }
        let inputs = Inputs::new(&x_t, &fx.t, &fx.s);
        let target = sdr_target(&fx.net, &fx.theta, &lin, &inputs, &v, JvpMode::Exact).unwrap();
        let f = fx.net.apply(&fx.theta, &inputs).unwrap();
        let r: Vec<f64> = f.iter().zip(&target).map(|(f, t)| 2.0 * (f - t) / 5.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = normals(&mut rng, fx.net.n_params());
        let h = 1e-6;
        let shifted = |sign: f64| {
            let th: Vec<f64> = fx.theta.iter().zip(&u).map(|(a, b)| a + sign * h * b).collect();
            fx.net.apply(&th, &inputs).unwrap()
        };
        let (fp, fm) = (shifted(1.0), shifted(-1.0));
        let jt_r: f64 = (0..10).map(|k| (fp[k] - fm[k]) / (2.0 * h) * r[k]).sum();
        let exact: f64 = grad.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!((jt_r - exact).abs() < 1e-7 * exact.abs().max(1.0), "{jt_r} vs {exact}");
    }

    #[test]
    fn target_gradient_matches_explicit_jacobian_transpose() {
        // Independent route: build J_F column by column from parameter
        // perturbations of F alone, then form 2 J^T (F - F_tgt) / B.
        let fx = fixture(16, 3, false);
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        let cfg = LossConfig { weighting: Some(Weighting::None), ..LossConfig::with_objective(Objective::Sdr) };
        let b = LossBatch { x: &fx.x, z: &fx.z, t: &fx.t, s: &fx.s, labels: None, omega: None };
        let grad = evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &b, true).unwrap().grad.unwrap();

        let mut x_t = vec![0.0; 6];
        for i in 0..3 {
            let sch = lin.schedule(fx.t[i]).unwrap();
            for k in 2 * i..2 * i + 2 {
                x_t[k] = sch.alpha * fx.x[k] + sch.sigma * fx.z[k];
            }
        }
        let tt = Inputs::new(&x_t, &fx.t, &fx.t);
        let v = fx.net.apply(&fx.theta, &tt).unwrap();
        let inputs = Inputs::new(&x_t, &fx.t, &fx.s);
        let target = sdr_target(&fx.net, &fx.theta, &lin, &inputs, &v, JvpMode::Exact).unwrap();
        let f = fx.net.apply(&fx.theta, &inputs).unwrap();
        let h = 1e-6;
        let mut explicit = vec![0.0; fx.theta.len()];
        for (p, out) in explicit.iter_mut().enumerate() {
            let mut tp = fx.theta.clone();
            let mut tm = fx.theta.clone();
            tp[p] += h;
            tm[p] -= h;
            let (fp, fm) = (fx.net.apply(&tp, &inputs).unwrap(), fx.net.apply(&tm, &inputs).unwrap());
            *out = (0..6).map(|k| (fp[k] - fm[k]) / (2.0 * h) * 2.0 * (f[k] - target[k]) / 3.0).sum();
        }
        let dot: f64 = grad.iter().zip(&explicit).map(|(a, b)| a * b).sum();
        let na = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = explicit.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 1.0 - 1e-10, "cosine {}", dot / (na * nb));
    }

    #[test]
    fn cfm_with_zero_field_is_mean_squared_velocity() {
        let net = FieldNet::new(FieldNetConfig { hidden: 8, depth: 2, ..Default::default() }).unwrap();
        let theta = net.init_params(&mut ChaCha8Rng::seed_from_u64(17));
        let fx = fixture(17, 6, false);
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        let cfg = LossConfig { weighting: Some(Weighting::None), ..LossConfig::with_objective(Objective::Cfm) };
        let b = LossBatch { labels: None, omega: None, ..batch(&fx) };
        let got = evaluate_loss(&net, &theta, &cfg, &ctx, &b, false).unwrap().terms;
        let want = (0..12).map(|k| (fx.z[k] - fx.x[k]).powi(2)).sum::<f64>() / 6.0;
        assert!((got.cfm - want).abs() < 1e-12 && (got.total - want).abs() < 1e-12);
    }

    #[test]
    fn conditional_cross_term_vanishes_with_batch_size() {
        // <F, r_cond> - <F, r_oracle> averages to zero over x | x_t.
        let net = FieldNet::new(FieldNetConfig { hidden: 16, depth: 3, num_freqs: 4, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let theta: Vec<f64> = normals(&mut rng, net.n_params()).iter().map(|x| 0.3 * x).collect();
        let bound = net.bind(&theta);
        let mixture = GaussianMixture::default_ring();
        let lin = Interpolant::linear();
        let gap = |n: usize, rng: &mut ChaCha8Rng| {
            let (x, _) = mixture.sample(rng, n);
            let z = normals(rng, 2 * n);
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let s: Vec<f64> = t.iter().map(|&t| t * rng.gen::<f64>()).collect();
            let mut x_t = vec![0.0; 2 * n];
            let mut v = vec![0.0; 2 * n];
            for i in 0..n {
                for k in 2 * i..2 * i + 2 {
                    x_t[k] = (1.0 - t[i]) * x[k] + t[i] * z[k];
                    v[k] = z[k] - x[k];
                }
            }
            let mut v_star = vec![0.0; 2 * n];
            mixture.marginal_velocity_batch(&lin, &x_t, &t, &mut v_star).unwrap();
            let inputs = Inputs::new(&x_t, &t, &s);
            let f = bound.eval(&inputs).unwrap();
            let rc = eulerian_residual(&bound, &lin, &inputs, &v).unwrap();
            let ro = eulerian_residual(&bound, &lin, &inputs, &v_star).unwrap();
            let diff: f64 = (0..2 * n).map(|k| f[k] * (rc[k] - ro[k])).sum();
            (diff / n as f64).abs()
        };
        let mean_gap = |n: usize, rng: &mut ChaCha8Rng| (0..4).map(|_| gap(n, rng)).sum::<f64>() / 4.0;
        let g_small = mean_gap(256, &mut rng);
        let g_mid = mean_gap(4096, &mut rng);
        let g_large = mean_gap(65536, &mut rng);
        assert!(g_mid < g_small && g_large < g_mid, "{g_small} {g_mid} {g_large}");
    }

    #[test]
    fn self_guided_objectives_run_and_agree_on_value() {
        let mixture = GaussianMixture::default_ring();
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: Some(&mixture) };
        let fx = fixture(7, 8, false);
        let b = batch(&fx);
        let value = |o: Objective| {
            let mut cfg = LossConfig::with_objective(o);
            cfg.weighting = Some(Weighting::None);
            evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &b, true).unwrap().terms
        };
        let sd = value(Objective::Sd);
        let sdsg = value(Objective::SdSg);
        let isd = value(Objective::Isd);
        // Same value, different gradients: the residual squared equals the target gap.
        assert!((sd.sd - sdsg.sd).abs() < 1e-12 && (sd.sd - isd.sd).abs() < 1e-12);
        assert_eq!(sd.cfm, isd.cfm);
        let cd = value(Objective::Cd);
        let ed = value(Objective::Ed);
        assert!((cd.sd - ed.sd).abs() < 1e-12);
    }

    #[test]
    fn spatial_stop_gradient_drops_only_spatial_term() {
        // With v = 0 the spatial part vanishes, so SD and SD-sg gradients coincide.
        let fx = fixture(8, 4, false);
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        let zeros = vec![0.0; 8];
        let b = LossBatch { x: &zeros, z: &zeros, ..batch(&fx) };
        let grad = |o: Objective| {
            let mut cfg = LossConfig::with_objective(o);
            cfg.guiding = Some(Guiding::Conditional);
            cfg.weighting = Some(Weighting::None);
            evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &b, true).unwrap().grad.unwrap()
        };
        let (g1, g2) = (grad(Objective::Sd), grad(Objective::SdSg));
        for (a, c) in g1.iter().zip(&g2) {
            assert!((a - c).abs() < 1e-12);
        }
        let fx = fixture(9, 4, false);
        let b = batch(&fx);
        let (g1, g2) = (grad_for(&fx, &b, Objective::Sd, &ctx), grad_for(&fx, &b, Objective::SdSg, &ctx));
        assert!(g1.iter().zip(&g2).any(|(a, c)| (a - c).abs() > 1e-8));
    }

    fn grad_for(fx: &Fixture, b: &LossBatch<'_>, o: Objective, ctx: &LossContext<'_>) -> Vec<f64> {
        let mut cfg = LossConfig::with_objective(o);
        cfg.weighting = Some(Weighting::None);
        evaluate_loss(&fx.net, &fx.theta, &cfg, ctx, b, true).unwrap().grad.unwrap()
    }

    #[test]
    fn losses_approach_flow_matching_as_s_approaches_t() {
        let fx = fixture(10, 6, false);
        let lin = Interpolant::linear();
        let mixture = GaussianMixture::default_ring();
        let ctx = LossContext { interp: &lin, mixture: Some(&mixture) };
        let mut cfm_cfg = LossConfig::with_objective(Objective::Cfm);
        cfm_cfg.weighting = Some(Weighting::None);
        let cfm = evaluate_loss(&fx.net, &fx.theta, &cfm_cfg, &ctx, &batch(&fx), false).unwrap().terms.cfm;
        for o in [Objective::Dt, Objective::Ct] {
            let mut cfg = LossConfig::with_objective(o);
            cfg.weighting = Some(Weighting::None);
            let mut prev = f64::INFINITY;
            for k in 1..6 {
                let s: Vec<f64> = fx.t.iter().map(|t| t - 10f64.powi(-k)).collect();
                let b = LossBatch { s: &s, ..batch(&fx) };
                let gap = (evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &b, false).unwrap().terms.sd - cfm).abs();
                assert!(gap < prev, "{o} k={k}: {gap} >= {prev}");
                prev = gap;
            }
            assert!(prev < 1e-3 * cfm.max(1.0));
        }
    }

    #[test]
    fn detached_target_branch_does_not_move_gradient() {
        // The target loss gradient depends on the target only through its value:
        // recomputing it from a different JVP mode that yields the same value
        // up to O(eps^2) leaves the gradient close, while the exact residual
        // gradient differs.
        let fx = fixture(11, 5, false);
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        let run = |jvp: JvpMode| {
            let mut cfg = LossConfig::with_objective(Objective::Ct);
            cfg.weighting = Some(Weighting::None);
            cfg.jvp = jvp;
            evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &batch(&fx), true).unwrap().grad.unwrap()
        };
        let exact = run(JvpMode::Exact);
        let approx = run(JvpMode::Approx(1e-4));
        let scale = exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (a, b) in exact.iter().zip(&approx) {
            assert!((a - b).abs() < 1e-6 * scale);
        }
    }

    #[test]
    fn cfg_objectives_validate_network_shape() {
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        let fx = fixture(12, 4, false);
        for o in [Objective::IsdT, Objective::IsdU, Objective::IsdC] {
            let cfg = LossConfig { omega: 2.0, ..LossConfig::with_objective(o) };
            assert!(matches!(
                evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &batch(&fx), false),
                Err(Error::UnsupportedConfig(_))
            ));
        }
        let fx = fixture(13, 8, true);
        for o in [Objective::IsdT, Objective::IsdU, Objective::IsdC] {
            let cfg = LossConfig { omega: 2.0, ..LossConfig::with_objective(o) };
            let out = evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &batch(&fx), true).unwrap();
            assert!(out.terms.total.is_finite() && out.grad.unwrap().iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn isd_t_with_unit_scale_is_isd() {
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        let fx = fixture(14, 8, true);
        let run = |o: Objective| {
            let cfg = LossConfig { omega: 1.0, ..LossConfig::with_objective(o) };
            evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &batch(&fx), true).unwrap()
        };
        let (a, b) = (run(Objective::IsdT), run(Objective::Isd));
        assert_eq!(a.terms, b.terms);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn batch_guidance_requires_linear_interpolant() {
        let fx = fixture(15, 4, false);
        let trig = Interpolant::trigonometric();
        let ctx = LossContext { interp: &trig, mixture: None };
        let cfg = LossConfig { guiding: Some(Guiding::BatchMarginal), ..LossConfig::with_objective(Objective::Isd) };
        assert!(matches!(
            evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &batch(&fx), false),
            Err(Error::UnsupportedConfig(_))
        ));
        let lin = Interpolant::linear();
        let ctx = LossContext { interp: &lin, mixture: None };
        assert!(evaluate_loss(&fx.net, &fx.theta, &cfg, &ctx, &batch(&fx), true).is_ok());
    }
}
