//! Training loop: time and label sampling, Adam, EMA, metric logging and
//! resumable state.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::diagnostics::{ed_proxy, energy_distance, landscape_probe, LandscapeReport, LandscapeSettings};
use crate::error::{check_dim, Error, Result};
use crate::fieldnet::{read_exact, read_f64s, read_u32, read_u64, write_f64s, FieldNet, FieldNetConfig, NULL_LABEL};
use crate::interpolant::Interpolant;
use crate::mixture::GaussianMixture;
use crate::objectives::{evaluate_loss, LossBatch, LossConfig, LossContext, Objective};
use crate::sampler::{few_step_sample, Conditioning, SampleSchedule};

/// `Beta(a, b)` in normalized time for the two draws that become `(t, s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDist {
    pub a: f64,
    pub b: f64,
}

impl Default for TimeDist {
    fn default() -> Self {
        Self { a: 0.8, b: 1.0 }
    }
}

impl TimeDist {
    fn beta(&self) -> Result<Beta<f64>> {
        Beta::new(self.a, self.b)
            .map_err(|e| Error::InvalidArgument(format!("bad Beta({}, {}): {e}", self.a, self.b)))
    }
}

/// Orders two normalized draws into `(t, s)` with `t >= s`, keeps `t` away from
/// the singular data end, and maps both into the interpolant's domain.
pub fn order_times(interp: &Interpolant, u1: f64, u2: f64) -> (f64, f64) {
    let t = u1.max(u2).max(crate::T_MIN);
    let s = u1.min(u2);
    (interp.to_domain(t), interp.to_domain(s))
}

/// One `(t, s)` pair, `t >= s`, in domain units.
pub fn sample_times<R: Rng + ?Sized>(rng: &mut R, dist: &TimeDist, interp: &Interpolant) -> Result<(f64, f64)> {
    let beta = dist.beta()?;
    let u1 = beta.sample(rng);
    let u2 = beta.sample(rng);
    Ok(order_times(interp, u1, u2))
}

/// How `s` is chosen after sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SMode {
    /// Independent draw, ordered below `t`.
    #[default]
    Relaxed,
    /// Always the data end: the one-step map trained only for `s = 0`.
    Zero,
}

impl fmt::Display for SMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relaxed => "relaxed",
            Self::Zero => "zero",
        })
    }
}

impl FromStr for SMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relaxed" => Ok(Self::Relaxed),
            "zero" => Ok(Self::Zero),
            other => Err(Error::InvalidArgument(format!("unknown s mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub time_dist: TimeDist,
    pub s_mode: SMode,
    pub seed: u64,
    /// Steps between metric evaluations; 0 disables them.
    pub eval_every: u64,
    /// Monte Carlo draws for the Eulerian-residual proxy.
    pub eval_proxy_samples: usize,
    /// Points generated and compared against held-out data.
    pub eval_points: usize,
    /// Sampler steps used for the distribution metric.
    pub eval_sample_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            batch_size: 2048,
            steps: 5000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            time_dist: TimeDist::default(),
            s_mode: SMode::Relaxed,
            seed: 0,
            eval_every: 250,
            eval_proxy_samples: 4096,
            eval_points: 1000,
            eval_sample_steps: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("ema decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps >= 0.0) {
            return bad(format!("adam eps must be non-negative, got {}", self.adam_eps));
        }
        self.time_dist.beta()?;
        if self.eval_every > 0 && (self.eval_proxy_samples == 0 || self.eval_points < 2 || self.eval_sample_steps == 0) {
            return bad("evaluation needs proxy samples, at least two points and one sampler step".into());
        }
        Ok(())
    }
}

/// Parameters, EMA, Adam moments, step counter and the batch RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: Vec<f64>,
    pub ema: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

const STATE_MAGIC: &[u8; 4] = b"FMTS";
const STATE_VERSION: u32 = 1;

impl TrainState {
    /// Fresh state: parameters initialized from `seed`, which then keeps
    /// driving batch draws.
    pub fn new(net: &FieldNet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = net.init_params(&mut rng);
        let n = theta.len();
        Self { ema: theta.clone(), theta, m: vec![0.0; n], v: vec![0.0; n], step: 0, rng }
    }

    /// Parameters used for evaluation: the EMA when it is active.
    pub fn eval_params(&self, ema_decay: f64) -> &[f64] {
        if ema_decay > 0.0 {
            &self.ema
        } else {
            &self.theta
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        w.write_all(&(self.theta.len() as u64).to_le_bytes())?;
        for xs in [&self.theta, &self.ema, &self.m, &self.v] {
            write_f64s(w, xs)?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Checkpoint("not a training state file".into()));
        }
        let version = read_u32(r)?;
        if version != STATE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported state version {version}")));
        }
        let n = read_u64(r)? as usize;
        if n > (1 << 32) {
            return Err(Error::Checkpoint(format!("implausible parameter count {n}")));
        }
        let theta = read_f64s(r, n)?;
        let ema = read_f64s(r, n)?;
        let m = read_f64s(r, n)?;
        let v = read_f64s(r, n)?;
        let step = read_u64(r)?;
        let mut seed = [0u8; 32];
        read_exact(r, &mut seed)?;
        let stream = read_u64(r)?;
        let mut pos = [0u8; 16];
        read_exact(r, &mut pos)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(pos));
        Ok(Self { theta, ema, m, v, step, rng })
    }
}

/// One row of the metrics CSV. Evaluation columns are empty between evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_cfm: f64,
    pub loss_sd: f64,
    pub grad_norm: f64,
    pub ed_proxy: Option<f64>,
    pub dist_energy: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_cfm,loss_sd,grad_norm,ed_proxy,dist_energy";

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step,
            r.loss_total,
            r.loss_cfm,
            r.loss_sd,
            r.grad_norm,
            opt(r.ed_proxy),
            opt(r.dist_energy)
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != METRICS_HEADER {
        return Err(Error::InvalidArgument(format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::InvalidArgument(format!("metrics line {}: bad {what}", i + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(bad("column count"));
        }
        let num = |k: usize, name: &str| cols[k].parse::<f64>().map_err(|_| bad(name));
        let opt = |k: usize, name: &str| if cols[k].is_empty() { Ok(None) } else { num(k, name).map(Some) };
        out.push(MetricsRecord {
            step: cols[0].parse().map_err(|_| bad("step"))?,
            loss_total: num(1, "loss_total")?,
            loss_cfm: num(2, "loss_cfm")?,
            loss_sd: num(3, "loss_sd")?,
            grad_norm: num(4, "grad_norm")?,
            ed_proxy: opt(5, "ed_proxy")?,
            dist_energy: opt(6, "dist_energy")?,
        });
    }
    Ok(out)
}

/// Owned training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub omega: Option<Vec<f64>>,
}

impl TrainBatch {
    pub fn view(&self) -> LossBatch<'_> {
        LossBatch {
            x: &self.x,
            z: &self.z,
            t: &self.t,
            s: &self.s,
            labels: self.labels.as_deref(),
            omega: self.omega.as_deref(),
        }
    }
}

/// Draws data, noise, times, dropped-out labels and (for an omega-conditioned
/// network) per-sample guidance scales, in that order.
pub fn draw_batch<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &TrainConfig,
    net: &FieldNet,
    mixture: &GaussianMixture,
    interp: &Interpolant,
) -> Result<TrainBatch> {
    let n = cfg.batch_size;
    check_dim(net.config().data_dim, mixture.dim())?;
    let (x, classes) = mixture.sample(rng, n);
    let z: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let beta = cfg.time_dist.beta()?;
    let mut t = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        let (ti, si) = order_times(interp, beta.sample(rng), beta.sample(rng));
        t.push(ti);
        s.push(match cfg.s_mode {
            SMode::Relaxed => si,
            SMode::Zero => interp.domain().0,
        });
    }
    let labels = match net.config().num_classes {
        None => None,
        Some(k) => {
            if k != mixture.n_components() {
                return Err(Error::UnsupportedConfig(format!(
                    "network has {k} classes but the mixture has {} components",
                    mixture.n_components()
                )));
            }
            let p = cfg.loss.label_dropout;
            Some(classes.iter().map(|&c| if rng.gen::<f64>() < p { NULL_LABEL } else { c }).collect())
        }
    };
    let omega = net.config().omega_channel.then(|| {
        if cfg.loss.objective == Objective::IsdC {
            (0..n).map(|_| rng.gen_range(1.0..=cfg.loss.omega)).collect()
        } else {
            vec![1.0; n]
        }
    });
    Ok(TrainBatch { x, z, t, s, labels, omega })
}

/// One Adam update and EMA blend. Fails without touching `state` when the
/// loss or gradient is not finite.
pub fn train_step(
    net: &FieldNet,
    state: &mut TrainState,
    batch: &LossBatch<'_>,
    cfg: &TrainConfig,
    ctx: &LossContext<'_>,
) -> Result<MetricsRecord> {
    let out = evaluate_loss(net, &state.theta, &cfg.loss, ctx, batch, true)?;
    let grad = out.grad.expect("gradient requested");
    let step = state.step + 1;
    if !out.terms.total.is_finite() {
        return Err(Error::NonFinite { what: "loss".into(), step });
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { what: "gradient".into(), step });
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let d = cfg.ema_decay;
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let update = (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + cfg.adam_eps);
        if cfg.lr > 0.0 && update.is_finite() {
            state.theta[i] -= cfg.lr * update;
        }
        state.ema[i] = d * state.ema[i] + (1.0 - d) * state.theta[i];
    }
    state.step = step;
    Ok(MetricsRecord {
        step,
        loss_total: out.terms.total,
        loss_cfm: out.terms.cfm,
        loss_sd: out.terms.sd,
        grad_norm,
        ed_proxy: None,
        dist_energy: None,
    })
}

/// Fixed evaluation draws, independent of the training stream.
struct Evaluator {
    data: Vec<f64>,
    noise: Vec<f64>,
    labels: Vec<usize>,
    seed: u64,
}

impl Evaluator {
    const DATA_STREAM: u64 = 2;
    const PROXY_STREAM: u64 = 3;

    fn new(cfg: &TrainConfig, mixture: &GaussianMixture) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(Self::DATA_STREAM);
        let (data, _) = mixture.sample(&mut rng, cfg.eval_points);
        let (_, labels) = mixture.sample(&mut rng, cfg.eval_points);
        let noise = (0..data.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { data, noise, labels, seed: cfg.seed }
    }

    fn evaluate(
        &self,
        net: &FieldNet,
        theta: &[f64],
        cfg: &TrainConfig,
        mixture: &GaussianMixture,
        interp: &Interpolant,
    ) -> Result<(f64, f64)> {
        let bound = net.bind(theta);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(Self::PROXY_STREAM);
        let proxy = ed_proxy(&bound, mixture, interp, cfg.eval_proxy_samples, &cfg.time_dist, &mut rng)?;
        let schedule = SampleSchedule::uniform(interp, cfg.eval_sample_steps)?;
        let cond = Conditioning {
            labels: net.config().num_classes.map(|_| self.labels.clone()),
            omega: None,
        };
        let samples = few_step_sample(&bound, interp, &self.noise, &schedule, &cond)?;
        let dist = energy_distance(&samples, &self.data, mixture.dim())?;
        Ok((proxy, dist))
    }
}

/// `(ed_proxy, energy distance)` of `theta` on the evaluation draws fixed by
/// `cfg.seed`, the same numbers `run_experiment` logs.
pub fn evaluate_metrics(
    net: &FieldNet,
    theta: &[f64],
    cfg: &TrainConfig,
    mixture: &GaussianMixture,
    interp: &Interpolant,
) -> Result<(f64, f64)> {
    check_dim(net.n_params(), theta.len())?;
    Evaluator::new(cfg, mixture).evaluate(net, theta, cfg, mixture, interp)
}

const LANDSCAPE_BATCH_STREAM: u64 = 4;
const LANDSCAPE_POWER_STREAM: u64 = 5;

/// Loss landscape of the training objective around `theta` on one frozen batch
/// drawn from `seed`. Two configs that differ only in the loss or `s` mode see
/// the same data, noise and `t`.
pub fn frozen_landscape(
    net: &FieldNet,
    theta: &[f64],
    cfg: &TrainConfig,
    mixture: &GaussianMixture,
    interp: &Interpolant,
    settings: &LandscapeSettings,
    seed: u64,
) -> Result<LandscapeReport> {
    cfg.validate()?;
    check_dim(net.n_params(), theta.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LANDSCAPE_BATCH_STREAM);
    let batch = draw_batch(&mut rng, cfg, net, mixture, interp)?;
    let view = batch.view();
    let ctx = LossContext { interp, mixture: Some(mixture) };
    let loss = |p: &[f64]| evaluate_loss(net, p, &cfg.loss, &ctx, &view, false).map(|o| o.terms.total);
    let grad = |p: &[f64]| {
        evaluate_loss(net, p, &cfg.loss, &ctx, &view, true).map(|o| o.grad.expect("gradient requested"))
    };
    rng.set_stream(LANDSCAPE_POWER_STREAM);
    rng.set_word_pos(0);
    landscape_probe(loss, grad, theta, settings, &mut rng)
}

/// Result of [`run_experiment`]. A non-finite abort keeps the rows logged so far.
#[derive(Debug)]
pub struct RunResult {
    pub net: FieldNet,
    pub state: TrainState,
    pub history: Vec<MetricsRecord>,
    pub failure: Option<Error>,
}

impl RunResult {
    pub fn eval_params(&self, cfg: &TrainConfig) -> &[f64] {
        self.state.eval_params(cfg.ema_decay)
    }
}

/// Trains from scratch (or from `resume`) until `cfg.steps`, evaluating every
/// `eval_every` steps and at the final step.
pub fn run_experiment(
    net_cfg: &FieldNetConfig,
    cfg: &TrainConfig,
    mixture: &GaussianMixture,
    interp: &Interpolant,
    resume: Option<TrainState>,
) -> Result<RunResult> {
    cfg.validate()?;
    let net = FieldNet::for_domain(net_cfg.clone(), interp.domain_end())?;
    let mut state = match resume {
        Some(s) => {
            check_dim(net.n_params(), s.theta.len())?;
            s
        }
        None => TrainState::new(&net, cfg.seed),
    };
    let ctx = LossContext { interp, mixture: Some(mixture) };
    let evaluator = (cfg.eval_every > 0).then(|| Evaluator::new(cfg, mixture));
    let mut history = Vec::with_capacity(cfg.steps.saturating_sub(state.step) as usize);
    let mut failure = None;
    while state.step < cfg.steps {
        let batch = draw_batch(&mut state.rng, cfg, &net, mixture, interp)?;
        let mut record = match train_step(&net, &mut state, &batch.view(), cfg, &ctx) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(ev) = &evaluator {
            if record.step % cfg.eval_every == 0 || record.step == cfg.steps {
                let (proxy, dist) = ev.evaluate(&net, state.eval_params(cfg.ema_decay), cfg, mixture, interp)?;
                record.ed_proxy = Some(proxy);
                record.dist_energy = Some(dist);
            }
        }
        history.push(record);
    }
    Ok(RunResult { net, state, history, failure })
}
