//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! carry a section prefix (`train.lr`, `loss.objective`, ...); the two top-level
//! keys are `seed` and `out`. `auto` for `loss.guiding` and `loss.weighting`
//! selects the objective default. Unknown keys are rejected. [`ExperimentConfig::render`]
//! prints every key, and parsing the printed text gives back an equal config.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use fmlab::objectives::Guiding;
use fmlab::{
    FieldNetConfig, GaussianMixture, Interpolant, JvpMode, LandscapeSettings, Objective, SMode, TimeDist,
    TrainConfig, Weighting,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Sampling settings for the `sample` command.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub count: usize,
    /// Class to condition on; `None` samples unconditionally.
    pub label: Option<usize>,
    /// Post-CFG scale; 1 disables the blend.
    pub post_omega: f64,
    /// Value fed to the guidance-scale input of an omega-conditioned network.
    pub pre_omega: Option<f64>,
    /// Permits combining a guided network with Post-CFG.
    pub allow_pre_post: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 4, count: 2000, label: None, post_omega: 1.0, pre_omega: None, allow_pre_post: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeConfig {
    pub settings: LandscapeSettings,
    pub batch_size: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self { settings: LandscapeSettings::default(), batch_size: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub mixture: GaussianMixture,
    /// Train a class-conditional network on the mixture component labels.
    pub conditional: bool,
    pub interp: Interpolant,
    pub net: FieldNetConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub landscape: LandscapeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            mixture: GaussianMixture::default_ring(),
            conditional: false,
            interp: Interpolant::linear(),
            net: FieldNetConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            landscape: LandscapeConfig::default(),
        }
    }
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>, T::Err> {
    if v == "none" {
        Ok(None)
    } else {
        v.parse().map(Some)
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

/// Every key in output order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data.mixture",
    "data.conditional",
    "interp.kind",
    "net.hidden",
    "net.depth",
    "net.num_freqs",
    "net.label_dim",
    "net.omega_channel",
    "train.batch_size",
    "train.steps",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.ema_decay",
    "train.time_a",
    "train.time_b",
    "train.s_mode",
    "train.eval_every",
    "train.eval_proxy_samples",
    "train.eval_points",
    "train.eval_sample_steps",
    "loss.objective",
    "loss.guiding",
    "loss.jvp",
    "loss.weighting",
    "loss.omega",
    "loss.label_dropout",
    "loss.ct_weight",
    "sample.steps",
    "sample.count",
    "sample.label",
    "sample.post_omega",
    "sample.pre_omega",
    "sample.allow_pre_post",
    "landscape.resolution",
    "landscape.radius",
    "landscape.max_iters",
    "landscape.tol",
    "landscape.batch_size",
];

impl ExperimentConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let l = &t.loss;
        let v = match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "data.mixture" => self.mixture.to_string(),
            "data.conditional" => self.conditional.to_string(),
            "interp.kind" => self.interp.to_string(),
            "net.hidden" => self.net.hidden.to_string(),
            "net.depth" => self.net.depth.to_string(),
            "net.num_freqs" => self.net.num_freqs.to_string(),
            "net.label_dim" => self.net.label_dim.to_string(),
            "net.omega_channel" => self.net.omega_channel.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.ema_decay" => t.ema_decay.to_string(),
            "train.time_a" => t.time_dist.a.to_string(),
            "train.time_b" => t.time_dist.b.to_string(),
            "train.s_mode" => t.s_mode.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.eval_proxy_samples" => t.eval_proxy_samples.to_string(),
            "train.eval_points" => t.eval_points.to_string(),
            "train.eval_sample_steps" => t.eval_sample_steps.to_string(),
            "loss.objective" => l.objective.to_string(),
            "loss.guiding" => l.guiding.map(|g| g.to_string()).unwrap_or_else(|| "auto".into()),
            "loss.jvp" => l.jvp.to_string(),
            "loss.weighting" => l.weighting.map(|w| w.to_string()).unwrap_or_else(|| "auto".into()),
            "loss.omega" => l.omega.to_string(),
            "loss.label_dropout" => l.label_dropout.to_string(),
            "loss.ct_weight" => l.ct_weight.to_string(),
            "sample.steps" => self.sample.steps.to_string(),
            "sample.count" => self.sample.count.to_string(),
            "sample.label" => opt_to_string(&self.sample.label),
            "sample.post_omega" => self.sample.post_omega.to_string(),
            "sample.pre_omega" => opt_to_string(&self.sample.pre_omega),
            "sample.allow_pre_post" => self.sample.allow_pre_post.to_string(),
            "landscape.resolution" => self.landscape.settings.resolution.to_string(),
            "landscape.radius" => self.landscape.settings.radius.to_string(),
            "landscape.max_iters" => self.landscape.settings.max_iters.to_string(),
            "landscape.tol" => self.landscape.settings.tol.to_string(),
            "landscape.batch_size" => self.landscape.batch_size.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Sets one key from its text form. The error is the message only; callers
    /// attach the position.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        let t = &mut self.train;
        match key {
            "seed" => self.seed = p(value)?,
            "out" => self.out = PathBuf::from(value),
            "data.mixture" => self.mixture = p(value)?,
            "data.conditional" => self.conditional = parse_bool(value)?,
            "interp.kind" => self.interp = p(value)?,
            "net.hidden" => self.net.hidden = p(value)?,
            "net.depth" => self.net.depth = p(value)?,
            "net.num_freqs" => self.net.num_freqs = p(value)?,
            "net.label_dim" => self.net.label_dim = p(value)?,
            "net.omega_channel" => self.net.omega_channel = parse_bool(value)?,
            "train.batch_size" => t.batch_size = p(value)?,
            "train.steps" => t.steps = p(value)?,
            "train.lr" => t.lr = p(value)?,
            "train.beta1" => t.beta1 = p(value)?,
            "train.beta2" => t.beta2 = p(value)?,
            "train.adam_eps" => t.adam_eps = p(value)?,
            "train.ema_decay" => t.ema_decay = p(value)?,
            "train.time_a" => t.time_dist = TimeDist { a: p(value)?, ..t.time_dist },
            "train.time_b" => t.time_dist = TimeDist { b: p(value)?, ..t.time_dist },
            "train.s_mode" => t.s_mode = p::<SMode>(value)?,
            "train.eval_every" => t.eval_every = p(value)?,
            "train.eval_proxy_samples" => t.eval_proxy_samples = p(value)?,
            "train.eval_points" => t.eval_points = p(value)?,
            "train.eval_sample_steps" => t.eval_sample_steps = p(value)?,
            "loss.objective" => t.loss.objective = p::<Objective>(value)?,
            "loss.guiding" => {
                t.loss.guiding = if value == "auto" { None } else { Some(p::<Guiding>(value)?) };
            }
            "loss.jvp" => t.loss.jvp = p::<JvpMode>(value)?,
            "loss.weighting" => {
                t.loss.weighting = if value == "auto" { None } else { Some(p::<Weighting>(value)?) };
            }
            "loss.omega" => t.loss.omega = p(value)?,
            "loss.label_dropout" => t.loss.label_dropout = p(value)?,
            "loss.ct_weight" => t.loss.ct_weight = parse_bool(value)?,
            "sample.steps" => self.sample.steps = p(value)?,
            "sample.count" => self.sample.count = p(value)?,
            "sample.label" => self.sample.label = parse_opt::<usize>(value).map_err(|e| e.to_string())?,
            "sample.post_omega" => self.sample.post_omega = p(value)?,
            "sample.pre_omega" => self.sample.pre_omega = parse_opt::<f64>(value).map_err(|e| e.to_string())?,
            "sample.allow_pre_post" => self.sample.allow_pre_post = parse_bool(value)?,
            "landscape.resolution" => self.landscape.settings.resolution = p(value)?,
            "landscape.radius" => self.landscape.settings.radius = p(value)?,
            "landscape.max_iters" => self.landscape.settings.max_iters = p(value)?,
            "landscape.tol" => self.landscape.settings.tol = p(value)?,
            "landscape.batch_size" => self.landscape.batch_size = p(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: raw.to_string() });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
            cfg.set(key, value).map_err(|msg| ConfigError::Value { line, key: key.to_string(), msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    /// Network config with the class count taken from the mixture.
    pub fn net_config(&self) -> FieldNetConfig {
        FieldNetConfig {
            data_dim: self.mixture.dim(),
            num_classes: self.conditional.then(|| self.mixture.n_components()),
            ..self.net.clone()
        }
    }

    /// Training config with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        fmlab::FieldNet::new(self.net_config()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.loss.objective.needs_labels() && !self.conditional {
            return inv(format!("objective {} needs data.conditional = true", self.train.loss.objective));
        }
        if self.train.loss.objective == Objective::IsdC && !self.net.omega_channel {
            return inv("objective isd-c needs net.omega_channel = true".into());
        }
        let s = &self.sample;
        if s.steps == 0 || s.count == 0 {
            return inv("sample.steps and sample.count must be positive".into());
        }
        if let Some(c) = s.label {
            if !self.conditional || c >= self.mixture.n_components() {
                return inv(format!("sample.label {c} needs a conditional network with more than {c} classes"));
            }
        }
        if !(s.post_omega >= 0.0 && s.post_omega.is_finite()) {
            return inv(format!("sample.post_omega must be finite and non-negative, got {}", s.post_omega));
        }
        if s.post_omega != 1.0 && s.label.is_none() {
            return inv("post-CFG needs sample.label".into());
        }
        if let Some(w) = s.pre_omega {
            if !self.net.omega_channel {
                return inv("sample.pre_omega needs net.omega_channel = true".into());
            }
            if !(w >= 1.0 && w.is_finite()) {
                return inv(format!("sample.pre_omega must be at least 1, got {w}"));
            }
        }
        let guided_net = self.net.omega_channel
            || matches!(self.train.loss.objective, Objective::IsdT | Objective::IsdU | Objective::IsdC);
        if guided_net && s.post_omega != 1.0 && !s.allow_pre_post {
            return inv("a network trained with guidance plus post-CFG needs sample.allow_pre_post = true".into());
        }
        if self.landscape.batch_size == 0 {
            return inv("landscape.batch_size must be positive".into());
        }
        Ok(())
    }
}
