//! Subcommand bodies. Each writes its artifacts under the configured output
//! directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use fmlab::diagnostics::count_outside;
use fmlab::fieldnet::{read_checkpoint, write_checkpoint};
use fmlab::trainer::{draw_batch, read_metrics_csv, write_metrics_csv};
use fmlab::{
    evaluate_loss, evaluate_metrics, few_step_sample, frozen_landscape, post_cfg_sample, run_experiment,
    Conditioning, FieldNet, LandscapeReport, LossContext, MetricsRecord, RunResult, SampleSchedule, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ExperimentConfig;
use crate::svg;

/// Training stopped on a non-finite loss or gradient. Maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericFailure(pub String);

const SAMPLE_NOISE_STREAM: u64 = 6;
const EVAL_BATCH_STREAM: u64 = 7;

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_metrics_csv(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_metrics_csv(BufReader::new(f))?)
}

fn save_run(dir: &Path, run: &RunResult) -> Result<()> {
    let mut ck = BufWriter::new(File::create(dir.join("checkpoint.bin"))?);
    write_checkpoint(&mut ck, &run.net, &run.state.theta, Some(&run.state.ema))?;
    ck.flush()?;
    let mut st = BufWriter::new(File::create(dir.join("state.bin"))?);
    run.state.write(&mut st)?;
    st.flush()?;
    Ok(())
}

/// `metrics.csv`, `checkpoint.bin`, `state.bin` and the resolved `config.txt`.
/// When resuming, rows already logged up to the resumed step are kept.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.txt"), &cfg.render())?;
    let mut history = Vec::new();
    let state = match resume {
        Some(path) => {
            let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
            let state = TrainState::read(&mut r).with_context(|| format!("reading {}", path.display()))?;
            let metrics = cfg.out.join("metrics.csv");
            if metrics.exists() {
                history = read_metrics(&metrics)?;
                history.retain(|r| r.step <= state.step);
            }
            Some(state)
        }
        None => None,
    };
    let run = run_experiment(&cfg.net_config(), &cfg.train_config(), &cfg.mixture, &cfg.interp, state)?;
    history.extend_from_slice(&run.history);
    write_metrics(&cfg.out.join("metrics.csv"), &history)?;
    save_run(&cfg.out, &run)?;
    if let Some(e) = &run.failure {
        let line = format!("aborted: {e}");
        write_file(&cfg.out.join("failure.txt"), &format!("{line}\n"))?;
        return Err(NumericFailure(line).into());
    }
    Ok(())
}

/// Loads a checkpoint and returns the network with its evaluation parameters
/// (the EMA copy when the config trains one).
pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<(FieldNet, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let (net, theta, ema) = read_checkpoint(&mut r).with_context(|| format!("reading {}", path.display()))?;
    let net = net.with_domain_end(cfg.interp.domain_end())?;
    if net.config() != &cfg.net_config() {
        bail!("checkpoint network {:?} does not match the config {:?}", net.config(), cfg.net_config());
    }
    let params = match ema {
        Some(e) if cfg.train.ema_decay > 0.0 => e,
        _ => theta,
    };
    Ok((net, params))
}

/// Generates `sample.count` points with the configured sampler settings.
pub fn generate(cfg: &ExperimentConfig, net: &FieldNet, params: &[f64]) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLE_NOISE_STREAM);
    let d = cfg.mixture.dim();
    let z: Vec<f64> = (0..cfg.sample.count * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let schedule = SampleSchedule::uniform(&cfg.interp, cfg.sample.steps)?;
    let cond = Conditioning { labels: cfg.sample.label.map(|c| vec![c]), omega: cfg.sample.pre_omega };
    let bound = net.bind(params);
    let x = if cfg.sample.post_omega != 1.0 {
        post_cfg_sample(&bound, &cfg.interp, &z, &schedule, &cond, cfg.sample.post_omega)?
    } else {
        few_step_sample(&bound, &cfg.interp, &z, &schedule, &cond)?
    };
    Ok(x)
}

pub fn samples_header(dim: usize) -> String {
    let mut cols: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    cols.push("label".into());
    cols.join(",")
}

/// Rows of `dim` coordinates and a label column (`none` when unconditional).
pub fn write_samples_csv(path: &Path, x: &[f64], dim: usize, label: Option<usize>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{}", samples_header(dim))?;
    let label = label.map(|c| c.to_string()).unwrap_or_else(|| "none".into());
    for row in x.chunks(dim) {
        for v in row {
            write!(w, "{v},")?;
        }
        writeln!(w, "{label}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<(Vec<f64>, usize, Vec<Option<usize>>)> {
    let f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut lines = f.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 || header != samples_header(dim) {
        bail!("{}: unexpected samples header {header:?}", path.display());
    }
    let (mut x, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 1 {
            bail!("{} line {}: expected {} columns", path.display(), i + 2, dim + 1);
        }
        for c in &cols[..dim] {
            x.push(c.parse::<f64>().with_context(|| format!("{} line {}", path.display(), i + 2))?);
        }
        labels.push(match cols[dim] {
            "none" => None,
            c => Some(c.parse().with_context(|| format!("{} line {}", path.display(), i + 2))?),
        });
    }
    Ok((x, dim, labels))
}

fn points_2d(x: &[f64]) -> Vec<[f64; 2]> {
    x.chunks(2).map(|p| [p[0], p[1]]).collect()
}

fn reference_points(cfg: &ExperimentConfig, n: usize) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLE_NOISE_STREAM + 100);
    points_2d(&cfg.mixture.sample(&mut rng, n).0)
}

/// `samples.csv`, plus `samples.svg` for 2-D data.
pub fn sample(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let (net, params) = load_checkpoint(cfg, checkpoint)?;
    let x = generate(cfg, &net, &params)?;
    create_dir(&cfg.out)?;
    let d = cfg.mixture.dim();
    write_samples_csv(&cfg.out.join("samples.csv"), &x, d, cfg.sample.label)?;
    if d == 2 {
        let title = format!("{} samples, {} steps", cfg.train.loss.objective, cfg.sample.steps);
        let labels = cfg.sample.label.map(|c| vec![c; cfg.sample.count]);
        let svg = svg::scatter(&title, &points_2d(&x), labels.as_deref(), &reference_points(cfg, cfg.sample.count));
        write_file(&cfg.out.join("samples.svg"), &svg)?;
    }
    Ok(())
}

/// One metrics row for a checkpoint: the training loss and gradient norm on a
/// batch drawn from the seed, and the evaluation metrics. The step column is 0.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsRecord> {
    let (net, params) = load_checkpoint(cfg, checkpoint)?;
    let tcfg = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_BATCH_STREAM);
    let batch = draw_batch(&mut rng, &tcfg, &net, &cfg.mixture, &cfg.interp)?;
    let ctx = LossContext { interp: &cfg.interp, mixture: Some(&cfg.mixture) };
    let out = evaluate_loss(&net, &params, &tcfg.loss, &ctx, &batch.view(), true)?;
    let grad_norm = out.grad.as_deref().unwrap_or_default().iter().map(|g| g * g).sum::<f64>().sqrt();
    let (proxy, dist) = evaluate_metrics(&net, &params, &tcfg, &cfg.mixture, &cfg.interp)?;
    let row = MetricsRecord {
        step: 0,
        loss_total: out.terms.total,
        loss_cfm: out.terms.cfm,
        loss_sd: out.terms.sd,
        grad_norm,
        ed_proxy: Some(proxy),
        dist_energy: Some(dist),
    };
    create_dir(&cfg.out)?;
    write_metrics(&cfg.out.join("eval.csv"), &[row])?;
    Ok(row)
}

pub const LANDSCAPE_HEADER: &str = "alpha,beta,loss";

pub fn write_landscape_csv(path: &Path, report: &LandscapeReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{LANDSCAPE_HEADER}")?;
    let r = report.resolution;
    for i in 0..r {
        for j in 0..r {
            writeln!(w, "{},{},{}", report.coords[i], report.coords[j], report.grid[i * r + j])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loss column of a landscape CSV.
pub fn read_landscape_csv(path: &Path) -> Result<Vec<f64>> {
    let f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut lines = f.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != LANDSCAPE_HEADER {
        bail!("{}: unexpected landscape header {header:?}", path.display());
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            bail!("{} line {}: expected 3 columns", path.display(), i + 2);
        }
        for c in &cols[..2] {
            c.parse::<f64>().with_context(|| format!("{} line {}", path.display(), i + 2))?;
        }
        out.push(cols[2].parse::<f64>().with_context(|| format!("{} line {}", path.display(), i + 2))?);
    }
    Ok(out)
}

/// Population mean and standard deviation.
pub fn mean_sigma(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Landscape report for a trained parameter vector under `cfg`'s objective.
pub fn probe(cfg: &ExperimentConfig, net: &FieldNet, params: &[f64]) -> Result<LandscapeReport> {
    let tcfg = fmlab::TrainConfig { batch_size: cfg.landscape.batch_size, ..cfg.train_config() };
    Ok(frozen_landscape(net, params, &tcfg, &cfg.mixture, &cfg.interp, &cfg.landscape.settings, cfg.seed)?)
}

fn landscape_summary(report: &LandscapeReport, reference: Option<&[f64]>, seed: u64) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("resolution", report.resolution.to_string());
    kv("radius", report.coords.last().copied().unwrap_or(0.0).to_string());
    kv("batch_seed", seed.to_string());
    kv("mean", report.mean.to_string());
    kv("sigma", report.sigma.to_string());
    kv("spikes", report.spikes.to_string());
    if let Some(r) = reference {
        let (m, sd) = mean_sigma(r);
        kv("spikes_reference", count_outside(&report.grid, m, sd).to_string());
    }
    kv("eigenvalue_1", report.directions[0].value.to_string());
    kv("eigenvalue_2", report.directions[1].value.to_string());
    kv("converged", report.converged().to_string());
    s
}

/// `landscape.csv`, `landscape.svg` and `landscape_summary.txt`. With a
/// reference landscape CSV, spikes are also counted against its bound.
pub fn landscape(cfg: &ExperimentConfig, checkpoint: &Path, reference: Option<&Path>) -> Result<LandscapeReport> {
    let (net, params) = load_checkpoint(cfg, checkpoint)?;
    let reference = reference.map(read_landscape_csv).transpose()?;
    let report = probe(cfg, &net, &params)?;
    create_dir(&cfg.out)?;
    write_landscape_csv(&cfg.out.join("landscape.csv"), &report)?;
    let title = format!("{} loss landscape (sigma {:.4e})", cfg.train.loss.objective, report.sigma);
    write_file(&cfg.out.join("landscape.svg"), &svg::heatmap(&title, &report.grid, report.resolution, &report.coords))?;
    write_file(&cfg.out.join("landscape_summary.txt"), &landscape_summary(&report, reference.as_deref(), cfg.seed))?;
    if !report.converged() {
        eprintln!("warning: power iteration did not converge; directions are approximate");
    }
    Ok(report)
}
