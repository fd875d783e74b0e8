//! Scripted reproductions of the toy experiments. Each figure runs a fixed
//! matrix of objectives and batch sizes with the toy presets, writes one
//! directory per cell, comparison CSV/SVG artifacts and `summary.txt` with a
//! PASS/FAIL line per ordering check.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use fmlab::presets::{toy_net, toy_train, toy_train_s_zero};
use fmlab::{
    grad_norm_trace, run_experiment, GaussianMixture, Interpolant, LandscapeReport, MetricsRecord,
    Objective, RunResult, TrainConfig,
};

use crate::commands::{self, write_landscape_csv, write_metrics, write_samples_csv};
use crate::config::{ExperimentConfig, LandscapeConfig};
use crate::svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig2,
    Fig3,
    Fig4,
    Fig10,
    Landscape,
}

impl Figure {
    pub const ALL: [Figure; 5] = [Figure::Fig2, Figure::Fig3, Figure::Fig4, Figure::Fig10, Figure::Landscape];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::Fig10 => "fig10",
            Figure::Landscape => "landscape",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Figure::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Figure::ALL.iter().map(|f| f.name()).collect();
            format!("unknown figure {s:?}; expected one of {}", known.join(", "))
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReproOptions {
    pub steps: u64,
    pub seeds: u64,
    pub base_seed: u64,
    pub out: PathBuf,
    pub landscape: LandscapeConfig,
    /// Points drawn for the scatter plots.
    pub plot_points: usize,
}

impl Default for ReproOptions {
    fn default() -> Self {
        Self {
            steps: 5000,
            seeds: 3,
            base_seed: 0,
            out: PathBuf::from("repro"),
            landscape: LandscapeConfig::default(),
            plot_points: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// One matrix cell: a labeled training config.
#[derive(Debug, Clone)]
struct Cell {
    label: String,
    train: TrainConfig,
}

impl Cell {
    fn new(label: impl Into<String>, mut train: TrainConfig, steps: u64) -> Self {
        train.steps = steps;
        Self { label: label.into(), train }
    }
}

struct Trained {
    cell: Cell,
    run: RunResult,
}

impl Trained {
    fn last(&self) -> Option<&MetricsRecord> {
        self.run.history.last()
    }

    fn final_metric(&self, pick: fn(&MetricsRecord) -> Option<f64>) -> f64 {
        self.last().and_then(pick).unwrap_or(f64::NAN)
    }
}

struct Ctx<'a> {
    opts: &'a ReproOptions,
    dir: PathBuf,
    mixture: GaussianMixture,
    interp: Interpolant,
}

impl Ctx<'_> {
    fn seeds(&self) -> impl Iterator<Item = u64> {
        let b = self.opts.base_seed;
        b..b + self.opts.seeds
    }

    fn train(&self, cell: &Cell) -> Result<Trained> {
        let run = run_experiment(&toy_net(), &cell.train, &self.mixture, &self.interp, None)
            .with_context(|| format!("training {}", cell.label))?;
        let dir = self.dir.join("cells").join(format!("{}-s{}", cell.label, cell.train.seed));
        commands::create_dir(&dir)?;
        write_metrics(&dir.join("metrics.csv"), &run.history)?;
        if let Some(e) = &run.failure {
            fs::write(dir.join("failure.txt"), format!("aborted: {e}\n"))?;
            eprintln!("{}: aborted: {e}", cell.label);
        }
        Ok(Trained { cell: cell.clone(), run })
    }

    /// Trains `make(seed)` for every seed.
    fn train_seeds(&self, label: &str, make: impl Fn(u64) -> TrainConfig) -> Result<Vec<Trained>> {
        self.seeds().map(|s| self.train(&Cell::new(label, make(s), self.opts.steps))).collect()
    }

    fn experiment(&self, t: &Trained) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed: t.cell.train.seed,
            mixture: self.mixture.clone(),
            interp: self.interp,
            net: toy_net(),
            train: t.cell.train.clone(),
            landscape: self.opts.landscape.clone(),
            ..Default::default()
        };
        cfg.sample.count = self.opts.plot_points;
        cfg
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn scatter(&self, name: &str, title: &str, t: &Trained) -> Result<()> {
        let cfg = self.experiment(t);
        let x = commands::generate(&cfg, &t.run.net, t.run.eval_params(&t.cell.train))?;
        write_samples_csv(&self.dir.join(format!("{name}.csv")), &x, 2, None)?;
        let pts: Vec<[f64; 2]> = x.chunks(2).map(|p| [p[0], p[1]]).collect();
        self.write(&format!("{name}.svg"), &svg::scatter(title, &pts, None, &[]))
    }

    fn ground_truth(&self, name: &str) -> Result<()> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.opts.base_seed);
        let (x, labels) = self.mixture.sample(&mut rng, self.opts.plot_points);
        let pts: Vec<[f64; 2]> = x.chunks(2).map(|p| [p[0], p[1]]).collect();
        self.write(&format!("{name}.svg"), &svg::scatter("ground truth", &pts, Some(&labels), &[]))
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn mean_final(runs: &[Trained], pick: fn(&MetricsRecord) -> Option<f64>) -> f64 {
    mean(runs.iter().map(|t| t.final_metric(pick)))
}

fn ed(r: &MetricsRecord) -> Option<f64> {
    r.ed_proxy
}

fn energy(r: &MetricsRecord) -> Option<f64> {
    r.dist_energy
}

/// Mean over seeds of the per-seed ratio `greater / smaller` must exceed `factor`.
/// Runs are paired by seed.
fn ratio_check(name: &str, what: &str, greater: (&str, &[f64]), smaller: (&str, &[f64]), factor: f64) -> Check {
    let ratio = mean(greater.1.iter().zip(smaller.1).map(|(a, b)| a / b));
    Check {
        name: name.into(),
        pass: ratio > factor,
        detail: format!(
            "{what} {} = {:.6}, {} = {:.6} (seed means), mean ratio {:.4} (needs > {factor})",
            greater.0,
            mean(greater.1.iter().copied()),
            smaller.0,
            mean(smaller.1.iter().copied()),
            ratio
        ),
    }
}

fn finals(runs: &[Trained], pick: fn(&MetricsRecord) -> Option<f64>) -> Vec<f64> {
    runs.iter().map(|t| t.final_metric(pick)).collect()
}

/// `low < high` on seed-mean final values.
fn order_check(name: &str, what: &str, low: (&str, f64), high: (&str, f64)) -> Check {
    Check {
        name: name.into(),
        pass: low.1 < high.1,
        detail: format!("{what} {} = {:.6}, {} = {:.6}", low.0, low.1, high.0, high.1),
    }
}

fn final_rows(runs: &[&[Trained]]) -> String {
    let mut s = String::from("cell,batch,seed,ed_proxy,dist_energy\n");
    for group in runs {
        for t in group.iter() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                t.cell.label,
                t.cell.train.batch_size,
                t.cell.train.seed,
                t.final_metric(ed),
                t.final_metric(energy)
            );
        }
    }
    s
}

/// Seed-mean of `pick` per step for each named group; rows only where every
/// group has a value.
fn curves(groups: &[(&str, &[Trained])], pick: fn(&MetricsRecord) -> Option<f64>) -> (String, Vec<(String, Vec<(f64, f64)>)>) {
    let mut table: BTreeMap<u64, Vec<Option<f64>>> = BTreeMap::new();
    for (g, (_, runs)) in groups.iter().enumerate() {
        let mut per_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for t in runs.iter() {
            for r in &t.run.history {
                if let Some(v) = pick(r) {
                    per_step.entry(r.step).or_default().push(v);
                }
            }
        }
        for (step, vals) in per_step {
            if vals.len() == runs.len() {
                table.entry(step).or_insert_with(|| vec![None; groups.len()])[g] = Some(mean(vals));
            }
        }
    }
    let mut csv = String::from("step");
    for (name, _) in groups {
        let _ = write!(csv, ",{name}");
    }
    csv.push('\n');
    let mut series: Vec<(String, Vec<(f64, f64)>)> = groups.iter().map(|(n, _)| (n.to_string(), vec![])).collect();
    for (step, row) in &table {
        if row.iter().any(Option::is_none) {
            continue;
        }
        let _ = write!(csv, "{step}");
        for (g, v) in row.iter().enumerate() {
            let v = v.expect("checked");
            let _ = write!(csv, ",{v}");
            series[g].1.push((*step as f64, v));
        }
        csv.push('\n');
    }
    (csv, series)
}

fn fig2(ctx: &Ctx) -> Result<Vec<Check>> {
    let dt = ctx.train_seeds("dt-b2048", |s| toy_train(Objective::Dt, 2048, s))?;
    let ed_runs = ctx.train_seeds("ed-b2048", |s| toy_train(Objective::Ed, 2048, s))?;
    let isd = ctx.train_seeds("isd-b2048", |s| toy_train(Objective::Isd, 2048, s))?;
    ctx.scatter("fig2_dt", "DT, B=2048", &dt[0])?;
    ctx.scatter("fig2_ed", "ED, B=2048", &ed_runs[0])?;
    ctx.scatter("fig2_isd", "iSD, B=2048", &isd[0])?;
    ctx.ground_truth("fig2_ground_truth")?;
    ctx.write("fig2.csv", &final_rows(&[&dt, &ed_runs, &isd]))?;
    Ok(vec![
        ratio_check("ed-proxy DT > ED", "final ed_proxy", ("dt", &finals(&dt, ed)), ("ed", &finals(&ed_runs, ed)), 1.5),
        order_check(
            "energy distance iSD < DT",
            "final energy distance",
            ("isd", mean_final(&isd, energy)),
            ("dt", mean_final(&dt, energy)),
        ),
    ])
}

fn fig3(ctx: &Ctx) -> Result<Vec<Check>> {
    let mut by_cell = Vec::new();
    for (obj, name) in [(Objective::Ct, "ct"), (Objective::Ed, "ed")] {
        for b in [2048, 512, 128] {
            let label = format!("{name}-b{b}");
            let runs = ctx.train_seeds(&label, |s| toy_train(obj, b, s))?;
            ctx.scatter(&format!("fig3_{name}_b{b}"), &format!("{}, B={b}", name.to_uppercase()), &runs[0])?;
            by_cell.push((label, runs));
        }
    }
    let groups: Vec<&[Trained]> = by_cell.iter().map(|(_, r)| r.as_slice()).collect();
    ctx.write("fig3.csv", &final_rows(&groups))?;
    let get = |l: &str| &by_cell.iter().find(|(x, _)| x == l).expect("cell").1;
    let (small, large) = (get("ct-b128"), get("ct-b2048"));
    Ok(vec![
        ratio_check(
            "CT ed-proxy B=128 > B=2048",
            "final ed_proxy",
            ("b128", &finals(small, ed)),
            ("b2048", &finals(large, ed)),
            1.2,
        ),
        order_check(
            "CT energy distance B=2048 < B=128",
            "final energy distance",
            ("b2048", mean_final(large, energy)),
            ("b128", mean_final(small, energy)),
        ),
    ])
}

fn fig4(ctx: &Ctx) -> Result<Vec<Check>> {
    let mut by_cell = Vec::new();
    for (obj, name) in [(Objective::Dt, "dt"), (Objective::Ed, "ed"), (Objective::Ct, "ct"), (Objective::Isd, "isd")] {
        for b in [2048, 128] {
            let label = format!("{name}_b{b}");
            by_cell.push((label.clone(), ctx.train_seeds(&label, |s| toy_train(obj, b, s))?));
        }
    }
    let groups: Vec<(&str, &[Trained])> = by_cell.iter().map(|(l, r)| (l.as_str(), r.as_slice())).collect();
    let (csv, series) = curves(&groups, ed);
    ctx.write("fig4.csv", &csv)?;
    ctx.write("fig4.svg", &svg::lines("ED proxy over training", "step", "ed_proxy", &series))?;
    let get = |l: &str| by_cell.iter().find(|(x, _)| x == l).map(|(_, r)| r.as_slice()).expect("cell");
    Ok(vec![ratio_check(
        "ed-proxy DT > ED at B=2048",
        "final ed_proxy",
        ("dt", &finals(get("dt_b2048"), ed)),
        ("ed", &finals(get("ed_b2048"), ed)),
        1.5,
    )])
}

/// Steps 500..=2500, shrunk to fit shorter runs.
pub fn grad_window(steps: u64) -> std::ops::RangeInclusive<u64> {
    let hi = steps.min(2500);
    let lo = if hi >= 1000 { 500 } else { 1 };
    lo..=hi.max(1)
}

fn fig10(ctx: &Ctx) -> Result<Vec<Check>> {
    let mut by_cell = Vec::new();
    for (obj, name) in
        [(Objective::Sd, "sd"), (Objective::SdSg, "sd-sg"), (Objective::Ct, "ct"), (Objective::Isd, "isd")]
    {
        by_cell.push((name, ctx.train_seeds(&format!("{name}-b2048"), |s| toy_train(obj, 2048, s))?));
    }
    let groups: Vec<(&str, &[Trained])> = by_cell.iter().map(|(l, r)| (*l, r.as_slice())).collect();
    let (csv, series) = curves(&groups, |r| Some(r.grad_norm));
    ctx.write("fig10.csv", &csv)?;
    ctx.write("fig10.svg", &svg::lines("Gradient norms", "step", "gradient norm", &series))?;
    let window = grad_window(ctx.opts.steps);
    let window_mean = |runs: &[Trained]| -> Result<f64> {
        let per_seed: Result<Vec<f64>> =
            runs.iter().map(|t| Ok(grad_norm_trace(&t.run.history, window.clone())?.mean)).collect();
        Ok(mean(per_seed?))
    };
    let get = |l: &str| by_cell.iter().find(|(x, _)| *x == l).map(|(_, r)| r.as_slice()).expect("cell");
    let (isd, sg) = (window_mean(get("isd"))?, window_mean(get("sd-sg"))?);
    Ok(vec![Check {
        name: "grad norm iSD < SD-sg".into(),
        pass: isd < sg,
        detail: format!("mean over steps {}..={}: isd = {isd:.6}, sd-sg = {sg:.6}", window.start(), window.end()),
    }])
}

fn landscape(ctx: &Ctx) -> Result<Vec<Check>> {
    let seed = ctx.opts.base_seed;
    let steps = ctx.opts.steps;
    let cells = [
        Cell::new("isd", toy_train(Objective::Isd, 2048, seed), steps),
        Cell::new("ct-s0", toy_train_s_zero(Objective::Ct, 2048, seed), steps),
        Cell::new("ct", toy_train(Objective::Ct, 2048, seed), steps),
        Cell::new("sd", toy_train(Objective::Sd, 2048, seed), steps),
    ];
    let mut reports: Vec<(String, LandscapeReport)> = Vec::new();
    for cell in &cells {
        let t = ctx.train(cell)?;
        let cfg = ctx.experiment(&t);
        let report = commands::probe(&cfg, &t.run.net, t.run.eval_params(&t.cell.train))?;
        write_landscape_csv(&ctx.dir.join(format!("landscape_{}.csv", cell.label)), &report)?;
        let title = format!("{} (sigma {:.4e}, N {})", cell.label, report.sigma, report.spikes);
        ctx.write(
            &format!("landscape_{}.svg", cell.label),
            &svg::heatmap(&title, &report.grid, report.resolution, &report.coords),
        )?;
        if !report.converged() {
            eprintln!("{}: power iteration did not converge", cell.label);
        }
        reports.push((cell.label.clone(), report));
    }
    let isd = reports[0].1.clone();
    let mut csv = String::from("method,sigma,spikes,spikes_vs_isd,eigenvalue_1,eigenvalue_2,converged\n");
    for (name, r) in &reports {
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{}",
            r.sigma,
            r.spikes,
            r.spikes_against(&isd),
            r.directions[0].value,
            r.directions[1].value,
            r.converged()
        );
    }
    ctx.write("landscape.csv", &csv)?;
    let ct0 = &reports[1].1;
    Ok(vec![Check {
        name: "landscape sigma iSD < CT(s=0)".into(),
        pass: isd.sigma < ct0.sigma,
        detail: format!("isd = {:.6e}, ct-s0 = {:.6e}", isd.sigma, ct0.sigma),
    }])
}

/// Runs one figure into `opts.out/<figure>` and returns its checks.
pub fn run(figure: Figure, opts: &ReproOptions) -> Result<Vec<Check>> {
    let dir = opts.out.join(figure.name());
    commands::create_dir(&dir)?;
    let ctx = Ctx { opts, dir, mixture: GaussianMixture::default_ring(), interp: Interpolant::linear() };
    let checks = match figure {
        Figure::Fig2 => fig2(&ctx)?,
        Figure::Fig3 => fig3(&ctx)?,
        Figure::Fig4 => fig4(&ctx)?,
        Figure::Fig10 => fig10(&ctx)?,
        Figure::Landscape => landscape(&ctx)?,
    };
    let mut summary = format!("{figure}: steps {}, seeds {}, base seed {}\n", opts.steps, opts.seeds, opts.base_seed);
    for c in &checks {
        let _ = writeln!(summary, "{c}");
    }
    ctx.write("summary.txt", &summary)?;
    Ok(checks)
}

pub fn summary_path(out: &Path, figure: Figure) -> PathBuf {
    out.join(figure.name()).join("summary.txt")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_names_round_trip() {
        for f in Figure::ALL {
            assert_eq!(f.name().parse::<Figure>().unwrap(), f);
        }
        assert!("fig5".parse::<Figure>().unwrap_err().contains("fig10"));
    }

    #[test]
    fn gradient_window_fits_run_length() {
        assert_eq!(grad_window(5000), 500..=2500);
        assert_eq!(grad_window(1200), 500..=1200);
        assert_eq!(grad_window(20), 1..=20);
    }

    #[test]
    fn check_lines() {
        // Mean of per-seed ratios, not ratio of means: (4 + 1) / 2.
        let c = ratio_check("x", "m", ("a", &[4.0, 1.0]), ("b", &[1.0, 1.0]), 2.4);
        assert!(c.pass, "{c}");
        assert!(c.to_string().starts_with("PASS x: m a = 2.500000"));
        assert!(c.to_string().contains("mean ratio 2.5000"));
        assert!(!ratio_check("x", "m", ("a", &[1.0]), ("b", &[1.0]), 1.0).pass);
        assert!(order_check("y", "m", ("a", -0.1), ("b", 0.2)).pass);
        assert!(!order_check("y", "m", ("a", 0.2), ("b", 0.2)).pass);
    }
}
