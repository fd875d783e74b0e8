//! Few-step generation by iterating the flow map from noise to data.

use crate::error::{check_dim, Error, Result};
use crate::fieldnet::{Field, Inputs, NULL_LABEL};
use crate::interpolant::Interpolant;

/// Non-increasing sampling times in the interpolant's domain, noise end first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSchedule {
    times: Vec<f64>,
}

impl SampleSchedule {
    /// Validates an explicit list of times (domain units). Repeated entries are
    /// allowed and act as identity steps.
    pub fn new(interp: &Interpolant, times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSchedule("a schedule needs at least two times".into()));
        }
        let (lo, hi) = interp.domain();
        for (i, &t) in times.iter().enumerate() {
            if !(lo..=hi).contains(&t) {
                return Err(Error::InvalidSchedule(format!("time {t} outside [{lo}, {hi}]")));
            }
            if i > 0 && t > times[i - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "times must not increase: {} then {t}",
                    times[i - 1]
                )));
            }
        }
        Ok(Self { times })
    }

    /// `steps` equal steps in normalized time from 1 down to `T_MIN`.
    pub fn uniform(interp: &Interpolant, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        let lo = crate::T_MIN;
        let times = (0..=steps)
            .map(|i| {
                let u = if i == steps { lo } else { 1.0 - (1.0 - lo) * i as f64 / steps as f64 };
                interp.to_domain(u)
            })
            .collect();
        Self::new(interp, times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Class and guidance-scale inputs shared by every step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    /// One label per sample, or a single label broadcast to all.
    pub labels: Option<Vec<usize>>,
    /// Value for an omega input channel.
    pub omega: Option<f64>,
}

impl Conditioning {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn label(c: usize) -> Self {
        Self { labels: Some(vec![c]), omega: None }
    }

    fn expand(&self, n: usize) -> Result<(Option<Vec<usize>>, Option<Vec<f64>>)> {
        let labels = match &self.labels {
            None => None,
            Some(l) if l.len() == 1 => Some(vec![l[0]; n]),
            Some(l) if l.len() == n => Some(l.clone()),
            Some(l) => return Err(Error::DimensionMismatch { expected: n, got: l.len() }),
        };
        Ok((labels, self.omega.map(|w| vec![w; n])))
    }
}

/// One flow-map jump `x <- (A' x - A F) / nu` for every row.
fn jump(interp: &Interpolant, x: &mut [f64], f: &[f64], t: f64, s: f64) -> Result<()> {
    let b = interp.bridge(t, s)?;
    let nu = interp.nu();
    for (x, &f) in x.iter_mut().zip(f) {
        *x = (b.a1 * *x - b.a * f) / nu;
    }
    Ok(())
}

/// Iterates the flow map along `schedule` starting from noise `z` (rows of `d`).
pub fn few_step_sample<F: Field + ?Sized>(
    field: &F,
    interp: &Interpolant,
    z: &[f64],
    schedule: &SampleSchedule,
    cond: &Conditioning,
) -> Result<Vec<f64>> {
    let n = row_count(z, field.data_dim())?;
    let (labels, omega) = cond.expand(n)?;
    let mut x = z.to_vec();
    let mut t = vec![0.0; n];
    let mut s = vec![0.0; n];
    for w in schedule.times.windows(2) {
        if w[0] == w[1] {
            continue;
        }
        t.fill(w[0]);
        s.fill(w[1]);
        let f = field.eval(&inputs(&x, &t, &s, labels.as_deref(), omega.as_deref()))?;
        jump(interp, &mut x, &f, w[0], w[1])?;
    }
    Ok(x)
}

/// Sampling with the per-step blend `(1 - omega) F(null) + omega F(c)`.
/// `omega = 1` and `omega = 0` evaluate only the conditional or only the
/// unconditional field, so they match plain sampling exactly.
pub fn post_cfg_sample<F: Field + ?Sized>(
    field: &F,
    interp: &Interpolant,
    z: &[f64],
    schedule: &SampleSchedule,
    cond: &Conditioning,
    omega: f64,
) -> Result<Vec<f64>> {
    if field.num_classes().is_none() || cond.labels.is_none() {
        return Err(Error::UnsupportedConfig("post-cfg sampling needs a conditional network and labels".into()));
    }
    if !omega.is_finite() {
        return Err(Error::InvalidArgument(format!("guidance scale must be finite, got {omega}")));
    }
    if omega == 1.0 {
        return few_step_sample(field, interp, z, schedule, cond);
    }
    let null = Conditioning { labels: Some(vec![NULL_LABEL]), omega: cond.omega };
    if omega == 0.0 {
        return few_step_sample(field, interp, z, schedule, &null);
    }
    let n = row_count(z, field.data_dim())?;
    let (labels, omegas) = cond.expand(n)?;
    let nulls = vec![NULL_LABEL; n];
    let mut x = z.to_vec();
    let mut t = vec![0.0; n];
    let mut s = vec![0.0; n];
    for w in schedule.times.windows(2) {
        if w[0] == w[1] {
            continue;
        }
        t.fill(w[0]);
        s.fill(w[1]);
        let f_c = field.eval(&inputs(&x, &t, &s, labels.as_deref(), omegas.as_deref()))?;
        let f_u = field.eval(&inputs(&x, &t, &s, Some(&nulls), omegas.as_deref()))?;
        let blended: Vec<f64> = f_u.iter().zip(&f_c).map(|(u, c)| (1.0 - omega) * u + omega * c).collect();
        jump(interp, &mut x, &blended, w[0], w[1])?;
    }
    Ok(x)
}

fn row_count(z: &[f64], d: usize) -> Result<usize> {
    check_dim(d * (z.len() / d), z.len())?;
    Ok(z.len() / d)
}

fn inputs<'a>(
    x: &'a [f64],
    t: &'a [f64],
    s: &'a [f64],
    labels: Option<&'a [usize]>,
    omega: Option<&'a [f64]>,
) -> Inputs<'a> {
    Inputs { x, t, s, labels, omega }
}
