//! Variance schedules, closed-form forward noising, and DDIM reverse sampling.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, and `ᾱ_0` is defined as 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
pub use crate::sequence::LabelSequence;

/// Largest per-step variance a generated schedule may use.
const MAX_GAMMA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    /// `γ_t` linearly spaced from `start` to `end`.
    Linear { start: f64, end: f64 },
    /// Squared-cosine cumulative signal rate with offset `s`.
    Cosine { s: f64 },
    /// Caller-provided `γ_1..γ_T`.
    Explicit { gammas: Vec<f64> },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine { s: 0.008 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    gamma: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    eta: f64,
}

/// Builds a `T`-step schedule. `eta = 0` gives deterministic DDIM; `eta > 0`
/// sets `σ_t = η·√((1−ᾱ_{t−1})/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_{t−1})`.
pub fn build_schedule(steps: usize, kind: &ScheduleKind, eta: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("eta must be a finite non-negative number, got {eta}")));
    }
    let gamma: Vec<f64> = match kind {
        ScheduleKind::Linear { start, end } => {
            if steps == 1 {
                vec![*start]
            } else {
                (0..steps)
                    .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine { s } => {
            let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, MAX_GAMMA))
                .collect()
        }
        ScheduleKind::Explicit { gammas } => {
            if gammas.len() != steps {
                return Err(Error::Config(format!(
                    "explicit schedule has {} variances for {steps} steps",
                    gammas.len()
                )));
            }
            gammas.clone()
        }
    };
    if let Some(bad) = gamma.iter().find(|&&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::Config(format!("variance {bad} outside (0, 1)")));
    }
    let alpha: Vec<f64> = gamma.iter().map(|g| 1.0 - g).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let mut sched = NoiseSchedule {
        gamma,
        alpha,
        alpha_bar,
        sigma: Vec::new(),
        eta,
    };
    sched.sigma = (1..=steps).map(|t| sched.sigma_between(t, t - 1)).collect();
    Ok(sched)
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// `ᾱ_1..ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `σ_t` for the single step `t → t−1`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `ᾱ_t` with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-process noise scale for a jump `t → prev`.
    pub fn sigma_between(&self, t: usize, prev: usize) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        let (ab_t, ab_p) = (self.alpha_bar(t), self.alpha_bar(prev));
        if ab_t >= 1.0 {
            return 0.0;
        }
        self.eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).max(0.0).sqrt()
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside {lo}..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Timesteps visited by a `count`-step sampler, starting at `T`: a uniform
    /// stride of `⌊T/count⌋`, with the last visit forced to `t = 1`.
    pub fn sampling_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        if count < 1 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if count > self.steps() {
            return Err(Error::Config(format!(
                "{count} sampling steps exceed the {}-step schedule",
                self.steps()
            )));
        }
        let stride = self.steps() / count;
        let mut ts: Vec<usize> = (0..count).map(|i| self.steps() - i * stride).collect();
        if count > 1 {
            ts[count - 1] = 1;
        }
        Ok(ts)
    }
}

fn same_shape(a: &LabelSequence, b: &LabelSequence, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// `y_t = √ᾱ_t·y_0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(y0: &LabelSequence, t: usize, eps: &LabelSequence, sched: &NoiseSchedule) -> Result<LabelSequence> {
    sched.check_t(t, true)?;
    same_shape(y0, eps, "forward_noise")?;
    let ab = sched.alpha_bar(t);
    Ok(noise_with(y0, eps, ab))
}

pub(crate) fn noise_with(y0: &LabelSequence, eps: &LabelSequence, alpha_bar: f64) -> LabelSequence {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = y0
        .tensor()
        .data()
        .iter()
        .zip(eps.tensor().data())
        .map(|(y, e)| s * y + n * e)
        .collect();
    LabelSequence::new(y0.len(), y0.classes(), data).expect("shape preserved")
}

/// One reverse update `t → t−1`.
pub fn ddim_step(
    y_t: &LabelSequence,
    t: usize,
    y0_hat: &LabelSequence,
    sched: &NoiseSchedule,
    eps: &LabelSequence,
) -> Result<LabelSequence> {
    ddim_step_to(y_t, t, t.saturating_sub(1), y0_hat, sched, eps)
}

/// Reverse update over an arbitrary jump `t → prev` (`prev < t`), used by
/// strided sampling.
pub fn ddim_step_to(
    y_t: &LabelSequence,
    t: usize,
    prev: usize,
    y0_hat: &LabelSequence,
    sched: &NoiseSchedule,
    eps: &LabelSequence,
) -> Result<LabelSequence> {
    sched.check_t(t, false)?;
    sched.check_t(prev, true)?;
    if prev >= t {
        return Err(Error::Contract(format!("reverse step must go backwards, got {t} → {prev}")));
    }
    same_shape(y_t, y0_hat, "ddim_step")?;
    same_shape(y_t, eps, "ddim_step")?;
    let (ab_t, ab_p) = (sched.alpha_bar(t), sched.alpha_bar(prev));
    let sigma = sched.sigma_between(t, prev);
    let dir_var = 1.0 - ab_p - sigma * sigma;
    if dir_var < 0.0 {
        return Err(Error::Numeric(format!(
            "schedule error at t={t}: 1 - ᾱ_prev - σ² = {dir_var} < 0"
        )));
    }
    let dir = dir_var.sqrt();
    let noise_scale = (1.0 - ab_t).sqrt();
    let data = y_t
        .tensor()
        .data()
        .iter()
        .zip(y0_hat.tensor().data())
        .zip(eps.tensor().data())
        .map(|((&y, &x0), &e)| {
            let eps_hat = if noise_scale > 0.0 {
                (y - ab_t.sqrt() * x0) / noise_scale
            } else {
                0.0
            };
            ab_p.sqrt() * x0 + dir * eps_hat + sigma * e
        })
        .collect();
    let out = LabelSequence::new(y_t.len(), y_t.classes(), data)?;
    if !out.tensor().is_finite() {
        return Err(Error::Numeric(format!("non-finite state after reverse step at t={t}")));
    }
    Ok(out)
}

/// Standard normal `len × classes` noise from a dedicated generator.
pub fn gaussian(len: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelSequence {
    LabelSequence::from_tensor(Tensor::randn(&[len, classes], rng)).expect("rank 2")
}

/// Anything that maps a noisy state at timestep `t` to a clean estimate.
pub trait Denoiser {
    fn denoise(&mut self, y_t: &LabelSequence, t: usize) -> Result<LabelSequence>;
}

impl<F> Denoiser for F
where
    F: FnMut(&LabelSequence, usize) -> Result<LabelSequence>,
{
    fn denoise(&mut self, y_t: &LabelSequence, t: usize) -> Result<LabelSequence> {
        self(y_t, t)
    }
}

/// Full reverse trajectory `[ŷ_T, …, ŷ_0]` of `steps + 1` states.
///
/// `ŷ_T` is seeded standard normal noise; the sampler then visits
/// [`NoiseSchedule::sampling_timesteps`] and finishes at `t = 0`. Conditions
/// are captured by the denoiser.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    len: usize,
    classes: usize,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<LabelSequence>> {
    let ts = sched.sampling_timesteps(steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = gaussian(len, classes, &mut rng);
    let mut trajectory = Vec::with_capacity(ts.len() + 1);
    trajectory.push(y.clone());
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let y0_hat = denoiser.denoise(&y, t)?;
        let eps = if sched.eta() > 0.0 {
            gaussian(len, classes, &mut rng)
        } else {
            LabelSequence::zeros(len, classes)
        };
        y = ddim_step_to(&y, t, prev, &y0_hat, sched, &eps)?;
        trajectory.push(y.clone());
    }
    Ok(trajectory)
}
