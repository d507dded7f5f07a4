//! Forward noising, the ε-prediction objective, condition dropout, dual
//! classifier-free guidance and deterministic DDIM sampling.
//!
//! The sampler and the guidance combinator take the noise predictor as a
//! closure so they can be checked against analytic oracles without a network.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Drops;
use crate::error::{Error, Result};
use crate::tensor::{htns, Graph, Tensor, Var};
use crate::util::seeded_rng;

/// Serializable schedule parameters; see [`NoiseSchedule::from_config`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
            ddim_steps: 10,
        }
    }
}

/// Linear-β schedule with cached `ᾱ_t = Π_{s ≤ t} (1 − β_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::from_config(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn from_config(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            timesteps,
            beta_start,
            beta_end,
            ddim_steps,
        } = config;
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        if ddim_steps == 0 || ddim_steps > timesteps {
            return Err(Error::invalid(format!(
                "ddim_steps {ddim_steps} must lie in 1..={timesteps}"
            )));
        }
        let betas: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (timesteps - 1) as f64;
            (0..timesteps).map(|i| beta_start + step * i as f64).collect()
        };
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            total: self.timesteps(),
        })
    }

    /// Evenly spaced, strictly increasing sub-sequence ending at `T − 1`.
    pub fn ddim_timesteps(&self) -> Vec<usize> {
        let (t, n) = (self.timesteps(), self.config.ddim_steps);
        (0..n).map(|i| (i + 1) * t / n - 1).collect()
    }

    /// A copy of this schedule sampling with `n` DDIM steps.
    pub fn with_ddim_steps(&self, n: usize) -> Result<Self> {
        NoiseSchedule::from_config(ScheduleConfig {
            ddim_steps: n,
            ..self.config
        })
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(noise, |z, e| a * z + b * e)
}

/// `x̂0 = (z_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn predict_x0(z_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps, |z, e| (z - b * e) / a)
}

/// One η = 0 DDIM update from `t` to `t_prev`; `None` means the clean end
/// point (`ᾱ = 1`), which returns `x̂0` itself.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>, sched: &NoiseSchedule) -> Result<Tensor> {
    let x0 = predict_x0(x_t, eps, t, sched)?;
    match t_prev {
        None => Ok(x0),
        Some(tp) => {
            let ab = sched.alpha_bar(tp)?;
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            x0.zip_map(eps, |x, e| a * x + b * e)
        }
    }
}

/// A training draw: the timestep and the planted noise.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: usize,
    pub noise: Tensor,
}

/// Samples `t` uniformly from `0..T` and `ε ~ N(0, I)` of `shape`.
pub fn draw_noise<R: Rng + ?Sized>(shape: &[usize], sched: &NoiseSchedule, rng: &mut R) -> NoiseDraw {
    let t = rng.random_range(0..sched.timesteps());
    NoiseDraw {
        t,
        noise: Tensor::randn(shape, 1.0, rng),
    }
}

/// Mean over `batch` of the per-element `mean((ε − ε̂)²)`, with one fresh
/// timestep and noise draw per element. `predict(g, i, z_t, t)` returns `ε̂`
/// for element `i`.
pub fn training_loss<R, F>(
    g: &mut Graph,
    batch: &[Tensor],
    sched: &NoiseSchedule,
    rng: &mut R,
    mut predict: F,
) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Graph, usize, &Tensor, usize) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    let mut total: Option<Var> = None;
    for (i, z0) in batch.iter().enumerate() {
        let draw = draw_noise(z0.shape(), sched, rng);
        let z_t = forward_diffuse(z0, draw.t, &draw.noise, sched)?;
        let pred = predict(g, i, &z_t, draw.t)?;
        let target = g.constant(draw.noise);
        let l = g.mse(&pred, &target)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(&acc, &l)?,
        });
    }
    let total = total.expect("batch is non-empty");
    Ok(g.scale(&total, 1.0 / batch.len() as f64))
}

/// Drops the image condition, the audio and the motion frames independently
/// with probability `p_drop` each.
pub fn condition_dropout<R: Rng + ?Sized>(p_drop: f64, rng: &mut R) -> Result<Drops> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::invalid(format!("drop probability {p_drop} is outside [0, 1]")));
    }
    // always three draws so the stream position does not depend on p
    let mut coin = || rng.random::<f64>() < p_drop;
    Ok(Drops {
        reference: coin(),
        audio: coin(),
        motion: coin(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    /// `λ_a`
    pub audio: f64,
    /// `λ_i`
    pub image: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        GuidanceScales { audio: 3.5, image: 3.5 }
    }
}

impl GuidanceScales {
    pub fn new(audio: f64, image: f64) -> Result<Self> {
        let s = GuidanceScales { audio, image };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("audio", self.audio), ("image", self.image)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} guidance scale {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Coefficients of `(ε_uu, ε_iu, ε_ia)` in the expanded guidance sum.
    pub fn coefficients(&self) -> [f64; 3] {
        [1.0 - self.image, self.image - self.audio, self.audio]
    }
}

/// Condition settings of the three guidance passes, in coefficient order:
/// nothing, image only, image and audio. Motion conditioning is kept.
pub const GUIDANCE_PASSES: [Drops; 3] = [
    Drops {
        reference: true,
        audio: true,
        motion: false,
    },
    Drops {
        reference: false,
        audio: true,
        motion: false,
    },
    Drops::NONE,
];

/// `ε̂ = ε_uu + λ_i(ε_iu − ε_uu) + λ_a(ε_ia − ε_iu)`, evaluated as
/// `(1 − λ_i)ε_uu + (λ_i − λ_a)ε_iu + λ_a ε_ia`. Passes whose coefficient is
/// zero are skipped, so `(1, 1)` is exactly the conditioned pass and `(0, 0)`
/// exactly the unconditioned one.
pub fn cfg_epsilon<F>(scales: GuidanceScales, mut eps: F) -> Result<Tensor>
where
    F: FnMut(Drops) -> Result<Tensor>,
{
    scales.validate()?;
    let mut out: Option<Tensor> = None;
    for (coef, drops) in scales.coefficients().into_iter().zip(GUIDANCE_PASSES) {
        if coef == 0.0 {
            continue;
        }
        let e = eps(drops)?;
        out = Some(match out {
            None => e.scale(coef),
            Some(acc) => acc.zip_map(&e, |a, b| a + coef * b)?,
        });
    }
    match out {
        Some(t) => Ok(t),
        // the three coefficients sum to 1, so at least one is nonzero
        None => Err(Error::invalid("guidance has no active pass")),
    }
}

/// Runs DDIM from `x` at `steps[last]` down through every earlier entry of
/// the increasing `steps` and finally to `x̂0`. `eps(x_t, t)` predicts noise.
/// With `dump`, every intermediate latent is written as
/// `step_<i>_t<t>.htns`.
pub fn ddim_from<F>(x: Tensor, steps: &[usize], sched: &NoiseSchedule, dump: Option<&Path>, mut eps: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("DDIM steps {steps:?} must be non-empty and strictly increasing")));
    }
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut x = x;
    for (i, idx) in (0..steps.len()).rev().enumerate() {
        let t = steps[idx];
        let e = eps(&x, t)?;
        if e.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "ddim epsilon",
                lhs: e.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let t_prev = idx.checked_sub(1).map(|p| steps[p]);
        x = ddim_step(&x, &e, t, t_prev, sched)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("DDIM latent after step t = {t}")));
        }
        if let Some(dir) = dump {
            htns::write(dir.join(format!("step_{i:03}_t{t}.htns")), &x)?;
        }
    }
    Ok(x)
}

/// Seeded standard-normal start `z_T` of `shape`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Full guided sampling: seeded `z_T`, the schedule's DDIM sub-sequence and
/// [`cfg_epsilon`] at every step. `eps(x_t, t, drops)` is one model pass.
pub fn ddim_sample<F>(
    shape: &[usize],
    sched: &NoiseSchedule,
    scales: GuidanceScales,
    seed: u64,
    dump: Option<&Path>,
    mut eps: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, Drops) -> Result<Tensor>,
{
    let steps = sched.ddim_timesteps();
    let x = initial_noise(shape, seed);
    ddim_from(x, &steps, sched, dump, |x, t| cfg_epsilon(scales, |d| eps(x, t, d)))
}
