//! Ancestral (DDPM) and respaced implicit (DDIM) sampling, plus the
//! residual output wrapper.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{CondBatch, ConditionBundle};
use crate::denoiser::Denoiser;
use crate::diffusion::{scalar, Prediction};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::schedule::NoiseSchedule;
use crate::tensorio::ImageTensor;

pub const DEFAULT_SAMPLING_STEPS: usize = 25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Visited timesteps (increasing; walked from the last one down) and the
/// DDIM stochasticity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub tau: Vec<usize>,
    pub eta: f64,
    pub kind: SamplerKind,
}

/// `n` uniformly strided steps ending at `steps`: τ_i = ⌈i·T/n⌉.
pub fn respace(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(Error::invalid(format!(
            "cannot respace {steps} steps into {n}"
        )));
    }
    Ok((1..=n).map(|i| (i * steps).div_ceil(n)).collect())
}

impl SamplerPlan {
    pub fn ddim(steps: usize, n: usize, eta: f64) -> Result<Self> {
        let p = SamplerPlan {
            tau: respace(steps, n)?,
            eta,
            kind: SamplerKind::Ddim,
        };
        p.validate(steps)?;
        Ok(p)
    }

    /// Every step, ancestral updates.
    pub fn ddpm(steps: usize) -> Self {
        SamplerPlan {
            tau: (1..=steps).collect(),
            eta: 1.0,
            kind: SamplerKind::Ddpm,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.tau.is_empty() {
            return Err(Error::invalid("empty sampling plan"));
        }
        if self.tau[0] == 0 || self.tau.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("tau must be strictly increasing within [1, T]"));
        }
        if *self.tau.last().unwrap() != steps {
            return Err(Error::invalid(format!(
                "tau must end at T={steps}, ends at {}",
                self.tau.last().unwrap()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.kind == SamplerKind::Ddpm && self.tau.len() != steps {
            return Err(Error::invalid("ddpm sampling visits every step"));
        }
        Ok(())
    }

    /// (t, t_prev) pairs in the order they are applied.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        (0..self.tau.len())
            .rev()
            .map(|i| (self.tau[i], if i == 0 { 0 } else { self.tau[i - 1] }))
            .collect()
    }
}

/// DDIM σ_t for a jump from `t` to `t_prev`.
pub fn ddim_sigma(sch: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let a = sch.alpha_bar(t);
    let ap = sch.alpha_bar(t_prev);
    eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).max(0.0).sqrt()
}

/// One ancestral step. The prediction is converted to ε per element in f64.
pub fn ddpm_step(
    x_t: &ImageTensor,
    t: usize,
    pred: &Prediction,
    sch: &NoiseSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    sch.check_step(t)?;
    x_t.check_same_dims(&pred.value, "ddpm_step prediction")?;
    x_t.check_same_dims(noise, "ddpm_step noise")?;
    let ab = sch.alpha_bar(t);
    let k_eps = sch.beta(t) / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / sch.alpha(t).sqrt();
    let sd = if t > 1 { sch.posterior_variance(t)?.sqrt() } else { 0.0 };
    let kind = pred.kind;
    Ok(ImageTensor::from_fn(x_t.bands(), x_t.height(), x_t.width(), |c, y, x| {
        let xt = x_t.get(c, y, x) as f64;
        let eps = scalar::eps(kind, pred.value.get(c, y, x) as f64, xt, ab);
        let mu = inv_sqrt_alpha * (xt - k_eps * eps);
        (mu + sd * noise.get(c, y, x) as f64) as f32
    })
    .with_range(x_t.range_hint))
}

/// One implicit step from `t` to `t_prev < t`.
pub fn ddim_step(
    x_t: &ImageTensor,
    t: usize,
    pred: &Prediction,
    t_prev: usize,
    sch: &NoiseSchedule,
    eta: f64,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    sch.check_step(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("t_prev {t_prev} must be below t {t}")));
    }
    x_t.check_same_dims(&pred.value, "ddim_step prediction")?;
    x_t.check_same_dims(noise, "ddim_step noise")?;
    let ab = sch.alpha_bar(t);
    let ap = sch.alpha_bar(t_prev);
    let sigma = ddim_sigma(sch, t, t_prev, eta);
    let dir2 = 1.0 - ap - sigma * sigma;
    if dir2 < -1e-12 {
        return Err(Error::NumericDomain(format!(
            "1 − ᾱ_prev − σ² = {dir2} < 0 at t={t}, t_prev={t_prev}"
        )));
    }
    let k_dir = dir2.max(0.0).sqrt();
    let k_x0 = ap.sqrt();
    let kind = pred.kind;
    Ok(ImageTensor::from_fn(x_t.bands(), x_t.height(), x_t.width(), |c, y, x| {
        let xt = x_t.get(c, y, x) as f64;
        let v = pred.value.get(c, y, x) as f64;
        let x0 = scalar::x0(kind, v, xt, ab);
        let eps = scalar::eps(kind, v, xt, ab);
        (k_x0 * x0 + k_dir * eps + sigma * noise.get(c, y, x) as f64) as f32
    })
    .with_range(x_t.range_hint))
}

fn gaussian(dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::from_fn(dims.0, dims.1, dims.2, |_, _, _| StandardNormal.sample(rng))
}

/// Runs `plan` from `x_T` with an arbitrary predictor. One standard-normal
/// image is drawn from `rng` per transition, whether or not it is used, so
/// samplers sharing a seed and a step sequence share their noise.
pub fn run_plan(
    x_start: ImageTensor,
    plan: &SamplerPlan,
    sch: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut predict: impl FnMut(&ImageTensor, usize) -> Result<Prediction>,
) -> Result<ImageTensor> {
    plan.validate(sch.steps())?;
    let mut x = x_start;
    for (t, t_prev) in plan.transitions() {
        let pred = predict(&x, t)?;
        let noise = gaussian(x.dims(), rng);
        x = match plan.kind {
            SamplerKind::Ddpm => ddpm_step(&x, t, &pred, sch, &noise)?,
            SamplerKind::Ddim => ddim_step(&x, t, &pred, t_prev, sch, plan.eta, &noise)?,
        };
        if !x.is_finite() {
            return Err(Error::NumericDomain(format!("non-finite sample after t={t}")));
        }
    }
    Ok(x)
}

/// Adds the upsampled MS back when the network models the residual, then
/// clips to the condition's value range.
pub fn finish(model: &Denoiser, x: &ImageTensor, cond: &ConditionBundle) -> ImageTensor {
    let range = cond.lrms_up.range_hint;
    let out = if model.cfg.residual {
        let (lo, hi) = x
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        log::debug!("sampled residual range [{lo:.4}, {hi:.4}]");
        x.add(&cond.lrms_up)
    } else {
        x.clone()
    };
    out.with_range(range).clip_to_range()
}

/// Fused image for one condition: seeded x_T ~ N(0, I), the plan's steps,
/// then [`finish`].
pub fn sample(
    model: &Denoiser,
    cond: &ConditionBundle,
    plan: &SamplerPlan,
    sch: &NoiseSchedule,
    seed: u64,
) -> Result<ImageTensor> {
    Ok(sample_batch(model, &[cond], plan, sch, &[seed])?.remove(0))
}

/// Samples several conditions together, one network pass per step. Each
/// image uses its own seed, so results match [`sample`] image by image.
pub fn sample_batch(
    model: &Denoiser,
    conds: &[&ConditionBundle],
    plan: &SamplerPlan,
    sch: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<ImageTensor>> {
    if conds.len() != seeds.len() || conds.is_empty() {
        return Err(Error::invalid("need one seed per condition"));
    }
    plan.validate(sch.steps())?;
    let dims = conds[0].lrms_up.dims();
    if conds.iter().any(|c| c.lrms_up.dims() != dims) {
        return Err(Error::invalid("batched conditions must share dimensions"));
    }
    let batch = CondBatch::from_bundles(conds)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut xs: Vec<ImageTensor> = rngs.iter_mut().map(|r| gaussian(dims, r)).collect();
    let kind = model.cfg.prediction_kind;
    for (t, t_prev) in plan.transitions() {
        let refs: Vec<&ImageTensor> = xs.iter().collect();
        let out = model.forward_batch(&Tensor::from_images(&refs)?, &vec![t; xs.len()], &batch)?;
        for ((x, value), rng) in xs.iter_mut().zip(out.to_images()).zip(rngs.iter_mut()) {
            let pred = Prediction::new(kind, value);
            let noise = gaussian(dims, rng);
            *x = match plan.kind {
                SamplerKind::Ddpm => ddpm_step(x, t, &pred, sch, &noise)?,
                SamplerKind::Ddim => ddim_step(x, t, &pred, t_prev, sch, plan.eta, &noise)?,
            };
            if !x.is_finite() {
                return Err(Error::NumericDomain(format!("non-finite sample after t={t}")));
            }
        }
    }
    Ok(xs
        .iter()
        .zip(conds)
        .map(|(x, c)| finish(model, x, c))
        .collect())
}
