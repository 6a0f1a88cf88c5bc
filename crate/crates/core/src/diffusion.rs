//! Noise schedules, forward noising, the denoising loss, guidance and the
//! reverse sampler.
//!
//! Latents live in "diffusion space": the codec output mapped from `[0, 1]`
//! to `[-1, 1]` (see [`to_diffusion_space`]).

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};
use crate::unet::{DenoiseInputs, NoisePredictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps)
    }
}

/// `beta[t-1]` and `alpha_bar[t-1]` hold the values for timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `ᾱ_t` for `t` in `[0, T]`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bar[t - 1]),
            t => Err(invalid(format!("timestep {t} outside [1, {}]", self.len()))),
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(invalid(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }

    /// Descending timesteps visited by a sampler with `steps` evaluations.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(invalid(format!("sampling steps must be in [1, {t_max}], got {steps}")));
        }
        if steps == 1 {
            return Ok(vec![t_max]);
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|k| 1 + ((k * (t_max - 1)) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// Maps codec values in `[0, 1]` to `[-1, 1]`.
pub fn to_diffusion_space(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

pub fn from_diffusion_space(z: &Tensor) -> Result<Tensor> {
    Ok(z.affine(0.5, 0.5)?)
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    let mut shape = vec![n];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε`, one timestep per sample.
pub fn add_noise(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(invalid(format!(
            "x0 {:?} and noise {:?} differ in shape",
            x0.dims(),
            eps.dims()
        )));
    }
    if t.len() != x0.dim(0)? {
        return Err(invalid(format!("{} timesteps for batch of {}", t.len(), x0.dim(0)?)));
    }
    let mut a = Vec::with_capacity(t.len());
    let mut b = Vec::with_capacity(t.len());
    for &ti in t {
        sched.check_t(ti)?;
        let ab = sched.alpha_bar[ti - 1];
        a.push(ab.sqrt());
        b.push((1.0 - ab).sqrt());
    }
    Ok((x0.broadcast_mul(&per_sample(&a, x0)?)? + eps.broadcast_mul(&per_sample(&b, eps)?)?)?)
}

/// One denoising training batch in diffusion space.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    /// Clean latent, `(N, C, h, w)`.
    pub x0: Tensor,
    /// Fill mask at latent resolution, `(N, 1, h, w)`.
    pub fill_mask: Tensor,
    /// `x0` with fill cells zeroed.
    pub masked_latent: Tensor,
    /// Text embedding, `(N, L, D)`.
    pub text: Tensor,
    /// Salient-object mask at image resolution, `(N, 1, H, W)`.
    pub control: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl DiffusionBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            x0: self.x0.to_dtype(dtype)?,
            fill_mask: self.fill_mask.to_dtype(dtype)?,
            masked_latent: self.masked_latent.to_dtype(dtype)?,
            text: self.text.to_dtype(dtype)?,
            control: self.control.to_dtype(dtype)?,
            t: self.t.clone(),
            eps: self.eps.to_dtype(dtype)?,
        })
    }
}

/// Mean over the batch of the per-sample squared error `‖ε − ε̂(x_t)‖²`.
pub fn training_loss(model: &dyn NoisePredictor, batch: &DiffusionBatch, sched: &NoiseSchedule) -> Result<Tensor> {
    let x_t = add_noise(&batch.x0, &batch.t, &batch.eps, sched)?;
    let inputs = DenoiseInputs {
        x_t: &x_t,
        fill_mask: &batch.fill_mask,
        masked_latent: &batch.masked_latent,
        text: &batch.text,
        timesteps: &batch.t,
        control: Some(&batch.control),
    };
    let pred = model.predict(&inputs)?;
    if pred.dims() != batch.eps.dims() {
        return Err(config(format!(
            "model output {:?} does not match noise {:?}",
            pred.dims(),
            batch.eps.dims()
        )));
    }
    let n = batch.len() as f64;
    let loss = ((pred - &batch.eps)?.sqr()?.sum_all()? / n)?;
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {v} (timesteps {:?})",
            batch.t
        )));
    }
    Ok(loss)
}

/// `ε_u + s·(ε_c − ε_u)`; exact for `s = 0` and `s = 1`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_uncond.dims() != eps_cond.dims() {
        return Err(invalid(format!(
            "guidance inputs differ in shape: {:?} vs {:?}",
            eps_uncond.dims(),
            eps_cond.dims()
        )));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(invalid(format!(
            "guidance scale must be finite and non-negative, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

/// Standard-normal tensor of `shape` drawn from a ChaCha8 stream.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Stochastic (η = 1) updates instead of the deterministic ones.
    #[serde(default)]
    pub ancestral: bool,
    /// Clip the predicted clean latent to `[-1, 1]` at every step.
    #[serde(default = "default_true")]
    pub clip_x0: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance: 3.0,
            ancestral: false,
            clip_x0: true,
        }
    }
}

/// Sampling conditions, batch-first, in diffusion space.
#[derive(Clone, Copy)]
pub struct SampleConditions<'a> {
    pub fill_mask: &'a Tensor,
    pub masked_latent: &'a Tensor,
    pub text: &'a Tensor,
    /// Null-prompt embedding with the same shape as `text`.
    pub text_uncond: &'a Tensor,
    pub control: Option<&'a Tensor>,
}

/// Reverse process from pure noise. Each sample draws from its own seed, so
/// results do not depend on batch composition. After every step the kept
/// cells (fill mask 0) are reset to the noised `masked_latent` at the next
/// noise level, using the sample's initial noise.
pub fn sample(
    model: &dyn NoisePredictor,
    cond: &SampleConditions,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Tensor> {
    let dims = cond.masked_latent.dims().to_vec();
    let dtype = cond.masked_latent.dtype();
    let n = dims[0];
    if seeds.len() != n {
        return Err(invalid(format!("{} seeds for batch of {n}", seeds.len())));
    }
    if cond.text.dims() != cond.text_uncond.dims() {
        return Err(invalid("conditional and null text embeddings differ in shape"));
    }
    let timesteps = sched.sampling_timesteps(cfg.steps)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let parts = rngs
            .iter_mut()
            .map(|r| gaussian(r, &[1, dims[1], dims[2], dims[3]], dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let eps_init = draw(&mut rngs)?;
    let keep = cond.fill_mask.affine(-1.0, 1.0)?;
    let mut x = eps_init.clone();

    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let ab = sched.alpha_bar_at(t)?;
        let ab_prev = sched.alpha_bar_at(t_prev)?;
        let ts = vec![t; n];
        let predict = |text: &Tensor| {
            model.predict(&DenoiseInputs {
                x_t: &x,
                fill_mask: cond.fill_mask,
                masked_latent: cond.masked_latent,
                text,
                timesteps: &ts,
                control: cond.control,
            })
        };
        let eps = if cfg.guidance == 1.0 {
            predict(cond.text)?
        } else if cfg.guidance == 0.0 {
            predict(cond.text_uncond)?
        } else {
            let u = predict(cond.text_uncond)?;
            let c = predict(cond.text)?;
            cfg_combine(&u, &c, cfg.guidance)?
        };
        let mut x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        if cfg.clip_x0 {
            x0 = x0.clamp(-1.0, 1.0)?;
        }
        let sigma = if cfg.ancestral && t_prev > 0 {
            ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt()
        } else {
            0.0
        };
        let mut next = ((&x0 * ab_prev.sqrt())? + (&eps * (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt())?)?;
        if sigma > 0.0 {
            next = (next + (draw(&mut rngs)? * sigma)?)?;
        }
        let known = ((cond.masked_latent * ab_prev.sqrt())? + (&eps_init * (1.0 - ab_prev).sqrt())?)?;
        x = (next.broadcast_mul(cond.fill_mask)? + known.broadcast_mul(&keep)?)?;
        let m = x
            .abs()?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .max(0)?
            .to_scalar::<f64>()?;
        if !m.is_finite() {
            return Err(Error::Numeric(format!(
                "sampler produced non-finite values at step {k} (t = {t})"
            )));
        }
    }
    Ok(x)
}
