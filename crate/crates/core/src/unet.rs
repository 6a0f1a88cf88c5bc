//! The base text-guided inpainting denoiser.
//!
//! A U-Net with an encoder, a middle block and a skip-connected decoder. The
//! input is the channel concatenation `[x_t, fill_mask, masked_latent]`
//! (`2C + 1` channels). Timesteps enter every residual block through a
//! sinusoidal embedding; text enters through cross-attention at the
//! configured levels.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, invalid, Error, Result};
use crate::nn;
use crate::params::{ParamInit, Scope, TensorMap};

/// Longest text sequence accepted by the embedders.
pub const MAX_TEXT_TOKENS: usize = 77;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Channels after the input convolution.
    pub base_width: usize,
    /// Width multiplier per encoder level; its length is the level count.
    pub channel_mult: Vec<usize>,
    pub blocks_per_level: usize,
    pub attention_levels: BTreeSet<usize>,
    /// Transformer layers per attention site.
    pub transformer_depth: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub text_len: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl UNetConfig {
    /// Desk-scale configuration: identity codec latents, three levels,
    /// attention at the two coarsest levels.
    pub fn toy() -> Self {
        Self {
            latent_channels: 3,
            base_width: 32,
            channel_mult: vec![1, 2, 2],
            blocks_per_level: 1,
            attention_levels: [1, 2].into_iter().collect(),
            transformer_depth: 1,
            heads: 4,
            text_dim: 64,
            text_len: 16,
            time_dim: 128,
            norm_groups: 8,
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 3,
            base_width: 8,
            channel_mult: vec![1, 1],
            blocks_per_level: 1,
            attention_levels: [1].into_iter().collect(),
            transformer_depth: 1,
            heads: 2,
            text_dim: 8,
            text_len: 4,
            time_dim: 8,
            norm_groups: 4,
        }
    }

    /// The full-scale inpainting layout (4-channel latents at 64×64).
    pub fn full_scale() -> Self {
        Self {
            latent_channels: 4,
            base_width: 320,
            channel_mult: vec![1, 2, 4, 4],
            blocks_per_level: 2,
            attention_levels: [0, 1, 2].into_iter().collect(),
            transformer_depth: 1,
            heads: 8,
            text_dim: 1024,
            text_len: MAX_TEXT_TOKENS,
            time_dim: 1280,
            norm_groups: 32,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    /// Spatial divisor the latent must satisfy.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.num_levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(config("base_width must be at least 4"));
        }
        if self.num_levels() < 2 {
            return Err(config("at least two levels are required"));
        }
        if self.blocks_per_level == 0 || self.latent_channels == 0 {
            return Err(config("blocks_per_level and latent_channels must be positive"));
        }
        if !self.base_width.is_multiple_of(2) {
            return Err(config("base_width must be even (sinusoidal time embedding)"));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.num_levels()) {
            return Err(config(format!("attention level {l} does not exist")));
        }
        for l in &self.attention_levels {
            if !self.level_width(*l).is_multiple_of(self.heads) {
                return Err(config(format!("level {l} width not divisible by head count")));
            }
        }
        if self.text_len < 2 || self.text_len > MAX_TEXT_TOKENS {
            return Err(config(format!("text_len must be in [2, {MAX_TEXT_TOKENS}]")));
        }
        Ok(())
    }

    pub fn check_latent_size(&self, h: usize, w: usize) -> Result<()> {
        let d = self.spatial_divisor();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(config(format!("latent {h}x{w} not divisible by 2^(levels-1) = {d}")));
        }
        Ok(())
    }
}

/// Inputs of one denoiser evaluation. All tensors are batch-first.
#[derive(Clone, Copy)]
pub struct DenoiseInputs<'a> {
    /// Noisy latent, `(N, C, h, w)`.
    pub x_t: &'a Tensor,
    /// Latent-resolution fill mask, `(N, 1, h, w)`.
    pub fill_mask: &'a Tensor,
    /// Latent of the image with the fill region zeroed, `(N, C, h, w)`.
    pub masked_latent: &'a Tensor,
    /// Text embedding sequence, `(N, text_len, text_dim)`.
    pub text: &'a Tensor,
    /// One timestep per sample, each in `[1, T]`.
    pub timesteps: &'a [usize],
    /// Salient-object mask at image resolution, `(N, 1, H, W)`; read only by
    /// the control adapter.
    pub control: Option<&'a Tensor>,
}

impl DenoiseInputs<'_> {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.x_t.dim(0)?)
    }
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict(&self, inputs: &DenoiseInputs) -> Result<Tensor>;
}

/// Frozen base model weights.
#[derive(Clone, Debug)]
pub struct InpaintModelParams {
    pub config: UNetConfig,
    pub tensors: TensorMap,
}

/// Encoder activations handed to the decoder.
pub struct EncoderOutput {
    /// One skip tensor per level, finest first.
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
    pub temb: Tensor,
}

impl InpaintModelParams {
    pub fn init(config: UNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(seed, dtype);
        let mut map = TensorMap::new();
        init_encoder(&config, &mut init, &mut map, "")?;
        init_decoder(&config, &mut init, &mut map)?;
        let params = Self { config, tensors: map };
        params.check_structure()?;
        Ok(params)
    }

    /// Verifies every tensor exists with the expected shape, including the
    /// decoder's consumption of each encoder skip.
    pub fn check_structure(&self) -> Result<()> {
        for (name, shape) in param_shapes(&self.config) {
            let t = self.tensors.get(&name)?;
            if t.dims() != shape.as_slice() {
                return Err(config(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
        }
        if self.tensors.len() != param_shapes(&self.config).len() {
            return Err(config("unexpected extra tensors in base parameters"));
        }
        Ok(())
    }

    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            tensors: self.tensors.to_dtype(dtype)?,
        })
    }

    pub fn encode(&self, inputs: &DenoiseInputs) -> Result<EncoderOutput> {
        let x_in = concat_input(&self.config, inputs)?;
        run_encoder(&self.config, &self.tensors.scope(""), &x_in, inputs, None)
    }

    pub fn decode(&self, enc: EncoderOutput, inputs: &DenoiseInputs) -> Result<Tensor> {
        let out = run_decoder(&self.config, &self.tensors.scope(""), enc, inputs.text)?;
        check_finite(&out, "base model output")?;
        Ok(out)
    }

    pub fn forward(&self, inputs: &DenoiseInputs) -> Result<Tensor> {
        let enc = self.encode(inputs)?;
        self.decode(enc, inputs)
    }

    /// Content hash over names, shapes and float32 payloads.
    pub fn content_hash(&self) -> Result<String> {
        tensor_map_hash(&self.tensors)
    }
}

impl NoisePredictor for InpaintModelParams {
    fn predict(&self, inputs: &DenoiseInputs) -> Result<Tensor> {
        self.forward(inputs)
    }
}

pub fn tensor_map_hash(map: &TensorMap) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in map.iter() {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let v: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t
        .abs()?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .max(0)?
        .to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

pub(crate) fn concat_input(cfg: &UNetConfig, inputs: &DenoiseInputs) -> Result<Tensor> {
    let x = Tensor::cat(&[inputs.x_t, inputs.fill_mask, inputs.masked_latent], 1)?;
    let (n, c, h, w) = x.dims4()?;
    if c != cfg.input_channels() {
        return Err(config(format!(
            "concatenated input has {c} channels, model expects 2C+1 = {}",
            cfg.input_channels()
        )));
    }
    cfg.check_latent_size(h, w)?;
    if inputs.timesteps.len() != n {
        return Err(invalid(format!(
            "{} timesteps for batch of {n}",
            inputs.timesteps.len()
        )));
    }
    if inputs.timesteps.contains(&0) {
        return Err(invalid("timesteps are 1-based"));
    }
    let (tn, tl, td) = inputs.text.dims3()?;
    if tn != n || tl != cfg.text_len || td != cfg.text_dim {
        return Err(config(format!(
            "text embedding is {tn}x{tl}x{td}, expected {n}x{}x{}",
            cfg.text_len, cfg.text_dim
        )));
    }
    Ok(x)
}

/// Sinusoidal timestep encoding with interleaved `(sin, cos)` pairs.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(config(format!(
            "time embedding dimension {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

fn time_embed_batch(timesteps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        data.extend(time_embed(t as f64, dim)?);
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

// ---- parameter layout -------------------------------------------------------

/// Every base tensor name with its shape, in creation order.
pub fn param_shapes(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |n: String, s: Vec<usize>| out.push((n, s));
    encoder_shapes(cfg, "", &mut push);
    let l = cfg.num_levels();
    let mut h_ch = cfg.level_width(l - 1);
    for level in (0..l).rev() {
        let w = cfg.level_width(level);
        for j in 0..cfg.blocks_per_level {
            let inp = if j == 0 { h_ch + w } else { w };
            res_shapes(cfg, &format!("up.{level}.res.{j}"), inp, w, &mut push);
            if cfg.attention_levels.contains(&level) {
                attn_shapes(cfg, &format!("up.{level}.attn.{j}"), w, &mut push);
            }
        }
        if level > 0 {
            conv_shapes(&format!("up.{level}.upsample"), w, w, 3, &mut push);
        }
        h_ch = w;
    }
    norm_shapes("out.norm", cfg.level_width(0), &mut push);
    conv_shapes("out.conv", cfg.latent_channels, cfg.level_width(0), 3, &mut push);
    out
}

/// Shapes of the encoder half (input conv, time MLP, levels, middle block).
pub fn encoder_shapes(cfg: &UNetConfig, prefix: &str, push: &mut impl FnMut(String, Vec<usize>)) {
    let p = |s: &str| format!("{prefix}{s}");
    push(p("time_embed.0.weight"), vec![cfg.time_dim, cfg.base_width]);
    push(p("time_embed.0.bias"), vec![cfg.time_dim]);
    push(p("time_embed.2.weight"), vec![cfg.time_dim, cfg.time_dim]);
    push(p("time_embed.2.bias"), vec![cfg.time_dim]);
    conv_shapes(&p("conv_in"), cfg.base_width, cfg.input_channels(), 3, push);
    let mut ch = cfg.base_width;
    for level in 0..cfg.num_levels() {
        let w = cfg.level_width(level);
        for j in 0..cfg.blocks_per_level {
            res_shapes(cfg, &p(&format!("down.{level}.res.{j}")), ch, w, push);
            if cfg.attention_levels.contains(&level) {
                attn_shapes(cfg, &p(&format!("down.{level}.attn.{j}")), w, push);
            }
            ch = w;
        }
        if level + 1 < cfg.num_levels() {
            conv_shapes(&p(&format!("down.{level}.downsample")), w, w, 3, push);
        }
    }
    res_shapes(cfg, &p("mid.res.0"), ch, ch, push);
    attn_shapes(cfg, &p("mid.attn.0"), ch, push);
    res_shapes(cfg, &p("mid.res.1"), ch, ch, push);
}

fn conv_shapes(name: &str, out: usize, inp: usize, k: usize, push: &mut impl FnMut(String, Vec<usize>)) {
    push(format!("{name}.weight"), vec![out, inp, k, k]);
    push(format!("{name}.bias"), vec![out]);
}

fn norm_shapes(name: &str, ch: usize, push: &mut impl FnMut(String, Vec<usize>)) {
    push(format!("{name}.weight"), vec![ch]);
    push(format!("{name}.bias"), vec![ch]);
}

fn linear_shapes(name: &str, out: usize, inp: usize, bias: bool, push: &mut impl FnMut(String, Vec<usize>)) {
    push(format!("{name}.weight"), vec![out, inp]);
    if bias {
        push(format!("{name}.bias"), vec![out]);
    }
}

fn res_shapes(cfg: &UNetConfig, name: &str, inp: usize, out: usize, push: &mut impl FnMut(String, Vec<usize>)) {
    norm_shapes(&format!("{name}.norm1"), inp, push);
    conv_shapes(&format!("{name}.conv1"), out, inp, 3, push);
    linear_shapes(&format!("{name}.time"), out, cfg.time_dim, true, push);
    norm_shapes(&format!("{name}.norm2"), out, push);
    conv_shapes(&format!("{name}.conv2"), out, out, 3, push);
    if inp != out {
        conv_shapes(&format!("{name}.skip"), out, inp, 1, push);
    }
}

fn attn_shapes(cfg: &UNetConfig, name: &str, ch: usize, push: &mut impl FnMut(String, Vec<usize>)) {
    norm_shapes(&format!("{name}.norm"), ch, push);
    conv_shapes(&format!("{name}.proj_in"), ch, ch, 1, push);
    for d in 0..cfg.transformer_depth {
        let b = format!("{name}.block.{d}");
        norm_shapes(&format!("{b}.ln1"), ch, push);
        for (k, inp) in [("q", ch), ("k", ch), ("v", ch)] {
            linear_shapes(&format!("{b}.attn1.{k}"), ch, inp, false, push);
        }
        linear_shapes(&format!("{b}.attn1.o"), ch, ch, true, push);
        norm_shapes(&format!("{b}.ln2"), ch, push);
        for (k, inp) in [("q", ch), ("k", cfg.text_dim), ("v", cfg.text_dim)] {
            linear_shapes(&format!("{b}.attn2.{k}"), ch, inp, false, push);
        }
        linear_shapes(&format!("{b}.attn2.o"), ch, ch, true, push);
        norm_shapes(&format!("{b}.ln3"), ch, push);
        linear_shapes(&format!("{b}.ff.0"), 4 * ch, ch, true, push);
        linear_shapes(&format!("{b}.ff.2"), ch, 4 * ch, true, push);
    }
    conv_shapes(&format!("{name}.proj_out"), ch, ch, 1, push);
}

/// Initializes encoder-half tensors under `prefix`.
pub(crate) fn init_encoder(cfg: &UNetConfig, init: &mut ParamInit, map: &mut TensorMap, prefix: &str) -> Result<()> {
    let mut shapes = Vec::new();
    encoder_shapes(cfg, prefix, &mut |n, s| shapes.push((n, s)));
    init_from_shapes(init, map, shapes)
}

fn init_decoder(cfg: &UNetConfig, init: &mut ParamInit, map: &mut TensorMap) -> Result<()> {
    let enc: BTreeSet<String> = {
        let mut s = BTreeSet::new();
        encoder_shapes(cfg, "", &mut |n, _| {
            s.insert(n);
        });
        s
    };
    let shapes = param_shapes(cfg)
        .into_iter()
        .filter(|(n, _)| !enc.contains(n))
        .collect();
    init_from_shapes(init, map, shapes)
}

/// Fan-in Gaussian for weights, zeros for biases, unit/zero for norms.
/// The output convolution is zero so an untrained model predicts zero noise.
fn init_from_shapes(init: &mut ParamInit, map: &mut TensorMap, shapes: Vec<(String, Vec<usize>)>) -> Result<()> {
    for (name, shape) in shapes {
        let is_norm = name.contains("norm") || name.contains(".ln");
        let t = if name.ends_with(".bias") {
            init.zeros(&shape)?
        } else if is_norm {
            init.ones(&shape)?
        } else if name.starts_with("out.conv") {
            init.zeros(&shape)?
        } else {
            let fan_in: usize = shape[1..].iter().product();
            init.fan_in(&shape, fan_in)?
        };
        map.insert(name, t);
    }
    Ok(())
}

// ---- forward ------------------------------------------------------------------

fn res_block(cfg: &UNetConfig, p: &Scope, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
    let h = nn::group_norm(&p.sub("norm1"), x, cfg.norm_groups)?.silu()?;
    let h = nn::conv2d(&p.sub("conv1"), &h, 1, 1)?;
    let t = nn::linear(&p.sub("time"), &temb.silu()?)?;
    let h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
    let h = nn::group_norm(&p.sub("norm2"), &h, cfg.norm_groups)?.silu()?;
    let h = nn::conv2d(&p.sub("conv2"), &h, 1, 1)?;
    let skip = if p.has("skip.weight") {
        nn::conv2d(&p.sub("skip"), x, 1, 0)?
    } else {
        x.clone()
    };
    Ok((h + skip)?)
}

fn spatial_transformer(cfg: &UNetConfig, p: &Scope, x: &Tensor, text: &Tensor) -> Result<Tensor> {
    let (n, c, hh, ww) = x.dims4()?;
    let h = nn::group_norm(&p.sub("norm"), x, cfg.norm_groups)?;
    let h = nn::conv2d(&p.sub("proj_in"), &h, 1, 0)?;
    let mut tokens = h.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
    for d in 0..cfg.transformer_depth {
        let b = p.sub(format!("block.{d}"));
        let a = nn::layer_norm(&b.sub("ln1"), &tokens)?;
        tokens = (&tokens + nn::attention(&b.sub("attn1"), &a, &a, cfg.heads)?)?;
        let a = nn::layer_norm(&b.sub("ln2"), &tokens)?;
        tokens = (&tokens + nn::attention(&b.sub("attn2"), &a, text, cfg.heads)?)?;
        let a = nn::layer_norm(&b.sub("ln3"), &tokens)?;
        let f = nn::linear(&b.sub("ff.2"), &nn::linear(&b.sub("ff.0"), &a)?.gelu()?)?;
        tokens = (&tokens + f)?;
    }
    let h = tokens.transpose(1, 2)?.reshape((n, c, hh, ww))?;
    let h = nn::conv2d(&p.sub("proj_out"), &h, 1, 0)?;
    Ok((h + x)?)
}

/// Runs the encoder half. `extra` is added right after the input convolution
/// (the adapter's encoded condition enters there).
pub(crate) fn run_encoder(
    cfg: &UNetConfig,
    p: &Scope,
    x_in: &Tensor,
    inputs: &DenoiseInputs,
    extra: Option<&Tensor>,
) -> Result<EncoderOutput> {
    let dtype = x_in.dtype();
    let t = time_embed_batch(inputs.timesteps, cfg.base_width, dtype)?;
    let temb = nn::linear(&p.sub("time_embed.0"), &t)?.silu()?;
    let temb = nn::linear(&p.sub("time_embed.2"), &temb)?;

    let mut h = nn::conv2d(&p.sub("conv_in"), x_in, 1, 1)?;
    if let Some(e) = extra {
        if e.dims() != h.dims() {
            return Err(config(format!(
                "encoded condition has shape {:?}, input convolution output is {:?}",
                e.dims(),
                h.dims()
            )));
        }
        h = (h + e)?;
    }
    let mut skips = Vec::with_capacity(cfg.num_levels());
    for level in 0..cfg.num_levels() {
        for j in 0..cfg.blocks_per_level {
            h = res_block(cfg, &p.sub(format!("down.{level}.res.{j}")), &h, &temb)?;
            if cfg.attention_levels.contains(&level) {
                h = spatial_transformer(cfg, &p.sub(format!("down.{level}.attn.{j}")), &h, inputs.text)?;
            }
        }
        skips.push(h.clone());
        if level + 1 < cfg.num_levels() {
            h = nn::conv2d(&p.sub(format!("down.{level}.downsample")), &h, 2, 1)?;
        }
    }
    h = res_block(cfg, &p.sub("mid.res.0"), &h, &temb)?;
    h = spatial_transformer(cfg, &p.sub("mid.attn.0"), &h, inputs.text)?;
    let mid = res_block(cfg, &p.sub("mid.res.1"), &h, &temb)?;
    Ok(EncoderOutput { skips, mid, temb })
}

pub(crate) fn run_decoder(cfg: &UNetConfig, p: &Scope, enc: EncoderOutput, text: &Tensor) -> Result<Tensor> {
    let EncoderOutput { skips, mid, temb } = enc;
    let mut h = mid;
    for level in (0..cfg.num_levels()).rev() {
        let skip = &skips[level];
        if skip.dims()[2..] != h.dims()[2..] {
            return Err(config(format!(
                "decoder level {level}: skip {:?} does not match activation {:?}",
                skip.dims(),
                h.dims()
            )));
        }
        h = Tensor::cat(&[&h, skip], 1)?;
        for j in 0..cfg.blocks_per_level {
            h = res_block(cfg, &p.sub(format!("up.{level}.res.{j}")), &h, &temb)?;
            if cfg.attention_levels.contains(&level) {
                h = spatial_transformer(cfg, &p.sub(format!("up.{level}.attn.{j}")), &h, text)?;
            }
        }
        if level > 0 {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = nn::conv2d(&p.sub(format!("up.{level}.upsample")), &h, 1, 1)?;
        }
    }
    let h = nn::group_norm(&p.sub("out.norm"), &h, cfg.norm_groups)?.silu()?;
    nn::conv2d(&p.sub("out.conv"), &h, 1, 1)
}

// ---- text embedding -----------------------------------------------------------

/// Maps a prompt to a fixed-length embedding sequence.
pub trait TextEmbedder: Send + Sync {
    fn text_len(&self) -> usize;
    fn text_dim(&self) -> usize;
    /// Row-major `text_len × text_dim` values.
    fn embed(&self, prompt: &str) -> Vec<f32>;

    fn embed_batch(&self, prompts: &[&str], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(prompts.len() * self.text_len() * self.text_dim());
        for p in prompts {
            data.extend(self.embed(p));
        }
        Ok(Tensor::from_vec(data, (prompts.len(), self.text_len(), self.text_dim()), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Deterministic hash-token embedder. Each lower-cased word maps to a
/// pseudo-random Gaussian vector seeded by its hash; the sequence is
/// `[BOS, words…, EOS, PAD…]` plus a small sinusoidal position term. The
/// empty prompt yields the null embedding used for unconditional guidance.
#[derive(Clone, Debug)]
pub struct HashTextEmbedder {
    dim: usize,
    len: usize,
}

impl HashTextEmbedder {
    pub fn new(dim: usize, len: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(config("text_dim must be even and positive"));
        }
        if !(2..=MAX_TEXT_TOKENS).contains(&len) {
            return Err(config(format!("text_len must be in [2, {MAX_TEXT_TOKENS}]")));
        }
        Ok(Self { dim, len })
    }

    pub fn for_config(cfg: &UNetConfig) -> Result<Self> {
        Self::new(cfg.text_dim, cfg.text_len)
    }

    pub fn tokenize(prompt: &str) -> Vec<String> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(|s| s.to_lowercase())
            .collect()
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TextEmbedder for HashTextEmbedder {
    fn text_len(&self) -> usize {
        self.len
    }

    fn text_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Vec<f32> {
        let words = Self::tokenize(prompt);
        let mut tokens = vec!["<bos>".to_string()];
        tokens.extend(words.into_iter().take(self.len - 2));
        tokens.push("<eos>".to_string());
        while tokens.len() < self.len {
            tokens.push("<pad>".to_string());
        }
        let mut out = Vec::with_capacity(self.len * self.dim);
        for (pos, tok) in tokens.iter().enumerate() {
            let pe = time_embed(pos as f64, self.dim).expect("dim checked");
            out.extend(self.token_vector(tok).iter().zip(pe).map(|(v, p)| v + 0.1 * p as f32));
        }
        out
    }
}
