//! The control adapter: a trainable copy of the base encoder and middle block
//! that reads the salient-object mask and feeds the frozen decoder through
//! zero-initialized 1×1 convolutions.
//!
//! At each injection point (every encoder skip and the middle-block output)
//! the decoder receives `base + w · Z(adapter)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::nn;
use crate::params::{ParamInit, TensorMap};
use crate::unet::{
    concat_input, encoder_shapes, run_encoder, tensor_map_hash, DenoiseInputs, EncoderOutput, InpaintModelParams,
    NoisePredictor, UNetConfig,
};

/// Prefix of the copied encoder tensors.
pub const COPY_PREFIX: &str = "ctrl.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Channel ladder of the condition encoder; extended by doubling when the
    /// codec needs more stride-2 layers than it has entries.
    pub cond_channels: Vec<usize>,
    /// Codec factor `f`; must be a power of two.
    pub codec_factor: usize,
    /// Seed of the condition-encoder initialization.
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            cond_channels: vec![16, 32, 64, 128],
            codec_factor: 1,
            seed: 0,
        }
    }
}

/// One condition-encoder layer: kernel, stride, padding, output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CondLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

impl AdapterConfig {
    /// The first `log2 f` layers are 4×4 stride-2; the rest are 3×3
    /// stride-1, which keeps the spatial size.
    pub fn layers(&self) -> Result<Vec<CondLayer>> {
        let f = self.codec_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(config(format!(
                "condition encoder needs a power-of-two codec factor, got {f}"
            )));
        }
        if self.cond_channels.is_empty() || self.cond_channels.contains(&0) {
            return Err(config(
                "condition encoder channel ladder must be non-empty and positive",
            ));
        }
        let n_down = f.trailing_zeros() as usize;
        let mut channels = self.cond_channels.clone();
        while channels.len() < n_down {
            let last = *channels.last().expect("non-empty");
            channels.push(last * 2);
        }
        Ok(channels
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                if i < n_down {
                    CondLayer {
                        kernel: 4,
                        stride: 2,
                        padding: 1,
                        channels: c,
                    }
                } else {
                    CondLayer {
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        channels: c,
                    }
                }
            })
            .collect())
    }
}

/// Inference-time scale of every zero-convolution output, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ControlWeight(f64);

impl ControlWeight {
    pub const OFF: ControlWeight = ControlWeight(0.0);
    pub const FULL: ControlWeight = ControlWeight(1.0);

    pub fn new(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(invalid(format!("control weight must be in [0, 1], got {w}")));
        }
        Ok(Self(w))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ControlWeight {
    type Error = crate::Error;
    fn try_from(w: f64) -> Result<Self> {
        Self::new(w)
    }
}

impl From<ControlWeight> for f64 {
    fn from(w: ControlWeight) -> f64 {
        w.0
    }
}

#[derive(Clone, Debug)]
pub struct ControlAdapterParams {
    pub unet: UNetConfig,
    pub config: AdapterConfig,
    pub tensors: TensorMap,
    /// Content hash of the base model the adapter was created from.
    pub base_hash: String,
}

/// Copies the base encoder and middle block, adds a Gaussian-initialized
/// condition encoder and zero convolutions.
pub fn init_adapter(base: &InpaintModelParams, cfg: &AdapterConfig) -> Result<ControlAdapterParams> {
    base.check_structure()?;
    let unet = base.config.clone();
    let dtype = base.tensors.dtype();
    let mut map = TensorMap::new();
    let mut names = Vec::new();
    encoder_shapes(&unet, "", &mut |n, _| names.push(n));
    for name in names {
        map.insert(
            format!("{COPY_PREFIX}{name}"),
            base.tensors.get(&name)?.detach().copy()?,
        );
    }

    let mut init = ParamInit::new(cfg.seed, dtype);
    let mut inp = 1;
    for (i, layer) in cfg.layers()?.iter().enumerate() {
        init.conv(&mut map, &format!("cond.{i}"), layer.channels, inp, layer.kernel)?;
        inp = layer.channels;
    }
    init.zero_conv(&mut map, "cond.out", unet.base_width, inp, 1)?;
    for level in 0..unet.num_levels() {
        let w = unet.level_width(level);
        init.zero_conv(&mut map, &format!("zero.{level}"), w, w, 1)?;
    }
    let mid = unet.level_width(unet.num_levels() - 1);
    init.zero_conv(&mut map, "zero.mid", mid, mid, 1)?;

    let adapter = ControlAdapterParams {
        unet,
        config: cfg.clone(),
        tensors: map,
        base_hash: base.content_hash()?,
    };
    adapter.check_structure()?;
    Ok(adapter)
}

/// Every adapter tensor name with its shape.
pub fn adapter_shapes(unet: &UNetConfig, cfg: &AdapterConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    encoder_shapes(unet, COPY_PREFIX, &mut |n, s| out.push((n, s)));
    let mut inp = 1;
    for (i, layer) in cfg.layers()?.iter().enumerate() {
        out.push((
            format!("cond.{i}.weight"),
            vec![layer.channels, inp, layer.kernel, layer.kernel],
        ));
        out.push((format!("cond.{i}.bias"), vec![layer.channels]));
        inp = layer.channels;
    }
    let mut zero = |name: String, o: usize, i: usize| {
        out.push((format!("{name}.weight"), vec![o, i, 1, 1]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    zero("cond.out".into(), unet.base_width, inp);
    for level in 0..unet.num_levels() {
        let w = unet.level_width(level);
        zero(format!("zero.{level}"), w, w);
    }
    let mid = unet.level_width(unet.num_levels() - 1);
    zero("zero.mid".into(), mid, mid);
    Ok(out)
}

impl ControlAdapterParams {
    pub fn check_structure(&self) -> Result<()> {
        let shapes = adapter_shapes(&self.unet, &self.config)?;
        for (name, shape) in &shapes {
            let t = self.tensors.get(name)?;
            if t.dims() != shape.as_slice() {
                return Err(config(format!(
                    "adapter tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
        }
        if shapes.len() != self.tensors.len() {
            return Err(config("unexpected extra tensors in adapter parameters"));
        }
        Ok(())
    }

    /// Names of the zero-convolution tensors.
    pub fn zero_conv_names(&self) -> Vec<String> {
        self.tensors
            .names()
            .filter(|n| n.starts_with("zero.") || n.starts_with("cond.out."))
            .cloned()
            .collect()
    }

    pub fn content_hash(&self) -> Result<String> {
        tensor_map_hash(&self.tensors)
    }

    /// Rejects a base model other than the one this adapter was built on.
    pub fn check_base(&self, base: &InpaintModelParams) -> Result<()> {
        if base.config != self.unet {
            return Err(config("adapter and base model configurations differ"));
        }
        let h = base.content_hash()?;
        if h != self.base_hash {
            return Err(config(format!(
                "adapter was trained against base {}, got {h}",
                self.base_hash
            )));
        }
        Ok(())
    }

    /// Encodes an image-resolution salient mask `(N, 1, H, W)` to
    /// `(N, B, H/f, W/f)`. The final layer is a zero convolution.
    pub fn encode_condition(&self, mask: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = mask.dims4()?;
        let f = self.config.codec_factor;
        if c != 1 {
            return Err(config(format!("salient condition must have 1 channel, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(config(format!("condition {h}x{w} not divisible by codec factor {f}")));
        }
        let p = self.tensors.scope("");
        let mut x = mask.clone();
        for (i, layer) in self.config.layers()?.iter().enumerate() {
            x = nn::conv2d(&p.sub(format!("cond.{i}")), &x, layer.stride, layer.padding)?.relu()?;
        }
        nn::conv2d(&p.sub("cond.out"), &x, 1, 0)
    }

    /// Zero-convolution outputs `Z(e)` at every injection point: one per
    /// level (finest first) followed by the middle block.
    pub fn control_residuals(&self, inputs: &DenoiseInputs) -> Result<Vec<Tensor>> {
        let control = inputs
            .control
            .ok_or_else(|| config("controlled forward requires the salient-mask condition"))?;
        let x_in = concat_input(&self.unet, inputs)?;
        let cond = self.encode_condition(control)?;
        let enc = run_encoder(&self.unet, &self.tensors.scope("ctrl"), &x_in, inputs, Some(&cond))?;
        let p = self.tensors.scope("");
        let mut out = Vec::with_capacity(enc.skips.len() + 1);
        for (level, e) in enc.skips.iter().enumerate() {
            out.push(nn::conv2d(&p.sub(format!("zero.{level}")), e, 1, 0)?);
        }
        out.push(nn::conv2d(&p.sub("zero.mid"), &enc.mid, 1, 0)?);
        Ok(out)
    }

    /// Base encoder activations with the scaled residuals added.
    pub fn injected_encoder(
        &self,
        base: &InpaintModelParams,
        inputs: &DenoiseInputs,
        w: ControlWeight,
    ) -> Result<EncoderOutput> {
        if base.config != self.unet {
            return Err(config("adapter and base model configurations differ"));
        }
        let mut enc = base.encode(inputs)?;
        if w.value() == 0.0 {
            return Ok(enc);
        }
        let residuals = self.control_residuals(inputs)?;
        let n = enc.skips.len();
        for (i, r) in residuals.into_iter().enumerate() {
            let (target, point) = if i < n {
                (&mut enc.skips[i], format!("skip {i}"))
            } else {
                (&mut enc.mid, "middle block".into())
            };
            if r.dims() != target.dims() {
                return Err(config(format!(
                    "injection point {point}: residual {:?} does not match {:?}",
                    r.dims(),
                    target.dims()
                )));
            }
            let r = if w.value() == 1.0 { r } else { (r * w.value())? };
            *target = (&*target + r)?;
        }
        Ok(enc)
    }
}

/// `D(d; Θ_d) + w · Z(E(e; Θ_e); Θ_z)` at every injection point; exactly the
/// base forward when `w = 0`.
pub fn forward_with_control(
    base: &InpaintModelParams,
    adapter: &ControlAdapterParams,
    inputs: &DenoiseInputs,
    w: ControlWeight,
) -> Result<Tensor> {
    if w.value() == 0.0 {
        return base.forward(inputs);
    }
    let enc = adapter.injected_encoder(base, inputs, w)?;
    base.decode(enc, inputs)
}

/// A base model with an optional adapter at a fixed control weight.
#[derive(Clone, Copy)]
pub struct ControlledModel<'a> {
    pub base: &'a InpaintModelParams,
    pub adapter: Option<&'a ControlAdapterParams>,
    pub w: ControlWeight,
}

impl NoisePredictor for ControlledModel<'_> {
    fn predict(&self, inputs: &DenoiseInputs) -> Result<Tensor> {
        match self.adapter {
            Some(a) => forward_with_control(self.base, a, inputs, self.w),
            None => self.base.forward(inputs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamInit;
    use candle_core::DType;

    fn max_abs(t: &Tensor) -> f64 {
        t.abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar()
            .unwrap()
    }

    #[test]
    fn layer_plan_follows_codec_factor() {
        let plan = |f| {
            AdapterConfig {
                codec_factor: f,
                ..Default::default()
            }
            .layers()
            .unwrap()
        };
        let strides = |f| plan(f).iter().map(|l| l.stride).collect::<Vec<_>>();
        assert_eq!(strides(1), vec![1, 1, 1, 1]);
        assert_eq!(strides(2), vec![2, 1, 1, 1]);
        assert_eq!(strides(8), vec![2, 2, 2, 1]);
        assert_eq!(
            plan(8).iter().map(|l| l.channels).collect::<Vec<_>>(),
            vec![16, 32, 64, 128]
        );
        assert_eq!(
            plan(64).iter().map(|l| l.channels).collect::<Vec<_>>(),
            vec![16, 32, 64, 128, 256, 512]
        );
        assert!(AdapterConfig {
            codec_factor: 3,
            ..Default::default()
        }
        .layers()
        .is_err());
    }

    #[test]
    fn condition_encoder_shapes() {
        let cfg = UNetConfig::tiny();
        let base = InpaintModelParams::init(cfg.clone(), 0, DType::F32).unwrap();
        for f in [1usize, 2, 8] {
            let mut a = init_adapter(
                &base,
                &AdapterConfig {
                    codec_factor: f,
                    ..Default::default()
                },
            )
            .unwrap();
            let mask = ParamInit::new(1, DType::F32).gaussian(&[2, 1, 32, 32], 1.0).unwrap();
            let out = a.encode_condition(&mask).unwrap();
            assert_eq!(out.dims(), &[2, cfg.base_width, 32 / f, 32 / f]);
            assert_eq!(max_abs(&out), 0.0);
            // With a non-zero tail the output depends on the mask.
            let w = a.tensors.get("cond.out.weight").unwrap().clone();
            a.tensors.insert(
                "cond.out.weight",
                ParamInit::new(2, DType::F32).gaussian(w.dims(), 1.0).unwrap(),
            );
            assert!(max_abs(&a.encode_condition(&mask).unwrap()) > 0.0);
        }
        let a = init_adapter(
            &base,
            &AdapterConfig {
                codec_factor: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let bad = Tensor::zeros((1, 1, 20, 20), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(a.encode_condition(&bad).is_err());
    }

    #[test]
    fn full_scale_factor_reaches_latent_resolution() {
        // Four layers with f = 8: three halve the size, 512 → 64.
        let a = AdapterConfig {
            codec_factor: 8,
            ..Default::default()
        };
        let layers = a.layers().unwrap();
        let mut size = 512;
        for l in &layers {
            size = (size + 2 * l.padding - l.kernel) / l.stride + 1;
        }
        assert_eq!((layers.len(), size), (4, 64));
    }

    #[test]
    fn init_contracts() {
        let base = InpaintModelParams::init(UNetConfig::tiny(), 3, DType::F32).unwrap();
        let a = init_adapter(
            &base,
            &AdapterConfig {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let b = init_adapter(
            &base,
            &AdapterConfig {
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        for name in a.zero_conv_names() {
            assert_eq!(max_abs(a.tensors.get(&name).unwrap()), 0.0, "{name}");
        }
        let mut copied = 0;
        for (name, t) in a.tensors.iter() {
            if let Some(src) = name.strip_prefix(COPY_PREFIX) {
                let d = (t - base.tensors.get(src).unwrap()).unwrap();
                assert_eq!(max_abs(&d), 0.0);
                copied += 1;
            }
            let other = b.tensors.get(name).unwrap();
            let same = max_abs(&(t - other).unwrap()) == 0.0;
            if name.starts_with("cond.") && !name.starts_with("cond.out") && name.ends_with("weight") {
                assert!(!same, "{name} should depend on the seed");
            } else {
                assert!(same, "{name} should not depend on the seed");
            }
        }
        assert!(copied > 0);
        assert_eq!(a.base_hash, base.content_hash().unwrap());
    }

    #[test]
    fn first_injection_point_is_linear_in_w() {
        let cfg = UNetConfig::tiny();
        let base = InpaintModelParams::init(cfg.clone(), 0, DType::F64).unwrap();
        let mut a = init_adapter(&base, &AdapterConfig::default()).unwrap();
        let mut init = ParamInit::new(9, DType::F64);
        for name in a.zero_conv_names() {
            let t = a.tensors.get(&name).unwrap().clone();
            a.tensors.insert(name, init.gaussian(t.dims(), 0.3).unwrap());
        }
        let c = cfg.latent_channels;
        let x = init.gaussian(&[2, c, 8, 8], 1.0).unwrap();
        let m = init.gaussian(&[2, 1, 8, 8], 1.0).unwrap();
        let text = init.gaussian(&[2, cfg.text_len, cfg.text_dim], 1.0).unwrap();
        let ctrl = init.gaussian(&[2, 1, 8, 8], 1.0).unwrap();
        let inputs = DenoiseInputs {
            x_t: &x,
            fill_mask: &m,
            masked_latent: &x,
            text: &text,
            timesteps: &[3, 40],
            control: Some(&ctrl),
        };
        let at = |w: f64| {
            a.injected_encoder(&base, &inputs, ControlWeight::new(w).unwrap())
                .unwrap()
                .skips[0]
                .clone()
        };
        let base_skip = at(0.0);
        let d1 = (at(0.25) - &base_skip).unwrap();
        let d2 = (at(0.5) - &base_skip).unwrap();
        assert!(max_abs(&d1) > 0.0);
        assert!(max_abs(&((d1 * 2.0).unwrap() - d2).unwrap()) < 1e-12);
    }

    #[test]
    fn control_weight_range() {
        assert!(ControlWeight::new(-0.01).is_err());
        assert!(ControlWeight::new(1.01).is_err());
        assert!(ControlWeight::new(f64::NAN).is_err());
        assert_eq!(ControlWeight::new(0.5).unwrap().value(), 0.5);
        let w: ControlWeight = serde_json::from_str("0.75").unwrap();
        assert_eq!(w.value(), 0.75);
        assert!(serde_json::from_str::<ControlWeight>("2.0").is_err());
    }
}
