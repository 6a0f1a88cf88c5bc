//! End-to-end outpainting: object image + mask + prompt → backgrounds.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::{ControlAdapterParams, ControlWeight, ControlledModel};
use crate::checkpoint;
use crate::codec::{decode, encode, encode_mask, CodecConfig, Latent};
use crate::diffusion::{from_diffusion_space, sample, NoiseSchedule, SampleConditions, SamplerConfig, ScheduleConfig};
use crate::error::{invalid, Error, Result};
use crate::image::{composite, BinaryMask, Image, MaskKind};
use crate::unet::{HashTextEmbedder, InpaintModelParams, TextEmbedder};

fn default_steps() -> usize {
    20
}

fn default_guidance() -> f64 {
    3.0
}

fn default_variants() -> usize {
    1
}

fn default_w() -> ControlWeight {
    ControlWeight::FULL
}

/// Generation parameters shared by the library, CLI and HTTP API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutpaintParams {
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_w")]
    pub w: ControlWeight,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default = "default_variants")]
    pub num_variants: usize,
}

impl Default for OutpaintParams {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            seed: 0,
            w: default_w(),
            steps: default_steps(),
            guidance: default_guidance(),
            num_variants: default_variants(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OutpaintRequest {
    pub object_image: Image,
    /// Object convention: set pixels are kept.
    pub object_mask: BinaryMask,
    pub params: OutpaintParams,
}

impl OutpaintRequest {
    /// Request for a photo and its object mask; pixels outside the mask are
    /// blanked so the object image holds the object alone.
    pub fn from_photo(photo: &Image, object_mask: BinaryMask, params: OutpaintParams) -> Result<Self> {
        Ok(Self {
            object_image: photo.zero_where(&object_mask.complement())?,
            object_mask,
            params,
        })
    }
}

/// Loaded weights plus everything needed to turn them into images.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub base: InpaintModelParams,
    pub adapter: Option<ControlAdapterParams>,
    pub codec: CodecConfig,
    pub schedule: NoiseSchedule,
    pub text: HashTextEmbedder,
    pub ancestral: bool,
    pub clip_x0: bool,
}

impl ModelBundle {
    pub fn new(
        base: InpaintModelParams,
        adapter: Option<ControlAdapterParams>,
        codec: CodecConfig,
        schedule: &ScheduleConfig,
    ) -> Result<Self> {
        base.check_structure()?;
        if let Some(a) = &adapter {
            a.check_base(&base)?;
        }
        if base.config.latent_channels != codec.latent_channels() {
            return Err(Error::Config(format!(
                "model expects {} latent channels, codec produces {}",
                base.config.latent_channels,
                codec.latent_channels()
            )));
        }
        let text = HashTextEmbedder::for_config(&base.config)?;
        Ok(Self {
            base,
            adapter,
            codec,
            schedule: schedule.build()?,
            text,
            ancestral: false,
            clip_x0: true,
        })
    }

    pub fn load(base: &Path, adapter: Option<&Path>, codec: CodecConfig, schedule: &ScheduleConfig) -> Result<Self> {
        let base = checkpoint::load_base(base)?;
        let adapter = adapter.map(checkpoint::load_adapter).transpose()?;
        Self::new(base, adapter, codec, schedule)
    }

    pub fn base_hash(&self) -> Result<String> {
        self.base.content_hash()
    }

    pub fn adapter_hash(&self) -> Result<Option<String>> {
        self.adapter.as_ref().map(|a| a.content_hash()).transpose()
    }

    /// The same weights without the adapter.
    pub fn baseline(&self) -> ModelBundle {
        ModelBundle {
            adapter: None,
            ..self.clone()
        }
    }
}

fn latent_tensor(l: &Latent) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        l.data.clone(),
        (1, l.channels, l.height, l.width),
        &Device::Cpu,
    )?)
}

/// Checks a request against the loaded models without generating.
pub fn validate_request(req: &OutpaintRequest, models: &ModelBundle) -> Result<()> {
    let (img, m, p) = (&req.object_image, &req.object_mask, &req.params);
    if m.height() != img.height() || m.width() != img.width() {
        return Err(invalid(format!(
            "mask is {}x{} but image is {}x{}",
            m.height(),
            m.width(),
            img.height(),
            img.width()
        )));
    }
    if m.kind() != MaskKind::Object {
        return Err(invalid("outpainting expects an object mask"));
    }
    if p.steps == 0 || p.steps > models.schedule.len() {
        return Err(invalid(format!("steps must be in [1, {}]", models.schedule.len())));
    }
    if !(p.guidance >= 0.0 && p.guidance.is_finite()) {
        return Err(invalid("guidance must be finite and non-negative"));
    }
    if p.num_variants == 0 {
        return Err(invalid("num_variants must be at least 1"));
    }
    let (lh, lw) = models.codec.latent_size(img.height(), img.width())?;
    models.base.config.check_latent_size(lh, lw)
}

/// Generates `num_variants` backgrounds. Variant `i` is sampled from seed
/// `seed + i` on its own, so it does not depend on how many variants are
/// requested. Object pixels are copied from the input after decoding.
pub fn outpaint(req: &OutpaintRequest, models: &ModelBundle) -> Result<Vec<Image>> {
    validate_request(req, models)?;
    let p = &req.params;
    let fill = req.object_mask.complement();
    let z = latent_tensor(&encode(&req.object_image, &models.codec)?)?.affine(2.0, -1.0)?;
    let fill_latent = latent_tensor(&encode_mask(&fill, &models.codec)?)?;
    let masked = z.broadcast_mul(&(1.0 - &fill_latent)?)?;
    let control_bits: Vec<f32> = req.object_mask.bits().iter().map(|&b| b as u8 as f32).collect();
    let control = Tensor::from_vec(
        control_bits,
        (1, 1, req.object_mask.height(), req.object_mask.width()),
        &Device::Cpu,
    )?;
    let guidance = if p.prompt.is_empty() { 0.0 } else { p.guidance };
    let text = models.text.embed_batch(&[p.prompt.as_str()], DType::F32)?;
    let text_uncond = models.text.embed_batch(&[""], DType::F32)?;
    let model = ControlledModel {
        base: &models.base,
        adapter: models.adapter.as_ref(),
        w: p.w,
    };
    let cond = SampleConditions {
        fill_mask: &fill_latent,
        masked_latent: &masked,
        text: &text,
        text_uncond: &text_uncond,
        control: Some(&control),
    };
    let sampler = SamplerConfig {
        steps: p.steps,
        guidance,
        ancestral: models.ancestral,
        clip_x0: models.clip_x0,
    };
    let (c, lh, lw) = (models.codec.latent_channels(), z.dims()[2], z.dims()[3]);
    let mut out = Vec::with_capacity(p.num_variants);
    for i in 0..p.num_variants {
        let seed = p.seed.wrapping_add(i as u64);
        let x = sample(&model, &cond, &models.schedule, &sampler, &[seed]).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("variant {i}: {m}")),
            other => other,
        })?;
        let data: Vec<f32> = from_diffusion_space(&x)?.flatten_all()?.to_vec1()?;
        let generated = decode(
            &Latent {
                channels: c,
                height: lh,
                width: lw,
                data,
            },
            &models.codec,
        )?;
        out.push(composite(&req.object_image, &fill, &generated)?);
    }
    Ok(out)
}

/// The frozen base alone, for side-by-side comparison.
pub fn outpaint_with_baseline(req: &OutpaintRequest, models: &ModelBundle) -> Result<Vec<Image>> {
    outpaint(req, &models.baseline())
}

/// True when every pixel under the object mask equals the input.
pub fn preserves_object(req: &OutpaintRequest, output: &Image) -> bool {
    output.same_shape(&req.object_image)
        && req
            .object_mask
            .set_positions()
            .into_iter()
            .all(|(r, c)| output.pixel(r, c) == req.object_image.pixel(r, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, AdapterConfig};
    use crate::data::synthetic_scene;
    use crate::params::ParamInit;
    use crate::unet::UNetConfig;

    fn bundle(with_adapter: bool, perturb: bool) -> ModelBundle {
        let mut base = InpaintModelParams::init(UNetConfig::tiny(), 3, DType::F32).unwrap();
        if perturb {
            // A zero output layer predicts no noise whatever the adapter adds.
            let w = base.tensors.get("out.conv.weight").unwrap().clone();
            base.tensors.insert(
                "out.conv.weight",
                ParamInit::new(4, DType::F32).gaussian(w.dims(), 0.1).unwrap(),
            );
        }
        let mut adapter = init_adapter(
            &base,
            &AdapterConfig {
                cond_channels: vec![4, 4],
                ..Default::default()
            },
        )
        .unwrap();
        if perturb {
            // Give the zero convolutions weight so the adapter has an effect.
            for name in adapter.zero_conv_names() {
                let t = adapter.tensors.get(&name).unwrap();
                let v = (t.ones_like().unwrap() * 0.5).unwrap();
                adapter.tensors.insert(name, v);
            }
        }
        ModelBundle::new(
            base,
            with_adapter.then_some(adapter),
            CodecConfig::identity(),
            &ScheduleConfig::default(),
        )
        .unwrap()
    }

    fn request(seed: u64, prompt: &str, w: f64, variants: usize) -> OutpaintRequest {
        let s = synthetic_scene(seed, 0, 16).unwrap().sample;
        OutpaintRequest {
            object_image: s.object_only().unwrap(),
            object_mask: s.object_mask,
            params: OutpaintParams {
                prompt: prompt.into(),
                seed,
                w: ControlWeight::new(w).unwrap(),
                steps: 4,
                guidance: 2.0,
                num_variants: variants,
            },
        }
    }

    #[test]
    fn outputs_preserve_object_and_are_deterministic() {
        let m = bundle(true, true);
        let req = request(1, "a red disk", 1.0, 2);
        let a = outpaint(&req, &m).unwrap();
        let b = outpaint(&req, &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a[0] != a[1]);
        for img in &a {
            assert!(preserves_object(&req, img));
        }
    }

    #[test]
    fn w_zero_equals_baseline() {
        let m = bundle(true, true);
        let req = request(2, "a blue square", 0.0, 1);
        let with = outpaint(&req, &m).unwrap();
        assert_eq!(with, outpaint_with_baseline(&req, &m).unwrap());
    }

    #[test]
    fn full_weight_changes_the_output() {
        let m = bundle(true, true);
        let req = request(2, "a blue square", 1.0, 1);
        assert_ne!(outpaint(&req, &m).unwrap(), outpaint_with_baseline(&req, &m).unwrap());
    }

    #[test]
    fn variant_depends_only_on_its_seed() {
        let m = bundle(true, true);
        let three = outpaint(&request(3, "x", 1.0, 3), &m).unwrap();
        let mut later = request(3, "x", 1.0, 1);
        later.params.seed = 5;
        assert_eq!(outpaint(&later, &m).unwrap()[0], three[2]);
    }

    #[test]
    fn empty_prompt_forces_unconditional() {
        let m = bundle(false, false);
        let mut req = request(4, "", 1.0, 1);
        let a = outpaint(&req, &m).unwrap();
        req.params.guidance = 7.5;
        assert_eq!(outpaint(&req, &m).unwrap(), a);
    }

    #[test]
    fn request_validation() {
        let m = bundle(false, false);
        let mut req = request(5, "x", 1.0, 1);
        req.params.steps = 0;
        assert!(matches!(outpaint(&req, &m), Err(Error::InvalidInput(_))));
        req.params.steps = 1001;
        assert!(outpaint(&req, &m).is_err());
        let mut req = request(5, "x", 1.0, 1);
        req.object_mask = BinaryMask::filled(16, 24, true, MaskKind::Object).unwrap();
        assert!(matches!(outpaint(&req, &m), Err(Error::InvalidInput(_))));
        let mut req = request(5, "x", 1.0, 0);
        assert!(outpaint(&req, &m).is_err());
        req.params.num_variants = 1;
        req.params.guidance = -1.0;
        assert!(outpaint(&req, &m).is_err());
    }

    #[test]
    fn params_json_defaults() {
        let p: OutpaintParams = serde_json::from_str(r#"{"prompt": "a beach", "seed": 3}"#).unwrap();
        assert_eq!(p.w, ControlWeight::FULL);
        assert_eq!((p.steps, p.num_variants), (20, 1));
        assert!(serde_json::from_str::<OutpaintParams>(r#"{"w": 1.5}"#).is_err());
    }
}
