//! Run configuration: one TOML file shared by training, evaluation, the
//! service and the CLI, with environment overrides for host, port, token and
//! model paths.
//!
//! ```toml
//! [model]
//! base_checkpoint = "runs/base.ckpt"
//! adapter_checkpoint = "runs/adapter.ckpt"
//! codec = { kind = "space_to_depth", factor = 2 }
//!
//! [train]
//! steps = 2000
//! datasets = [{ manifest = "data/manifest.jsonl", weight = 1.0 }]
//!
//! [service]
//! port = 8080
//!
//! [clients.point_segmenter]
//! kind = "http"
//! url = "http://localhost:9000/segment"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::checkpoint;
use crate::clients::{
    BlurredThumbnailDistance, BoxPointSegmenter, Captioner, ChromaSegmenter, FeatureExtractor, FixedCaptioner,
    HashJointEmbedder, HttpModel, HueCaptioner, ImageEmbedder, JointEmbedder, LanguageModel, OracleSegmenter,
    PerceptualDistance, PointSegmenter, RandomProjectionFeatures, RetryPolicy, SalientSegmenter, StubLanguageModel,
    SubprocessModel, ThumbnailEmbedder,
};
use crate::codec::CodecConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{config, Error, Result};
use crate::eval::{EvalClients, EvalConfig};
use crate::pipeline::ModelBundle;
use crate::trainer::TrainConfig;
use crate::unet::{InpaintModelParams, UNetConfig};

pub const ENV_HOST: &str = "OUTPAINT_HOST";
pub const ENV_PORT: &str = "OUTPAINT_PORT";
pub const ENV_BASE: &str = "OUTPAINT_BASE_CHECKPOINT";
pub const ENV_ADAPTER: &str = "OUTPAINT_ADAPTER_CHECKPOINT";
pub const ENV_TOKEN: &str = "OUTPAINT_TOKEN";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub service: ServiceSection,
    pub clients: ClientsSection,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelSection {
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
    /// Without a checkpoint the base is randomly initialized from `init_seed`.
    pub base_checkpoint: Option<PathBuf>,
    pub adapter_checkpoint: Option<PathBuf>,
    pub init_seed: u64,
}

impl ModelSection {
    /// The base named by `base_checkpoint`, or a fresh initialization.
    pub fn load_base(&self) -> Result<InpaintModelParams> {
        match &self.base_checkpoint {
            Some(p) => checkpoint::load_base(p),
            None => {
                log::warn!(
                    "no base checkpoint configured; using a random initialization (seed {})",
                    self.init_seed
                );
                let mut unet = self.unet.clone();
                unet.latent_channels = self.codec.latent_channels();
                InpaintModelParams::init(unet, self.init_seed, DType::F32)
            }
        }
    }

    pub fn load_bundle(&self) -> Result<ModelBundle> {
        let base = self.load_base()?;
        let adapter = self
            .adapter_checkpoint
            .as_deref()
            .map(checkpoint::load_adapter)
            .transpose()?;
        ModelBundle::new(base, adapter, self.codec, &self.schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub manifest: PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Procedural shapes used when no manifest is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            n: 256,
            seed: 0,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_drop: f64,
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Checkpoints, final weights and the loss history go here.
    pub out_dir: PathBuf,
    pub datasets: Vec<DatasetSpec>,
    pub synthetic: SyntheticSection,
    pub min_object_area: f64,
    /// Random-mask inpainting steps run on the base before adapter training;
    /// 0 uses the base as loaded.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Share of pretraining holes that hug the object instead of being random.
    pub pretrain_object_hole_prob: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            p_drop: t.p_drop,
            clip_grad_norm: t.clip_grad_norm,
            seed: t.seed,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs"),
            datasets: Vec::new(),
            synthetic: SyntheticSection::default(),
            min_object_area: crate::data::MIN_OBJECT_AREA,
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
            pretrain_object_hole_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
    /// Jobs waiting for the generation worker beyond this are refused.
    pub queue_capacity: usize,
    /// Concurrent synchronous metric requests.
    pub metric_workers: usize,
    /// Persist jobs here; in memory only when unset.
    pub job_store_dir: Option<PathBuf>,
    /// Content-addressed result archives.
    pub results_dir: PathBuf,
    /// Require `Authorization: Bearer <token>` when set.
    pub bearer_token: Option<String>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            queue_capacity: 64,
            metric_workers: 2,
            job_store_dir: None,
            results_dir: PathBuf::from("results"),
            bearer_token: None,
        }
    }
}

/// Where a model client comes from. The built-in kinds are the desk-scale
/// stand-ins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientSpec {
    Http {
        url: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    Subprocess {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
    /// Point segmenter: color region grown from the positive points.
    Oracle,
    /// Point segmenter: bounding box of the positive points.
    Box,
    /// Salient segmenter: largest saturated component.
    Chroma,
    /// Captioner naming the object's dominant hue.
    Hue,
    /// Captioner or language model with a constant reply.
    Fixed { text: String },
    /// Image embedder on 8×8 thumbnails.
    Thumbnail,
    /// Joint embedder hashing pixels and tokens into `dim` dimensions.
    Hash { dim: usize, seed: u64 },
    /// Feature extractor projecting 32×32 grayscale thumbnails.
    Projection { dim: usize, seed: u64 },
    /// Perceptual distance on blurred thumbnails.
    Blur,
}

fn default_timeout() -> u64 {
    60
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsSection {
    pub sos: Option<ClientSpec>,
    pub point_segmenter: Option<ClientSpec>,
    pub captioner: Option<ClientSpec>,
    pub joint_embedder: Option<ClientSpec>,
    pub image_embedder: Option<ClientSpec>,
    pub distance: Option<ClientSpec>,
    pub features: Option<ClientSpec>,
    pub llm: Option<ClientSpec>,
    pub retry_attempts: usize,
    pub retry_base_delay_ms: u64,
}

impl Default for ClientsSection {
    fn default() -> Self {
        Self {
            sos: Some(ClientSpec::Chroma),
            point_segmenter: Some(ClientSpec::Oracle),
            captioner: Some(ClientSpec::Hue),
            joint_embedder: Some(ClientSpec::Hash { dim: 64, seed: 0 }),
            image_embedder: Some(ClientSpec::Thumbnail),
            distance: Some(ClientSpec::Blur),
            features: Some(ClientSpec::Projection { dim: 64, seed: 0 }),
            llm: None,
            retry_attempts: 3,
            retry_base_delay_ms: 500,
        }
    }
}

/// Built clients, shareable across threads.
#[derive(Clone, Default)]
pub struct Clients {
    pub sos: Option<Arc<dyn SalientSegmenter>>,
    pub point_segmenter: Option<Arc<dyn PointSegmenter>>,
    pub captioner: Option<Arc<dyn Captioner>>,
    pub joint_embedder: Option<Arc<dyn JointEmbedder>>,
    pub image_embedder: Option<Arc<dyn ImageEmbedder>>,
    pub distance: Option<Arc<dyn PerceptualDistance>>,
    pub features: Option<Arc<dyn FeatureExtractor>>,
    pub llm: Option<Arc<dyn LanguageModel>>,
    pub retry: RetryPolicy,
}

impl Clients {
    pub fn eval_clients(&self) -> EvalClients<'_> {
        EvalClients {
            sos: self.sos.as_deref(),
            point_segmenter: self.point_segmenter.as_deref(),
            joint: self.joint_embedder.as_deref(),
            image_embedder: self.image_embedder.as_deref(),
            distance: self.distance.as_deref(),
            features: self.features.as_deref(),
            llm: self.llm.as_deref(),
            captioner: self.captioner.as_deref(),
        }
    }
}

fn wrong_kind(role: &str, spec: &ClientSpec) -> Error {
    config(format!("client kind {spec:?} cannot serve as {role}"))
}

fn http(url: &str, timeout_secs: u64) -> HttpModel {
    HttpModel {
        url: url.to_string(),
        timeout: Duration::from_secs(timeout_secs),
    }
}

fn subprocess(program: &Path, args: &[String]) -> SubprocessModel {
    SubprocessModel {
        program: program.to_path_buf(),
        args: args.to_vec(),
    }
}

impl ClientsSection {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts.max(1),
            base_delay: Duration::from_millis(self.retry_base_delay_ms),
        }
    }

    pub fn build(&self) -> Result<Clients> {
        use ClientSpec as S;
        let sos = self
            .sos
            .as_ref()
            .map(|s| -> Result<Arc<dyn SalientSegmenter>> {
                Ok(match s {
                    S::Http { url, timeout_secs } => Arc::new(http(url, *timeout_secs)),
                    S::Subprocess { program, args } => Arc::new(subprocess(program, args)),
                    S::Chroma => Arc::new(ChromaSegmenter::default()),
                    other => return Err(wrong_kind("salient segmenter", other)),
                })
            })
            .transpose()?;
        let point_segmenter = self
            .point_segmenter
            .as_ref()
            .map(|s| -> Result<Arc<dyn PointSegmenter>> {
                Ok(match s {
                    S::Http { url, timeout_secs } => Arc::new(http(url, *timeout_secs)),
                    S::Subprocess { program, args } => Arc::new(subprocess(program, args)),
                    S::Oracle => Arc::new(OracleSegmenter::default()),
                    S::Box => Arc::new(BoxPointSegmenter),
                    other => return Err(wrong_kind("point segmenter", other)),
                })
            })
            .transpose()?;
        let captioner = self
            .captioner
            .as_ref()
            .map(|s| -> Result<Arc<dyn Captioner>> {
                Ok(match s {
                    S::Http { url, timeout_secs } => Arc::new(http(url, *timeout_secs)),
                    S::Hue => Arc::new(HueCaptioner),
                    S::Fixed { text } => Arc::new(FixedCaptioner(text.clone())),
                    other => return Err(wrong_kind("captioner", other)),
                })
            })
            .transpose()?;
        let joint_embedder = self
            .joint_embedder
            .as_ref()
            .map(|s| -> Result<Arc<dyn JointEmbedder>> {
                Ok(match s {
                    S::Http { url, timeout_secs } => Arc::new(http(url, *timeout_secs)),
                    S::Hash { dim, seed } => Arc::new(HashJointEmbedder::new(*dim, *seed)?),
                    other => return Err(wrong_kind("joint embedder", other)),
                })
            })
            .transpose()?;
        let image_embedder = self
            .image_embedder
            .as_ref()
            .map(|s| -> Result<Arc<dyn ImageEmbedder>> {
                Ok(match s {
                    S::Http { url, timeout_secs } => Arc::new(http(url, *timeout_secs)),
                    S::Thumbnail => Arc::new(ThumbnailEmbedder),
                    other => return Err(wrong_kind("image embedder", other)),
                })
            })
            .transpose()?;
        let distance = self
            .distance
            .as_ref()
            .map(|s| -> Result<Arc<dyn PerceptualDistance>> {
                Ok(match s {
                    S::Blur => Arc::new(BlurredThumbnailDistance),
                    other => return Err(wrong_kind("perceptual distance", other)),
                })
            })
            .transpose()?;
        let features = self
            .features
            .as_ref()
            .map(|s| -> Result<Arc<dyn FeatureExtractor>> {
                Ok(match s {
                    S::Projection { dim, seed } => Arc::new(RandomProjectionFeatures::new(*dim, *seed)?),
                    other => return Err(wrong_kind("feature extractor", other)),
                })
            })
            .transpose()?;
        let llm = self
            .llm
            .as_ref()
            .map(|s| -> Result<Arc<dyn LanguageModel>> {
                Ok(match s {
                    S::Http { url, timeout_secs } => Arc::new(http(url, *timeout_secs)),
                    S::Fixed { text } => Arc::new(StubLanguageModel::new(text.clone())),
                    other => return Err(wrong_kind("language model", other)),
                })
            })
            .transpose()?;
        Ok(Clients {
            sos,
            point_segmenter,
            captioner,
            joint_embedder,
            image_embedder,
            distance,
            features,
            llm,
            retry: self.retry_policy(),
        })
    }
}

fn rebase(dir: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = dir.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config(format!("{e}")))
    }

    /// Reads `path`, resolves relative paths against its directory and
    /// applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        for p in [
            &mut self.model.base_checkpoint,
            &mut self.model.adapter_checkpoint,
            &mut self.service.job_store_dir,
        ]
        .into_iter()
        .flatten()
        {
            rebase(dir, p);
        }
        rebase(dir, &mut self.train.out_dir);
        rebase(dir, &mut self.service.results_dir);
        for d in &mut self.train.datasets {
            rebase(dir, &mut d.manifest);
        }
        if let Some(p) = &mut self.eval.fid_reference_manifest {
            rebase(dir, p);
        }
    }

    /// Host, port, token and checkpoint paths from the environment win over
    /// the file.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(h) = lookup(ENV_HOST) {
            self.service.host = h;
        }
        if let Some(p) = lookup(ENV_PORT) {
            self.service.port = p.parse().map_err(|_| config(format!("{ENV_PORT}={p} is not a port")))?;
        }
        if let Some(t) = lookup(ENV_TOKEN) {
            self.service.bearer_token = (!t.is_empty()).then_some(t);
        }
        if let Some(p) = lookup(ENV_BASE) {
            self.model.base_checkpoint = Some(p.into());
        }
        if let Some(p) = lookup(ENV_ADAPTER) {
            self.model.adapter_checkpoint = Some(p.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.codec.validate()?;
        self.model.unet.validate()?;
        self.model.adapter.layers()?;
        if self.model.adapter.codec_factor != self.model.codec.factor {
            return Err(config(format!(
                "adapter codec_factor {} differs from codec factor {}",
                self.model.adapter.codec_factor, self.model.codec.factor
            )));
        }
        self.model.schedule.build()?;
        self.train_config().validate()?;
        if self.service.queue_capacity == 0 || self.service.metric_workers == 0 {
            return Err(config("queue_capacity and metric_workers must be positive"));
        }
        if self
            .train
            .datasets
            .iter()
            .any(|d| !(d.weight >= 0.0 && d.weight.is_finite()))
        {
            return Err(config("dataset weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Adapter training parameters, sharing codec and schedule with the model.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            p_drop: t.p_drop,
            clip_grad_norm: t.clip_grad_norm,
            seed: t.seed,
            schedule: self.model.schedule.clone(),
            codec: self.model.codec,
            checkpoint_every: t.checkpoint_every,
            checkpoint_dir: (t.checkpoint_every > 0).then(|| t.out_dir.join("checkpoints")),
            ..TrainConfig::default()
        }
    }

    /// Base pretraining parameters.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.pretrain_steps,
            lr: self.train.pretrain_lr,
            object_hole_prob: self.train.pretrain_object_hole_prob,
            ..self.train_config()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn parses_documented_example() {
        let text = r#"
[model]
base_checkpoint = "runs/base.ckpt"
codec = { kind = "space_to_depth", factor = 2 }
adapter = { cond_channels = [16, 32], codec_factor = 2, seed = 0 }

[train]
steps = 10
datasets = [{ manifest = "data/manifest.jsonl", weight = 2.0 }, { manifest = "/abs/m.jsonl" }]

[service]
port = 9000

[clients.point_segmenter]
kind = "http"
url = "http://localhost:9000/segment"
"#;
        let mut cfg = RunConfig::from_toml(text).unwrap();
        cfg.resolve_paths(Path::new("/etc/run"));
        cfg.validate().unwrap();
        assert_eq!(
            cfg.model.base_checkpoint.as_deref(),
            Some(Path::new("/etc/run/runs/base.ckpt"))
        );
        assert_eq!(
            cfg.train.datasets[0].manifest,
            Path::new("/etc/run/data/manifest.jsonl")
        );
        assert_eq!(cfg.train.datasets[1].manifest, Path::new("/abs/m.jsonl"));
        assert_eq!(cfg.train.datasets[1].weight, 1.0);
        assert_eq!(
            cfg.clients.point_segmenter,
            Some(ClientSpec::Http {
                url: "http://localhost:9000/segment".into(),
                timeout_secs: 60
            })
        );
        assert_eq!(cfg.train_config().codec.factor, 2);
        assert!(RunConfig::from_toml("[train]\nstep = 3").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RunConfig::default();
        let env = |k: &str| match k {
            ENV_HOST => Some("0.0.0.0".to_string()),
            ENV_PORT => Some("1234".to_string()),
            ENV_BASE => Some("/m/base.ckpt".to_string()),
            ENV_TOKEN => Some("s3cret".to_string()),
            _ => None,
        };
        cfg.apply_env(env).unwrap();
        assert_eq!((cfg.service.host.as_str(), cfg.service.port), ("0.0.0.0", 1234));
        assert_eq!(cfg.model.base_checkpoint.as_deref(), Some(Path::new("/m/base.ckpt")));
        assert_eq!(cfg.service.bearer_token.as_deref(), Some("s3cret"));
        assert!(cfg.apply_env(|k| (k == ENV_PORT).then(|| "x".to_string())).is_err());
    }

    #[test]
    fn validation_and_client_roles() {
        let mut cfg = RunConfig::default();
        cfg.model.codec = CodecConfig::space_to_depth(2).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.model.adapter.codec_factor = 2;
        cfg.validate().unwrap();
        cfg.train.p_drop = 2.0;
        assert!(cfg.validate().is_err());

        let clients = ClientsSection::default().build().unwrap();
        assert!(clients.sos.is_some() && clients.llm.is_none());
        let bad = ClientsSection {
            sos: Some(ClientSpec::Oracle),
            ..Default::default()
        };
        assert!(matches!(bad.build(), Err(Error::Config(_))));
    }

    #[test]
    fn unconfigured_base_is_seeded() {
        let mut m = ModelSection::default();
        m.unet = UNetConfig::tiny();
        let a = m.load_bundle().unwrap();
        assert_eq!(a.base_hash().unwrap(), m.load_bundle().unwrap().base_hash().unwrap());
        m.init_seed = 1;
        assert_ne!(a.base_hash().unwrap(), m.load_bundle().unwrap().base_hash().unwrap());
    }
}
