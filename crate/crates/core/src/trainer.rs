//! Adapter training with a frozen base, and base pretraining on random masks.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{ControlAdapterParams, ControlWeight, ControlledModel};
use crate::checkpoint;
use crate::codec::{encode, encode_mask, CodecConfig, Latent};
use crate::diffusion::{gaussian, training_loss, DiffusionBatch, NoiseSchedule, ScheduleConfig};
use crate::error::{config, Error, Result};
use crate::image::{BinaryMask, SalientSample};
use crate::unet::{InpaintModelParams, NoisePredictor, TextEmbedder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability of replacing a caption with the empty prompt.
    pub p_drop: f64,
    /// Clip the global gradient norm to this value when set.
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub codec: CodecConfig,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Base pretraining only: probability of an object-hugging hole (see
    /// [`crate::data::object_hole_mask`]) instead of a random one.
    pub object_hole_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            p_drop: 0.1,
            clip_grad_norm: None,
            seed: 0,
            schedule: ScheduleConfig::default(),
            codec: CodecConfig::identity(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            object_hole_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(config("p_drop must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.object_hole_prob) {
            return Err(config("object_hole_prob must be in [0, 1]"));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(config("clip_grad_norm must be positive"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(config("checkpoint_every needs checkpoint_dir"));
        }
        self.codec.validate()
    }

    fn adamw(&self) -> ParamsAdamW {
        ParamsAdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One training example in diffusion space, without a batch axis.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub id: String,
    /// `(C, h, w)`.
    pub x0: Tensor,
    /// `(1, h, w)`.
    pub fill_mask: Tensor,
    /// `(C, h, w)`, zero on fill cells.
    pub masked_latent: Tensor,
    /// Object mask at image resolution, `(1, H, W)`.
    pub control: Tensor,
    pub caption: String,
    pub text_dropped: bool,
}

fn latent_tensor(l: &Latent) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        l.data.clone(),
        (l.channels, l.height, l.width),
        &Device::Cpu,
    )?)
}

fn mask_tensor(m: &BinaryMask) -> Result<Tensor> {
    let v: Vec<f32> = m.bits().iter().map(|&b| b as u8 as f32).collect();
    Ok(Tensor::from_vec(v, (1, m.height(), m.width()), &Device::Cpu)?)
}

/// Builds an example for an arbitrary fill mask (fill convention).
pub fn make_example(
    s: &SalientSample,
    fill: &BinaryMask,
    codec: &CodecConfig,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    let x0 = latent_tensor(&encode(&s.image, codec)?)?.affine(2.0, -1.0)?;
    let fill_mask = latent_tensor(&encode_mask(fill, codec)?)?;
    let masked_latent = x0.broadcast_mul(&(1.0 - &fill_mask)?)?;
    let text_dropped = rng.random_bool(p_drop);
    Ok(TrainingExample {
        id: s.id.clone(),
        x0,
        fill_mask,
        masked_latent,
        control: mask_tensor(&s.object_mask)?,
        caption: if text_dropped { String::new() } else { s.caption.clone() },
        text_dropped,
    })
}

/// The outpainting example for a sample: the fill region is everything
/// outside the object. Returns `None` (with a warning) when the object
/// covers the whole frame.
pub fn make_training_example(
    s: &SalientSample,
    codec: &CodecConfig,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<TrainingExample>> {
    if s.object_mask.count() == s.object_mask.height() * s.object_mask.width() {
        log::warn!("skipping {}: object covers the whole frame", s.id);
        return Ok(None);
    }
    make_example(s, &s.fill_mask(), codec, p_drop, rng).map(Some)
}

/// Stacks examples and draws a timestep and noise per example.
pub fn collate(
    examples: &[TrainingExample],
    text: &dyn TextEmbedder,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionBatch> {
    let stack = |f: fn(&TrainingExample) -> &Tensor| -> Result<Tensor> {
        Ok(Tensor::stack(&examples.iter().map(f).collect::<Vec<_>>(), 0)?)
    };
    let x0 = stack(|e| &e.x0)?;
    let captions: Vec<&str> = examples.iter().map(|e| e.caption.as_str()).collect();
    let t: Vec<usize> = examples.iter().map(|_| rng.random_range(1..=sched.len())).collect();
    let eps = gaussian(rng, x0.dims(), DType::F32)?;
    Ok(DiffusionBatch {
        fill_mask: stack(|e| &e.fill_mask)?,
        masked_latent: stack(|e| &e.masked_latent)?,
        control: stack(|e| &e.control)?,
        text: text.embed_batch(&captions, DType::F32)?,
        x0,
        t,
        eps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dropped_text_fraction: f64,
}

pub fn write_history_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,loss,lr,dropped_text_fraction\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, r.dropped_text_fraction));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

fn fingerprint(examples: &[TrainingExample], t: &[usize]) -> String {
    let mut h = Sha256::new();
    for (e, t) in examples.iter().zip(t) {
        h.update(e.id.as_bytes());
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Seed-determined epoch-shuffled visiting order.
struct Order {
    n: usize,
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            n,
            perm: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.perm = (0..self.n).collect();
            for i in (1..self.n).rev() {
                let j = self.rng.random_range(0..=i);
                self.perm.swap(i, j);
            }
            self.pos = 0;
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let g = (g * scale)?;
                grads.insert(v.as_tensor(), g);
            }
        }
    }
    Ok(())
}

/// Backpropagates `loss` and keeps only the gradients of `vars`. Candle also
/// fills in gradients for constant operands such as frozen conv kernels;
/// those are dropped here so nothing downstream can see or apply them.
pub fn trainable_grads(loss: &Tensor, vars: &[Var]) -> Result<GradStore> {
    let mut all = loss.backward()?;
    let mut kept = GradStore::default();
    for v in vars {
        if let Some(g) = all.remove(v.as_tensor()) {
            kept.insert(v.as_tensor(), g);
        }
    }
    Ok(kept)
}

/// Called after every step with the step record.
pub type StepObserver<'a> = &'a mut dyn FnMut(&StepRecord);

/// Shared loop: draws batches, computes the loss through `model_for`, and
/// updates `vars` with AdamW.
#[allow(clippy::too_many_arguments)]
fn optimize(
    vars: &[Var],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    text: &dyn TextEmbedder,
    mut next_example: impl FnMut(&mut ChaCha8Rng) -> Result<TrainingExample>,
    loss_of: &dyn Fn(&DiffusionBatch) -> Result<Tensor>,
    mut on_checkpoint: impl FnMut(usize) -> Result<()>,
    mut observer: Option<StepObserver>,
) -> Result<Vec<StepRecord>> {
    let mut opt = AdamW::new(vars.to_vec(), cfg.adamw())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let examples = (0..cfg.batch_size)
            .map(|_| next_example(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(&examples, text, sched, &mut rng)?;
        let loss = loss_of(&batch).map_err(|e| match e {
            Error::Numeric(m) => {
                Error::Numeric(format!("step {step}, batch {}: {m}", fingerprint(&examples, &batch.t)))
            }
            other => other,
        })?;
        let mut grads = trainable_grads(&loss, vars)?;
        if let Some(c) = cfg.clip_grad_norm {
            clip_gradients(&mut grads, vars, c)?;
        }
        opt.step(&grads)?;
        let dropped = examples.iter().filter(|e| e.text_dropped).count() as f64 / examples.len() as f64;
        let rec = StepRecord {
            step,
            loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            lr: cfg.lr,
            dropped_text_fraction: dropped,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec);
        }
        history.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            on_checkpoint(step)?;
        }
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct AdapterTraining {
    pub adapter: ControlAdapterParams,
    pub history: Vec<StepRecord>,
}

/// Trains the adapter on outpainting examples with the base frozen. The base
/// is never turned into variables and its gradients are discarded.
pub fn train_adapter(
    base: &InpaintModelParams,
    adapter: &ControlAdapterParams,
    data: &[SalientSample],
    text: &dyn TextEmbedder,
    cfg: &TrainConfig,
    observer: Option<StepObserver>,
) -> Result<AdapterTraining> {
    cfg.validate()?;
    adapter.check_base(base)?;
    if !base.tensors.all_finite()? {
        return Err(Error::Numeric("base model has non-finite parameters".into()));
    }
    let usable: Vec<&SalientSample> = data
        .iter()
        .filter(|s| s.object_mask.count() < s.object_mask.height() * s.object_mask.width())
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let sched = cfg.schedule.build()?;
    let base = InpaintModelParams {
        config: base.config.clone(),
        tensors: base.tensors.frozen()?,
    };
    let (var_map, vars) = adapter.tensors.to_dtype(DType::F32)?.to_vars()?;
    let live = ControlAdapterParams {
        tensors: var_map,
        ..adapter.clone()
    };
    let mut order = Order::new(usable.len(), cfg.seed);
    let next_example = |rng: &mut ChaCha8Rng| -> Result<TrainingExample> {
        let s = usable[order.next()];
        make_example(s, &s.fill_mask(), &cfg.codec, cfg.p_drop, rng)
    };
    let loss_of = |b: &DiffusionBatch| {
        let model = ControlledModel {
            base: &base,
            adapter: Some(&live),
            w: ControlWeight::FULL,
        };
        training_loss(&model as &dyn NoisePredictor, b, &sched)
    };
    let snapshot = |live: &ControlAdapterParams| -> Result<ControlAdapterParams> {
        Ok(ControlAdapterParams {
            tensors: live.tensors.frozen()?,
            ..live.clone()
        })
    };
    let on_checkpoint = |step: usize| -> Result<()> {
        let dir = cfg.checkpoint_dir.as_ref().expect("validated");
        checkpoint::save_adapter(&dir.join(format!("adapter-{step:06}.ckpt")), &snapshot(&live)?)
    };
    let history = optimize(
        &vars,
        cfg,
        &sched,
        text,
        next_example,
        &loss_of,
        on_checkpoint,
        observer,
    )?;
    Ok(AdapterTraining {
        adapter: snapshot(&live)?,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct BaseTraining {
    pub base: InpaintModelParams,
    pub history: Vec<StepRecord>,
}

/// Thickest object ring hidden by object-hugging pretraining holes, in pixels.
pub const OBJECT_HOLE_EROSION: usize = 3;

/// Inpainting pretraining of the base model on random fill masks.
pub fn pretrain_base(
    init: &InpaintModelParams,
    data: &[SalientSample],
    text: &dyn TextEmbedder,
    cfg: &TrainConfig,
    observer: Option<StepObserver>,
) -> Result<BaseTraining> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let sched = cfg.schedule.build()?;
    let (var_map, vars) = init.tensors.to_dtype(DType::F32)?.to_vars()?;
    let live = InpaintModelParams {
        config: init.config.clone(),
        tensors: var_map,
    };
    let mut order = Order::new(data.len(), cfg.seed);
    let next_example = |rng: &mut ChaCha8Rng| -> Result<TrainingExample> {
        let s = &data[order.next()];
        let hole = if cfg.object_hole_prob > 0.0 && rng.random_bool(cfg.object_hole_prob) {
            crate::data::object_hole_mask(&s.object_mask, OBJECT_HOLE_EROSION, rng)
        } else {
            None
        };
        let fill = match hole {
            Some(h) => h,
            None => crate::data::random_fill_mask(s.image.height(), s.image.width(), rng)?,
        };
        make_example(s, &fill, &cfg.codec, cfg.p_drop, rng)
    };
    let loss_of = |b: &DiffusionBatch| training_loss(&live as &dyn NoisePredictor, b, &sched);
    let on_checkpoint = |step: usize| -> Result<()> {
        let dir = cfg.checkpoint_dir.as_ref().expect("validated");
        let snap = InpaintModelParams {
            config: live.config.clone(),
            tensors: live.tensors.frozen()?,
        };
        checkpoint::save_base(&dir.join(format!("base-{step:06}.ckpt")), &snap)
    };
    let history = optimize(
        &vars,
        cfg,
        &sched,
        text,
        next_example,
        &loss_of,
        on_checkpoint,
        observer,
    )?;
    Ok(BaseTraining {
        base: InpaintModelParams {
            config: live.config.clone(),
            tensors: live.tensors.frozen()?,
        },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, AdapterConfig};
    use crate::data::synthetic_samples;
    use crate::image::{Image, MaskKind};
    use crate::unet::{HashTextEmbedder, UNetConfig};

    fn tiny_setup() -> (InpaintModelParams, ControlAdapterParams, HashTextEmbedder) {
        let base = InpaintModelParams::init(UNetConfig::tiny(), 1, DType::F32).unwrap();
        let adapter = init_adapter(
            &base,
            &AdapterConfig {
                cond_channels: vec![4, 4],
                ..Default::default()
            },
        )
        .unwrap();
        let text = HashTextEmbedder::for_config(&base.config).unwrap();
        (base, adapter, text)
    }

    fn sample(n: usize) -> SalientSample {
        synthetic_samples(n + 1, 0, 16).unwrap().pop().unwrap()
    }

    #[test]
    fn training_example_contract() {
        let s = sample(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = make_training_example(&s, &CodecConfig::identity(), 0.0, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(e.caption, s.caption);
        let fill: Vec<f32> = e.fill_mask.flatten_all().unwrap().to_vec1().unwrap();
        let ctrl: Vec<f32> = e.control.flatten_all().unwrap().to_vec1().unwrap();
        assert!(fill.iter().zip(&ctrl).all(|(f, c)| f + c == 1.0));
        let ml: Vec<f32> = e.masked_latent.flatten_all().unwrap().to_vec1().unwrap();
        let x0: Vec<f32> = e.x0.flatten_all().unwrap().to_vec1().unwrap();
        let hw = fill.len();
        for (i, (&m, &x)) in ml.iter().zip(&x0).enumerate() {
            assert_eq!(m, if fill[i % hw] == 1.0 { 0.0 } else { x });
        }
        let full = SalientSample {
            object_mask: BinaryMask::filled(16, 16, true, MaskKind::Object).unwrap(),
            image: Image::filled(16, 16, [0.5; 3]).unwrap(),
            ..s
        };
        assert!(make_training_example(&full, &CodecConfig::identity(), 0.0, &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn drop_probability_contracts() {
        let s = sample(1);
        let codec = CodecConfig::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..1000).all(|_| !make_training_example(&s, &codec, 0.0, &mut rng)
            .unwrap()
            .unwrap()
            .text_dropped));
        let dropped = (0..20_000)
            .map(|_| make_training_example(&s, &codec, 0.1, &mut rng).unwrap().unwrap())
            .filter(|e| {
                assert_eq!(e.text_dropped, e.caption.is_empty());
                e.text_dropped
            })
            .count();
        let frac = dropped as f64 / 20_000.0;
        // 3σ for n = 2·10⁴ is 0.0064.
        assert!((frac - 0.1).abs() < 0.0064, "{frac}");
    }

    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            lr: 1e-3,
            schedule: ScheduleConfig::default(),
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let (base, adapter, text) = tiny_setup();
        let data = synthetic_samples(2, 0, 16).unwrap();
        let out = train_adapter(&base, &adapter, &data, &text, &quick_cfg(0), None).unwrap();
        assert_eq!(out.adapter.content_hash().unwrap(), adapter.content_hash().unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_base_alone() {
        let (base, adapter, text) = tiny_setup();
        let before = base.content_hash().unwrap();
        let data = synthetic_samples(3, 0, 16).unwrap();
        let a = train_adapter(&base, &adapter, &data, &text, &quick_cfg(4), None).unwrap();
        let b = train_adapter(&base, &adapter, &data, &text, &quick_cfg(4), None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.adapter.content_hash().unwrap(), b.adapter.content_hash().unwrap());
        assert_ne!(a.adapter.content_hash().unwrap(), adapter.content_hash().unwrap());
        assert_eq!(base.content_hash().unwrap(), before);
        assert_eq!(a.adapter.base_hash, before);
    }

    #[test]
    fn checkpoints_and_history_csv() {
        let (base, adapter, text) = tiny_setup();
        let data = synthetic_samples(2, 0, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..quick_cfg(4)
        };
        let out = train_adapter(&base, &adapter, &data, &text, &cfg, None).unwrap();
        let last = checkpoint::load_adapter(&dir.path().join("adapter-000004.ckpt")).unwrap();
        assert_eq!(last.content_hash().unwrap(), out.adapter.content_hash().unwrap());
        assert!(dir.path().join("adapter-000002.ckpt").is_file());
        let csv = dir.path().join("h.csv");
        write_history_csv(&csv, &out.history).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("step,loss,lr,dropped_text_fraction\n1,"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn empty_dataset_and_bad_config_are_rejected() {
        let (base, adapter, text) = tiny_setup();
        assert!(train_adapter(&base, &adapter, &[], &text, &quick_cfg(1), None).is_err());
        let data = synthetic_samples(1, 0, 16).unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..quick_cfg(1)
        };
        assert!(matches!(
            train_adapter(&base, &adapter, &data, &text, &bad, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_loss_reports_step_and_fingerprint() {
        let (mut base, _, text) = tiny_setup();
        let name = base.tensors.names().next().unwrap().clone();
        let t = base.tensors.get(&name).unwrap();
        let nan = (t.ones_like().unwrap() * f64::NAN).unwrap();
        base.tensors.insert(name, nan);
        let data = synthetic_samples(1, 0, 16).unwrap();
        match pretrain_base(&base, &data, &text, &quick_cfg(2), None) {
            Err(Error::Numeric(m)) => assert!(m.starts_with("step 1, batch "), "{m}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn pretraining_reduces_loss() {
        let (base, _, text) = tiny_setup();
        let data = synthetic_samples(4, 0, 16).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 4,
            lr: 3e-3,
            ..Default::default()
        };
        let out = pretrain_base(&base, &data, &text, &cfg, None).unwrap();
        let first: f64 = out.history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let last: f64 = out.history[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(last < first, "first {first}, last {last}");
    }
}
