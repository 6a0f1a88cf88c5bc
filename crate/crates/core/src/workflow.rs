//! Whole-run entry points shared by the CLI and the service: training from a
//! run configuration and evaluating a manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapter::init_adapter;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{filter_samples, filter_small_objects, synthetic_samples, DatasetManifest, Mixer};
use crate::error::{config, invalid, Result};
use crate::eval::{run_protocol, EvalReport, Generator};
use crate::image::{Image, SalientSample};
use crate::trainer::{pretrain_base, train_adapter, write_history_csv, StepObserver};
use crate::unet::HashTextEmbedder;

/// Training samples per the configuration: every manifest filtered by object
/// area and mixed by weight, or the synthetic corpus when none is listed.
/// The mixed list has as many entries as all datasets together.
pub fn training_samples(cfg: &RunConfig) -> Result<Vec<SalientSample>> {
    let t = &cfg.train;
    if t.datasets.is_empty() {
        let s = &t.synthetic;
        return filter_samples(synthetic_samples(s.n, s.seed, s.size)?, t.min_object_area);
    }
    let mut sets = Vec::with_capacity(t.datasets.len());
    for d in &t.datasets {
        let m = DatasetManifest::load(&d.manifest)?;
        let (m, _) = filter_small_objects(&m, t.min_object_area)?;
        sets.push(m.load_all()?);
    }
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    let weights: Vec<f64> = t.datasets.iter().map(|d| d.weight).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(config("every training dataset is empty after filtering"));
    }
    let mut mixer = Mixer::new(&sizes, &weights, t.seed)?;
    Ok((0..total)
        .map(|_| {
            let (d, e) = mixer.next_index();
            sets[d][e].clone()
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub base_checkpoint: PathBuf,
    pub adapter_checkpoint: PathBuf,
    pub base_hash: String,
    pub adapter_hash: String,
    pub samples: usize,
    pub final_loss: Option<f64>,
}

/// Optional base pretraining, then adapter training. Writes `base.ckpt`,
/// `adapter.ckpt`, `loss.csv` and, after pretraining, `pretrain_loss.csv`
/// into the output directory.
pub fn run_training(cfg: &RunConfig, mut observer: Option<StepObserver>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = training_samples(cfg)?;
    if samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    let out = &cfg.train.out_dir;
    std::fs::create_dir_all(out)?;
    if let Some(dir) = &cfg.train_config().checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut base = cfg.model.load_base()?;
    let text = HashTextEmbedder::for_config(&base.config)?;
    if cfg.train.pretrain_steps > 0 {
        let r = pretrain_base(
            &base,
            &samples,
            &text,
            &cfg.pretrain_config(),
            observer.as_mut().map(|o| &mut **o as _),
        )?;
        write_history_csv(&out.join("pretrain_loss.csv"), &r.history)?;
        base = r.base;
    }
    let adapter = match &cfg.model.adapter_checkpoint {
        Some(p) => checkpoint::load_adapter(p)?,
        None => init_adapter(&base, &cfg.model.adapter)?,
    };
    let trained = train_adapter(&base, &adapter, &samples, &text, &cfg.train_config(), observer)?;
    write_history_csv(&out.join("loss.csv"), &trained.history)?;
    let base_path = out.join("base.ckpt");
    let adapter_path = out.join("adapter.ckpt");
    checkpoint::save_base(&base_path, &base)?;
    checkpoint::save_adapter(&adapter_path, &trained.adapter)?;
    Ok(TrainOutcome {
        base_checkpoint: base_path,
        adapter_checkpoint: adapter_path,
        base_hash: base.content_hash()?,
        adapter_hash: trained.adapter.content_hash()?,
        samples: samples.len(),
        final_loss: trained.history.last().map(|r| r.loss),
    })
}

/// Loads an evaluation manifest; an empty one is an error naming the file.
pub fn load_eval_dataset(path: &Path) -> Result<Vec<SalientSample>> {
    let m = DatasetManifest::load(path)?;
    if m.is_empty() {
        return Err(invalid(format!("manifest {} has no entries", path.display())));
    }
    m.load_all()
}

/// Runs the protocol on a manifest with the configured clients and the
/// configured reference set for the Fréchet distance.
pub fn run_evaluation(cfg: &RunConfig, dataset: &Path, generators: &[&dyn Generator]) -> Result<EvalReport> {
    let data = load_eval_dataset(dataset)?;
    let clients = cfg.clients.build()?;
    let reference: Option<Vec<Image>> = match &cfg.eval.fid_reference_manifest {
        Some(p) => {
            let m = DatasetManifest::load(p)?;
            Some((0..m.len()).map(|i| m.load_image(i)).collect::<Result<_>>()?)
        }
        None => None,
    };
    let mut eval = cfg.eval.clone();
    if eval.dataset_name == crate::eval::EvalConfig::default().dataset_name {
        if let Some(stem) = dataset.file_stem() {
            eval.dataset_name = stem.to_string_lossy().into_owned();
        }
    }
    run_protocol(
        &data,
        generators,
        &clients.eval_clients(),
        &eval,
        reference.as_deref(),
        &clients.retry,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::config::DatasetSpec;
    use crate::data::make_synthetic_dataset;
    use crate::eval::{AdaptedGenerator, BaselineGenerator};
    use crate::unet::UNetConfig;

    fn tiny_run(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.unet = UNetConfig::tiny();
        cfg.model.adapter = AdapterConfig {
            cond_channels: vec![4, 4],
            ..Default::default()
        };
        cfg.train.steps = 2;
        cfg.train.batch_size = 2;
        cfg.train.pretrain_steps = 1;
        cfg.train.synthetic.n = 4;
        cfg.train.synthetic.size = 16;
        cfg.train.out_dir = dir.join("run");
        cfg
    }

    #[test]
    fn training_writes_reloadable_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        let out = run_training(&cfg, None).unwrap();
        for f in ["base.ckpt", "adapter.ckpt", "loss.csv", "pretrain_loss.csv"] {
            assert!(cfg.train.out_dir.join(f).exists(), "{f}");
        }
        let mut model = cfg.model.clone();
        model.base_checkpoint = Some(out.base_checkpoint.clone());
        model.adapter_checkpoint = Some(out.adapter_checkpoint.clone());
        let bundle = model.load_bundle().unwrap();
        assert_eq!(bundle.base_hash().unwrap(), out.base_hash);
        assert_eq!(
            bundle.adapter_hash().unwrap().as_deref(),
            Some(out.adapter_hash.as_str())
        );
    }

    #[test]
    fn manifests_are_mixed() {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic_dataset(6, 1, 16, &dir.path().join("a")).unwrap();
        make_synthetic_dataset(3, 2, 24, &dir.path().join("b")).unwrap();
        let mut cfg = tiny_run(dir.path());
        cfg.train.datasets = vec![
            DatasetSpec {
                manifest: dir.path().join("a/manifest.jsonl"),
                weight: 1.0,
            },
            DatasetSpec {
                manifest: dir.path().join("b/manifest.jsonl"),
                weight: 0.0,
            },
        ];
        let s = training_samples(&cfg).unwrap();
        assert_eq!(s.len(), 9);
        // Only the weighted source is drawn; its images are the 16-pixel ones.
        assert!(s.iter().all(|x| x.image.height() == 16));
    }

    #[test]
    fn evaluation_of_empty_manifest_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        let cfg = tiny_run(dir.path());
        let bundle = cfg.model.load_bundle().unwrap();
        let err = run_evaluation(&cfg, &p, &[&AdaptedGenerator(&bundle)]).unwrap_err();
        assert!(err.to_string().contains("empty.jsonl"), "{err}");
    }

    #[test]
    fn evaluation_runs_on_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic_dataset(2, 3, 16, &dir.path().join("d")).unwrap();
        let mut cfg = tiny_run(dir.path());
        cfg.eval.num_variants = 2;
        cfg.eval.steps = 2;
        cfg.eval.comparison_size = 16;
        let bundle = cfg.model.load_bundle().unwrap();
        let r = run_evaluation(
            &cfg,
            &dir.path().join("d/manifest.jsonl"),
            &[&BaselineGenerator(&bundle)],
        )
        .unwrap();
        assert_eq!(r.rows[0].dataset, "manifest");
        assert_eq!(r.rows[0].samples, 2);
        assert_eq!(r.rows[0].expansion.count, 4);
    }
}
