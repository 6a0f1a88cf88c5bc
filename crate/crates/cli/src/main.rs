//! `outpaint` command-line tool.
//!
//! Generation, metrics and evaluation run in-process by default. With
//! `--server URL` they go through the HTTP service instead and produce the
//! same bytes. Training, ingestion and dataset synthesis always run locally.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use outpaint_client::{Client, ClientError, EvalRequest};
use outpaint_core::adapter::ControlWeight;
use outpaint_core::config::RunConfig;
use outpaint_core::data::{ingest_dir, make_synthetic_dataset, synth_captions, synth_masks, DatasetManifest};
use outpaint_core::eval::{AdaptedGenerator, BaselineGenerator, EvalReport, Generator};
use outpaint_core::expansion::measure_pair;
use outpaint_core::image::{BinaryMask, Image, MaskKind};
use outpaint_core::pipeline::OutpaintParams;
use outpaint_core::{exit_code_for, Error};

#[derive(Parser)]
#[command(name = "outpaint", version, about = "Salient-object outpainting")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, env = "OUTPAINT_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Remote {
    /// Base URL of a running service, e.g. http://127.0.0.1:8080.
    #[arg(long)]
    server: Option<String>,
    /// Bearer token for the service.
    #[arg(long, env = "OUTPAINT_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Seconds to wait for a service job.
    #[arg(long, default_value_t = 3600)]
    timeout: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelChoice {
    /// Base with the trained adapter.
    Adapted,
    /// The frozen base alone.
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Train the adapter (and optionally pretrain the base).
    Train {
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of adapter steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate backgrounds around an object.
    Outpaint {
        #[arg(long)]
        image: PathBuf,
        /// Object mask PNG; the salient segmenter runs when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Control weight in [0, 1].
        #[arg(long, default_value_t = 1.0)]
        w: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        variants: Option<usize>,
        /// Use the frozen base alone.
        #[arg(long)]
        baseline: bool,
        /// Directory for `variant_NNN.png`, `mask.png` and `metrics.json`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        remote: Remote,
    },
    /// Run the evaluation protocol on a manifest.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Models to evaluate, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "adapted")]
        models: Vec<ModelChoice>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Per-category expansion table.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Object expansion between an object image and an outpainted image.
    Expansion {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        outpainted: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        remote: Remote,
    },
    /// Build a manifest from an image directory.
    Ingest {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fill missing masks with the salient segmenter.
        #[arg(long)]
        synth_masks: bool,
        /// Fill missing captions with the captioner.
        #[arg(long)]
        synth_captions: bool,
        /// Concurrent client calls.
        #[arg(long, default_value_t = 4)]
        in_flight: usize,
    },
    /// Write a procedural dataset.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Client(ClientError),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Client(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Client(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let code = match self {
            CliError::Core(e) => e.exit_code(),
            CliError::Client(ClientError::Api { status, error }) => {
                exit_code_for(&error.code).unwrap_or(if *status == 400 { 3 } else { 1 })
            }
            CliError::Client(ClientError::JobFailed { error, .. }) => exit_code_for(&error.code).unwrap_or(1),
            CliError::Client(ClientError::Protocol(_)) => 8,
            CliError::Client(ClientError::Transport(_) | ClientError::Timeout(_)) => 15,
        };
        code as u8
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env(|k| std::env::var(k).ok())?;
            c.validate()?;
            c
        }
    };
    if cfg.service.bearer_token.as_deref() == Some("") {
        cfg.service.bearer_token = None;
    }
    Ok(cfg)
}

fn client(remote: &Remote, url: &str) -> Result<Client> {
    Ok(Client::new(url)?.with_token(remote.token.clone()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Command::Train { seed, steps, out } => train(cfg, seed, steps, out),
        Command::Outpaint {
            image,
            mask,
            prompt,
            seed,
            w,
            steps,
            guidance,
            variants,
            baseline,
            out,
            remote,
        } => {
            let defaults = OutpaintParams::default();
            let params = OutpaintParams {
                prompt,
                seed,
                w: ControlWeight::new(w)?,
                steps: steps.unwrap_or(defaults.steps),
                guidance: guidance.unwrap_or(defaults.guidance),
                num_variants: variants.unwrap_or(defaults.num_variants),
            };
            outpaint(&cfg, &image, mask.as_deref(), &params, baseline, &out, &remote)
        }
        Command::Eval {
            dataset,
            models,
            seed,
            out,
            categories,
            remote,
        } => eval(cfg, &dataset, &models, seed, &out, categories.as_deref(), &remote),
        Command::Expansion {
            input,
            outpainted,
            seed,
            remote,
        } => expansion(&cfg, &input, &outpainted, seed, &remote),
        Command::Ingest {
            source,
            out,
            synth_masks,
            synth_captions,
            in_flight,
        } => ingest(&cfg, &source, &out, synth_masks, synth_captions, in_flight),
        Command::SynthData { n, seed, size, out } => {
            let m = make_synthetic_dataset(n, seed, size, &out)?;
            println!("{}", out.join("manifest.jsonl").display());
            log::info!("wrote {} samples", m.len());
            Ok(())
        }
        Command::Serve { host, port } => {
            let mut cfg = cfg;
            if let Some(h) = host {
                cfg.service.host = h;
            }
            if let Some(p) = port {
                cfg.service.port = p;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(outpaint_server::serve(cfg))?;
            Ok(())
        }
    }
}

fn train(mut cfg: RunConfig, seed: Option<u64>, steps: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(o) = out {
        cfg.train.out_dir = o;
    }
    let mut report = |r: &outpaint_core::trainer::StepRecord| {
        if r.step.is_multiple_of(50) {
            log::info!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
    };
    let outcome = outpaint_core::workflow::run_training(&cfg, Some(&mut report))?;
    let summary = serde_json::json!({
        "base_checkpoint": outcome.base_checkpoint,
        "adapter_checkpoint": outcome.adapter_checkpoint,
        "base_hash": outcome.base_hash,
        "adapter_hash": outcome.adapter_hash,
        "samples": outcome.samples,
        "final_loss": outcome.final_loss,
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

fn outpaint(
    cfg: &RunConfig,
    image: &Path,
    mask: Option<&Path>,
    params: &OutpaintParams,
    baseline: bool,
    out: &Path,
    remote: &Remote,
) -> Result<()> {
    let archive = match &remote.server {
        Some(url) => {
            let image_png = std::fs::read(image)?;
            let mask_png = mask.map(std::fs::read).transpose()?;
            let timeout = Duration::from_secs(remote.timeout);
            client(remote, url)?
                .outpaint(&image_png, mask_png.as_deref(), params, baseline, timeout)?
                .archive
        }
        None => {
            let img = Image::load(image)?;
            let mask = mask.map(|p| BinaryMask::load(p, MaskKind::Object)).transpose()?;
            let models = cfg.model.load_bundle()?;
            let clients = cfg.clients.build()?;
            outpaint_server::render_outpaint(&models, &clients, &img, mask, params, baseline)?
        }
    };
    let res = outpaint_client::unpack(archive)?;
    std::fs::create_dir_all(out)?;
    for (v, m) in res.variants.iter().zip(&res.metrics) {
        std::fs::write(out.join(&m.file), v)?;
    }
    std::fs::write(out.join("mask.png"), &res.mask)?;
    let metrics = serde_json::json!({ "variants": res.metrics });
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_vec_pretty(&metrics).map_err(Error::from)?,
    )?;
    for m in &res.metrics {
        match m.expansion {
            Some(e) => println!("{}\tE={e:.6}", out.join(&m.file).display()),
            None => println!("{}\tE=unavailable", out.join(&m.file).display()),
        }
    }
    Ok(())
}

fn eval(
    mut cfg: RunConfig,
    dataset: &Path,
    models: &[ModelChoice],
    seed: Option<u64>,
    out: &Path,
    categories: Option<&Path>,
    remote: &Remote,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    if models.is_empty() {
        return Err(Error::InvalidInput("--models names no model".into()).into());
    }
    let report: EvalReport = match &remote.server {
        Some(url) => {
            if models.first() != Some(&ModelChoice::Adapted) {
                return Err(Error::InvalidInput(
                    "the service evaluates the adapted model first; list `adapted` first".into(),
                )
                .into());
            }
            let dataset = std::path::absolute(dataset)?;
            let req = EvalRequest {
                dataset: dataset.display().to_string(),
                config: Some(cfg.eval.clone()),
                compare_baseline: models.contains(&ModelChoice::Baseline),
            };
            client(remote, url)?.eval(&req, Duration::from_secs(remote.timeout))?
        }
        None => {
            let bundle = cfg.model.load_bundle()?;
            let adapted = AdaptedGenerator(&bundle);
            let base = BaselineGenerator(&bundle);
            let mut gens: Vec<&dyn Generator> = Vec::new();
            for m in models {
                gens.push(match m {
                    ModelChoice::Adapted => &adapted,
                    ModelChoice::Baseline => &base,
                });
            }
            outpaint_core::workflow::run_evaluation(&cfg, dataset, &gens)?
        }
    };
    std::fs::write(out, report.to_json()?)?;
    if let Some(p) = categories {
        std::fs::write(p, report.categories_csv())?;
    }
    for row in &report.rows {
        let e = row.expansion.mean.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        println!("{}\tE={e}\tn={}", row.model, row.expansion.count);
    }
    Ok(())
}

fn expansion(cfg: &RunConfig, input: &Path, outpainted: &Path, seed: u64, remote: &Remote) -> Result<()> {
    let report = match &remote.server {
        Some(url) => client(remote, url)?.expansion(&std::fs::read(input)?, &std::fs::read(outpainted)?, seed)?,
        None => {
            let (a, b) = (Image::load(input)?, Image::load(outpainted)?);
            let clients = cfg.clients.build()?;
            let (Some(sos), Some(seg)) = (&clients.sos, &clients.point_segmenter) else {
                return Err(
                    Error::MetricUnavailable("salient and point segmenters must both be configured".into()).into(),
                );
            };
            measure_pair(&a, &b, sos.as_ref(), seg.as_ref(), seed, &clients.retry)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn ingest(cfg: &RunConfig, source: &Path, out: &Path, masks: bool, captions: bool, in_flight: usize) -> Result<()> {
    let mut ds = ingest_dir(source)?;
    let clients = cfg.clients.build()?;
    let mut failures = Vec::new();
    if masks {
        let sos = clients
            .sos
            .as_ref()
            .ok_or_else(|| Error::Config("--synth-masks needs a salient segmenter".into()))?;
        let (next, f) = synth_masks(&ds, sos.as_ref(), &clients.retry, in_flight)?;
        ds = next;
        failures.extend(f);
    }
    if captions {
        let cap = clients
            .captioner
            .as_ref()
            .ok_or_else(|| Error::Config("--synth-captions needs a captioner".into()))?;
        let (next, f) = synth_captions(&ds, cap.as_ref(), &clients.retry, in_flight)?;
        ds = next;
        failures.extend(f);
    }
    relocate(&mut ds, out)?;
    ds.save(out)?;
    for f in &failures {
        eprintln!("dropped {}: {} ({})", f.image_path, f.message, f.code);
    }
    println!("{}\t{} entries\t{} dropped", out.display(), ds.len(), failures.len());
    Ok(())
}

/// Manifest paths are relative to the manifest's directory; when the manifest
/// is written elsewhere they become absolute.
fn relocate(ds: &mut DatasetManifest, out: &Path) -> Result<()> {
    let out_dir = std::path::absolute(
        out.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new(".")),
    )?;
    let root = std::path::absolute(&ds.root)?;
    if out_dir == root {
        return Ok(());
    }
    let abs = |rel: &str| root.join(rel).display().to_string();
    for e in &mut ds.entries {
        e.image_path = abs(&e.image_path);
        e.mask_path = e.mask_path.as_deref().map(abs);
    }
    ds.root = out_dir;
    Ok(())
}
