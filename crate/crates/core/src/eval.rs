//! Evaluation protocol: Fréchet distance, diversity, prompt alignment,
//! object similarity and object expansion, plus the prompt-type builder and
//! per-category aggregation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::adapter::ControlWeight;
use crate::clients::{
    with_retry, Captioner, FeatureExtractor, ImageEmbedder, JointEmbedder, LanguageModel, MaskSegmenter,
    PerceptualDistance, PointSegmenter, RetryPolicy, SalientSegmenter,
};
use crate::error::{invalid, Error, Result};
use crate::expansion::{measure_pair, ExpansionReport};
use crate::image::{Image, SalientSample};
use crate::pipeline::{outpaint, outpaint_with_baseline, ModelBundle, OutpaintParams, OutpaintRequest};

// ---- Fréchet distance ---------------------------------------------------------

fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n <= 1 {
        return Err(invalid(format!("covariance needs at least 2 feature vectors, got {n}")));
    }
    let d = x[0].len();
    if x.iter().any(|v| v.len() != d) {
        return Err(invalid("feature vectors differ in length"));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` as `Tr((A^{1/2} B A^{1/2})^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrt_psd(a);
    sym_eigen(&ra * b * &ra)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` over unbiased sample covariances.
/// The cross term is averaged over both orderings so the result is
/// symmetric in its arguments to rounding.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = moments(real)?;
    let (m2, s2) = moments(generated)?;
    if m1.len() != m2.len() {
        return Err(invalid(format!("feature dims differ: {} vs {}", m1.len(), m2.len())));
    }
    if m1.len() < 2 {
        return Err(invalid("feature dimension must be at least 2"));
    }
    let cross = 0.5 * (trace_sqrt_product(&s1, &s2) + trace_sqrt_product(&s2, &s1));
    let v = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}

// ---- per-sample metrics ------------------------------------------------------------

/// Mean distance over all unordered pairs.
pub fn diversity(variants: &[Image], distance: &dyn PerceptualDistance) -> Result<f64> {
    if variants.len() < 2 {
        return Err(invalid(format!(
            "diversity needs at least 2 variants, got {}",
            variants.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..variants.len() {
        for j in i + 1..variants.len() {
            sum += distance.distance(&variants[i], &variants[j])?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Protocol(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !dot.is_finite() {
        return Err(Error::Protocol("zero or non-finite embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn unavailable(what: &str, e: Error) -> Error {
    match e {
        Error::MetricUnavailable(_) => e,
        other => Error::MetricUnavailable(format!("{what}: {other}")),
    }
}

/// Mean cosine between each image's embedding and the prompt's.
pub fn prompt_alignment(
    images: &[Image],
    prompt: &str,
    embedder: &dyn JointEmbedder,
    policy: &RetryPolicy,
) -> Result<f64> {
    if images.is_empty() {
        return Err(invalid("prompt alignment needs at least one image"));
    }
    let run = || -> Result<f64> {
        let t = with_retry(policy, "joint embedder", || embedder.embed_text(prompt))?;
        let mut sum = 0.0;
        for img in images {
            let e = with_retry(policy, "joint embedder", || embedder.embed_image(img))?;
            sum += cosine(&e, &t)?;
        }
        Ok(sum / images.len() as f64)
    };
    run().map_err(|e| unavailable("prompt alignment", e))
}

/// Cosine between the embeddings of the outpainted and object-only images.
pub fn object_similarity(
    outpainted: &Image,
    object_only: &Image,
    embedder: &dyn ImageEmbedder,
    policy: &RetryPolicy,
) -> Result<f64> {
    let run = || -> Result<f64> {
        let a = with_retry(policy, "image embedder", || embedder.embed_image(outpainted))?;
        let b = with_retry(policy, "image embedder", || embedder.embed_image(object_only))?;
        cosine(&a, &b)
    };
    run().map_err(|e| unavailable("object similarity", e))
}

// ---- prompt types ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// The sample's own caption.
    #[default]
    Caption,
    Empty,
    Likely,
    Unlikely,
}

fn degree(mode: PromptMode) -> &'static str {
    if mode == PromptMode::Likely {
        "very"
    } else {
        "least"
    }
}

/// The language-model request for a scene prompt.
pub fn scene_prompt_request(caption: &str, mode: PromptMode) -> String {
    let d = degree(mode);
    format!(
        "You are a creative and professional photo editor. Question: What is a {d} likely scene for the object \
         described in triple parentheses to be found in? ((({caption}))). Answer: The object is {d} likely to be found in"
    )
}

/// Builds an outpainting prompt for `mode`. Likely and unlikely prompts ask
/// the language model to finish the answer sentence and keep only the scene
/// phrase.
pub fn build_scene_prompt(
    caption: &str,
    mode: PromptMode,
    llm: Option<&dyn LanguageModel>,
    policy: &RetryPolicy,
) -> Result<String> {
    match mode {
        PromptMode::Empty => return Ok(String::new()),
        PromptMode::Caption => return Ok(caption.to_string()),
        _ => {}
    }
    if caption.trim().is_empty() {
        return Err(invalid("scene prompts need a non-empty caption"));
    }
    let llm = llm.ok_or_else(|| Error::PromptUnavailable("no language model configured".into()))?;
    let request = scene_prompt_request(caption, mode);
    let reply = with_retry(policy, "language model", || llm.complete(&request)).map_err(|e| match e {
        Error::MetricUnavailable(m) => Error::PromptUnavailable(m),
        other => other,
    })?;
    let answer = format!("The object is {} likely to be found in", degree(mode));
    let mut scene = reply.trim();
    if let Some(rest) = scene.strip_prefix(&answer) {
        scene = rest.trim_start();
    }
    let scene = scene.trim_end_matches(['.', '!']).trim().trim_matches('"').trim();
    if scene.is_empty() {
        return Err(Error::PromptUnavailable(
            "language model returned an empty scene".into(),
        ));
    }
    Ok(scene.to_string())
}

// ---- aggregation --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub mean_e: f64,
    pub count: usize,
}

/// Mean `E` per category, ordered by descending mean then name.
pub fn aggregate_by_category(reports: &[ExpansionReport]) -> Vec<CategoryRow> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in reports {
        let slot = acc.entry(r.category.as_str()).or_default();
        slot.0 += r.e;
        slot.1 += 1;
    }
    let mut rows: Vec<CategoryRow> = acc
        .into_iter()
        .map(|(c, (s, n))| CategoryRow {
            category: c.to_string(),
            mean_e: s / n as f64,
            count: n,
        })
        .collect();
    rows.sort_by(|a, b| b.mean_e.total_cmp(&a.mean_e).then_with(|| a.category.cmp(&b.category)));
    rows
}

// ---- protocol ------------------------------------------------------------------

/// Anything that turns an outpainting request into images.
pub trait Generator: Sync {
    fn name(&self) -> String;
    fn model_hash(&self) -> Result<String>;
    fn generate(&self, req: &OutpaintRequest) -> Result<Vec<Image>>;
}

/// A bundle run with its adapter (when present).
pub struct AdaptedGenerator<'a>(pub &'a ModelBundle);

/// A bundle's frozen base alone.
pub struct BaselineGenerator<'a>(pub &'a ModelBundle);

impl Generator for AdaptedGenerator<'_> {
    fn name(&self) -> String {
        if self.0.adapter.is_some() { "adapter" } else { "base" }.into()
    }

    fn model_hash(&self) -> Result<String> {
        Ok(match self.0.adapter_hash()? {
            Some(a) => format!("{}+{a}", self.0.base_hash()?),
            None => self.0.base_hash()?,
        })
    }

    fn generate(&self, req: &OutpaintRequest) -> Result<Vec<Image>> {
        outpaint(req, self.0)
    }
}

impl Generator for BaselineGenerator<'_> {
    fn name(&self) -> String {
        "base".into()
    }

    fn model_hash(&self) -> Result<String> {
        self.0.base_hash()
    }

    fn generate(&self, req: &OutpaintRequest) -> Result<Vec<Image>> {
        outpaint_with_baseline(req, self.0)
    }
}

/// Model clients used by the metrics. A missing client makes its metric null.
#[derive(Clone, Copy, Default)]
pub struct EvalClients<'a> {
    /// Salient segmenter for point sampling; the ground-truth mask is used when absent.
    pub sos: Option<&'a dyn SalientSegmenter>,
    pub point_segmenter: Option<&'a dyn PointSegmenter>,
    pub joint: Option<&'a dyn JointEmbedder>,
    pub image_embedder: Option<&'a dyn ImageEmbedder>,
    pub distance: Option<&'a dyn PerceptualDistance>,
    pub features: Option<&'a dyn FeatureExtractor>,
    pub llm: Option<&'a dyn LanguageModel>,
    pub captioner: Option<&'a dyn Captioner>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub dataset_name: String,
    pub seed: u64,
    pub num_variants: usize,
    pub steps: usize,
    pub guidance: f64,
    pub w: ControlWeight,
    pub prompt_mode: PromptMode,
    /// Side of the square resolution every image is resized to before scoring.
    pub comparison_size: usize,
    /// Manifest of reference images for the Fréchet distance; the evaluated
    /// dataset's own images are used when unset.
    pub fid_reference_manifest: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset_name: "dataset".into(),
            seed: 0,
            num_variants: 4,
            steps: 20,
            guidance: 3.0,
            w: ControlWeight::FULL,
            prompt_mode: PromptMode::Caption,
            comparison_size: 256,
            fid_reference_manifest: None,
        }
    }
}

/// A metric mean with the number of values behind it; `mean` is null when
/// nothing could be measured.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub count: usize,
}

#[derive(Default)]
struct Acc {
    sum: f64,
    count: usize,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn summary(&self) -> MetricSummary {
        MetricSummary {
            mean: (self.count > 0).then(|| self.sum / self.count as f64),
            count: self.count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub sample_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub model: String,
    pub model_hash: String,
    pub samples: usize,
    pub skipped: usize,
    pub fid: MetricSummary,
    pub diversity: MetricSummary,
    pub prompt_alignment: MetricSummary,
    pub object_similarity: MetricSummary,
    pub expansion: MetricSummary,
    pub categories: Vec<CategoryRow>,
    pub skips: Vec<SkipRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub seed: u64,
    pub prompt_mode: PromptMode,
    pub num_variants: usize,
    pub steps: usize,
    pub guidance: f64,
    pub w: ControlWeight,
    pub comparison_size: usize,
    pub input_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Per-category expansion table: `dataset,model,category,mean_e,count`.
    pub fn categories_csv(&self) -> String {
        let mut out = String::from("dataset,model,category,mean_e,count\n");
        for row in &self.rows {
            for c in &row.categories {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.dataset, row.model, c.category, c.mean_e, c.count
                ));
            }
        }
        out
    }
}

fn resize_square(img: &Image, size: usize) -> Result<Image> {
    if img.height() == size && img.width() == size {
        Ok(img.clone())
    } else {
        img.resize(size, size)
    }
}

fn record_skip(skips: &mut Vec<SkipRecord>, id: &str, e: &Error) {
    log::warn!("skipping {id}: {e}");
    skips.push(SkipRecord {
        sample_id: id.to_string(),
        code: e.code().to_string(),
        message: e.to_string(),
    });
}

fn metric<T>(r: Result<T>, what: &str) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{what} unavailable: {e}");
            None
        }
    }
}

fn features_of(images: &[Image], fx: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|i| fx.features(i)).collect()
}

/// Generates variants for every sample with every generator, resizes all
/// images to the comparison resolution and scores them. Metric failures
/// become nulls; samples whose prompt or generation fails are skipped and
/// listed.
pub fn run_protocol(
    dataset: &[SalientSample],
    generators: &[&dyn Generator],
    clients: &EvalClients,
    cfg: &EvalConfig,
    fid_reference: Option<&[Image]>,
    policy: &RetryPolicy,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(invalid(format!("dataset `{}` is empty", cfg.dataset_name)));
    }
    if generators.is_empty() {
        return Err(invalid("no models to evaluate"));
    }
    if cfg.num_variants == 0 || cfg.comparison_size < crate::image::MIN_SIDE {
        return Err(invalid("num_variants must be positive and comparison_size at least 8"));
    }
    let size = cfg.comparison_size;

    // Prompts are shared by all generators.
    let mut prompts: Vec<Result<String>> = Vec::with_capacity(dataset.len());
    for s in dataset {
        let caption = if s.caption.is_empty() && cfg.prompt_mode != PromptMode::Empty {
            match clients.captioner {
                Some(c) => with_retry(policy, "captioner", || c.caption(&s.object_only()?)),
                None => Ok(String::new()),
            }
        } else {
            Ok(s.caption.clone())
        };
        prompts.push(caption.and_then(|c| build_scene_prompt(&c, cfg.prompt_mode, clients.llm, policy)));
    }

    let reference: Vec<Image> = match fid_reference {
        Some(r) => r.iter().map(|i| resize_square(i, size)).collect::<Result<_>>()?,
        None => dataset
            .iter()
            .map(|s| resize_square(&s.image, size))
            .collect::<Result<_>>()?,
    };

    let mut rows = Vec::with_capacity(generators.len());
    for g in generators {
        let mut skips = Vec::new();
        let (mut div, mut align, mut sim, mut exp) = (Acc::default(), Acc::default(), Acc::default(), Acc::default());
        let mut generated_all = Vec::new();
        let mut reports = Vec::new();
        for (idx, s) in dataset.iter().enumerate() {
            let prompt = match &prompts[idx] {
                Ok(p) => p.clone(),
                Err(e) => {
                    record_skip(&mut skips, &s.id, e);
                    continue;
                }
            };
            let seed = cfg.seed.wrapping_add((idx * cfg.num_variants) as u64);
            let object_only = s.object_only()?;
            let req = OutpaintRequest {
                object_image: object_only.clone(),
                object_mask: s.object_mask.clone(),
                params: OutpaintParams {
                    prompt: prompt.clone(),
                    seed,
                    w: cfg.w,
                    steps: cfg.steps,
                    guidance: cfg.guidance,
                    num_variants: cfg.num_variants,
                },
            };
            let variants = match g.generate(&req) {
                Ok(v) => v,
                Err(e) => {
                    record_skip(&mut skips, &s.id, &e);
                    continue;
                }
            };
            let variants: Vec<Image> = variants.iter().map(|v| resize_square(v, size)).collect::<Result<_>>()?;
            let object_small = resize_square(&object_only, size)?;
            let mask_small = s.object_mask.resize(size, size)?;

            if let Some(d) = clients.distance {
                if variants.len() >= 2 {
                    if let Some(v) = metric(diversity(&variants, d), "diversity") {
                        div.push(v);
                    }
                }
            }
            if let (Some(j), false) = (clients.joint, prompt.is_empty()) {
                if let Some(v) = metric(prompt_alignment(&variants, &prompt, j, policy), "prompt alignment") {
                    align.push(v);
                }
            }
            if let Some(emb) = clients.image_embedder {
                for v in &variants {
                    if let Some(x) = metric(object_similarity(v, &object_small, emb, policy), "object similarity") {
                        sim.push(x);
                    }
                }
            }
            if let Some(seg) = clients.point_segmenter {
                let gt = MaskSegmenter(mask_small.clone());
                let sos: &dyn SalientSegmenter = clients.sos.unwrap_or(&gt);
                for (k, v) in variants.iter().enumerate() {
                    let r = measure_pair(&object_small, v, sos, seg, seed.wrapping_add(k as u64), policy);
                    if let Some(mut rep) = metric(r, "expansion") {
                        rep.input_id = s.id.clone();
                        rep.output_id = format!("{}#{k}", s.id);
                        rep.category = s.category.clone();
                        exp.push(rep.e);
                        reports.push(rep);
                    }
                }
            }
            generated_all.extend(variants);
        }
        let fid_value = match clients.features {
            Some(fx) if generated_all.len() >= 2 && reference.len() >= 2 => metric(
                features_of(&reference, fx)
                    .and_then(|r| Ok((r, features_of(&generated_all, fx)?)))
                    .and_then(|(r, g)| fid(&r, &g)),
                "fid",
            ),
            _ => None,
        };
        rows.push(EvalRow {
            dataset: cfg.dataset_name.clone(),
            model: g.name(),
            model_hash: g.model_hash()?,
            samples: dataset.len() - skips.len(),
            skipped: skips.len(),
            fid: MetricSummary {
                mean: fid_value,
                count: if fid_value.is_some() { generated_all.len() } else { 0 },
            },
            diversity: div.summary(),
            prompt_alignment: align.summary(),
            object_similarity: sim.summary(),
            expansion: exp.summary(),
            categories: aggregate_by_category(&reports),
            skips,
        });
    }
    Ok(EvalReport {
        rows,
        metadata: EvalMetadata {
            seed: cfg.seed,
            prompt_mode: cfg.prompt_mode,
            num_variants: cfg.num_variants,
            steps: cfg.steps,
            guidance: cfg.guidance,
            w: cfg.w,
            comparison_size: size,
            input_samples: dataset.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{
        BlurredThumbnailDistance, HashJointEmbedder, OracleSegmenter, RandomProjectionFeatures, StubLanguageModel,
        ThumbnailEmbedder,
    };
    use crate::data::synthetic_samples;
    use crate::expansion::PointPrompt;
    use crate::image::{BinaryMask, MaskKind};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        z + if j == 0 { shift } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn fid_identity_symmetry_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian_set(&mut rng, 200, 8, 0.0);
        let b = gaussian_set(&mut rng, 150, 8, 1.0);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
        assert!(fid(&a[..1], &b).is_err());
        assert!(fid(&a, &gaussian_set(&mut rng, 10, 7, 0.0)).is_err());
    }

    #[test]
    fn fid_matches_diagonal_closed_form() {
        // Diagonal covariances commute, so the cross term is Σ √(λᵢμᵢ).
        let (m1, m2) = ([0.5, -1.0], [1.0, 1.0]);
        let (v1, v2) = ([1.0, 4.0], [9.0, 0.25]);
        let pts = |m: [f64; 2], v: [f64; 2]| -> Vec<Vec<f64>> {
            // Four points per axis pair give the exact mean and unbiased variance.
            let s = |k: usize| (v[k] * 3.0 / 4.0).sqrt();
            vec![
                vec![m[0] + s(0), m[1] + s(1)],
                vec![m[0] - s(0), m[1] + s(1)],
                vec![m[0] + s(0), m[1] - s(1)],
                vec![m[0] - s(0), m[1] - s(1)],
            ]
        };
        let want = (0.5f64.powi(2) + 2.0f64.powi(2)) + (1.0 + 9.0 - 2.0 * 3.0) + (4.0 + 0.25 - 2.0 * 1.0);
        let got = fid(&pts(m1, v1), &pts(m2, v2)).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn fid_is_rotation_invariant(seed in 0u64..1000, angle in 0.0f64..6.28) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_set(&mut rng, 60, 3, 0.0);
            let b = gaussian_set(&mut rng, 50, 3, 0.7);
            let (s, c) = angle.sin_cos();
            let rot = |x: &Vec<f64>| vec![c * x[0] - s * x[1], s * x[0] + c * x[1], x[2]];
            let ra: Vec<_> = a.iter().map(rot).collect();
            let rb: Vec<_> = b.iter().map(rot).collect();
            prop_assert!((fid(&a, &b).unwrap() - fid(&ra, &rb).unwrap()).abs() < 1e-6);
        }
    }

    fn noisy(seed: u64, amp: f32) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(16, 16, |r, c| {
            let base = if (4..12).contains(&r) && (4..12).contains(&c) {
                [0.9, 0.1, 0.1]
            } else {
                [0.0; 3]
            };
            base.map(|v| v + amp * rng.random_range(-1.0f32..1.0))
        })
        .unwrap()
    }

    #[test]
    fn diversity_pairs() {
        let d = BlurredThumbnailDistance;
        let imgs: Vec<Image> = (0..4).map(|i| noisy(i, 0.3)).collect();
        assert_eq!(diversity(&vec![imgs[0].clone(); 3], &d).unwrap(), 0.0);
        assert_eq!(
            diversity(&imgs[..2], &d).unwrap(),
            d.distance(&imgs[0], &imgs[1]).unwrap()
        );
        let mut sum = 0.0;
        for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
            sum += d.distance(&imgs[i], &imgs[j]).unwrap();
        }
        assert!((diversity(&imgs, &d).unwrap() - sum / 6.0).abs() < 1e-12);
        assert!(diversity(&imgs[..1], &d).is_err());
    }

    struct Fixed(Vec<f32>, Vec<f32>);
    impl JointEmbedder for Fixed {
        fn embed_image(&self, _: &Image) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f32>> {
            Ok(self.1.clone())
        }
    }
    impl ImageEmbedder for Fixed {
        fn embed_image(&self, _: &Image) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
    }

    struct Down;
    impl JointEmbedder for Down {
        fn embed_image(&self, _: &Image) -> Result<Vec<f32>> {
            Err(Error::MetricUnavailable("down".into()))
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f32>> {
            Err(Error::MetricUnavailable("down".into()))
        }
    }

    #[test]
    fn cosine_metrics() {
        let p = RetryPolicy::immediate(1);
        let img = [noisy(0, 0.0)];
        assert_eq!(
            prompt_alignment(&img, "x", &Fixed(vec![0.0, 2.0], vec![0.0, 1.0]), &p).unwrap(),
            1.0
        );
        assert_eq!(
            prompt_alignment(&img, "x", &Fixed(vec![1.0, 0.0], vec![0.0, 1.0]), &p).unwrap(),
            0.0
        );
        assert!(matches!(
            prompt_alignment(&img, "x", &Down, &p),
            Err(Error::MetricUnavailable(_))
        ));
        let o = noisy(1, 0.1);
        assert_eq!(object_similarity(&o, &o, &ThumbnailEmbedder, &p).unwrap(), 1.0);
        struct Neg;
        impl ImageEmbedder for Neg {
            fn embed_image(&self, i: &Image) -> Result<Vec<f32>> {
                let s = if i.pixel(0, 0)[0] > 0.5 { -1.0 } else { 1.0 };
                Ok(vec![s, 2.0 * s])
            }
        }
        let white = Image::filled(8, 8, [1.0; 3]).unwrap();
        let black = Image::filled(8, 8, [0.0; 3]).unwrap();
        assert!((object_similarity(&white, &black, &Neg, &p).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_embeddings_are_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 1000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let a: Vec<f32> = (0..512).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f32> = (0..512).map(|_| StandardNormal.sample(&mut rng)).collect();
            sum += prompt_alignment(&[noisy(0, 0.0)], "x", &Fixed(a, b), &RetryPolicy::immediate(1)).unwrap();
        }
        // Each cosine has standard deviation 1/√512.
        let sigma = 1.0 / (512.0f64).sqrt() / (trials as f64).sqrt();
        assert!((sum / trials as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn thumbnail_similarity_falls_with_noise() {
        let object = noisy(0, 0.0);
        let mask = BinaryMask::from_fn(16, 16, MaskKind::Object, |r, c| {
            (4..12).contains(&r) && (4..12).contains(&c)
        })
        .unwrap();
        let mut last = 1.0 + 1e-12;
        for step in 0..6 {
            let amp = step as f32 * 0.1;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let bg = Image::from_fn(16, 16, |_, _| {
                let v = 0.5 + amp * rng.random_range(-1.0f32..1.0);
                [v, v, v]
            })
            .unwrap();
            let out = crate::image::composite(&object, &mask.complement(), &bg).unwrap();
            let s = object_similarity(&out, &object, &ThumbnailEmbedder, &RetryPolicy::immediate(1)).unwrap();
            assert!(s < last, "amp {amp}: {s} !< {last}");
            last = s;
        }
    }

    #[test]
    fn scene_prompts() {
        let p = RetryPolicy::immediate(1);
        assert_eq!(
            build_scene_prompt("a red chair", PromptMode::Empty, None, &p).unwrap(),
            ""
        );
        let llm = StubLanguageModel::new("a studio");
        assert_eq!(
            build_scene_prompt("a red chair", PromptMode::Likely, Some(&llm), &p).unwrap(),
            "a studio"
        );
        let req = llm.requests.lock().unwrap()[0].clone();
        assert!(req.contains("(((a red chair)))") && req.contains("very"));
        assert!(
            req.starts_with("You are a creative and professional photo editor. Question: What is a very likely scene")
        );
        assert!(req.ends_with("Answer: The object is very likely to be found in"));
        let echo = StubLanguageModel::new("The object is least likely to be found in the sky.");
        assert_eq!(
            build_scene_prompt("a red chair", PromptMode::Unlikely, Some(&echo), &p).unwrap(),
            "the sky"
        );
        let req = echo.requests.lock().unwrap()[0].clone();
        assert!(req.contains("least") && !req.contains("very"));
        assert!(matches!(
            build_scene_prompt("a red chair", PromptMode::Likely, None, &p),
            Err(Error::PromptUnavailable(_))
        ));
        assert!(build_scene_prompt("", PromptMode::Likely, Some(&llm), &p).is_err());
    }

    fn report(category: &str, e: f64) -> ExpansionReport {
        let m = BinaryMask::filled(8, 8, false, MaskKind::Object).unwrap();
        ExpansionReport {
            input_id: String::new(),
            output_id: String::new(),
            category: category.into(),
            seed: 0,
            e,
            e_naive: e,
            area_input: 0.0,
            area_output: 0.0,
            prompt: PointPrompt {
                positives: vec![],
                negatives: vec![],
                requested_positives: 0,
                requested_negatives: 0,
            },
            m_i: m.clone(),
            m_o: m,
        }
    }

    #[test]
    fn category_aggregation() {
        let rows = aggregate_by_category(&[report("a", 0.1), report("a", 0.3), report("b", 0.2)]);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| (r.mean_e - 0.2).abs() < 1e-12));
        assert_eq!((rows[0].category.as_str(), rows[0].count), ("a", 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cats = ["x", "y", "z", "w"];
        let reps: Vec<ExpansionReport> = (0..1000)
            .map(|_| report(cats[rng.random_range(0..4)], rng.random_range(0.0..1.0)))
            .collect();
        let rows = aggregate_by_category(&reps);
        for c in cats {
            let (mut s, mut n) = (0.0, 0);
            for r in &reps {
                if r.category == c {
                    s += r.e;
                    n += 1;
                }
            }
            let row = rows.iter().find(|r| r.category == c).unwrap();
            assert_eq!((row.mean_e, row.count), (s / n as f64, n));
        }
        assert!(rows.windows(2).all(|w| w[0].mean_e >= w[1].mean_e));
    }

    /// Deterministic generator: fills the background with a seed-derived gray.
    struct StubGenerator;
    impl Generator for StubGenerator {
        fn name(&self) -> String {
            "stub".into()
        }
        fn model_hash(&self) -> Result<String> {
            Ok("stub-hash".into())
        }
        fn generate(&self, req: &OutpaintRequest) -> Result<Vec<Image>> {
            (0..req.params.num_variants)
                .map(|i| {
                    let g = ((req.params.seed + i as u64) % 7) as f32 / 10.0 + 0.2;
                    let bg = Image::filled(req.object_image.height(), req.object_image.width(), [g, g, g])?;
                    crate::image::composite(&req.object_image, &req.object_mask.complement(), &bg)
                })
                .collect()
        }
    }

    fn stub_clients<'a>(
        seg: &'a OracleSegmenter,
        joint: &'a HashJointEmbedder,
        fx: &'a RandomProjectionFeatures,
    ) -> EvalClients<'a> {
        EvalClients {
            sos: None,
            point_segmenter: Some(seg),
            joint: Some(joint),
            image_embedder: Some(&ThumbnailEmbedder),
            distance: Some(&BlurredThumbnailDistance),
            features: Some(fx),
            llm: None,
            captioner: None,
        }
    }

    #[test]
    fn protocol_report_is_reproducible() {
        let data = synthetic_samples(4, 5, 32).unwrap();
        let (seg, joint, fx) = (
            OracleSegmenter::default(),
            HashJointEmbedder::new(16, 0).unwrap(),
            RandomProjectionFeatures::new(64, 0).unwrap(),
        );
        let cfg = EvalConfig {
            num_variants: 2,
            comparison_size: 32,
            ..Default::default()
        };
        let run = || {
            run_protocol(
                &data,
                &[&StubGenerator],
                &stub_clients(&seg, &joint, &fx),
                &cfg,
                None,
                &RetryPolicy::immediate(1),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a.to_json().unwrap(), run().to_json().unwrap());
        let row = &a.rows[0];
        assert_eq!((row.samples, row.skipped), (4, 0));
        assert_eq!(row.expansion.count, 8);
        // Gray backgrounds never join the saturated object.
        assert_eq!(row.expansion.mean, Some(0.0));
        assert!(row.fid.mean.is_some() && row.diversity.mean.is_some());
        assert!(a.categories_csv().starts_with("dataset,model,category,mean_e,count\n"));
    }

    #[test]
    fn protocol_arity_and_guards() {
        let data = synthetic_samples(1, 5, 32).unwrap();
        let (seg, joint, fx) = (
            OracleSegmenter::default(),
            HashJointEmbedder::new(16, 0).unwrap(),
            RandomProjectionFeatures::new(64, 0).unwrap(),
        );
        let cfg = EvalConfig {
            num_variants: 1,
            comparison_size: 32,
            ..Default::default()
        };
        let clients = stub_clients(&seg, &joint, &fx);
        let r = run_protocol(
            &data,
            &[&StubGenerator],
            &clients,
            &cfg,
            None,
            &RetryPolicy::immediate(1),
        )
        .unwrap();
        assert_eq!(r.rows[0].diversity, MetricSummary { mean: None, count: 0 });
        assert_eq!(r.rows[0].samples, 1);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"diversity\": {\n        \"mean\": null"));
        assert!(run_protocol(&[], &[&StubGenerator], &clients, &cfg, None, &RetryPolicy::immediate(1)).is_err());
        // A prompt mode that needs a language model skips every sample when none is configured.
        let cfg = EvalConfig {
            prompt_mode: PromptMode::Likely,
            ..cfg
        };
        let r = run_protocol(
            &data,
            &[&StubGenerator],
            &clients,
            &cfg,
            None,
            &RetryPolicy::immediate(1),
        )
        .unwrap();
        assert_eq!((r.rows[0].samples, r.rows[0].skipped), (0, 1));
        assert_eq!(r.rows[0].skips[0].code, Error::PromptUnavailable(String::new()).code());
    }
}
