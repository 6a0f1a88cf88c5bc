//! External model interfaces and their desk-scale stand-ins.
//!
//! Segmenters, captioners, embedders and the language model are reached
//! through the traits below. Deterministic local implementations cover tests
//! and desk-scale runs; HTTP and subprocess transports reach real services.
//!
//! Wire protocols (HTTP, all `POST` to the configured URL):
//! - point segmenter: multipart `image` (PNG) + `points` (JSON
//!   `{"positives": [[r,c],...], "negatives": [[r,c],...]}`) → PNG mask
//! - salient segmenter: multipart `image` → PNG mask
//! - captioner: multipart `image` → `{"caption": "..."}`
//! - joint embedder: multipart `image` or JSON `{"text": "..."}` → `{"embedding": [...]}`
//! - language model: JSON `{"prompt": "..."}` → `{"completion": "..."}`
//!
//! Subprocess transports run `program args… <image.png> <points.json> <out.png>`
//! (the points file is omitted for salient segmenters) and read the mask
//! from `out.png`.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::expansion::PointPrompt;
use crate::image::{BinaryMask, Image, MaskKind};
use crate::unet::{HashTextEmbedder, TextEmbedder};

/// A client's per-pixel mask probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl SoftMask {
    pub fn from_mask(m: &BinaryMask) -> Self {
        Self {
            height: m.height(),
            width: m.width(),
            values: m.bits().iter().map(|&b| b as u8 as f32).collect(),
        }
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Protocol(format!("mask is not an image: {e}")))?;
        let g = img.to_luma8();
        Ok(Self {
            height: g.height() as usize,
            width: g.width() as usize,
            values: g.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        })
    }

    /// Thresholds at 0.5 after validating shape and range.
    pub fn binarize(&self, height: usize, width: usize, kind: MaskKind) -> Result<BinaryMask> {
        if self.height != height || self.width != width || self.values.len() != height * width {
            return Err(Error::Protocol(format!(
                "client returned a {}x{} mask for a {height}x{width} image",
                self.height, self.width
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("client mask contains non-finite values".into()));
        }
        BinaryMask::new(height, width, self.values.iter().map(|&v| v >= 0.5).collect(), kind)
    }
}

/// Retry budget for client calls.
#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Delay before the second attempt; doubles after every failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: usize) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
        }
    }
}

fn is_transient(e: &Error) -> bool {
    matches!(
        e,
        Error::MetricUnavailable(_) | Error::PromptUnavailable(_) | Error::Io(_)
    )
}

/// Runs `op` until it succeeds, fails permanently, or the budget runs out.
/// An exhausted budget is reported as metric-unavailable.
pub fn with_retry<T>(policy: &RetryPolicy, what: &str, mut op: impl FnMut() -> Result<T>) -> Result<T> {
    let attempts = policy.attempts.max(1);
    let mut delay = policy.base_delay;
    let mut last = None;
    for attempt in 0..attempts {
        if attempt > 0 && !delay.is_zero() {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if is_transient(&e) => {
                log::warn!("{what}: attempt {} of {attempts} failed: {e}", attempt + 1);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::MetricUnavailable(format!(
        "{what} failed after {attempts} attempts: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

pub trait SalientSegmenter: Send + Sync {
    fn segment(&self, image: &Image) -> Result<SoftMask>;
}

pub trait PointSegmenter: Send + Sync {
    fn segment(&self, image: &Image, prompt: &PointPrompt) -> Result<SoftMask>;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &Image) -> Result<String>;
}

/// Image and text embeddings in a shared space.
pub trait JointEmbedder: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>>;
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Feature extractor for the Fréchet distance.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
}

// ---- desk-scale implementations --------------------------------------------

fn color_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Pixels connected (4-neighbourhood) to any seed within `allowed`.
pub fn connected_from(allowed: &BinaryMask, seeds: &[(usize, usize)]) -> BinaryMask {
    let (h, w) = (allowed.height(), allowed.width());
    let mut out = vec![false; h * w];
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for &(r, c) in seeds {
        if r < h && c < w && allowed.get(r, c) && !out[r * w + c] {
            out[r * w + c] = true;
            queue.push_back((r, c));
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let mut visit = |rr: usize, cc: usize| {
            if allowed.get(rr, cc) && !out[rr * w + cc] {
                out[rr * w + cc] = true;
                queue.push_back((rr, cc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < h {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < w {
            visit(r, c + 1);
        }
    }
    BinaryMask::new(h, w, out, allowed.kind()).expect("same shape")
}

/// Threshold segmenter for synthetic scenes. The reference colour is the
/// mean of the positive points; a pixel qualifies when it lies within `tau`
/// of the reference and closer to it than to every negative point. The
/// result is the qualifying region connected to the positives.
#[derive(Clone, Debug)]
pub struct OracleSegmenter {
    pub tau: f32,
}

impl Default for OracleSegmenter {
    fn default() -> Self {
        Self { tau: 0.3 }
    }
}

impl PointSegmenter for OracleSegmenter {
    fn segment(&self, image: &Image, prompt: &PointPrompt) -> Result<SoftMask> {
        let mut pos = prompt.positives.clone();
        pos.sort_unstable();
        let mut neg = prompt.negatives.clone();
        neg.sort_unstable();
        let (h, w) = (image.height(), image.width());
        if pos.iter().chain(&neg).any(|&(r, c)| r >= h || c >= w) {
            return Err(crate::error::invalid("point prompt outside the image"));
        }
        let mut sum = [0f64; 3];
        for &(r, c) in &pos {
            let p = image.pixel(r, c);
            for k in 0..3 {
                sum[k] += p[k] as f64;
            }
        }
        let n = pos.len().max(1) as f64;
        let reference = [(sum[0] / n) as f32, (sum[1] / n) as f32, (sum[2] / n) as f32];
        let negs: Vec<[f32; 3]> = neg.iter().map(|&(r, c)| image.pixel(r, c)).collect();
        let allowed = BinaryMask::from_fn(h, w, MaskKind::Object, |r, c| {
            let p = image.pixel(r, c);
            let d = color_dist(p, reference);
            d <= self.tau && negs.iter().all(|&q| d < color_dist(p, q))
        })?;
        Ok(SoftMask::from_mask(&connected_from(&allowed, &pos)))
    }
}

/// Stub: the bounding box of the positive points.
#[derive(Clone, Copy, Debug, Default)]
pub struct BoxPointSegmenter;

impl PointSegmenter for BoxPointSegmenter {
    fn segment(&self, image: &Image, prompt: &PointPrompt) -> Result<SoftMask> {
        let rows = prompt.positives.iter().map(|p| p.0);
        let cols = prompt.positives.iter().map(|p| p.1);
        let (r0, r1) = (rows.clone().min().unwrap_or(0), rows.max().unwrap_or(0));
        let (c0, c1) = (cols.clone().min().unwrap_or(0), cols.max().unwrap_or(0));
        let m = BinaryMask::from_fn(image.height(), image.width(), MaskKind::Object, |r, c| {
            (r0..=r1).contains(&r) && (c0..=c1).contains(&c)
        })?;
        Ok(SoftMask::from_mask(&m))
    }
}

/// Salient segmenter that returns a known mask.
#[derive(Clone, Debug)]
pub struct MaskSegmenter(pub BinaryMask);

impl SalientSegmenter for MaskSegmenter {
    fn segment(&self, _: &Image) -> Result<SoftMask> {
        Ok(SoftMask::from_mask(&self.0))
    }
}

/// Salient segmenter for synthetic scenes: pixels whose chroma
/// (`max − min` over RGB) reaches `threshold`, restricted to the largest
/// 4-connected component.
#[derive(Clone, Debug)]
pub struct ChromaSegmenter {
    pub threshold: f32,
}

impl Default for ChromaSegmenter {
    fn default() -> Self {
        Self { threshold: 0.35 }
    }
}

impl SalientSegmenter for ChromaSegmenter {
    fn segment(&self, image: &Image) -> Result<SoftMask> {
        let (h, w) = (image.height(), image.width());
        let allowed = BinaryMask::from_fn(h, w, MaskKind::Object, |r, c| {
            let p = image.pixel(r, c);
            let (mx, mn) = (p[0].max(p[1]).max(p[2]), p[0].min(p[1]).min(p[2]));
            mx - mn >= self.threshold
        })?;
        let mut seen = vec![false; h * w];
        let mut best: Option<BinaryMask> = None;
        for (r, c) in allowed.set_positions() {
            if seen[r * w + c] {
                continue;
            }
            let comp = connected_from(&allowed, &[(r, c)]);
            for (i, &b) in comp.bits().iter().enumerate() {
                seen[i] |= b;
            }
            if best.as_ref().is_none_or(|b| comp.count() > b.count()) {
                best = Some(comp);
            }
        }
        let m = best.unwrap_or(allowed);
        Ok(SoftMask::from_mask(&m))
    }
}

/// Captioner returning a fixed string.
#[derive(Clone, Debug)]
pub struct FixedCaptioner(pub String);

impl Captioner for FixedCaptioner {
    fn caption(&self, _: &Image) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Names the most chromatic pixel's hue: "a red object".
#[derive(Clone, Copy, Debug, Default)]
pub struct HueCaptioner;

impl Captioner for HueCaptioner {
    fn caption(&self, image: &Image) -> Result<String> {
        let mut best = (0f32, [0f32; 3]);
        for r in 0..image.height() {
            for c in 0..image.width() {
                let p = image.pixel(r, c);
                let chroma = p[0].max(p[1]).max(p[2]) - p[0].min(p[1]).min(p[2]);
                if chroma > best.0 {
                    best = (chroma, p);
                }
            }
        }
        Ok(format!("a {} object", hue_name(best.1)))
    }
}

/// Coarse colour name of an RGB value.
pub fn hue_name(p: [f32; 3]) -> &'static str {
    let (mx, mn) = (p[0].max(p[1]).max(p[2]), p[0].min(p[1]).min(p[2]));
    if mx - mn < 0.15 {
        return "gray";
    }
    let d = mx - mn;
    let h = if mx == p[0] {
        60.0 * (((p[1] - p[2]) / d).rem_euclid(6.0))
    } else if mx == p[1] {
        60.0 * ((p[2] - p[0]) / d + 2.0)
    } else {
        60.0 * ((p[0] - p[1]) / d + 4.0)
    };
    const NAMES: [(f32, &str); 8] = [
        (15.0, "red"),
        (45.0, "orange"),
        (70.0, "yellow"),
        (160.0, "green"),
        (200.0, "cyan"),
        (260.0, "blue"),
        (330.0, "purple"),
        (360.0, "red"),
    ];
    NAMES
        .iter()
        .find(|(limit, _)| h < *limit)
        .map(|(_, n)| *n)
        .unwrap_or("red")
}

/// Downsamples to `size×size` by block averaging over a bilinear resize.
pub fn thumbnail(image: &Image, size: usize) -> Result<Image> {
    image.resize(size.max(crate::image::MIN_SIDE), size.max(crate::image::MIN_SIDE))
}

/// Image embedding: the flattened 8×8 RGB thumbnail.
#[derive(Clone, Copy, Debug, Default)]
pub struct ThumbnailEmbedder;

impl ImageEmbedder for ThumbnailEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(thumbnail(image, 8)?.data().to_vec())
    }
}

/// Joint embedder: a fixed Gaussian projection of the thumbnail for images
/// and the mean hash-token vector for text, both of dimension `dim`.
#[derive(Clone, Debug)]
pub struct HashJointEmbedder {
    proj: Vec<f32>,
    text: HashTextEmbedder,
    dim: usize,
}

impl HashJointEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = (0..dim * 192).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            proj,
            text: HashTextEmbedder::new(dim, 16)?,
            dim,
        })
    }
}

impl JointEmbedder for HashJointEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        let t = thumbnail(image, 8)?;
        Ok((0..self.dim)
            .map(|i| {
                t.data()
                    .iter()
                    .zip(&self.proj[i * 192..(i + 1) * 192])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let e = self.text.embed(text);
        let len = self.text.text_len();
        Ok((0..self.dim)
            .map(|j| (0..len).map(|t| e[t * self.dim + j]).sum::<f32>() / len as f32)
            .collect())
    }
}

/// Language model stub: records every request and answers with `reply`.
#[derive(Debug, Default)]
pub struct StubLanguageModel {
    pub reply: String,
    pub requests: Mutex<Vec<String>>,
}

impl StubLanguageModel {
    pub fn new(reply: impl Into<String>) -> Self {
        Self {
            reply: reply.into(),
            requests: Mutex::new(Vec::new()),
        }
    }
}

impl LanguageModel for StubLanguageModel {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.requests.lock().expect("poisoned").push(prompt.to_string());
        Ok(self.reply.clone())
    }
}

/// Mean absolute difference of 3×3 box-blurred 32×32 thumbnails.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlurredThumbnailDistance;

fn blurred_thumb(image: &Image) -> Result<Vec<f32>> {
    let t = thumbnail(image, 32)?;
    let (h, w) = (t.height(), t.width());
    let mut out = vec![0f32; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                let mut s = 0.0;
                let mut n = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                            s += t.pixel(rr as usize, cc as usize)[k];
                            n += 1.0;
                        }
                    }
                }
                out[(r * w + c) * 3 + k] = s / n;
            }
        }
    }
    Ok(out)
}

impl PerceptualDistance for BlurredThumbnailDistance {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let (x, y) = (blurred_thumb(a)?, blurred_thumb(b)?);
        Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.len() as f64)
    }
}

/// Fixed-seed random projection of a 32×32 grayscale thumbnail.
#[derive(Clone, Debug)]
pub struct RandomProjectionFeatures {
    proj: Tensor,
    dim: usize,
}

impl RandomProjectionFeatures {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (1024f64).sqrt();
        let v: Vec<f64> = (0..1024 * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Ok(Self {
            proj: Tensor::from_vec(v, (1024, dim), &Device::Cpu)?,
            dim,
        })
    }
}

impl FeatureExtractor for RandomProjectionFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let t = thumbnail(image, 32)?;
        let gray: Vec<f64> = t
            .data()
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) as f64)
            .collect();
        let g = Tensor::from_vec(gray, (1, 1024), &Device::Cpu)?;
        Ok(g.matmul(&self.proj)?.flatten_all()?.to_vec1()?)
    }
}

// ---- transports ---------------------------------------------------------------

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| Error::MetricUnavailable(format!("http client: {e}")))
}

fn unavailable(what: &str, e: impl std::fmt::Display) -> Error {
    Error::MetricUnavailable(format!("{what}: {e}"))
}

fn image_part(image: &Image) -> Result<reqwest::blocking::multipart::Part> {
    reqwest::blocking::multipart::Part::bytes(image.to_png_bytes()?)
        .file_name("image.png")
        .mime_str("image/png")
        .map_err(|e| Error::Protocol(e.to_string()))
}

fn post(req: reqwest::blocking::RequestBuilder, what: &str) -> Result<Vec<u8>> {
    let resp = req.send().map_err(|e| unavailable(what, e))?;
    let status = resp.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(unavailable(what, format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(Error::Protocol(format!("{what}: HTTP {status}")));
    }
    Ok(resp.bytes().map_err(|e| unavailable(what, e))?.to_vec())
}

fn json_field<T: for<'de> Deserialize<'de>>(bytes: &[u8], field: &str, what: &str) -> Result<T> {
    let v: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Protocol(format!("{what}: malformed JSON: {e}")))?;
    serde_json::from_value(v.get(field).cloned().unwrap_or(serde_json::Value::Null))
        .map_err(|e| Error::Protocol(format!("{what}: missing or malformed `{field}`: {e}")))
}

/// HTTP client for any of the remote model protocols.
#[derive(Clone, Debug)]
pub struct HttpModel {
    pub url: String,
    pub timeout: Duration,
}

impl HttpModel {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

impl PointSegmenter for HttpModel {
    fn segment(&self, image: &Image, prompt: &PointPrompt) -> Result<SoftMask> {
        let form = reqwest::blocking::multipart::Form::new()
            .part("image", image_part(image)?)
            .text("points", prompt.wire_json());
        let body = post(
            http_client(self.timeout)?.post(&self.url).multipart(form),
            "point segmenter",
        )?;
        SoftMask::from_png_bytes(&body)
    }
}

impl SalientSegmenter for HttpModel {
    fn segment(&self, image: &Image) -> Result<SoftMask> {
        let form = reqwest::blocking::multipart::Form::new().part("image", image_part(image)?);
        let body = post(
            http_client(self.timeout)?.post(&self.url).multipart(form),
            "salient segmenter",
        )?;
        SoftMask::from_png_bytes(&body)
    }
}

impl Captioner for HttpModel {
    fn caption(&self, image: &Image) -> Result<String> {
        let form = reqwest::blocking::multipart::Form::new().part("image", image_part(image)?);
        let body = post(http_client(self.timeout)?.post(&self.url).multipart(form), "captioner")?;
        json_field(&body, "caption", "captioner")
    }
}

impl JointEmbedder for HttpModel {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        let form = reqwest::blocking::multipart::Form::new().part("image", image_part(image)?);
        let body = post(http_client(self.timeout)?.post(&self.url).multipart(form), "embedder")?;
        json_field(&body, "embedding", "embedder")
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let req = http_client(self.timeout)?
            .post(&self.url)
            .json(&serde_json::json!({ "text": text }));
        json_field(&post(req, "embedder")?, "embedding", "embedder")
    }
}

impl ImageEmbedder for HttpModel {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        JointEmbedder::embed_image(self, image)
    }
}

impl LanguageModel for HttpModel {
    fn complete(&self, prompt: &str) -> Result<String> {
        let req = http_client(self.timeout)?
            .post(&self.url)
            .json(&serde_json::json!({ "prompt": prompt }));
        json_field(&post(req, "language model")?, "completion", "language model").map_err(|e| match e {
            Error::MetricUnavailable(m) => Error::PromptUnavailable(m),
            other => other,
        })
    }
}

/// Runs an external program per request (see the module docs).
#[derive(Clone, Debug)]
pub struct SubprocessModel {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl SubprocessModel {
    fn run(&self, image: &Image, points: Option<&PointPrompt>) -> Result<SoftMask> {
        let dir = std::env::temp_dir().join(format!(
            "outpaint-sub-{}-{}",
            std::process::id(),
            SUBPROCESS_SEQ.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&dir)?;
        let result = (|| {
            let img_path = dir.join("image.png");
            image.save(&img_path)?;
            let mut cmd = std::process::Command::new(&self.program);
            cmd.args(&self.args).arg(&img_path);
            if let Some(p) = points {
                let pts = dir.join("points.json");
                std::fs::write(&pts, p.wire_json())?;
                cmd.arg(&pts);
            }
            let out_path = dir.join("out.png");
            cmd.arg(&out_path);
            let status = cmd.status().map_err(|e| unavailable("subprocess", e))?;
            if !status.success() {
                return Err(unavailable("subprocess", format!("exited with {status}")));
            }
            let bytes =
                std::fs::read(&out_path).map_err(|e| Error::Protocol(format!("subprocess wrote no mask: {e}")))?;
            SoftMask::from_png_bytes(&bytes)
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}

static SUBPROCESS_SEQ: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

impl PointSegmenter for SubprocessModel {
    fn segment(&self, image: &Image, prompt: &PointPrompt) -> Result<SoftMask> {
        self.run(image, Some(prompt))
    }
}

impl SalientSegmenter for SubprocessModel {
    fn segment(&self, image: &Image) -> Result<SoftMask> {
        self.run(image, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn binarize_threshold_and_validation() {
        let s = SoftMask {
            height: 8,
            width: 8,
            values: (0..64).map(|i| i as f32 / 63.0).collect(),
        };
        let m = s.binarize(8, 8, MaskKind::Object).unwrap();
        assert_eq!(m.count(), (0..64).filter(|&i| i as f32 / 63.0 >= 0.5).count());
        assert!(matches!(s.binarize(8, 9, MaskKind::Object), Err(Error::Protocol(_))));
        let nan = SoftMask {
            values: vec![f32::NAN; 64],
            ..s
        };
        assert!(matches!(nan.binarize(8, 8, MaskKind::Object), Err(Error::Protocol(_))));
    }

    #[test]
    fn retry_counts_and_classification() {
        let calls = AtomicUsize::new(0);
        let r: Result<u32> = with_retry(&RetryPolicy::immediate(3), "x", || {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(Error::MetricUnavailable("flaky".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r.unwrap(), 7);
        let calls = AtomicUsize::new(0);
        let r: Result<u32> = with_retry(&RetryPolicy::immediate(3), "x", || {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(Error::Protocol("bad".into()))
        });
        assert!(matches!(r, Err(Error::Protocol(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let r: Result<u32> = with_retry(&RetryPolicy::immediate(2), "x", || {
            Err(Error::Io(std::io::Error::other("down")))
        });
        assert!(matches!(r, Err(Error::MetricUnavailable(_))));
    }

    #[test]
    fn chroma_segmenter_picks_largest_saturated_blob() {
        let img = Image::from_fn(16, 16, |r, c| {
            if (4..10).contains(&r) && (4..10).contains(&c) {
                [0.9, 0.1, 0.1]
            } else if r == 14 && c == 14 {
                [0.1, 0.9, 0.1]
            } else {
                [0.5, 0.45, 0.4]
            }
        })
        .unwrap();
        let m = ChromaSegmenter::default()
            .segment(&img)
            .unwrap()
            .binarize(16, 16, MaskKind::Object)
            .unwrap();
        let want = BinaryMask::from_fn(16, 16, MaskKind::Object, |r, c| {
            (4..10).contains(&r) && (4..10).contains(&c)
        })
        .unwrap();
        assert_eq!(m, want);
    }

    #[test]
    fn hue_names() {
        assert_eq!(hue_name([0.9, 0.1, 0.1]), "red");
        assert_eq!(hue_name([0.1, 0.8, 0.1]), "green");
        assert_eq!(hue_name([0.1, 0.2, 0.9]), "blue");
        assert_eq!(hue_name([0.5, 0.5, 0.5]), "gray");
        assert_eq!(
            HueCaptioner
                .caption(&Image::filled(8, 8, [0.9, 0.9, 0.1]).unwrap())
                .unwrap(),
            "a yellow object"
        );
    }

    #[test]
    fn embedders_are_deterministic() {
        let img = Image::from_fn(16, 16, |r, c| [r as f32 / 16.0, c as f32 / 16.0, 0.5]).unwrap();
        let e = HashJointEmbedder::new(32, 1).unwrap();
        assert_eq!(e.embed_image(&img).unwrap(), e.embed_image(&img).unwrap());
        assert_eq!(e.embed_text("a beach").unwrap().len(), 32);
        let f = RandomProjectionFeatures::new(64, 0).unwrap();
        assert_eq!(f.features(&img).unwrap().len(), 64);
        assert_eq!(BlurredThumbnailDistance.distance(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn subprocess_transport_round_trip() {
        // `cp` copies the input image to the output path, so the mask is the
        // image's gray level thresholded at 0.5.
        let cp = SubprocessModel {
            program: "cp".into(),
            args: vec![],
        };
        let img = Image::from_fn(8, 8, |_, c| if c < 4 { [1.0; 3] } else { [0.0; 3] }).unwrap();
        let m = SalientSegmenter::segment(&cp, &img)
            .unwrap()
            .binarize(8, 8, MaskKind::Object)
            .unwrap();
        assert_eq!(m.count(), 32);
        let missing = SubprocessModel {
            program: "/nonexistent/segmenter".into(),
            args: vec![],
        };
        assert!(matches!(
            SalientSegmenter::segment(&missing, &img),
            Err(Error::MetricUnavailable(_))
        ));
    }
}
