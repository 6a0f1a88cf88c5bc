//! Datasets: JSONL manifests, area filtering, client-backed mask and caption
//! synthesis, weighted mixing, and a procedural corpus of coloured shapes.
//!
//! A manifest is a JSON-lines file; each line is one [`ManifestEntry`] with
//! paths relative to the manifest's directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clients::{with_retry, Captioner, RetryPolicy, SalientSegmenter};
use crate::error::{config, invalid, Error, Result};
use crate::image::{mask_area, BinaryMask, Image, MaskKind, SalientSample};

pub const MIN_OBJECT_AREA: f64 = 0.05;
pub const DEFAULT_IN_FLIGHT: usize = 8;

/// Category names for the synthetic corpus, one per COCO supercategory
/// that can plausibly be a salient object.
pub const CATEGORIES: [&str; 12] = [
    "person",
    "vehicle",
    "outdoor",
    "animal",
    "accessory",
    "sports",
    "kitchen",
    "food",
    "furniture",
    "electronic",
    "appliance",
    "indoor",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::InvalidInput(format!("cannot open manifest {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    /// Writes one JSON object per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_image(&self, i: usize) -> Result<Image> {
        Image::load(self.resolve(&self.entries[i].image_path))
    }

    pub fn load_mask(&self, i: usize) -> Result<BinaryMask> {
        let e = &self.entries[i];
        let rel = e
            .mask_path
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("entry `{}` has no mask", e.image_path)))?;
        BinaryMask::load(self.resolve(rel), MaskKind::Object)
    }

    /// Loads entry `i` as a sample; a missing caption or category is empty.
    pub fn load_sample(&self, i: usize) -> Result<SalientSample> {
        let e = &self.entries[i];
        let image = self.load_image(i)?;
        let object_mask = self.load_mask(i)?;
        if object_mask.height() != image.height() || object_mask.width() != image.width() {
            return Err(Error::Validation(format!(
                "mask of `{}` is {}x{}, image is {}x{}",
                e.image_path,
                object_mask.height(),
                object_mask.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(SalientSample {
            id: e.image_path.clone(),
            image,
            object_mask,
            caption: e.caption.clone().unwrap_or_default(),
            category: e.category.clone().unwrap_or_default(),
            source: e.source.clone(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<SalientSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Checks that every referenced file exists and masks match images.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !self.resolve(&e.image_path).is_file() {
                return Err(Error::Validation(format!("missing image {}", e.image_path)));
            }
            if e.mask_path.is_some() {
                self.load_sample(i)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FilterLog {
    pub kept: usize,
    pub removed: usize,
}

/// Keeps entries whose object covers at least `min_frac` of the frame.
pub fn filter_small_objects(ds: &DatasetManifest, min_frac: f64) -> Result<(DatasetManifest, FilterLog)> {
    let mut entries = Vec::new();
    let mut log = FilterLog::default();
    for i in 0..ds.len() {
        let area = mask_area(&ds.load_mask(i)?)?;
        if area >= min_frac {
            entries.push(ds.entries[i].clone());
            log.kept += 1;
        } else {
            log.removed += 1;
        }
    }
    log::info!("area filter at {min_frac}: kept {}, removed {}", log.kept, log.removed);
    Ok((
        DatasetManifest {
            root: ds.root.clone(),
            entries,
        },
        log,
    ))
}

/// In-memory variant of [`filter_small_objects`].
pub fn filter_samples(samples: Vec<SalientSample>, min_frac: f64) -> Result<Vec<SalientSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if mask_area(&s.object_mask)? >= min_frac {
            out.push(s);
        }
    }
    Ok(out)
}

/// Applies `f` to every item with at most `limit` calls in flight; results
/// keep the input order.
pub fn bounded_map<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let workers = limit.max(1).min(items.len().max(1));
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("poisoned")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// An entry the synthesis step gave up on.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthFailure {
    pub image_path: String,
    pub code: String,
    pub message: String,
}

fn failure(e: &ManifestEntry, err: &Error) -> SynthFailure {
    SynthFailure {
        image_path: e.image_path.clone(),
        code: err.code().to_string(),
        message: err.to_string(),
    }
}

/// Fills missing masks with the salient segmenter, writing them under
/// `<root>/masks_synth/`. Entries that still fail after retries are dropped
/// and reported; entries that already have a mask are untouched.
pub fn synth_masks(
    ds: &DatasetManifest,
    sos: &dyn SalientSegmenter,
    policy: &RetryPolicy,
    in_flight: usize,
) -> Result<(DatasetManifest, Vec<SynthFailure>)> {
    let out_dir = ds.root.join("masks_synth");
    std::fs::create_dir_all(&out_dir)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let results = bounded_map(&idx, in_flight, |&i| -> Result<Option<String>> {
        let e = &ds.entries[i];
        if e.mask_path.is_some() {
            return Ok(None);
        }
        let img = ds.load_image(i)?;
        let soft = with_retry(policy, "salient segmenter", || sos.segment(&img))?;
        let mask = soft.binarize(img.height(), img.width(), MaskKind::Object)?;
        let rel = format!("masks_synth/{i:06}.png");
        mask.save(ds.resolve(&rel))?;
        Ok(Some(rel))
    });
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in ds.entries.iter().zip(results) {
        match r {
            Ok(None) => entries.push(e.clone()),
            Ok(Some(rel)) => entries.push(ManifestEntry {
                mask_path: Some(rel),
                ..e.clone()
            }),
            Err(err) => {
                log::warn!("dropping {}: {err}", e.image_path);
                failures.push(failure(e, &err));
            }
        }
    }
    Ok((
        DatasetManifest {
            root: ds.root.clone(),
            entries,
        },
        failures,
    ))
}

/// Fills missing captions with the captioner; existing captions win.
pub fn synth_captions(
    ds: &DatasetManifest,
    captioner: &dyn Captioner,
    policy: &RetryPolicy,
    in_flight: usize,
) -> Result<(DatasetManifest, Vec<SynthFailure>)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let results = bounded_map(&idx, in_flight, |&i| -> Result<Option<String>> {
        if ds.entries[i].caption.is_some() {
            return Ok(None);
        }
        let img = ds.load_image(i)?;
        let caption = with_retry(policy, "captioner", || captioner.caption(&img))?;
        if caption.trim().is_empty() {
            return Err(Error::Protocol("captioner returned an empty caption".into()));
        }
        Ok(Some(caption))
    });
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in ds.entries.iter().zip(results) {
        match r {
            Ok(None) => entries.push(e.clone()),
            Ok(Some(c)) => entries.push(ManifestEntry {
                caption: Some(c),
                ..e.clone()
            }),
            Err(err) => {
                log::warn!("dropping {}: {err}", e.image_path);
                failures.push(failure(e, &err));
            }
        }
    }
    Ok((
        DatasetManifest {
            root: ds.root.clone(),
            entries,
        },
        failures,
    ))
}

/// Builds a manifest from a directory laid out as
///
/// ```text
/// DIR/images/<stem>.png     required
/// DIR/masks/<stem>.png      optional object mask
/// DIR/captions.json         optional {"<stem>": "caption", ...}
/// DIR/categories.json       optional {"<stem>": "category", ...}
/// ```
///
/// The source tag is the directory name. Entries are sorted by stem.
pub fn ingest_dir(dir: &Path) -> Result<DatasetManifest> {
    let images = dir.join("images");
    let read_map = |name: &str| -> Result<BTreeMap<String, String>> {
        let p = dir.join(name);
        if !p.is_file() {
            return Ok(BTreeMap::new());
        }
        serde_json::from_slice(&std::fs::read(&p)?).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))
    };
    let captions = read_map("captions.json")?;
    let categories = read_map("categories.json")?;
    let source = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut stems: Vec<String> = std::fs::read_dir(&images)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", images.display())))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    let entries = stems
        .into_iter()
        .map(|stem| {
            let mask_rel = format!("masks/{stem}.png");
            ManifestEntry {
                image_path: format!("images/{stem}.png"),
                mask_path: dir.join(&mask_rel).is_file().then_some(mask_rel),
                caption: captions.get(&stem).cloned(),
                category: categories.get(&stem).cloned(),
                source: source.clone(),
            }
        })
        .collect();
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        entries,
    })
}

/// Weighted, seed-deterministic sampler over several datasets. Each dataset
/// is visited in a fresh shuffled order per epoch.
#[derive(Clone, Debug)]
pub struct Mixer {
    sizes: Vec<usize>,
    cumulative: Vec<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Mixer {
    pub fn new(sizes: &[usize], weights: &[f64], seed: u64) -> Result<Self> {
        if sizes.is_empty() || sizes.len() != weights.len() {
            return Err(config(format!(
                "{} datasets but {} weights",
                sizes.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(config("mixing weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(config("mixing weights sum to zero"));
        }
        if let Some(i) = (0..sizes.len()).find(|&i| sizes[i] == 0 && weights[i] > 0.0) {
            return Err(config(format!("dataset {i} is empty but has weight {}", weights[i])));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            cumulative,
            orders: vec![Vec::new(); sizes.len()],
            cursors: vec![0; sizes.len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `(dataset index, entry index)` of the next draw.
    pub fn next_index(&mut self) -> (usize, usize) {
        let u: f64 = self.rng.random();
        let mut d = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.sizes.len() - 1);
        // Rounding can leave u above the last cumulative bound; walk back to a weighted source.
        while self.sizes[d] == 0 || (d > 0 && self.cumulative[d] == self.cumulative[d - 1]) {
            d -= 1;
        }
        if self.cursors[d] == self.orders[d].len() {
            let mut order: Vec<usize> = (0..self.sizes[d]).collect();
            for i in (1..order.len()).rev() {
                let j = self.rng.random_range(0..=i);
                order.swap(i, j);
            }
            self.orders[d] = order;
            self.cursors[d] = 0;
        }
        let e = self.orders[d][self.cursors[d]];
        self.cursors[d] += 1;
        (d, e)
    }
}

// ---- synthetic corpus ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Ellipse,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.86, 0.14, 0.14]),
    ("orange", [0.92, 0.5, 0.1]),
    ("yellow", [0.9, 0.84, 0.12]),
    ("green", [0.14, 0.74, 0.2]),
    ("cyan", [0.1, 0.74, 0.8]),
    ("blue", [0.14, 0.24, 0.86]),
    ("purple", [0.58, 0.2, 0.82]),
    ("magenta", [0.86, 0.18, 0.6]),
];

/// A filled shape in pixel coordinates. A pixel belongs to the shape when
/// its centre `(r + 0.5, c + 0.5)` satisfies the shape's equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// `(row, col)` of the centre.
    pub center: (f64, f64),
    /// Semi-axes `(a, b)` along the rotated x and y axes. Disks use `a`.
    pub axes: (f64, f64),
    pub angle: f64,
    pub color: [f32; 3],
    pub color_name: String,
}

impl ShapeSpec {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let (dy, dx) = (r as f64 + 0.5 - self.center.0, c as f64 + 0.5 - self.center.1);
        let (s, co) = self.angle.sin_cos();
        let x = co * dx + s * dy;
        let y = -s * dx + co * dy;
        let (a, b) = self.axes;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= a * a,
            ShapeKind::Ellipse => (x / a).powi(2) + (y / b).powi(2) <= 1.0,
            ShapeKind::Rectangle => x.abs() <= a && y.abs() <= b,
            // Apex at (0, -b), base from (-a, b) to (a, b).
            ShapeKind::Triangle => y <= b && y >= -b && x.abs() <= a * (y + b) / (2.0 * b),
        }
    }

    /// The same shape with both semi-axes multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> ShapeSpec {
        ShapeSpec {
            axes: (self.axes.0 * factor, self.axes.1 * factor),
            ..self.clone()
        }
    }

    pub fn mask(&self, height: usize, width: usize) -> Result<BinaryMask> {
        BinaryMask::from_fn(height, width, MaskKind::Object, |r, c| self.contains(r, c))
    }

    pub fn caption(&self) -> String {
        format!("a {} {}", self.color_name, self.kind.name())
    }
}

/// Smooth, low-chroma background parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f32; 3],
    pub gradient: (f32, f32),
    pub wave_amp: f32,
    pub wave_freq: (f32, f32),
    pub wave_phase: f32,
}

impl Background {
    pub fn sample(rng: &mut ChaCha8Rng) -> Background {
        let gray: f32 = rng.random_range(0.3..0.7);
        let mut base = [gray; 3];
        for ch in &mut base {
            *ch += rng.random_range(-0.05..0.05);
        }
        Background {
            base,
            gradient: (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)),
            wave_amp: rng.random_range(0.0..0.04),
            wave_freq: (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)),
            wave_phase: rng.random_range(0.0..(2.0 * PI as f32)),
        }
    }

    pub fn at(&self, r: usize, c: usize, height: usize, width: usize) -> [f32; 3] {
        let (y, x) = (r as f32 / height as f32 - 0.5, c as f32 / width as f32 - 0.5);
        let wave =
            self.wave_amp * (2.0 * PI as f32 * (self.wave_freq.0 * y + self.wave_freq.1 * x) + self.wave_phase).sin();
        let shade = self.gradient.0 * y * 2.0 + self.gradient.1 * x * 2.0 + wave;
        self.base.map(|v| v + shade)
    }
}

/// Rounds to the nearest multiple of 1/255 so PNG round trips are exact.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One procedurally generated scene with its analytic description.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub sample: SalientSample,
    pub shape: ShapeSpec,
    pub background: Background,
}

pub fn render(shape: &ShapeSpec, bg: &Background, size: usize) -> Result<Image> {
    let color = shape.color.map(quantize);
    Image::from_fn(size, size, |r, c| {
        if shape.contains(r, c) {
            color
        } else {
            bg.at(r, c, size, size).map(quantize)
        }
    })
}

fn sample_shape(rng: &mut ChaCha8Rng, size: usize) -> ShapeSpec {
    let s = size as f64;
    let kind = ShapeKind::ALL[rng.random_range(0..4)];
    let a = rng.random_range(0.14..0.3) * s;
    let b = match kind {
        ShapeKind::Disk => a,
        _ => a * rng.random_range(0.55..1.0),
    };
    let reach = a.max(b) + 1.0;
    let lo = reach.min(s / 2.0);
    let hi = (s - reach).max(lo + 1e-9);
    let center = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let angle = match kind {
        ShapeKind::Disk => 0.0,
        _ => rng.random_range(0.0..PI),
    };
    let (name, base) = PALETTE[rng.random_range(0..PALETTE.len())];
    let color = base.map(|v| (v + rng.random_range(-0.04f32..0.04)).clamp(0.0, 1.0));
    ShapeSpec {
        kind,
        center,
        axes: (a, b),
        angle,
        color,
        color_name: name.to_string(),
    }
}

/// Scene `index` of the corpus identified by `seed`. Scenes are independent
/// of each other, so scene `i` is the same whatever the corpus size. Shapes
/// are redrawn until the object covers between 5% and 50% of the frame.
pub fn synthetic_scene(seed: u64, index: usize, size: usize) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let total = (size * size) as f64;
    for _ in 0..1000 {
        let shape = sample_shape(&mut rng, size);
        let mask = shape.mask(size, size)?;
        let area = mask.count() as f64 / total;
        if !(MIN_OBJECT_AREA..=0.5).contains(&area) {
            continue;
        }
        let background = Background::sample(&mut rng);
        let image = render(&shape, &background, size)?;
        let category = CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_string();
        let sample = SalientSample {
            id: format!("synth-{seed}-{index:06}"),
            image,
            object_mask: mask,
            caption: shape.caption(),
            category,
            source: "synthetic".into(),
        };
        return Ok(SyntheticScene {
            sample,
            shape,
            background,
        });
    }
    Err(invalid(format!("no admissible shape fits a {size}x{size} frame")))
}

pub fn synthetic_samples(n: usize, seed: u64, size: usize) -> Result<Vec<SalientSample>> {
    (0..n)
        .map(|i| synthetic_scene(seed, i, size).map(|s| s.sample))
        .collect()
}

/// Writes `n` synthetic scenes under `out_dir` (`images/`, `masks/`,
/// `manifest.jsonl`) and returns the manifest.
pub fn make_synthetic_dataset(n: usize, seed: u64, size: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(invalid("synthetic dataset needs at least one sample"));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = synthetic_scene(seed, i, size)?.sample;
        let image_path = format!("images/{i:06}.png");
        let mask_path = format!("masks/{i:06}.png");
        s.image.save(out_dir.join(&image_path))?;
        s.object_mask.save(out_dir.join(&mask_path))?;
        entries.push(ManifestEntry {
            image_path,
            mask_path: Some(mask_path),
            caption: Some(s.caption),
            category: Some(s.category),
            source: s.source,
        });
    }
    let ds = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    ds.save(&out_dir.join("manifest.jsonl"))?;
    Ok(ds)
}

/// Random fill mask in the style of large-hole inpainting training: a union
/// of thick strokes and boxes covering roughly 10% to 60% of the frame.
pub fn random_fill_mask(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<BinaryMask> {
    let mut bits = vec![false; height * width];
    let target = rng.random_range(0.1..0.6);
    let (hf, wf) = (height as f64, width as f64);
    for _ in 0..16 {
        if rng.random_bool(0.5) {
            let (bh, bw) = (rng.random_range(0.15..0.6) * hf, rng.random_range(0.15..0.6) * wf);
            let (r0, c0) = (rng.random_range(0.0..hf - bh), rng.random_range(0.0..wf - bw));
            for r in 0..height {
                for c in 0..width {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    if y >= r0 && y < r0 + bh && x >= c0 && x < c0 + bw {
                        bits[r * width + c] = true;
                    }
                }
            }
        } else {
            let mut p = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
            let radius = rng.random_range(0.04..0.1) * hf.min(wf);
            for _ in 0..rng.random_range(2..5) {
                let angle: f64 = rng.random_range(0.0..2.0 * PI);
                let len = rng.random_range(0.2..0.5) * hf.min(wf);
                let q = (
                    (p.0 + len * angle.sin()).clamp(0.0, hf),
                    (p.1 + len * angle.cos()).clamp(0.0, wf),
                );
                for r in 0..height {
                    for c in 0..width {
                        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                        let (vy, vx) = (q.0 - p.0, q.1 - p.1);
                        let l2 = (vy * vy + vx * vx).max(1e-12);
                        let t = (((y - p.0) * vy + (x - p.1) * vx) / l2).clamp(0.0, 1.0);
                        let (py, px) = (p.0 + t * vy, p.1 + t * vx);
                        if (y - py).powi(2) + (x - px).powi(2) <= radius * radius {
                            bits[r * width + c] = true;
                        }
                    }
                }
                p = q;
            }
        }
        let frac = bits.iter().filter(|&&b| b).count() as f64 / (height * width) as f64;
        if frac >= target {
            break;
        }
    }
    if bits.iter().all(|&b| b) {
        bits[0] = false;
    }
    if !bits.iter().any(|&b| b) {
        bits[(height / 2) * width + width / 2] = true;
    }
    BinaryMask::new(height, width, bits, MaskKind::Fill)
}

/// Fill mask that hides the background and an outer ring of the object,
/// `1..=max_erosion` pixels thick. Inpainting on such holes teaches a model
/// to grow visible objects outward. `None` when the erosion empties the object.
pub fn object_hole_mask(object: &BinaryMask, max_erosion: usize, rng: &mut ChaCha8Rng) -> Option<BinaryMask> {
    let k = rng.random_range(1..=max_erosion.max(1));
    let mut kept = object.clone();
    for _ in 0..k {
        kept = kept.eroded();
    }
    (kept.count() > 0).then(|| kept.complement().with_kind(MaskKind::Fill))
}
