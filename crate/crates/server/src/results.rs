//! Content-addressed result storage and the outpaint result archive.

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipWriter};

use outpaint_core::eval::EvalConfig;
use outpaint_core::image::{BinaryMask, Image};
use outpaint_core::pipeline::{ModelBundle, OutpaintParams, OutpaintRequest};
use outpaint_core::{Error, Result};

use crate::jobs::ResultLocator;
use crate::EvalInput;

pub const ZIP: &str = "application/zip";
pub const JSON: &str = "application/json";

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of everything that determines an outpaint result. Two requests that
/// would run the same weights on the same inputs share a key, so the
/// baseline path and `w = 0` on the adapter differ only through the models.
pub fn outpaint_key(
    image: &Image,
    mask: Option<&BinaryMask>,
    params: &OutpaintParams,
    models: &ModelBundle,
) -> Result<String> {
    let image_png = image.to_png_bytes()?;
    let mask_png = match mask {
        Some(m) => m.to_png_bytes()?,
        None => b"segmenter".to_vec(),
    };
    let params = serde_json::to_vec(params)?;
    let adapter = models.adapter_hash()?.unwrap_or_default();
    Ok(digest(&[
        b"outpaint",
        &image_png,
        &mask_png,
        &params,
        models.base_hash()?.as_bytes(),
        adapter.as_bytes(),
    ]))
}

pub fn eval_key(input: &EvalInput, cfg: &EvalConfig, models: &ModelBundle) -> Result<String> {
    let manifest = std::fs::read(&input.dataset)
        .map_err(|e| Error::InvalidInput(format!("cannot read manifest {}: {e}", input.dataset.display())))?;
    let cfg = serde_json::to_vec(cfg)?;
    let adapter = models.adapter_hash()?.unwrap_or_default();
    Ok(digest(&[
        b"eval",
        input.dataset.to_string_lossy().as_bytes(),
        &manifest,
        &cfg,
        &[input.compare_baseline as u8],
        models.base_hash()?.as_bytes(),
        adapter.as_bytes(),
    ]))
}

pub fn locator(key: &str, media_type: &str) -> ResultLocator {
    ResultLocator {
        key: key.to_string(),
        media_type: media_type.to_string(),
        url: String::new(),
    }
}

pub fn path_for(dir: &Path, loc: &ResultLocator) -> PathBuf {
    let ext = if loc.media_type == ZIP { "zip" } else { "json" };
    dir.join(format!("{}.{ext}", loc.key))
}

/// Writes through a temporary file so readers never see a partial result.
pub fn store(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub file: String,
    pub seed: u64,
    /// Object expansion against the input; null when it could not be measured.
    pub expansion: Option<f64>,
    pub expansion_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMetrics {
    pub variants: Vec<VariantMetrics>,
}

pub fn variant_name(i: usize) -> String {
    format!("variant_{i:03}.png")
}

/// ZIP with every variant, the object mask used and `metrics.json`. Entry
/// order, timestamps and compression are fixed, so equal inputs give equal
/// bytes.
pub fn outpaint_archive(req: &OutpaintRequest, variants: &[Image], scores: &[Result<f64>]) -> Result<Vec<u8>> {
    let opts = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let zip_err = |e: zip::result::ZipError| Error::Io(std::io::Error::other(e));
    let mut zw = ZipWriter::new(Cursor::new(Vec::new()));
    let mut metrics = ArchiveMetrics {
        variants: Vec::with_capacity(variants.len()),
    };
    for (i, (v, score)) in variants.iter().zip(scores).enumerate() {
        let name = variant_name(i);
        zw.start_file(name.as_str(), opts).map_err(zip_err)?;
        zw.write_all(&v.to_png_bytes()?)?;
        metrics.variants.push(VariantMetrics {
            file: name,
            seed: req.params.seed.wrapping_add(i as u64),
            expansion: score.as_ref().ok().copied(),
            expansion_error: score.as_ref().err().map(|e| e.to_string()),
        });
    }
    zw.start_file("mask.png", opts).map_err(zip_err)?;
    zw.write_all(&req.object_mask.to_png_bytes()?)?;
    zw.start_file("metrics.json", opts).map_err(zip_err)?;
    zw.write_all(&serde_json::to_vec_pretty(&metrics)?)?;
    Ok(zw.finish().map_err(zip_err)?.into_inner())
}
