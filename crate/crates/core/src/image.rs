//! Image and mask value types with exact mask geometry.
//!
//! Images are stored as row-major `H×W×3` floats in `[0, 1]`. Masks are
//! boolean grids tagged with a convention: a *fill* mask marks pixels to
//! generate, an *object* mask marks salient-object pixels. The two are
//! complements of each other for the same sample.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(invalid(format!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Zeroes every pixel where `mask` is set.
    pub fn zero_where(&self, mask: &BinaryMask) -> Result<Image> {
        check_shape(self.height, self.width, mask)?;
        let mut data = self.data.clone();
        for (i, &bit) in mask.bits().iter().enumerate() {
            if bit {
                data[i * 3..i * 3 + 3].fill(0.0);
            }
        }
        Ok(Image { data, ..*self })
    }

    /// Bilinear resize, used to bring outputs to a common comparison resolution.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let data = out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(height, width, data)
    }

    /// 8-bit quantized view; `k/255` round-trips exactly.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("length checked")
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Image> {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_rgb8()
            .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)?;
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Image::from_rgb8(&img)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let img = open_image(path.as_ref())?.to_rgb8();
        Image::from_rgb8(&img)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Decodes a file, naming it in the error.
fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => {
            Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => Error::InvalidInput(format!("{}: {other}", path.display())),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Set pixels are to be generated.
    Fill,
    /// Set pixels belong to the salient object.
    Object,
}

impl MaskKind {
    pub fn flipped(self) -> MaskKind {
        match self {
            MaskKind::Fill => MaskKind::Object,
            MaskKind::Object => MaskKind::Fill,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    kind: MaskKind,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("mask has zero size"));
        }
        if bits.len() != height * width {
            return Err(invalid(format!(
                "mask buffer has {} bits, expected {}",
                bits.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
            kind,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        kind: MaskKind,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self::new(height, width, bits, kind)
    }

    pub fn filled(height: usize, width: usize, value: bool, kind: MaskKind) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], kind)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixelwise complement with the convention flipped (object ↔ fill).
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            bits: self.bits.iter().map(|b| !b).collect(),
            kind: self.kind.flipped(),
            ..*self
        }
    }

    pub fn with_kind(mut self, kind: MaskKind) -> BinaryMask {
        self.kind = kind;
        self
    }

    /// Positions of set pixels, row-major.
    pub fn set_positions(&self) -> Vec<(usize, usize)> {
        self.positions(true)
    }

    pub fn positions(&self, value: bool) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == value)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// One-pixel erosion with 4-connectivity; pixels on the frame border
    /// count as having an unset neighbour only if the frame cuts them.
    pub fn eroded(&self) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        let bits = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                self.bits[i]
                    && (r == 0 || self.bits[i - w])
                    && (r + 1 == h || self.bits[i + w])
                    && (c == 0 || self.bits[i - 1])
                    && (c + 1 == w || self.bits[i + 1])
            })
            .collect();
        BinaryMask { bits, ..self.clone() }
    }

    /// One-pixel dilation with 4-connectivity.
    pub fn dilated(&self) -> BinaryMask {
        self.complement().eroded().complement()
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Result<BinaryMask> {
        BinaryMask::from_fn(height, width, self.kind, |r, c| {
            let sr = (r * self.height) / height;
            let sc = (c * self.width) / width;
            self.get(sr, sc)
        })
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("length checked")
    }

    /// Binarizes an 8-bit single-channel image at 128.
    pub fn from_gray8(img: &GrayImage, kind: MaskKind) -> Result<BinaryMask> {
        let bits = img.pixels().map(|Luma([v])| *v >= 128).collect();
        BinaryMask::new(img.height() as usize, img.width() as usize, bits, kind)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_gray8()
            .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)?;
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8], kind: MaskKind) -> Result<BinaryMask> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        BinaryMask::from_gray8(&img, kind)
    }

    pub fn load(path: impl AsRef<Path>, kind: MaskKind) -> Result<BinaryMask> {
        let img = open_image(path.as_ref())?.to_luma8();
        BinaryMask::from_gray8(&img, kind)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// The unit of training and evaluation data.
#[derive(Clone, Debug)]
pub struct SalientSample {
    pub id: String,
    pub image: Image,
    pub object_mask: BinaryMask,
    pub caption: String,
    pub category: String,
    pub source: String,
}

impl SalientSample {
    pub fn fill_mask(&self) -> BinaryMask {
        self.object_mask.complement()
    }

    /// The salient object on a blank (zero) background.
    pub fn object_only(&self) -> Result<Image> {
        self.image.zero_where(&self.fill_mask())
    }
}

fn check_shape(height: usize, width: usize, mask: &BinaryMask) -> Result<()> {
    if mask.height != height || mask.width != width {
        return Err(invalid(format!(
            "mask is {}x{}, expected {height}x{width}",
            mask.height, mask.width
        )));
    }
    Ok(())
}

/// Fraction of set pixels over the full frame.
pub fn mask_area(m: &BinaryMask) -> Result<f64> {
    let total = m.height * m.width;
    if total == 0 {
        return Err(invalid("mask has zero size"));
    }
    Ok(m.count() as f64 / total as f64)
}

/// Pixelwise OR; the result carries `a`'s convention.
pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    if !a.same_shape(b) {
        return Err(invalid(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let bits = a.bits.iter().zip(&b.bits).map(|(x, y)| *x || *y).collect();
    Ok(BinaryMask { bits, ..a.clone() })
}

/// Takes `generated` where `fill_mask` is set and `object_image` elsewhere.
/// Kept pixels are copied bit-for-bit.
pub fn composite(object_image: &Image, fill_mask: &BinaryMask, generated: &Image) -> Result<Image> {
    if !object_image.same_shape(generated) {
        return Err(invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            object_image.height, object_image.width, generated.height, generated.width
        )));
    }
    check_shape(object_image.height, object_image.width, fill_mask)?;
    let mut data = object_image.data.clone();
    for (i, &fill) in fill_mask.bits.iter().enumerate() {
        if fill {
            data[i * 3..i * 3 + 3].copy_from_slice(&generated.data[i * 3..i * 3 + 3]);
        }
    }
    Ok(Image { data, ..*object_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, MaskKind::Object, |_, _| rng.random_bool(0.5)).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn area_of_trivial_masks() {
        let empty = BinaryMask::filled(16, 16, false, MaskKind::Object).unwrap();
        let full = BinaryMask::filled(16, 16, true, MaskKind::Object).unwrap();
        assert_eq!(mask_area(&empty).unwrap(), 0.0);
        assert_eq!(mask_area(&full).unwrap(), 1.0);
        let quarter = BinaryMask::from_fn(4, 4, MaskKind::Object, |r, _| r == 0).unwrap();
        assert_eq!(mask_area(&quarter).unwrap(), 0.25);
    }

    #[test]
    fn zero_sized_mask_is_rejected() {
        assert!(matches!(
            BinaryMask::new(0, 4, vec![], MaskKind::Fill),
            Err(crate::Error::InvalidInput(_))
        ));
    }

    #[test]
    fn union_identities_and_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mask(&mut rng, 16, 16);
        let b = random_mask(&mut rng, 16, 16);
        assert_eq!(mask_union(&a, &a).unwrap(), a);
        let all = mask_union(&a, &a.complement()).unwrap();
        assert!(all.bits().iter().all(|&x| x));

        let u = mask_union(&a, &b).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(u.get(r, c), a.get(r, c) | b.get(r, c), "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn union_shape_mismatch() {
        let a = BinaryMask::filled(8, 8, true, MaskKind::Object).unwrap();
        let b = BinaryMask::filled(8, 9, true, MaskKind::Object).unwrap();
        assert!(mask_union(&a, &b).is_err());
    }

    #[test]
    fn composite_extremes_and_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obj = random_image(&mut rng, 12, 16);
        let gen = random_image(&mut rng, 12, 16);
        let none = BinaryMask::filled(12, 16, false, MaskKind::Fill).unwrap();
        let all = BinaryMask::filled(12, 16, true, MaskKind::Fill).unwrap();
        assert_eq!(composite(&obj, &none, &gen).unwrap(), obj);
        assert_eq!(composite(&obj, &all, &gen).unwrap(), gen);

        let m = random_mask(&mut rng, 12, 16).with_kind(MaskKind::Fill);
        let out = composite(&obj, &m, &gen).unwrap();
        for r in 0..12 {
            for c in 0..16 {
                let want = if m.get(r, c) { gen.pixel(r, c) } else { obj.pixel(r, c) };
                assert_eq!(out.pixel(r, c), want);
            }
        }
    }

    #[test]
    fn composite_shape_mismatch() {
        let a = Image::filled(8, 8, [0.5; 3]).unwrap();
        let b = Image::filled(8, 16, [0.5; 3]).unwrap();
        let m = BinaryMask::filled(8, 8, true, MaskKind::Fill).unwrap();
        assert!(composite(&a, &m, &b).is_err());
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(4, 8, vec![0.0; 96]).is_err());
        assert!(Image::new(8, 8, vec![1.5; 192]).is_err());
        assert!(Image::new(8, 8, vec![0.0; 10]).is_err());
    }

    #[test]
    fn png_round_trips_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Image::from_fn(8, 10, |_, _| {
            [0, 1, 2].map(|_| rng.random_range(0..=255u8) as f32 / 255.0)
        })
        .unwrap();
        assert_eq!(Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap(), img);

        let m = random_mask(&mut rng, 9, 13);
        let back = BinaryMask::from_png_bytes(&m.to_png_bytes().unwrap(), MaskKind::Object).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn erosion_and_dilation() {
        let m = BinaryMask::from_fn(8, 8, MaskKind::Object, |r, c| {
            (2..6).contains(&r) && (2..6).contains(&c)
        })
        .unwrap();
        assert_eq!(m.eroded().count(), 4);
        assert_eq!(m.dilated().count(), 16 + 16);
    }

    proptest! {
        #[test]
        fn union_area_dominates(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, h, w);
            let b = random_mask(&mut rng, h, w);
            let u = mask_area(&mask_union(&a, &b).unwrap()).unwrap();
            prop_assert!(u >= mask_area(&a).unwrap().max(mask_area(&b).unwrap()));
        }

        #[test]
        fn composite_is_a_projection(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let o = random_image(&mut rng, 8, 8);
            let g = random_image(&mut rng, 8, 8);
            let m = random_mask(&mut rng, 8, 8).with_kind(MaskKind::Fill);
            let once = composite(&o, &m, &g).unwrap();
            prop_assert_eq!(composite(&o, &m, &once).unwrap(), once);
        }

        #[test]
        fn complement_is_an_involution(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(&mut rng, 10, 7);
            prop_assert_eq!(m.complement().complement(), m);
        }
    }
}
