//! Lossless latent codecs.
//!
//! Diffusion runs in a latent grid of `H/f × W/f × C`. Two codecs are
//! provided: `identity` (f = 1, C = 3) and `space_to_depth`, which moves each
//! `f×f×3` pixel block into `3f²` channels without any arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{BinaryMask, Image, MaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    SpaceToDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub factor: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl CodecConfig {
    pub fn identity() -> Self {
        Self {
            kind: CodecKind::Identity,
            factor: 1,
        }
    }

    pub fn space_to_depth(factor: usize) -> Result<Self> {
        let cfg = Self {
            kind: CodecKind::SpaceToDepth,
            factor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CodecKind::Identity if self.factor != 1 => Err(invalid("identity codec requires factor 1")),
            CodecKind::SpaceToDepth if self.factor == 0 => Err(invalid("space_to_depth factor must be positive")),
            _ => Ok(()),
        }
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn latent_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let f = self.factor;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(invalid(format!(
                "{height}x{width} is not divisible by codec factor {f}"
            )));
        }
        Ok((height / f, width / f))
    }
}

/// A channel-major (`C×H×W`) latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    fn at_mut(&mut self, ch: usize, row: usize, col: usize) -> &mut f32 {
        &mut self.data[(ch * self.height + row) * self.width + col]
    }
}

/// Channel index of sub-pixel `(dy, dx)`, colour `ch` inside a block of side `f`.
pub fn block_channel(f: usize, dy: usize, dx: usize, ch: usize) -> usize {
    (dy * f + dx) * 3 + ch
}

pub fn encode(img: &Image, cfg: &CodecConfig) -> Result<Latent> {
    let (lh, lw) = cfg.latent_size(img.height(), img.width())?;
    let f = cfg.factor;
    let mut out = Latent::zeros(cfg.latent_channels(), lh, lw);
    for r in 0..img.height() {
        for c in 0..img.width() {
            let px = img.pixel(r, c);
            for (ch, v) in px.iter().enumerate() {
                *out.at_mut(block_channel(f, r % f, c % f, ch), r / f, c / f) = *v;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`encode`]; values are clamped to `[0, 1]`.
pub fn decode(latent: &Latent, cfg: &CodecConfig) -> Result<Image> {
    cfg.validate()?;
    let f = cfg.factor;
    if latent.channels != cfg.latent_channels() {
        return Err(invalid(format!(
            "latent has {} channels, codec expects {}",
            latent.channels,
            cfg.latent_channels()
        )));
    }
    if latent.data.len() != latent.channels * latent.height * latent.width {
        return Err(invalid("latent buffer length does not match its shape"));
    }
    Image::from_fn(latent.height * f, latent.width * f, |r, c| {
        let mut px = [0.0f32; 3];
        for (ch, v) in px.iter_mut().enumerate() {
            let x = latent.at(block_channel(f, r % f, c % f, ch), r / f, c / f);
            *v = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
        }
        px
    })
}

/// Downsamples a fill mask to latent resolution. A cell is fill when any
/// covered pixel is fill, so no generatable pixel is ever frozen.
pub fn encode_mask(m: &BinaryMask, cfg: &CodecConfig) -> Result<Latent> {
    let (lh, lw) = cfg.latent_size(m.height(), m.width())?;
    let f = cfg.factor;
    let mut out = Latent::zeros(1, lh, lw);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                *out.at_mut(0, r / f, c / f) = 1.0;
            }
        }
    }
    Ok(out)
}

/// Upsamples a latent-resolution mask back to pixels (nearest neighbour).
pub fn decode_mask(latent: &Latent, cfg: &CodecConfig, kind: MaskKind) -> Result<BinaryMask> {
    let f = cfg.factor;
    BinaryMask::from_fn(latent.height * f, latent.width * f, kind, |r, c| {
        latent.at(0, r / f, c / f) > 0.5
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn identity_is_the_same_array() {
        let img = random_image(1, 8, 12);
        let lat = encode(&img, &CodecConfig::identity()).unwrap();
        assert_eq!((lat.channels, lat.height, lat.width), (3, 8, 12));
        for r in 0..8 {
            for c in 0..12 {
                for ch in 0..3 {
                    assert_eq!(lat.at(ch, r, c), img.pixel(r, c)[ch]);
                }
            }
        }
        assert_eq!(decode(&lat, &CodecConfig::identity()).unwrap(), img);
    }

    #[test]
    fn space_to_depth_groups_subpixels() {
        // 8x8 is the smallest legal image; check the top-left 4x4 quadrant
        // block by block with explicit index arithmetic.
        let img = random_image(2, 8, 8);
        let cfg = CodecConfig::space_to_depth(2).unwrap();
        let lat = encode(&img, &cfg).unwrap();
        assert_eq!((lat.channels, lat.height, lat.width), (12, 4, 4));
        for lr in 0..2 {
            for lc in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for ch in 0..3 {
                            let want = img.pixel(2 * lr + dy, 2 * lc + dx)[ch];
                            assert_eq!(lat.at(dy * 6 + dx * 3 + ch, lr, lc), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_latent() {
        let img = Image::filled(8, 8, [0.25; 3]).unwrap();
        let lat = encode(&img, &CodecConfig::space_to_depth(2).unwrap()).unwrap();
        assert!(lat.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn round_trips_exactly() {
        let img = random_image(3, 16, 24);
        for cfg in [
            CodecConfig::identity(),
            CodecConfig::space_to_depth(2).unwrap(),
            CodecConfig::space_to_depth(8).unwrap(),
        ] {
            let back = decode(&encode(&img, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(back, img, "{cfg:?}");
        }
    }

    #[test]
    fn decode_clamps() {
        let mut lat = Latent::zeros(3, 8, 8);
        lat.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % 2 == 0 { 3.0 } else { -2.0 });
        let img = decode(&lat, &CodecConfig::identity()).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn divisibility_and_shape_errors() {
        let img = random_image(4, 10, 10);
        assert!(encode(&img, &CodecConfig::space_to_depth(4).unwrap()).is_err());
        let lat = Latent::zeros(5, 4, 4);
        assert!(decode(&lat, &CodecConfig::identity()).is_err());
        assert!(CodecConfig {
            kind: CodecKind::Identity,
            factor: 2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mask_encoding_cases() {
        let full = BinaryMask::filled(8, 8, true, MaskKind::Fill).unwrap();
        let cfg2 = CodecConfig::space_to_depth(2).unwrap();
        assert!(encode_mask(&full, &cfg2).unwrap().data.iter().all(|&v| v == 1.0));

        let m = BinaryMask::from_fn(8, 8, MaskKind::Fill, |r, c| (r * 3 + c) % 5 == 0).unwrap();
        let id = encode_mask(&m, &CodecConfig::identity()).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(id.at(0, r, c) == 1.0, m.get(r, c));
            }
        }

        let single = BinaryMask::from_fn(8, 8, MaskKind::Fill, |r, c| r == 5 && c == 2).unwrap();
        let lat = encode_mask(&single, &cfg2).unwrap();
        // Brute-force block scan.
        let mut set = vec![];
        for lr in 0..4 {
            for lc in 0..4 {
                let any = (0..2).any(|dy| (0..2).any(|dx| single.get(2 * lr + dy, 2 * lc + dx)));
                assert_eq!(lat.at(0, lr, lc) == 1.0, any);
                if any {
                    set.push((lr, lc));
                }
            }
        }
        assert_eq!(set, vec![(2, 1)]);
    }

    proptest! {
        #[test]
        fn encode_mask_is_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let small = BinaryMask::from_fn(16, 16, MaskKind::Fill, |_, _| rng.random_bool(0.2)).unwrap();
            let extra: Vec<bool> = (0..256).map(|_| rng.random_bool(0.3)).collect();
            let big = BinaryMask::from_fn(16, 16, MaskKind::Fill, |r, c| small.get(r, c) || extra[r * 16 + c]).unwrap();
            let cfg = CodecConfig::space_to_depth(4).unwrap();
            let (a, b) = (encode_mask(&small, &cfg).unwrap(), encode_mask(&big, &cfg).unwrap());
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x <= y));
        }

        #[test]
        fn one_pixel_touches_one_cell(seed in any::<u64>(), r in 0usize..16, c in 0usize..16) {
            let img = random_image(seed, 16, 16);
            let mut data = img.data().to_vec();
            data[(r * 16 + c) * 3] = 1.0 - data[(r * 16 + c) * 3];
            let changed = Image::new(16, 16, data).unwrap();
            let cfg = CodecConfig::space_to_depth(2).unwrap();
            let (a, b) = (encode(&img, &cfg).unwrap(), encode(&changed, &cfg).unwrap());
            let mut cells = std::collections::HashSet::new();
            for ch in 0..12 { for lr in 0..8 { for lc in 0..8 {
                if a.at(ch, lr, lc) != b.at(ch, lr, lc) { cells.insert((lr, lc)); }
            }}}
            prop_assert!(cells.len() <= 1);
        }
    }
}
