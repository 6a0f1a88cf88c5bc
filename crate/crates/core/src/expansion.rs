//! Object-expansion metric.
//!
//! A salient mask of the input picks point prompts; a point-promptable
//! segmenter then segments both the input (`m_i`) and the outpainted image
//! (`m_o`) with the same points. Expansion is
//! `E = area(m_o ∪ m_i) − area(m_i)`, which never credits a shrunken or
//! displaced object. The naive difference `area(m_o) − area(m_i)` is kept
//! for comparison.

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clients::{with_retry, PointSegmenter, RetryPolicy, SalientSegmenter};
use crate::error::{invalid, Result};
use crate::image::{BinaryMask, Image, MaskKind};

pub const DEFAULT_POINTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub requested_positives: usize,
    pub requested_negatives: usize,
}

impl PointPrompt {
    /// Requested points that could not be placed, `(positives, negatives)`.
    pub fn shortfall(&self) -> (usize, usize) {
        (
            self.requested_positives.saturating_sub(self.positives.len()),
            self.requested_negatives.saturating_sub(self.negatives.len()),
        )
    }

    /// The segmenter wire format: `{"positives": [[r,c],...], "negatives": [[r,c],...]}`.
    pub fn wire_json(&self) -> String {
        serde_json::json!({ "positives": self.positives, "negatives": self.negatives }).to_string()
    }
}

/// Samples up to `n_pos` interior and `n_neg` exterior points without
/// replacement. Positives come from the 1-pixel-eroded mask and negatives
/// from outside the 1-pixel-dilated mask; when a shrunken pool cannot
/// supply the requested count the unshrunk pool is used instead.
pub fn sample_point_prompts(mask: &BinaryMask, n_pos: usize, n_neg: usize, seed: u64) -> Result<PointPrompt> {
    let inside = mask.positions(true);
    let outside = mask.positions(false);
    if inside.is_empty() || outside.is_empty() {
        return Err(invalid("point prompts need a mask with both set and unset pixels"));
    }
    let pick_pool = |strict: Vec<(usize, usize)>, loose: Vec<(usize, usize)>, n: usize| {
        if strict.len() >= n {
            strict
        } else {
            loose
        }
    };
    let pos_pool = pick_pool(mask.eroded().positions(true), inside, n_pos);
    let neg_pool = pick_pool(mask.dilated().positions(false), outside, n_neg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |pool: &[(usize, usize)], n: usize| -> Vec<(usize, usize)> {
        let k = n.min(pool.len());
        rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    let positives = draw(&pos_pool, n_pos);
    let negatives = draw(&neg_pool, n_neg);
    Ok(PointPrompt {
        positives,
        negatives,
        requested_positives: n_pos,
        requested_negatives: n_neg,
    })
}

/// Runs the point segmenter and binarizes its output at 0.5. Transient
/// failures are retried per `policy`; exhausting the budget is a
/// metric-unavailable error, never an empty mask.
pub fn segment_with_points(
    image: &Image,
    prompt: &PointPrompt,
    segmenter: &dyn PointSegmenter,
    policy: &RetryPolicy,
) -> Result<BinaryMask> {
    if prompt.positives.is_empty() {
        return Err(invalid("point prompt has no positive points"));
    }
    let soft = with_retry(policy, "point segmenter", || segmenter.segment(image, prompt))?;
    soft.binarize(image.height(), image.width(), MaskKind::Object)
}

/// `(E, E_naive)` from exact pixel counts.
pub fn expansion(m_i: &BinaryMask, m_o: &BinaryMask) -> Result<(f64, f64)> {
    if !m_i.same_shape(m_o) {
        return Err(invalid(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            m_i.height(),
            m_i.width(),
            m_o.height(),
            m_o.width()
        )));
    }
    let total = (m_i.height() * m_i.width()) as i64;
    let (mut n_i, mut n_o, mut n_u) = (0i64, 0i64, 0i64);
    for (&a, &b) in m_i.bits().iter().zip(m_o.bits()) {
        n_i += a as i64;
        n_o += b as i64;
        n_u += (a || b) as i64;
    }
    Ok(((n_u - n_i) as f64 / total as f64, (n_o - n_i) as f64 / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub input_id: String,
    pub output_id: String,
    pub category: String,
    pub seed: u64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_naive")]
    pub e_naive: f64,
    pub area_input: f64,
    pub area_output: f64,
    pub prompt: PointPrompt,
    #[serde(with = "mask_png")]
    pub m_i: BinaryMask,
    #[serde(with = "mask_png")]
    pub m_o: BinaryMask,
}

/// Segments both images with the same points sampled from the input's
/// salient mask, then scores the pair.
pub fn measure_pair(
    object_image: &Image,
    outpainted: &Image,
    sos: &dyn SalientSegmenter,
    segmenter: &dyn PointSegmenter,
    seed: u64,
    policy: &RetryPolicy,
) -> Result<ExpansionReport> {
    if !object_image.same_shape(outpainted) {
        return Err(invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            object_image.height(),
            object_image.width(),
            outpainted.height(),
            outpainted.width()
        )));
    }
    let salient = with_retry(policy, "salient segmenter", || sos.segment(object_image))?.binarize(
        object_image.height(),
        object_image.width(),
        MaskKind::Object,
    )?;
    let prompt = sample_point_prompts(&salient, DEFAULT_POINTS, DEFAULT_POINTS, seed)?;
    let m_i = segment_with_points(object_image, &prompt, segmenter, policy)?;
    let m_o = segment_with_points(outpainted, &prompt, segmenter, policy)?;
    let (e, e_naive) = expansion(&m_i, &m_o)?;
    Ok(ExpansionReport {
        input_id: String::new(),
        output_id: String::new(),
        category: String::new(),
        seed,
        e,
        e_naive,
        area_input: crate::image::mask_area(&m_i)?,
        area_output: crate::image::mask_area(&m_o)?,
        prompt,
        m_i,
        m_o,
    })
}

/// Masks travel in JSON as base64 PNG with the object convention.
pub mod mask_png {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BinaryMask, s: S) -> std::result::Result<S::Ok, S::Error> {
        let png = m.to_png_bytes().map_err(serde::ser::Error::custom)?;
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(png))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BinaryMask, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)?;
        BinaryMask::from_png_bytes(&bytes, MaskKind::Object).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{BoxPointSegmenter, MaskSegmenter, OracleSegmenter, SoftMask};
    use crate::error::Error;
    use crate::image::{mask_area, mask_union};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, MaskKind::Object, |_, _| rng.random_bool(p)).unwrap()
    }

    #[test]
    fn expansion_cases() {
        let m = BinaryMask::from_fn(10, 10, MaskKind::Object, |r, c| r < 4 && c < 5).unwrap();
        assert_eq!(expansion(&m, &m).unwrap(), (0.0, 0.0));
        let grown = BinaryMask::from_fn(10, 10, MaskKind::Object, |r, c| {
            (r < 4 && c < 5) || (r == 4 && c < 10) || (r == 5 && c < 2)
        })
        .unwrap();
        let (e, en) = expansion(&m, &grown).unwrap();
        assert!((e - 0.12).abs() < 1e-12 && (en - 0.12).abs() < 1e-12);
        // Disjoint: area(m_i) = 0.25, area(m_o) = 0.10.
        let mi = BinaryMask::from_fn(10, 10, MaskKind::Object, |r, c| r < 5 && c < 5).unwrap();
        let mo = BinaryMask::from_fn(10, 10, MaskKind::Object, |r, c| r == 9 && c < 10).unwrap();
        let (e, en) = expansion(&mi, &mo).unwrap();
        assert!((e - 0.10).abs() < 1e-12 && (en + 0.15).abs() < 1e-12);
        assert!(expansion(&mi, &BinaryMask::filled(5, 5, false, MaskKind::Object).unwrap()).is_err());
    }

    #[test]
    fn points_from_tiny_mask_use_every_pixel() {
        let px: Vec<(usize, usize)> = (0..10).map(|i| (1 + i % 3 * 4, 2 + i)).collect();
        let m = BinaryMask::from_fn(16, 16, MaskKind::Object, |r, c| px.contains(&(r, c))).unwrap();
        let p = sample_point_prompts(&m, 10, 10, 3).unwrap();
        let mut got = p.positives.clone();
        got.sort();
        let mut want = px.clone();
        want.sort();
        assert_eq!(got, want);
        assert!(p.negatives.iter().all(|&(r, c)| !m.get(r, c)));
        let small = BinaryMask::from_fn(16, 16, MaskKind::Object, |r, c| r == 0 && c < 3).unwrap();
        let p = sample_point_prompts(&small, 10, 10, 0).unwrap();
        assert_eq!(p.shortfall(), (7, 0));
        assert!(sample_point_prompts(&BinaryMask::filled(8, 8, true, MaskKind::Object).unwrap(), 10, 10, 0).is_err());
        assert!(sample_point_prompts(&BinaryMask::filled(8, 8, false, MaskKind::Object).unwrap(), 10, 10, 0).is_err());
    }

    #[test]
    fn points_avoid_the_boundary_when_possible() {
        let m = BinaryMask::from_fn(32, 32, MaskKind::Object, |r, c| {
            (8..24).contains(&r) && (8..24).contains(&c)
        })
        .unwrap();
        for seed in 0..20 {
            let p = sample_point_prompts(&m, 10, 10, seed).unwrap();
            assert_eq!((p.positives.len(), p.negatives.len()), (10, 10));
            assert!(p
                .positives
                .iter()
                .all(|&(r, c)| (9..23).contains(&r) && (9..23).contains(&c)));
            let d = m.dilated();
            assert!(p.negatives.iter().all(|&(r, c)| !d.get(r, c)));
            let mut u = p.positives.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 10);
        }
    }

    #[test]
    fn first_point_is_uniform_on_two_pixels() {
        let m = BinaryMask::from_fn(8, 8, MaskKind::Object, |r, c| r == 3 && (c == 3 || c == 4)).unwrap();
        let n = 10_000;
        let hits = (0..n)
            .filter(|&s| sample_point_prompts(&m, 10, 10, s).unwrap().positives[0] == (3, 3))
            .count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 / 2.0).abs() < 3.0 * sd, "{hits}");
    }

    #[test]
    fn prompt_wire_format() {
        let p = PointPrompt {
            positives: vec![(1, 2)],
            negatives: vec![(3, 4), (5, 6)],
            requested_positives: 10,
            requested_negatives: 10,
        };
        assert_eq!(p.wire_json(), r#"{"negatives":[[3,4],[5,6]],"positives":[[1,2]]}"#);
    }

    fn disk_image(size: usize, radius: f64) -> (Image, BinaryMask) {
        let c = size as f64 / 2.0;
        let inside = |r: usize, col: usize| {
            let (dy, dx) = (r as f64 + 0.5 - c, col as f64 + 0.5 - c);
            dy * dy + dx * dx <= radius * radius
        };
        let img = Image::from_fn(size, size, |r, col| {
            if inside(r, col) {
                [0.9, 0.1, 0.1]
            } else {
                [0.45, 0.5, 0.5]
            }
        })
        .unwrap();
        (img, BinaryMask::from_fn(size, size, MaskKind::Object, inside).unwrap())
    }

    #[test]
    fn oracle_segments_a_disk_exactly() {
        let (img, mask) = disk_image(64, 14.0);
        let prompt = sample_point_prompts(&mask, 10, 10, 1).unwrap();
        let got = segment_with_points(&img, &prompt, &OracleSegmenter::default(), &RetryPolicy::immediate(1)).unwrap();
        assert_eq!(got.bits(), mask.bits());
    }

    #[test]
    fn identical_images_have_zero_expansion() {
        let (img, mask) = disk_image(48, 10.0);
        let r = measure_pair(
            &img,
            &img,
            &MaskSegmenter(mask),
            &OracleSegmenter::default(),
            5,
            &RetryPolicy::immediate(1),
        )
        .unwrap();
        assert_eq!((r.e, r.e_naive), (0.0, 0.0));
    }

    #[test]
    fn grown_disk_matches_analytic_area() {
        let size = 128;
        let r = 20.0;
        let (small, mask) = disk_image(size, r);
        let (big, _) = disk_image(size, 1.2 * r);
        let rep = measure_pair(
            &small,
            &big,
            &MaskSegmenter(mask),
            &OracleSegmenter::default(),
            2,
            &RetryPolicy::immediate(1),
        )
        .unwrap();
        let n = (size * size) as f64;
        let analytic = std::f64::consts::PI * (1.44 - 1.0) * r * r / n;
        // One quantization unit: a one-pixel band along the larger circle.
        let unit = 2.0 * std::f64::consts::PI * 1.2 * r / n;
        assert!((rep.e - analytic).abs() <= unit, "E {} analytic {analytic}", rep.e);
        assert_eq!(rep.e, rep.e_naive);
    }

    #[test]
    fn stub_segmenter_returns_prompt_box() {
        let img = Image::filled(16, 16, [0.5; 3]).unwrap();
        let p = PointPrompt {
            positives: vec![(2, 3), (6, 9)],
            negatives: vec![],
            requested_positives: 2,
            requested_negatives: 0,
        };
        let m = segment_with_points(&img, &p, &BoxPointSegmenter, &RetryPolicy::immediate(1)).unwrap();
        let want = BinaryMask::from_fn(16, 16, MaskKind::Object, |r, c| {
            (2..=6).contains(&r) && (3..=9).contains(&c)
        })
        .unwrap();
        assert_eq!(m, want);
    }

    struct WrongShape;
    impl PointSegmenter for WrongShape {
        fn segment(&self, _: &Image, _: &PointPrompt) -> Result<SoftMask> {
            Ok(SoftMask {
                height: 3,
                width: 3,
                values: vec![1.0; 9],
            })
        }
    }

    struct Down;
    impl PointSegmenter for Down {
        fn segment(&self, _: &Image, _: &PointPrompt) -> Result<SoftMask> {
            Err(Error::MetricUnavailable("connection refused".into()))
        }
    }

    #[test]
    fn segmenter_failures() {
        let (img, mask) = disk_image(16, 4.0);
        let p = sample_point_prompts(&mask, 3, 3, 0).unwrap();
        assert!(matches!(
            segment_with_points(&img, &p, &WrongShape, &RetryPolicy::immediate(3)),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            segment_with_points(&img, &p, &Down, &RetryPolicy::immediate(3)),
            Err(Error::MetricUnavailable(_))
        ));
    }

    #[test]
    fn report_json_round_trip() {
        let (img, mask) = disk_image(32, 8.0);
        let r = measure_pair(
            &img,
            &img,
            &MaskSegmenter(mask),
            &OracleSegmenter::default(),
            5,
            &RetryPolicy::immediate(1),
        )
        .unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"E\":0.0"));
        let back: ExpansionReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    /// Scalar per-pixel oracle for `E` and `E_naive`.
    fn oracle(mi: &BinaryMask, mo: &BinaryMask) -> (f64, f64) {
        let (h, w) = (mi.height(), mi.width());
        let (mut ci, mut co, mut cu) = (0usize, 0usize, 0usize);
        for r in 0..h {
            for c in 0..w {
                if mi.get(r, c) {
                    ci += 1;
                }
                if mo.get(r, c) {
                    co += 1;
                }
                if mi.get(r, c) || mo.get(r, c) {
                    cu += 1;
                }
            }
        }
        let n = (h * w) as f64;
        ((cu as f64 - ci as f64) / n, (co as f64 - ci as f64) / n)
    }

    proptest! {
        #[test]
        fn matches_oracle_and_bounds(seed in any::<u64>(), h in 16usize..64, w in 16usize..64, p in 0.05f64..0.9, q in 0.05f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mi = random_mask(&mut rng, h, w, p);
            let mo = random_mask(&mut rng, h, w, q);
            let (e, en) = expansion(&mi, &mo).unwrap();
            prop_assert_eq!((e, en), oracle(&mi, &mo));
            prop_assert!(e >= 0.0 && e <= 1.0 - mask_area(&mi).unwrap() + 1e-15);
            prop_assert!(e >= en);
            let subset = mi.bits().iter().zip(mo.bits()).all(|(a, b)| !a || *b);
            prop_assert_eq!(e == en, subset);
            let u = mask_union(&mi, &mo).unwrap();
            prop_assert_eq!(expansion(&mi, &u).unwrap().0, e);
        }

        #[test]
        fn point_order_does_not_matter(seed in any::<u64>()) {
            let (img, mask) = disk_image(32, 9.0);
            let mut p = sample_point_prompts(&mask, 10, 10, seed).unwrap();
            let a = segment_with_points(&img, &p, &OracleSegmenter::default(), &RetryPolicy::immediate(1)).unwrap();
            p.positives.reverse();
            p.negatives.rotate_left(3);
            let b = segment_with_points(&img, &p, &OracleSegmenter::default(), &RetryPolicy::immediate(1)).unwrap();
            prop_assert_eq!(expansion(&mask, &a).unwrap(), expansion(&mask, &b).unwrap());
        }
    }
}
