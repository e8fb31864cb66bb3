//! Image and mask ingestion, masked content, and patch cropping/augmentation.

use std::path::Path;

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode_file, BinaryMask, ImagePlane};
use crate::sampler::SampleGrid;

/// Minimum foreground fraction for a segmenter proposal.
pub const MASK_AREA_FLOOR: f64 = 0.01;

/// Decode an image and bring it to `working` resolution (shorter side scaled,
/// then centre-cropped to a square). `None` keeps the native size.
pub fn load_image(path: &Path, working: Option<usize>) -> Result<ImagePlane> {
    let img = decode_file(path)?;
    let img = match working {
        Some(side) if (img.width() as usize, img.height() as usize) != (side, side) => {
            img.resize_to_fill(side as u32, side as u32, FilterType::Triangle)
        }
        _ => img,
    };
    ImagePlane::from_dynamic(&img)
}

/// Produces a soft foreground map in [0,1] for an image.
pub trait Segmenter: Send + Sync {
    fn propose(&self, image: &ImagePlane) -> Result<Vec<f32>>;
}

pub enum MaskSource<'a> {
    /// Precomputed single-channel mask file (bypass path).
    File(&'a Path),
    /// Segmenter handle; `None` means the checkpoint could not be loaded.
    Segmenter(Option<&'a dyn Segmenter>),
}

pub fn acquire_mask(image: &ImagePlane, source: MaskSource<'_>) -> Result<BinaryMask> {
    match source {
        MaskSource::File(path) => {
            let mask = BinaryMask::load(path)?;
            Ok(mask.resize_nearest(image.height(), image.width()))
        }
        MaskSource::Segmenter(None) => Err(Error::SegmenterUnavailable(
            "no segmenter checkpoint loaded".into(),
        )),
        MaskSource::Segmenter(Some(seg)) => {
            let soft = seg.propose(image)?;
            let mask = BinaryMask::from_soft(image.height(), image.width(), &soft)?;
            let mask = largest_component(&mask);
            let fraction = mask.area_fraction();
            if fraction < MASK_AREA_FLOOR {
                return Err(Error::EmptyMask {
                    fraction,
                    floor: MASK_AREA_FLOOR,
                });
            }
            Ok(mask)
        }
    }
}

/// Keep only the largest 4-connected foreground component.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut label = vec![0u32; h * w];
    let mut best = (0u32, 0usize);
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.is_set(start) || label[start] != 0 {
            continue;
        }
        let mut size = 0usize;
        label[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.is_set(j) && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
        next += 1;
    }
    let data = label.iter().map(|l| (*l != 0 && *l == best.0) as u8).collect();
    BinaryMask::new(h, w, data).expect("mask shape preserved")
}

/// Elementwise product of an image with a mask (I ⊙ M).
pub fn apply_mask(image: &ImagePlane, mask: &BinaryMask) -> Result<ImagePlane> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            actual: mask.dims(),
        });
    }
    let mut out = image.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        if !mask.is_set(i) {
            px.fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub patch_size: usize,
    /// Crop side as a fraction of the shorter image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Corner displacement as a fraction of the crop side.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            min_scale: 0.25,
            max_scale: 0.5,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Full-frame crop without resize or jitter.
    pub fn identity(patch_size: usize) -> Self {
        Self {
            patch_size,
            min_scale: 1.0,
            max_scale: 1.0,
            jitter: 0.0,
        }
    }
}

/// One random-resized, corner-jittered crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub origin: (usize, usize),
    pub side: usize,
    /// Jittered corners in crop-normalised coordinates: TL, TR, BL, BR as (y, x).
    pub corners: [(f64, f64); 4],
}

impl Crop {
    pub fn grid(&self, in_h: usize, in_w: usize, patch: usize) -> SampleGrid {
        let [tl, tr, bl, br] = self.corners;
        let side = self.side as f64;
        let (oy, ox) = (self.origin.0 as f64, self.origin.1 as f64);
        let inv = 1.0 / patch as f64;
        SampleGrid::from_coords(in_h, in_w, patch, patch, |py, px| {
            let v = (py as f64 + 0.5) * inv;
            let u = (px as f64 + 0.5) * inv;
            let top = (tl.0 + (tr.0 - tl.0) * u, tl.1 + (tr.1 - tl.1) * u);
            let bot = (bl.0 + (br.0 - bl.0) * u, bl.1 + (br.1 - bl.1) * u);
            let qy = top.0 + (bot.0 - top.0) * v;
            let qx = top.1 + (bot.1 - top.1) * v;
            (oy + qy * side - 0.5, ox + qx * side - 0.5)
        })
    }
}

pub fn plan_crops(
    height: usize,
    width: usize,
    n_crop: usize,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<Vec<Crop>> {
    if height < cfg.patch_size || width < cfg.patch_size {
        return Err(Error::ImageTooSmall {
            actual: (height, width),
            required: cfg.patch_size,
        });
    }
    let short = height.min(width);
    let mut crops = Vec::with_capacity(n_crop);
    for _ in 0..n_crop {
        let scale = if cfg.max_scale > cfg.min_scale {
            rng.random_range(cfg.min_scale..=cfg.max_scale)
        } else {
            cfg.min_scale
        };
        let side = ((scale * short as f64).round() as usize).clamp(1, short);
        let oy = rng.random_range(0..=height - side);
        let ox = rng.random_range(0..=width - side);
        let mut corners = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        if cfg.jitter > 0.0 {
            for c in &mut corners {
                c.0 += rng.random_range(-cfg.jitter..=cfg.jitter);
                c.1 += rng.random_range(-cfg.jitter..=cfg.jitter);
            }
        }
        crops.push(Crop {
            origin: (oy, ox),
            side,
            corners,
        });
    }
    Ok(crops)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<ImagePlane>,
    pub crops: Vec<Crop>,
    /// Sampling operator of each crop, for mapping patch gradients back.
    pub grids: Vec<SampleGrid>,
    pub source_id: String,
    pub seed: u64,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn patch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn crop_image(
    image: &ImagePlane,
    n_crop: usize,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<(Vec<ImagePlane>, Vec<Crop>, Vec<SampleGrid>)> {
    let crops = plan_crops(image.height(), image.width(), n_crop, rng, cfg)?;
    let grids: Vec<SampleGrid> = crops
        .iter()
        .map(|c| c.grid(image.height(), image.width(), cfg.patch_size))
        .collect();
    let patches = grids.iter().map(|g| g.apply(image)).collect();
    Ok((patches, crops, grids))
}

/// `aug(crop(a, b))`: `n_crop` random views of each image, reproducible from `seed`.
pub fn crop_and_augment(
    a: &ImagePlane,
    b: &ImagePlane,
    n_crop: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(PatchSet, PatchSet)> {
    if n_crop == 0 {
        return Err(Error::SizeMismatch("n_crop must be at least 1".into()));
    }
    let mut sets = Vec::with_capacity(2);
    for (stream, (img, id)) in [(a, "a"), (b, "b")].into_iter().enumerate() {
        let mut rng = patch_rng(seed, stream as u64);
        let (patches, crops, grids) = crop_image(img, n_crop, &mut rng, cfg)?;
        sets.push(PatchSet {
            patches,
            crops,
            grids,
            source_id: id.to_string(),
            seed,
        });
    }
    let b_set = sets.pop().unwrap();
    let a_set = sets.pop().unwrap();
    Ok((a_set, b_set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, |y, x| {
            [y as f32 / h as f32, x as f32 / w as f32, ((x + y) % 7) as f32 / 7.0]
        })
    }

    #[test]
    fn mask_identities() {
        let img = gradient_image(32, 40);
        let ones = BinaryMask::filled(32, 40, true);
        let zeros = BinaryMask::filled(32, 40, false);
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        assert!(apply_mask(&img, &zeros).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_half_with_checkerboard() {
        let img = ImagePlane::filled(32, 32, [0.5; 3]);
        let m = BinaryMask::checkerboard(32, 32, 4);
        let out = apply_mask(&img, &m).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let want = if m.get(y, x) { 0.5 } else { 0.0 };
                assert_eq!(out.pixel(y, x), [want; 3]);
            }
        }
    }

    #[test]
    fn mask_dimension_mismatch() {
        let img = gradient_image(32, 32);
        let m = BinaryMask::filled(32, 33, true);
        assert!(matches!(apply_mask(&img, &m), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn degenerate_augmentation_returns_input() {
        let img = gradient_image(64, 64);
        let (a, b) = crop_and_augment(&img, &img, 1, 9, &AugmentConfig::identity(64)).unwrap();
        assert_eq!(a.patches[0], img);
        assert_eq!(b.patches[0], img);
    }

    #[test]
    fn sixteen_crops_stay_in_bounds() {
        let img = gradient_image(512, 512);
        let cfg = AugmentConfig::default();
        let (a, _) = crop_and_augment(&img, &img, 16, 1234, &cfg).unwrap();
        assert_eq!(a.len(), 16);
        for (p, c) in a.patches.iter().zip(&a.crops) {
            assert_eq!(p.dims(), (128, 128));
            assert!(c.side >= 128 && c.side <= 256);
            assert!(c.origin.0 + c.side <= 512 && c.origin.1 + c.side <= 512);
        }
    }

    #[test]
    fn too_small_is_rejected() {
        let img = gradient_image(64, 64);
        let err = crop_and_augment(&img, &img, 2, 0, &AugmentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { .. }));
    }

    #[test]
    fn segmenter_missing_signals_fallback() {
        let img = gradient_image(32, 32);
        assert!(matches!(
            acquire_mask(&img, MaskSource::Segmenter(None)),
            Err(Error::SegmenterUnavailable(_))
        ));
    }

    #[test]
    fn largest_component_keeps_biggest_blob() {
        let m = BinaryMask::from_fn(10, 10, |y, x| (y < 2 && x < 2) || (y > 4 && x > 4));
        let l = largest_component(&m);
        assert!(!l.get(0, 0));
        assert!(l.get(7, 7));
    }

    proptest! {
        #[test]
        fn masking_is_idempotent_and_partitions(seed in 0u64..1000, cell in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImagePlane::from_fn(32, 32, |_, _| [rng.random(), rng.random(), rng.random()]);
            let m = BinaryMask::from_fn(32, 32, |y, x| ((y / cell) * 31 + x / cell + seed as usize) % 3 == 0);
            let once = apply_mask(&img, &m).unwrap();
            prop_assert_eq!(&apply_mask(&once, &m).unwrap(), &once);
            let rest = apply_mask(&img, &m.inverted()).unwrap();
            for ((a, b), c) in once.data().iter().zip(rest.data()).zip(img.data()) {
                prop_assert_eq!(a + b, *c);
            }
        }

        #[test]
        fn crops_are_pure_functions_of_seed(seed in 0u64..500, n in 1usize..5) {
            let img = gradient_image(160, 144);
            let cfg = AugmentConfig::default();
            let first = crop_and_augment(&img, &img, n, seed, &cfg).unwrap();
            let second = crop_and_augment(&img, &img, n, seed, &cfg).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
