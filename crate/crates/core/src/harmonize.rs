//! Background compositing from surrounding-style representations and
//! harmonization of the stylized foreground into it.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImagePlane};
use crate::inversion::{StyleRepresentation, Target};
use crate::sampler::resize_bilinear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fg_source: String,
    pub bg_source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub image: ImagePlane,
    pub mask: BinaryMask,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundFill {
    /// First representation, bilinearly resized to the frame.
    #[default]
    Resize,
    /// Representations tiled at native size, cycling through the set.
    Tile,
}

pub trait Harmonizer: Send + Sync {
    fn harmonize(&self, composite: &Composite) -> Result<ImagePlane>;
}

fn fill_background(h: usize, w: usize, reps: &[&ImagePlane], fill: BackgroundFill) -> ImagePlane {
    match fill {
        BackgroundFill::Resize => resize_bilinear(reps[0], h, w),
        BackgroundFill::Tile => {
            let (th, tw) = reps[0].dims();
            ImagePlane::from_fn(h, w, |y, x| {
                let tile = ((y / th) * w.div_ceil(tw) + x / tw) % reps.len();
                let r = reps[tile];
                r.pixel((y % th).min(r.height() - 1), (x % tw).min(r.width() - 1))
            })
        }
    }
}

/// Foreground pixels from `fg_stylized`, background pixels from the
/// surrounding-style fill, selected by mask value.
pub fn composite_images(
    fg_stylized: &ImagePlane,
    mask: &BinaryMask,
    bg_images: &[&ImagePlane],
    fill: BackgroundFill,
    provenance: Provenance,
) -> Result<Composite> {
    if bg_images.is_empty() {
        return Err(Error::EmptyBgReps);
    }
    if fg_stylized.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: fg_stylized.dims(),
            actual: mask.dims(),
        });
    }
    let (h, w) = fg_stylized.dims();
    let bg = fill_background(h, w, bg_images, fill);
    let mut out = bg.into_data();
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        if mask.is_set(i) {
            px.copy_from_slice(&fg_stylized.data()[i * 3..i * 3 + 3]);
        }
    }
    Ok(Composite {
        image: ImagePlane::from_raw(h, w, out)?,
        mask: mask.clone(),
        provenance,
    })
}

pub fn composite_background(
    fg_stylized: &ImagePlane,
    mask: &BinaryMask,
    bg_reps: &[StyleRepresentation],
    fill: BackgroundFill,
) -> Result<Composite> {
    if let Some(r) = bg_reps.iter().find(|r| r.target != Target::Bg) {
        return Err(Error::Validation(format!("background fill got a {:?} representation", r.target)));
    }
    let imgs: Vec<&ImagePlane> = bg_reps.iter().map(|r| &r.image).collect();
    let provenance = Provenance {
        fg_source: "fg_stylized".into(),
        bg_source: match fill {
            BackgroundFill::Resize => "style_reps/bg_0".into(),
            BackgroundFill::Tile => format!("style_reps/bg_0..{}", imgs.len()),
        },
    };
    composite_images(fg_stylized, mask, &imgs, fill, provenance)
}

#[derive(Clone, Debug)]
pub struct Harmonized {
    pub image: ImagePlane,
    /// False when no harmonizer was available and the composite passed through.
    pub harmonized: bool,
    pub warning: Option<String>,
}

pub fn harmonize(harmonizer: Option<&dyn Harmonizer>, composite: &Composite) -> Result<Harmonized> {
    match harmonizer {
        Some(h) => {
            let image = h.harmonize(composite)?;
            if image.dims() != composite.image.dims() {
                return Err(Error::DimensionMismatch {
                    expected: composite.image.dims(),
                    actual: image.dims(),
                });
            }
            Ok(Harmonized {
                image,
                harmonized: true,
                warning: None,
            })
        }
        None => {
            let msg = Error::HarmonizerUnavailable("emitting un-harmonized composite".into()).to_string();
            warn!("{msg}");
            Ok(Harmonized {
                image: composite.image.clone(),
                harmonized: false,
                warning: Some(msg),
            })
        }
    }
}

/// Euclidean distance between the mean fg colour and the mean bg colour.
pub fn fg_bg_separation(image: &ImagePlane, mask: &BinaryMask) -> f64 {
    let fg = image.channel_mean(|i| mask.is_set(i));
    let bg = image.channel_mean(|i| !mask.is_set(i));
    (0..3).map(|c| (fg[c] - bg[c]).powi(2)).sum::<f64>().sqrt()
}
