//! Built-in statistics-matching harmonizer.
//!
//! The foreground's per-channel mean and spread are moved part of the way
//! toward the background's, and the adjustment is blended in through a
//! feathered copy of the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonize::{Composite, Harmonizer};
use crate::image::{gaussian_blur, ImagePlane};
use crate::models::{Checkpoint, Role};

pub const CHECKPOINT_ID: &str = "objmst-stat-harmonizer-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarmonizerParams {
    /// Fraction of the fg→bg statistics gap closed, in [0, 1].
    pub strength: f64,
    /// Feather applied to the mask boundary, in pixels (Gaussian sigma).
    pub feather_sigma: f32,
}

pub fn builtin_checkpoint() -> Checkpoint<HarmonizerParams> {
    Checkpoint::new(
        Role::Harmonizer,
        CHECKPOINT_ID,
        HarmonizerParams {
            strength: 0.35,
            feather_sigma: 2.5,
        },
    )
}

pub struct StatHarmonizer {
    params: HarmonizerParams,
}

impl StatHarmonizer {
    pub fn from_checkpoint(ck: Checkpoint<HarmonizerParams>) -> Result<Self> {
        let p = &ck.params;
        if !(0.0..=1.0).contains(&p.strength) || !(p.feather_sigma >= 0.0) {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "harmonizer strength must be in [0,1] and feather nonnegative".into(),
            });
        }
        Ok(Self { params: ck.params })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_checkpoint()).expect("builtin checkpoint")
    }
}

fn region_stats(img: &ImagePlane, select: impl Fn(usize) -> bool) -> Option<([f64; 3], [f64; 3])> {
    let d = img.data();
    let mut n = 0usize;
    let mut s = [0.0f64; 3];
    let mut q = [0.0f64; 3];
    for p in 0..img.height() * img.width() {
        if !select(p) {
            continue;
        }
        n += 1;
        for c in 0..3 {
            let v = d[p * 3 + c] as f64;
            s[c] += v;
            q[c] += v * v;
        }
    }
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let mean = s.map(|v| v / nf);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (q[c] / nf - mean[c] * mean[c]).max(0.0).sqrt();
    }
    Some((mean, std))
}

impl Harmonizer for StatHarmonizer {
    fn harmonize(&self, composite: &Composite) -> Result<ImagePlane> {
        let img = &composite.image;
        let mask = &composite.mask;
        let (h, w) = img.dims();
        let fg = region_stats(img, |p| mask.is_set(p));
        let bg = region_stats(img, |p| !mask.is_set(p));
        let (Some((mf, sf)), Some((mb, sb))) = (fg, bg) else {
            return Ok(img.clone());
        };
        let k = self.params.strength;
        let soft = gaussian_blur(h, w, &mask.to_f32(), self.params.feather_sigma);
        let d = img.data();
        let mut out = vec![0.0f32; d.len()];
        for p in 0..h * w {
            for c in 0..3 {
                let x = d[p * 3 + c] as f64;
                let target_std = sf[c] + k * (sb[c] - sf[c]);
                let gain = if sf[c] > 1e-6 { target_std / sf[c] } else { 1.0 };
                let adj = (x - mf[c]) * gain + mf[c] + k * (mb[c] - mf[c]);
                let v = x + soft[p] as f64 * (adj - x);
                out[p * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
        ImagePlane::from_raw(h, w, out)
    }
}
