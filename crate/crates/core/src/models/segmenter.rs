//! Built-in saliency segmenter: colour contrast against the frame border,
//! weighted by a centre prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, ImagePlane};
use crate::ingest::Segmenter;
use crate::models::{Checkpoint, Role};

pub const CHECKPOINT_ID: &str = "objmst-border-saliency-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmenterParams {
    /// Border band width as a fraction of the shorter side.
    pub border: f64,
    pub blur_sigma: f32,
    /// Attenuation at the frame corners, in [0, 1).
    pub centre_bias: f64,
}

pub fn builtin_checkpoint() -> Checkpoint<SegmenterParams> {
    Checkpoint::new(
        Role::Segmenter,
        CHECKPOINT_ID,
        SegmenterParams {
            border: 0.06,
            blur_sigma: 2.0,
            centre_bias: 0.3,
        },
    )
}

pub struct SaliencySegmenter {
    params: SegmenterParams,
}

impl SaliencySegmenter {
    pub fn from_checkpoint(ck: Checkpoint<SegmenterParams>) -> Result<Self> {
        let p = &ck.params;
        if !(p.border > 0.0 && p.border < 0.5) || !(0.0..1.0).contains(&p.centre_bias) {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "segmenter parameters out of range".into(),
            });
        }
        Ok(Self { params: ck.params })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_checkpoint()).expect("builtin checkpoint")
    }
}

impl Segmenter for SaliencySegmenter {
    fn propose(&self, image: &ImagePlane) -> Result<Vec<f32>> {
        let (h, w) = image.dims();
        let d = image.data();
        let band = ((h.min(w) as f64 * self.params.border).ceil() as usize).max(1);
        let in_border = |y: usize, x: usize| y < band || x < band || y >= h - band || x >= w - band;
        let mut ref_col = [0.0f64; 3];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if in_border(y, x) {
                    for c in 0..3 {
                        ref_col[c] += d[(y * w + x) * 3 + c] as f64;
                    }
                    n += 1;
                }
            }
        }
        ref_col.iter_mut().for_each(|v| *v /= n as f64);
        let mut sal = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let dist: f64 = (0..3).map(|c| (d[p * 3 + c] as f64 - ref_col[c]).powi(2)).sum::<f64>().sqrt();
                let ry = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                let rx = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let prior = 1.0 - self.params.centre_bias * ((ry * ry + rx * rx) / 2.0);
                sal[p] = (dist * prior) as f32;
            }
        }
        let sal = gaussian_blur(h, w, &sal, self.params.blur_sigma);
        let max = sal.iter().cloned().fold(0.0f32, f32::max);
        if max <= 0.0 {
            return Ok(vec![0.0; h * w]);
        }
        Ok(sal.into_iter().map(|v| v / max).collect())
    }
}
