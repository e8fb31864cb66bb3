//! Built-in perceptual distance and image quality predictors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePlane, MIN_SIDE};
use crate::metrics::{AestheticModel, PerceptualMetric, QualityModel};
use crate::models::features::avg_pool2;
use crate::models::{orthonormal_columns, param_rng, to_f32, uniform_vec, Checkpoint, Role};
use crate::sampler::resize_bilinear;

pub const LPIPS_CHECKPOINT_ID: &str = "objmst-lpips-frame-v1";
pub const NIMA_CHECKPOINT_ID: &str = "objmst-nima-linear-v1";
pub const CONTRIQUE_CHECKPOINT_ID: &str = "objmst-contrique-linear-v1";

const LPIPS_BLOCK: usize = 2;
const LPIPS_IN: usize = LPIPS_BLOCK * LPIPS_BLOCK * 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LpipsParams {
    pub pools: Vec<usize>,
    pub hidden: usize,
    /// Per level: hidden × 12 frame, row-major.
    pub frames: Vec<Vec<f32>>,
    /// Per level: 2·hidden nonnegative channel weights.
    pub weights: Vec<Vec<f32>>,
}

pub fn builtin_lpips_checkpoint() -> Checkpoint<LpipsParams> {
    let pools = vec![1, 2, 4, 8];
    let hidden = 24;
    let mut rng = param_rng(0x1b1b_0005);
    let mut frames = Vec::new();
    let mut weights = Vec::new();
    for _ in &pools {
        frames.push(to_f32(orthonormal_columns(&mut rng, hidden, LPIPS_IN)));
        let w = uniform_vec(&mut rng, 2 * hidden, 0.5, 1.5);
        let s: f64 = w.iter().sum();
        weights.push(to_f32(w.into_iter().map(|v| v / s).collect()));
    }
    Checkpoint::new(
        Role::Lpips,
        LPIPS_CHECKPOINT_ID,
        LpipsParams {
            pools,
            hidden,
            frames,
            weights,
        },
    )
}

pub struct FrameLpips {
    params: LpipsParams,
}

impl FrameLpips {
    pub fn from_checkpoint(ck: Checkpoint<LpipsParams>) -> Result<Self> {
        let p = &ck.params;
        let ok = p.frames.len() == p.pools.len()
            && p.weights.len() == p.pools.len()
            && p.frames.iter().all(|f| f.len() == p.hidden * LPIPS_IN)
            && p.weights.iter().all(|w| w.len() == 2 * p.hidden && w.iter().all(|v| *v >= 0.0));
        if !ok {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "lpips parameter shapes".into(),
            });
        }
        Ok(Self { params: ck.params })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_lpips_checkpoint()).expect("builtin checkpoint")
    }

    /// Unit-normalised features, position-major (n × 2·hidden).
    fn features(&self, level: usize, h: usize, w: usize, data: &[f32]) -> (usize, Vec<f32>) {
        let hid = self.params.hidden;
        let frame = &self.params.frames[level];
        let (fh, fw) = (h / LPIPS_BLOCK, w / LPIPS_BLOCK);
        let n = fh * fw;
        let mut out = vec![0.0f32; n * 2 * hid];
        for by in 0..fh {
            for bx in 0..fw {
                let mut x = [0.0f32; LPIPS_IN];
                for dy in 0..LPIPS_BLOCK {
                    for dx in 0..LPIPS_BLOCK {
                        for c in 0..3 {
                            x[(dy * LPIPS_BLOCK + dx) * 3 + c] =
                                data[((by * LPIPS_BLOCK + dy) * w + bx * LPIPS_BLOCK + dx) * 3 + c] - 0.5;
                        }
                    }
                }
                let f = &mut out[(by * fw + bx) * 2 * hid..(by * fw + bx + 1) * 2 * hid];
                for r in 0..hid {
                    let v: f32 = frame[r * LPIPS_IN..(r + 1) * LPIPS_IN].iter().zip(&x).map(|(a, b)| a * b).sum();
                    f[r] = v.max(0.0);
                    f[hid + r] = (-v).max(0.0);
                }
                let norm = f.iter().map(|v| v * v).sum::<f32>().sqrt() + 1e-10;
                f.iter_mut().for_each(|v| *v /= norm);
            }
        }
        (n, out)
    }
}

impl PerceptualMetric for FrameLpips {
    fn distance(&self, image: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
        let image = if image.dims() != reference.dims() {
            resize_bilinear(image, reference.height(), reference.width())
        } else {
            image.clone()
        };
        let (mut h, mut w) = reference.dims();
        let mut a = image.into_data();
        let mut b = reference.data().to_vec();
        let mut level_pool = 1;
        let mut total = 0.0f64;
        let hid2 = 2 * self.params.hidden;
        for (level, &pool) in self.params.pools.iter().enumerate() {
            while level_pool < pool {
                (_, _, a) = avg_pool2(h, w, &a);
                let (nh, nw, nb) = avg_pool2(h, w, &b);
                (h, w, b) = (nh, nw, nb);
                level_pool *= 2;
            }
            if h < LPIPS_BLOCK || w < LPIPS_BLOCK {
                break;
            }
            let (n, fa) = self.features(level, h, w, &a);
            let (_, fb) = self.features(level, h, w, &b);
            let wts = &self.params.weights[level];
            let mut acc = 0.0f64;
            for p in 0..n {
                let mut d = 0.0f64;
                for c in 0..hid2 {
                    let diff = (fa[p * hid2 + c] - fb[p * hid2 + c]) as f64;
                    d += wts[c] as f64 * diff * diff;
                }
                acc += d;
            }
            total += acc / n as f64;
        }
        Ok(total)
    }
}

/// Global quality statistics: sharpness, colourfulness, contrast, exposure
/// deviation, luminance entropy, clipped fraction.
pub fn quality_descriptors(img: &ImagePlane) -> [f64; 6] {
    let (h, w) = img.dims();
    let d = img.data();
    let n = (h * w) as f64;
    let luma: Vec<f64> = (0..h * w)
        .map(|p| 0.299 * d[p * 3] as f64 + 0.587 * d[p * 3 + 1] as f64 + 0.114 * d[p * 3 + 2] as f64)
        .collect();
    let mut g = 0.0;
    let mut pairs = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                g += (luma[p + 1] - luma[p]).powi(2);
                pairs += 1;
            }
            if y + 1 < h {
                g += (luma[p + w] - luma[p]).powi(2);
                pairs += 1;
            }
        }
    }
    let sharpness = (g / pairs.max(1) as f64).sqrt();
    let (mut rg_s, mut rg_q, mut yb_s, mut yb_q) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..h * w {
        let (r, gg, b) = (d[p * 3] as f64, d[p * 3 + 1] as f64, d[p * 3 + 2] as f64);
        let rg = r - gg;
        let yb = 0.5 * (r + gg) - b;
        rg_s += rg;
        rg_q += rg * rg;
        yb_s += yb;
        yb_q += yb * yb;
    }
    let var = |s: f64, q: f64| (q / n - (s / n).powi(2)).max(0.0);
    let colourfulness = (var(rg_s, rg_q) + var(yb_s, yb_q)).sqrt() + 0.3 * ((rg_s / n).powi(2) + (yb_s / n).powi(2)).sqrt();
    let mean = luma.iter().sum::<f64>() / n;
    let contrast = (luma.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    let exposure = (mean - 0.5).abs();
    let mut hist = [0usize; 16];
    for l in &luma {
        hist[((l * 16.0) as usize).min(15)] += 1;
    }
    let entropy = -hist
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
        / 4.0;
    let clipped = luma.iter().filter(|l| **l < 0.02 || **l > 0.98).count() as f64 / n;
    [sharpness, colourfulness, contrast, exposure, entropy, clipped]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NimaParams {
    /// 10 × 6 logits weights, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn builtin_nima_checkpoint() -> Checkpoint<NimaParams> {
    let taste = [6.0, 4.0, 5.0, -6.0, 2.0, -5.0];
    let mut rng = param_rng(0x41aa_0006);
    let mut weights = Vec::with_capacity(60);
    let mut bias = Vec::with_capacity(10);
    for b in 0..10 {
        let u = (b as f64 - 4.5) / 4.5;
        for t in taste {
            weights.push((u * t + rng.random_range(-0.2..0.2)) as f32);
        }
        bias.push((-(b as f64 - 4.5).powi(2) / 8.0 - 1.2 * u) as f32);
    }
    Checkpoint::new(Role::Nima, NIMA_CHECKPOINT_ID, NimaParams { weights, bias })
}

pub struct LinearNima {
    params: NimaParams,
}

impl LinearNima {
    pub fn from_checkpoint(ck: Checkpoint<NimaParams>) -> Result<Self> {
        if ck.params.weights.len() != 60 || ck.params.bias.len() != 10 {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "nima needs 10 bins over 6 descriptors".into(),
            });
        }
        Ok(Self { params: ck.params })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_nima_checkpoint()).expect("builtin checkpoint")
    }

    pub fn distribution(&self, img: &ImagePlane) -> [f64; 10] {
        let q = quality_descriptors(img);
        let mut logits = [0.0f64; 10];
        for (b, l) in logits.iter_mut().enumerate() {
            *l = self.params.bias[b] as f64
                + (0..6).map(|i| self.params.weights[b * 6 + i] as f64 * q[i]).sum::<f64>();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p = logits.map(|l| (l - m).exp());
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }
}

impl AestheticModel for LinearNima {
    fn score(&self, img: &ImagePlane) -> Result<f64> {
        let p = self.distribution(img);
        let mean: f64 = p.iter().enumerate().map(|(b, v)| (b + 1) as f64 * v).sum();
        Ok(mean.clamp(1.0, 10.0))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContriqueParams {
    /// Weights over descriptors at full and half scale.
    pub nr_weights: Vec<f32>,
    pub nr_bias: f32,
    pub fr_scale: Vec<f32>,
    pub fr_kappa: f32,
}

pub fn builtin_contrique_checkpoint() -> Checkpoint<ContriqueParams> {
    let base = [4.0f32, 3.0, 3.0, -5.0, 1.0, -4.0];
    let nr_weights = base.iter().chain(base.iter()).map(|v| v * 0.5).collect();
    let scale = [0.05f32, 0.05, 0.05, 0.1, 0.25, 0.1];
    Checkpoint::new(
        Role::Contrique,
        CONTRIQUE_CHECKPOINT_ID,
        ContriqueParams {
            nr_weights,
            nr_bias: -1.5,
            fr_scale: scale.iter().chain(scale.iter()).copied().collect(),
            fr_kappa: 0.1,
        },
    )
}

pub struct LinearContrique {
    params: ContriqueParams,
}

impl LinearContrique {
    pub fn from_checkpoint(ck: Checkpoint<ContriqueParams>) -> Result<Self> {
        let p = &ck.params;
        if p.nr_weights.len() != 12 || p.fr_scale.len() != 12 || p.fr_scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "contrique parameter shapes".into(),
            });
        }
        Ok(Self { params: ck.params })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_contrique_checkpoint()).expect("builtin checkpoint")
    }

    fn representation(&self, img: &ImagePlane) -> [f64; 12] {
        let full = quality_descriptors(img);
        let half = if img.height() >= 2 * MIN_SIDE && img.width() >= 2 * MIN_SIDE {
            let (h, w, d) = avg_pool2(img.height(), img.width(), img.data());
            quality_descriptors(&ImagePlane::from_raw(h, w, d).expect("pooled buffer"))
        } else {
            full
        };
        let mut out = [0.0; 12];
        out[..6].copy_from_slice(&full);
        out[6..].copy_from_slice(&half);
        out
    }
}

impl QualityModel for LinearContrique {
    fn no_reference(&self, img: &ImagePlane) -> Result<f64> {
        let q = self.representation(img);
        let z: f64 = self.params.nr_bias as f64
            + q.iter().zip(&self.params.nr_weights).map(|(a, b)| a * *b as f64).sum::<f64>();
        Ok(100.0 / (1.0 + (-z).exp()))
    }

    fn full_reference(&self, img: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
        let a = self.representation(img);
        let b = self.representation(reference);
        let d2: f64 = (0..12)
            .map(|i| ((a[i] - b[i]) / self.params.fr_scale[i] as f64).powi(2))
            .sum();
        Ok((-(self.params.fr_kappa as f64) * d2).exp())
    }
}
