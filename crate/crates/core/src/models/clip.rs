//! Built-in joint text/image embedding model.
//!
//! Images are summarised by a differentiable vector of global appearance
//! statistics (colour, contrast, saturation, texture energy at two scales,
//! coarse layout). Standardised statistics are mapped into the shared space
//! by an orthonormal projection; both modalities additionally carry their own
//! constant offset (the gap between image and text clusters), and text
//! embeddings carry a lexical component no image can realise.

use serde::{Deserialize, Serialize};

use crate::clip_direction::{Embedding, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::models::{orthonormal_columns, param_rng, to_f32, uniform_vec, Checkpoint, Role};
use crate::sampler::SampleGrid;
use crate::seed::fnv1a;

/// Number of appearance statistics.
pub const NUM_STATS: usize = 12;
/// Statistics a text prompt can specify (layout terms stay neutral).
pub const NUM_STYLE_STATS: usize = 9;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const EPS: f64 = 1e-6;

pub const IMAGE_CHECKPOINT_ID: &str = "objmst-clip-image-ref-v1";
pub const TEXT_CHECKPOINT_ID: &str = "objmst-clip-text-ref-v1";
const SPACE_SEED: u64 = 0x0c11_9000;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageEncoderParams {
    pub input_size: usize,
    pub dim: usize,
    pub stat_mean: Vec<f64>,
    pub stat_scale: Vec<f64>,
    /// dim × NUM_STATS, row-major.
    pub projection: Vec<f32>,
    pub offset: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextEncoderParams {
    pub dim: usize,
    pub context_length: usize,
    pub stat_mean: Vec<f64>,
    pub stat_scale: Vec<f64>,
    pub projection: Vec<f32>,
    pub offset: Vec<f32>,
    /// dim × noise_rank lexical basis, row-major.
    pub lexical_basis: Vec<f32>,
    pub lexical_rank: usize,
    pub lexical_scale: f64,
    pub stopwords: Vec<String>,
    /// word → target style statistics (first NUM_STYLE_STATS entries).
    pub lexicon: Vec<(String, Vec<f64>)>,
}

struct SharedSpace {
    dim: usize,
    projection: Vec<f32>,
    image_offset: Vec<f32>,
    text_offset: Vec<f32>,
    lexical_basis: Vec<f32>,
    lexical_rank: usize,
}

fn shared_space() -> SharedSpace {
    let dim = 64;
    let mut rng = param_rng(SPACE_SEED);
    let q = to_f32(orthonormal_columns(&mut rng, dim, dim));
    let col = |c: usize| -> Vec<f32> { (0..dim).map(|r| q[r * dim + c]).collect() };
    let mut projection = vec![0.0f32; dim * NUM_STATS];
    for r in 0..dim {
        for c in 0..NUM_STATS {
            projection[r * NUM_STATS + c] = q[r * dim + c];
        }
    }
    let image_gap = 3.0f32;
    let text_gap = 3.0f32;
    let image_offset = col(NUM_STATS).into_iter().map(|v| v * image_gap).collect();
    let text_offset = col(NUM_STATS + 1).into_iter().map(|v| v * text_gap).collect();
    let lexical_rank = dim - NUM_STATS - 2;
    let mut lexical_basis = vec![0.0f32; dim * lexical_rank];
    for r in 0..dim {
        for c in 0..lexical_rank {
            lexical_basis[r * lexical_rank + c] = q[r * dim + NUM_STATS + 2 + c];
        }
    }
    SharedSpace {
        dim,
        projection,
        image_offset,
        text_offset,
        lexical_basis,
        lexical_rank,
    }
}

fn stat_normalisation() -> (Vec<f64>, Vec<f64>) {
    let mean = vec![0.5, 0.5, 0.5, 0.15, 0.12, 0.06, 0.06, 0.08, 0.03, 0.0, 0.0, 0.0];
    let scale = vec![0.2, 0.2, 0.2, 0.08, 0.1, 0.05, 0.05, 0.05, 0.03, 0.2, 0.2, 0.2];
    (mean, scale)
}

/// Target statistics: mean R, G, B, contrast, saturation, horizontal and
/// vertical fine texture, coarse texture, chroma texture.
fn lexicon() -> Vec<(String, Vec<f64>)> {
    let entries: &[(&str, [f64; NUM_STYLE_STATS])] = &[
        ("photo", [0.46, 0.44, 0.40, 0.20, 0.08, 0.05, 0.05, 0.07, 0.02]),
        ("ice", [0.80, 0.90, 0.97, 0.10, 0.09, 0.10, 0.10, 0.05, 0.03]),
        ("icy", [0.80, 0.90, 0.97, 0.10, 0.09, 0.10, 0.10, 0.05, 0.03]),
        ("snow", [0.92, 0.94, 0.97, 0.05, 0.02, 0.04, 0.04, 0.03, 0.01]),
        ("fire", [0.92, 0.40, 0.08, 0.22, 0.40, 0.07, 0.12, 0.12, 0.10]),
        ("flame", [0.92, 0.42, 0.10, 0.22, 0.40, 0.07, 0.12, 0.12, 0.10]),
        ("lava", [0.70, 0.18, 0.05, 0.28, 0.35, 0.07, 0.07, 0.15, 0.08]),
        ("desert", [0.86, 0.70, 0.44, 0.08, 0.18, 0.04, 0.03, 0.05, 0.02]),
        ("sand", [0.88, 0.74, 0.50, 0.07, 0.16, 0.09, 0.09, 0.03, 0.03]),
        ("green", [0.20, 0.72, 0.30, 0.15, 0.30, 0.05, 0.05, 0.07, 0.04]),
        ("crystal", [0.70, 0.82, 0.90, 0.25, 0.12, 0.15, 0.15, 0.10, 0.06]),
        ("starry", [0.18, 0.24, 0.55, 0.22, 0.20, 0.12, 0.12, 0.12, 0.06]),
        ("night", [0.10, 0.12, 0.28, 0.12, 0.10, 0.04, 0.04, 0.06, 0.02]),
        ("lisa", [0.85, 0.35, 0.80, 0.25, 0.42, 0.09, 0.09, 0.12, 0.12]),
        ("frank", [0.85, 0.35, 0.80, 0.25, 0.42, 0.09, 0.09, 0.12, 0.12]),
        ("copper", [0.72, 0.42, 0.25, 0.18, 0.22, 0.06, 0.06, 0.08, 0.04]),
        ("engraving", [0.55, 0.48, 0.40, 0.28, 0.06, 0.05, 0.20, 0.05, 0.02]),
        ("underwater", [0.10, 0.45, 0.60, 0.12, 0.22, 0.03, 0.03, 0.06, 0.02]),
        ("ocean", [0.12, 0.40, 0.62, 0.14, 0.24, 0.05, 0.05, 0.08, 0.03]),
        ("water", [0.20, 0.48, 0.70, 0.12, 0.20, 0.04, 0.04, 0.06, 0.02]),
        ("wave", [0.45, 0.55, 0.70, 0.22, 0.18, 0.08, 0.08, 0.12, 0.04]),
        ("money", [0.45, 0.58, 0.42, 0.18, 0.10, 0.14, 0.14, 0.07, 0.03]),
        ("gold", [0.85, 0.68, 0.20, 0.18, 0.32, 0.06, 0.06, 0.07, 0.04]),
        ("neon", [0.60, 0.20, 0.90, 0.30, 0.40, 0.10, 0.10, 0.12, 0.12]),
        ("watercolor", [0.70, 0.68, 0.66, 0.12, 0.12, 0.02, 0.02, 0.08, 0.03]),
        ("cubism", [0.60, 0.50, 0.38, 0.25, 0.15, 0.08, 0.08, 0.16, 0.05]),
        ("marble", [0.85, 0.84, 0.82, 0.10, 0.02, 0.05, 0.05, 0.06, 0.01]),
        ("wood", [0.55, 0.35, 0.18, 0.12, 0.20, 0.03, 0.09, 0.05, 0.02]),
        ("forest", [0.20, 0.40, 0.15, 0.16, 0.22, 0.09, 0.09, 0.10, 0.05]),
        ("autumn", [0.75, 0.45, 0.15, 0.18, 0.30, 0.08, 0.08, 0.10, 0.06]),
        ("sunset", [0.90, 0.50, 0.35, 0.20, 0.30, 0.03, 0.03, 0.10, 0.03]),
        ("rainbow", [0.60, 0.55, 0.55, 0.25, 0.45, 0.06, 0.06, 0.15, 0.15]),
        ("impressionism", [0.55, 0.55, 0.45, 0.15, 0.20, 0.09, 0.09, 0.09, 0.07]),
        ("baroque", [0.35, 0.25, 0.15, 0.25, 0.15, 0.06, 0.06, 0.10, 0.03]),
        ("painting", [0.52, 0.48, 0.42, 0.18, 0.16, 0.07, 0.07, 0.09, 0.05]),
        ("red", [0.85, 0.15, 0.12, 0.15, 0.38, 0.05, 0.05, 0.07, 0.04]),
        ("blue", [0.15, 0.25, 0.85, 0.15, 0.35, 0.05, 0.05, 0.07, 0.04]),
        ("stripes", [0.50, 0.50, 0.50, 0.30, 0.10, 0.22, 0.02, 0.10, 0.03]),
    ];
    entries
        .iter()
        .map(|(w, v)| (w.to_string(), v.to_vec()))
        .collect()
}

pub fn builtin_image_checkpoint() -> Checkpoint<ImageEncoderParams> {
    let space = shared_space();
    let (stat_mean, stat_scale) = stat_normalisation();
    Checkpoint::new(
        Role::EncoderImage,
        IMAGE_CHECKPOINT_ID,
        ImageEncoderParams {
            input_size: 64,
            dim: space.dim,
            stat_mean,
            stat_scale,
            projection: space.projection,
            offset: space.image_offset,
        },
    )
}

pub fn builtin_text_checkpoint() -> Checkpoint<TextEncoderParams> {
    let space = shared_space();
    let (stat_mean, stat_scale) = stat_normalisation();
    let stopwords = ["a", "an", "the", "of", "in", "on", "with", "and", "style", "by", "like", "plate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Checkpoint::new(
        Role::EncoderText,
        TEXT_CHECKPOINT_ID,
        TextEncoderParams {
            dim: space.dim,
            context_length: 77,
            stat_mean,
            stat_scale,
            projection: space.projection,
            offset: space.text_offset,
            lexical_basis: space.lexical_basis,
            lexical_rank: space.lexical_rank,
            lexical_scale: 0.8,
            stopwords,
            lexicon: lexicon(),
        },
    )
}

/// Appearance statistics with the intermediates needed for the backward pass.
struct StatTape {
    size: usize,
    luma: Vec<f64>,
    chroma: Vec<f64>,
    stats: [f64; NUM_STATS],
    luma_mean: f64,
    pooled: Vec<f64>,
}

fn pooled_side(size: usize) -> usize {
    (size / 4).max(1)
}

fn compute_stats(size: usize, pixels: &[f32]) -> StatTape {
    let n = size * size;
    let px: Vec<f64> = pixels.iter().map(|v| *v as f64).collect();
    let mut luma = vec![0.0; n];
    let mut chroma = vec![0.0; n * 3];
    let mut stats = [0.0f64; NUM_STATS];
    for p in 0..n {
        let l: f64 = (0..3).map(|c| LUMA[c] * px[p * 3 + c]).sum();
        luma[p] = l;
        for c in 0..3 {
            chroma[p * 3 + c] = px[p * 3 + c] - l;
            stats[c] += px[p * 3 + c];
        }
    }
    for s in stats.iter_mut().take(3) {
        *s /= n as f64;
    }
    let luma_mean = luma.iter().sum::<f64>() / n as f64;
    let var = luma.iter().map(|l| (l - luma_mean).powi(2)).sum::<f64>() / n as f64;
    stats[3] = (var + EPS).sqrt();
    let sat = chroma.iter().map(|q| q * q).sum::<f64>() / n as f64;
    stats[4] = (sat + EPS).sqrt();

    let (mut gh, mut gv, mut gq) = (0.0, 0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            if x + 1 < size {
                gh += (luma[p + 1] - luma[p]).powi(2);
                for c in 0..3 {
                    gq += (chroma[(p + 1) * 3 + c] - chroma[p * 3 + c]).powi(2);
                }
            }
            if y + 1 < size {
                gv += (luma[p + size] - luma[p]).powi(2);
                for c in 0..3 {
                    gq += (chroma[(p + size) * 3 + c] - chroma[p * 3 + c]).powi(2);
                }
            }
        }
    }
    let pairs = (size * (size - 1)).max(1) as f64;
    stats[5] = (gh / pairs + EPS).sqrt();
    stats[6] = (gv / pairs + EPS).sqrt();
    stats[8] = (gq / (2.0 * pairs) + EPS).sqrt();

    let ps = pooled_side(size);
    let cell = size / ps;
    let mut pooled = vec![0.0; ps * ps];
    for y in 0..ps * cell {
        for x in 0..ps * cell {
            pooled[(y / cell) * ps + x / cell] += luma[y * size + x];
        }
    }
    let cell_n = (cell * cell) as f64;
    pooled.iter_mut().for_each(|v| *v /= cell_n);
    let mut gc = 0.0;
    for y in 0..ps {
        for x in 0..ps {
            let p = y * ps + x;
            if x + 1 < ps {
                gc += (pooled[p + 1] - pooled[p]).powi(2);
            }
            if y + 1 < ps {
                gc += (pooled[p + ps] - pooled[p]).powi(2);
            }
        }
    }
    let cpairs = (2 * ps * ps.saturating_sub(1)).max(1) as f64;
    stats[7] = (gc / cpairs + EPS).sqrt();

    let layout = layout_weights(size);
    for (k, w) in layout.iter().enumerate() {
        stats[9 + k] = w.iter().zip(&luma).map(|(a, b)| a * b).sum();
    }

    StatTape {
        size,
        luma,
        chroma,
        stats,
        luma_mean,
        pooled,
    }
}

/// Linear luminance contrasts: centre−surround, top−bottom, left−right.
fn layout_weights(size: usize) -> [Vec<f64>; 3] {
    let n = size * size;
    let (lo, hi) = (size / 4, size - size / 4);
    let centre = |y: usize, x: usize| y >= lo && y < hi && x >= lo && x < hi;
    let n_centre = (0..n).filter(|p| centre(p / size, p % size)).count().max(1) as f64;
    let n_border = (n as f64 - n_centre).max(1.0);
    let half = (size / 2).max(1);
    let mut cs = vec![0.0; n];
    let mut tb = vec![0.0; n];
    let mut lr = vec![0.0; n];
    let top_n = (half * size) as f64;
    let bot_n = ((size - half) * size).max(1) as f64;
    for p in 0..n {
        let (y, x) = (p / size, p % size);
        cs[p] = if centre(y, x) { 1.0 / n_centre } else { -1.0 / n_border };
        tb[p] = if y < half { 1.0 / top_n } else { -1.0 / bot_n };
        lr[p] = if x < half { 1.0 / top_n } else { -1.0 / bot_n };
    }
    [cs, tb, lr]
}

fn stats_backward(tape: &StatTape, grad_stats: &[f64; NUM_STATS]) -> Vec<f64> {
    let size = tape.size;
    let n = size * size;
    let nf = n as f64;
    let mut g_px = vec![0.0; n * 3];
    let mut g_luma = vec![0.0; n];
    let mut g_chroma = vec![0.0; n * 3];

    for p in 0..n {
        for c in 0..3 {
            g_px[p * 3 + c] += grad_stats[c] / nf;
        }
    }
    let (s3, s4) = (tape.stats[3], tape.stats[4]);
    for p in 0..n {
        g_luma[p] += grad_stats[3] * (tape.luma[p] - tape.luma_mean) / (nf * s3);
        for c in 0..3 {
            g_chroma[p * 3 + c] += grad_stats[4] * tape.chroma[p * 3 + c] / (nf * s4);
        }
    }

    let pairs = (size * (size - 1)).max(1) as f64;
    let kh = grad_stats[5] / (pairs * tape.stats[5]);
    let kv = grad_stats[6] / (pairs * tape.stats[6]);
    let kq = grad_stats[8] / (2.0 * pairs * tape.stats[8]);
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            if x + 1 < size {
                let d = tape.luma[p + 1] - tape.luma[p];
                g_luma[p + 1] += kh * d;
                g_luma[p] -= kh * d;
                for c in 0..3 {
                    let d = tape.chroma[(p + 1) * 3 + c] - tape.chroma[p * 3 + c];
                    g_chroma[(p + 1) * 3 + c] += kq * d;
                    g_chroma[p * 3 + c] -= kq * d;
                }
            }
            if y + 1 < size {
                let d = tape.luma[p + size] - tape.luma[p];
                g_luma[p + size] += kv * d;
                g_luma[p] -= kv * d;
                for c in 0..3 {
                    let d = tape.chroma[(p + size) * 3 + c] - tape.chroma[p * 3 + c];
                    g_chroma[(p + size) * 3 + c] += kq * d;
                    g_chroma[p * 3 + c] -= kq * d;
                }
            }
        }
    }

    let ps = pooled_side(size);
    let cell = size / ps;
    let cpairs = (2 * ps * ps.saturating_sub(1)).max(1) as f64;
    let kc = grad_stats[7] / (cpairs * tape.stats[7]);
    let mut g_pool = vec![0.0; ps * ps];
    for y in 0..ps {
        for x in 0..ps {
            let p = y * ps + x;
            if x + 1 < ps {
                let d = tape.pooled[p + 1] - tape.pooled[p];
                g_pool[p + 1] += kc * d;
                g_pool[p] -= kc * d;
            }
            if y + 1 < ps {
                let d = tape.pooled[p + ps] - tape.pooled[p];
                g_pool[p + ps] += kc * d;
                g_pool[p] -= kc * d;
            }
        }
    }
    let cell_n = (cell * cell) as f64;
    for y in 0..ps * cell {
        for x in 0..ps * cell {
            g_luma[y * size + x] += g_pool[(y / cell) * ps + x / cell] / cell_n;
        }
    }

    let layout = layout_weights(size);
    for (k, w) in layout.iter().enumerate() {
        let gs = grad_stats[9 + k];
        if gs != 0.0 {
            for p in 0..n {
                g_luma[p] += gs * w[p];
            }
        }
    }

    // chroma_c = px_c − luma,  luma = Σ LUMA_c px_c
    for p in 0..n {
        let gq_sum: f64 = (0..3).map(|c| g_chroma[p * 3 + c]).sum();
        let gl = g_luma[p] - gq_sum;
        for c in 0..3 {
            g_px[p * 3 + c] += g_chroma[p * 3 + c] + LUMA[c] * gl;
        }
    }
    g_px
}

#[derive(Clone, Debug)]
pub struct RefImageEncoder {
    id: String,
    params: ImageEncoderParams,
}

impl RefImageEncoder {
    pub fn from_checkpoint(ck: Checkpoint<ImageEncoderParams>) -> Result<Self> {
        let p = &ck.params;
        if p.projection.len() != p.dim * NUM_STATS || p.offset.len() != p.dim {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "projection shape".into(),
            });
        }
        Ok(Self {
            id: ck.checkpoint_id,
            params: ck.params,
        })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_image_checkpoint()).expect("builtin checkpoint")
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    fn input_grid(&self, img: &ImagePlane) -> Option<SampleGrid> {
        let s = self.params.input_size;
        (img.dims() != (s, s)).then(|| SampleGrid::resize(img.height(), img.width(), s, s))
    }

    /// Standardised appearance statistics of an image.
    pub fn stats(&self, img: &ImagePlane) -> [f64; NUM_STATS] {
        let s = self.params.input_size;
        let resized = self.input_grid(img).map(|g| g.apply(img));
        let px = resized.as_ref().unwrap_or(img).data();
        let raw = compute_stats(s, px).stats;
        let mut out = [0.0; NUM_STATS];
        for i in 0..NUM_STATS {
            out[i] = (raw[i] - self.params.stat_mean[i]) / self.params.stat_scale[i];
        }
        out
    }

    fn embed_stats(&self, g: &[f64; NUM_STATS]) -> Vec<f64> {
        let p = &self.params;
        (0..p.dim)
            .map(|r| {
                let proj: f64 = (0..NUM_STATS)
                    .map(|c| p.projection[r * NUM_STATS + c] as f64 * g[c])
                    .sum();
                proj + p.offset[r] as f64
            })
            .collect()
    }
}

impl ImageEncoder for RefImageEncoder {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn encode_image(&self, img: &ImagePlane) -> Result<Embedding> {
        Embedding::new(self.embed_stats(&self.stats(img)))
    }

    fn backward(&self, img: &ImagePlane, grad: &[f64]) -> Result<Vec<f32>> {
        let p = &self.params;
        if grad.len() != p.dim {
            return Err(Error::SizeMismatch(format!(
                "embedding gradient has {} entries, encoder dim is {}",
                grad.len(),
                p.dim
            )));
        }
        let s = p.input_size;
        let grid = self.input_grid(img);
        let resized = grid.as_ref().map(|g| g.apply(img));
        let px = resized.as_ref().unwrap_or(img).data();
        let tape = compute_stats(s, px);
        let mut g_stats = [0.0; NUM_STATS];
        for (c, gs) in g_stats.iter_mut().enumerate() {
            let gg: f64 = (0..p.dim)
                .map(|r| p.projection[r * NUM_STATS + c] as f64 * grad[r])
                .sum();
            *gs = gg / p.stat_scale[c];
        }
        let g_px: Vec<f32> = stats_backward(&tape, &g_stats)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Ok(match grid {
            Some(g) => g.apply_transpose(&g_px),
            None => g_px,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RefTextEncoder {
    id: String,
    params: TextEncoderParams,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl RefTextEncoder {
    pub fn from_checkpoint(ck: Checkpoint<TextEncoderParams>) -> Result<Self> {
        let p = &ck.params;
        if p.projection.len() != p.dim * NUM_STATS
            || p.lexical_basis.len() != p.dim * p.lexical_rank
            || p.lexicon.iter().any(|(_, v)| v.len() != NUM_STYLE_STATS)
        {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "parameter shapes".into(),
            });
        }
        Ok(Self {
            id: ck.checkpoint_id,
            params: ck.params,
        })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_text_checkpoint()).expect("builtin checkpoint")
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    /// Standardised target statistics implied by the prompt.
    pub fn stats(&self, text: &str) -> [f64; NUM_STATS] {
        let p = &self.params;
        let mut acc = [0.0; NUM_STATS];
        let mut count = 0usize;
        for tok in tokenize(text) {
            if p.stopwords.contains(&tok) {
                continue;
            }
            let raw: Vec<f64> = match p.lexicon.iter().find(|(w, _)| *w == tok) {
                Some((_, v)) => v.clone(),
                None => {
                    let mut rng = param_rng(fnv1a(&tok));
                    uniform_vec(&mut rng, NUM_STYLE_STATS, 0.0, 1.0)
                        .iter()
                        .enumerate()
                        .map(|(i, u)| p.stat_mean[i] + p.stat_scale[i] * (3.0 * u - 1.5))
                        .collect()
                }
            };
            for i in 0..NUM_STYLE_STATS {
                acc[i] += (raw[i] - p.stat_mean[i]) / p.stat_scale[i];
            }
            count += 1;
        }
        if count > 0 {
            acc.iter_mut().for_each(|v| *v /= count as f64);
        }
        acc
    }
}

impl TextEncoder for RefTextEncoder {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let p = &self.params;
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        // Start and end markers occupy two slots of the context.
        if tokens.len() + 2 > p.context_length {
            return Err(Error::TextTooLong {
                tokens: tokens.len() + 2,
                limit: p.context_length,
            });
        }
        let g = self.stats(text);
        let canonical = tokens.join(" ");
        let mut rng = param_rng(fnv1a(&canonical) ^ 0x7e47);
        let mut lex = uniform_vec(&mut rng, p.lexical_rank, -1.0, 1.0);
        let n = lex.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        lex.iter_mut().for_each(|v| *v *= p.lexical_scale / n);
        let values = (0..p.dim)
            .map(|r| {
                let proj: f64 = (0..NUM_STATS)
                    .map(|c| p.projection[r * NUM_STATS + c] as f64 * g[c])
                    .sum();
                let lexical: f64 = (0..p.lexical_rank)
                    .map(|c| p.lexical_basis[r * p.lexical_rank + c] as f64 * lex[c])
                    .sum();
                proj + lexical + p.offset[r] as f64
            })
            .collect();
        Embedding::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(size: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(size, size, |y, x| {
            let base = ((x as f32 / 7.0).sin() * 0.3 + 0.5, (y as f32 / 5.0).cos() * 0.2 + 0.4);
            [
                base.0 + rng.random_range(-0.1..0.1),
                base.1 + rng.random_range(-0.1..0.1),
                0.5 + rng.random_range(-0.2..0.2),
            ]
        })
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let enc = RefImageEncoder::builtin();
        let img = noise_image(80, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dir: Vec<f64> = (0..enc.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |im: &ImagePlane| -> f64 {
            let e = enc.encode_image(im).unwrap();
            e.values().iter().zip(&dir).map(|(a, b)| a * b).sum()
        };
        let grad = enc.backward(&img, &dir).unwrap();
        let h = 1e-3f32;
        for &i in &[0usize, 17, 455, 3001, 9000, 15000, 19199] {
            let mut plus = img.clone();
            plus.data_mut()[i] += h;
            let mut minus = img.clone();
            minus.data_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h as f64);
            let an = grad[i] as f64;
            assert!(
                (fd - an).abs() <= 2e-3 * fd.abs().max(an.abs()) + 2e-3,
                "pixel {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn text_limits() {
        let enc = RefTextEncoder::builtin();
        assert!(matches!(enc.encode_text("  "), Err(Error::EmptyText)));
        let long = vec!["ice"; 80].join(" ");
        assert!(matches!(enc.encode_text(&long), Err(Error::TextTooLong { .. })));
    }

    #[test]
    fn unknown_words_are_deterministic() {
        let enc = RefTextEncoder::builtin();
        let a = enc.encode_text("zorblax").unwrap();
        let b = enc.encode_text("zorblax").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, enc.encode_text("quuxle").unwrap());
    }
}
