//! Built-in feature encoder, decoder and attention-mapper checkpoints.
//!
//! The encoder describes every 4×4 pixel block of a level image by its
//! coordinates in an overcomplete orthonormal frame, split into positive and
//! negative parts (`relu(Px)`, `relu(−Px)`). Level images are the input
//! average-pooled by 1, 2 and 4, giving total strides 4, 8 and 16. The
//! decoder applies the frame's synthesis operator per level and recombines
//! the three level images as a Laplacian pyramid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::models::{orthonormal_columns, param_rng, to_f32, Checkpoint, Role};
use crate::s2k_transfer::{FeatureDecoder, FeatureEncoder, FeatureMap, FeaturePyramid, LAYER_TAGS};
use crate::sampler::SampleGrid;

pub const BLOCK: usize = 4;
pub const BLOCK_DIM: usize = BLOCK * BLOCK * 3;

pub const ENCODER_CHECKPOINT_ID: &str = "objmst-block-frame-enc-v1";
pub const DECODER_CHECKPOINT_ID: &str = "objmst-block-frame-dec-v1";
pub const MAPPER_CHECKPOINT_ID: &str = "objmst-s2k-mapper-v1";
const FRAME_SEED: u64 = 0xfea7_0003;
const MAPPER_SEED: u64 = 0x52c0_0004;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLevel {
    pub tag: String,
    /// Average-pooling factor applied to the input before blocking.
    pub pool: usize,
    pub hidden: usize,
    /// hidden × BLOCK_DIM, row-major, orthonormal columns.
    pub analysis: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderParams {
    pub levels: Vec<EncoderLevel>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLevel {
    pub tag: String,
    pub pool: usize,
    pub hidden: usize,
    /// BLOCK_DIM × hidden, row-major.
    pub synthesis: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderParams {
    pub levels: Vec<DecoderLevel>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapperLevel {
    pub tag: String,
    pub channels: usize,
    /// key_dim × channels, row-major; shared by queries and keys.
    pub projection: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapperParams {
    pub key_dim: usize,
    /// Side of the square style window aggregated into one distributed key.
    pub key_window: usize,
    /// Side of the content region used for the coarse attention pass.
    pub query_region: usize,
    /// Key budget for dense attention; larger key sets are strided down.
    pub max_dense_keys: usize,
    pub levels: Vec<MapperLevel>,
}

fn frame(level: usize, hidden: usize) -> Vec<f32> {
    let mut rng = param_rng(FRAME_SEED + level as u64);
    to_f32(orthonormal_columns(&mut rng, hidden, BLOCK_DIM))
}

fn level_layout() -> [(usize, usize); 3] {
    [(1, 128), (2, 256), (4, 256)]
}

pub fn builtin_encoder_checkpoint() -> Checkpoint<EncoderParams> {
    let levels = level_layout()
        .iter()
        .enumerate()
        .map(|(i, &(pool, hidden))| EncoderLevel {
            tag: LAYER_TAGS[i].into(),
            pool,
            hidden,
            analysis: frame(i, hidden),
        })
        .collect();
    Checkpoint::new(Role::VggEncoder, ENCODER_CHECKPOINT_ID, EncoderParams { levels })
}

pub fn builtin_decoder_checkpoint() -> Checkpoint<DecoderParams> {
    let levels = level_layout()
        .iter()
        .enumerate()
        .map(|(i, &(pool, hidden))| {
            let a = frame(i, hidden);
            let mut synthesis = vec![0.0f32; BLOCK_DIM * hidden];
            for r in 0..hidden {
                for c in 0..BLOCK_DIM {
                    synthesis[c * hidden + r] = a[r * BLOCK_DIM + c];
                }
            }
            DecoderLevel {
                tag: LAYER_TAGS[i].into(),
                pool,
                hidden,
                synthesis,
            }
        })
        .collect();
    Checkpoint::new(Role::Decoder, DECODER_CHECKPOINT_ID, DecoderParams { levels })
}

pub fn builtin_mapper_checkpoint() -> Checkpoint<MapperParams> {
    let key_dim = 32;
    let levels = level_layout()
        .iter()
        .enumerate()
        .map(|(i, &(_, hidden))| {
            let channels = 2 * hidden;
            let mut rng = param_rng(MAPPER_SEED + i as u64);
            let cols = orthonormal_columns(&mut rng, channels, key_dim);
            let mut projection = vec![0.0f64; key_dim * channels];
            for r in 0..channels {
                for c in 0..key_dim {
                    projection[c * channels + r] = cols[r * key_dim + c];
                }
            }
            MapperLevel {
                tag: LAYER_TAGS[i].into(),
                channels,
                projection: to_f32(projection),
            }
        })
        .collect();
    Checkpoint::new(
        Role::S2kMapper,
        MAPPER_CHECKPOINT_ID,
        MapperParams {
            key_dim,
            key_window: 4,
            query_region: 4,
            max_dense_keys: 4096,
            levels,
        },
    )
}

/// 2×2 box average; odd trailing rows/columns are dropped.
pub fn avg_pool2(h: usize, w: usize, data: &[f32]) -> (usize, usize, Vec<f32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow * 3];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let s = data[((2 * y) * w + 2 * x) * 3 + c]
                    + data[((2 * y) * w + 2 * x + 1) * 3 + c]
                    + data[((2 * y + 1) * w + 2 * x) * 3 + c]
                    + data[((2 * y + 1) * w + 2 * x + 1) * 3 + c];
                out[(y * ow + x) * 3 + c] = s * 0.25;
            }
        }
    }
    (oh, ow, out)
}

fn upsample2(h: usize, w: usize, data: Vec<f32>) -> Vec<f32> {
    let img = ImagePlane::from_raw(h, w, data).expect("level buffer");
    SampleGrid::resize(h, w, 2 * h, 2 * w).apply(&img).into_data()
}

pub struct BlockFrameEncoder {
    id: String,
    params: EncoderParams,
}

impl BlockFrameEncoder {
    pub fn from_checkpoint(ck: Checkpoint<EncoderParams>) -> Result<Self> {
        let ok = ck.params.levels.len() == 3
            && ck.params.levels.iter().enumerate().all(|(i, l)| {
                l.tag == LAYER_TAGS[i] && l.analysis.len() == l.hidden * BLOCK_DIM && l.pool == 1 << i
            });
        if !ok {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "encoder level layout".into(),
            });
        }
        Ok(Self {
            id: ck.checkpoint_id,
            params: ck.params,
        })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_encoder_checkpoint()).expect("builtin checkpoint")
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }
}

impl FeatureEncoder for BlockFrameEncoder {
    fn channels(&self) -> [usize; 3] {
        let l = &self.params.levels;
        [2 * l[0].hidden, 2 * l[1].hidden, 2 * l[2].hidden]
    }

    fn extract(&self, image: &ImagePlane) -> Result<FeaturePyramid> {
        let (h, w) = image.dims();
        let stride = BLOCK * 4;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::SizeMismatch(format!(
                "feature extraction needs sides divisible by {stride}, got {h}x{w}"
            )));
        }
        let mut level_imgs = vec![(h, w, image.data().to_vec())];
        for _ in 1..3 {
            let (lh, lw, d) = level_imgs.last().unwrap();
            level_imgs.push(avg_pool2(*lh, *lw, d));
        }
        let mut levels = Vec::with_capacity(3);
        for (lp, (lh, lw, d)) in self.params.levels.iter().zip(&level_imgs) {
            let (fh, fw) = (lh / BLOCK, lw / BLOCK);
            let hid = lp.hidden;
            let c = 2 * hid;
            let n = fh * fw;
            let mut data = vec![0.0f32; c * n];
            let cols: Vec<Vec<f32>> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let (by, bx) = (p / fw, p % fw);
                    let mut x = [0.0f32; BLOCK_DIM];
                    for dy in 0..BLOCK {
                        for dx in 0..BLOCK {
                            for ch in 0..3 {
                                let src = ((by * BLOCK + dy) * lw + bx * BLOCK + dx) * 3 + ch;
                                x[(dy * BLOCK + dx) * 3 + ch] = d[src] - 0.5;
                            }
                        }
                    }
                    let mut f = vec![0.0f32; c];
                    for r in 0..hid {
                        let row = &lp.analysis[r * BLOCK_DIM..(r + 1) * BLOCK_DIM];
                        let v: f32 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
                        f[r] = v.max(0.0);
                        f[hid + r] = (-v).max(0.0);
                    }
                    f
                })
                .collect();
            for (p, f) in cols.iter().enumerate() {
                for (ch, v) in f.iter().enumerate() {
                    data[ch * n + p] = *v;
                }
            }
            levels.push(FeatureMap {
                tag: lp.tag.clone(),
                channels: c,
                height: fh,
                width: fw,
                data,
            });
        }
        Ok(FeaturePyramid {
            levels,
            source_resolution: (h, w),
        })
    }
}

pub struct BlockFrameDecoder {
    id: String,
    params: DecoderParams,
}

impl BlockFrameDecoder {
    pub fn from_checkpoint(ck: Checkpoint<DecoderParams>) -> Result<Self> {
        let ok = ck.params.levels.len() == 3
            && ck.params.levels.iter().enumerate().all(|(i, l)| {
                l.tag == LAYER_TAGS[i] && l.synthesis.len() == l.hidden * BLOCK_DIM && l.pool == 1 << i
            });
        if !ok {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "decoder level layout".into(),
            });
        }
        Ok(Self {
            id: ck.checkpoint_id,
            params: ck.params,
        })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_decoder_checkpoint()).expect("builtin checkpoint")
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    fn synthesize(&self, level: &DecoderLevel, map: &FeatureMap) -> Vec<f32> {
        let hid = level.hidden;
        let (fh, fw) = (map.height, map.width);
        let (lh, lw) = (fh * BLOCK, fw * BLOCK);
        let n = fh * fw;
        let mut out = vec![0.0f32; lh * lw * 3];
        out.par_chunks_mut(lw * 3 * BLOCK).enumerate().for_each(|(by, band)| {
            for bx in 0..fw {
                let p = by * fw + bx;
                let coef: Vec<f32> = (0..hid)
                    .map(|r| map.data[r * n + p] - map.data[(hid + r) * n + p])
                    .collect();
                for k in 0..BLOCK_DIM {
                    let row = &level.synthesis[k * hid..(k + 1) * hid];
                    let v: f32 = row.iter().zip(&coef).map(|(a, b)| a * b).sum();
                    let (dy, rem) = (k / (BLOCK * 3), k % (BLOCK * 3));
                    let (dx, ch) = (rem / 3, rem % 3);
                    band[(dy * lw + bx * BLOCK + dx) * 3 + ch] = v + 0.5;
                }
            }
        });
        out
    }
}

impl FeatureDecoder for BlockFrameDecoder {
    fn decode(&self, feats: &FeaturePyramid) -> Result<ImagePlane> {
        if feats.levels.len() != 3 {
            return Err(Error::LevelMismatch(format!("expected 3 levels, got {}", feats.levels.len())));
        }
        for (i, (lp, map)) in self.params.levels.iter().zip(&feats.levels).enumerate() {
            if map.tag != lp.tag || map.channels != 2 * lp.hidden {
                return Err(Error::LevelMismatch(format!(
                    "level {i}: decoder expects {} with {} channels, got {} with {}",
                    lp.tag,
                    2 * lp.hidden,
                    map.tag,
                    map.channels
                )));
            }
        }
        let (h, w) = feats.source_resolution;
        for (i, map) in feats.levels.iter().enumerate() {
            let pool = 1 << i;
            if map.height * BLOCK * pool != h || map.width * BLOCK * pool != w {
                return Err(Error::LevelMismatch(format!(
                    "level {} is {}x{}, inconsistent with source {h}x{w}",
                    map.tag, map.height, map.width
                )));
            }
        }
        let imgs: Vec<Vec<f32>> = self
            .params
            .levels
            .iter()
            .zip(&feats.levels)
            .map(|(lp, map)| self.synthesize(lp, map))
            .collect();
        // final = (L3 − U D L3) + U (L4 − U D L4) + U U L5
        let band = |lh: usize, lw: usize, img: &[f32]| -> Vec<f32> {
            let (dh, dw, down) = avg_pool2(lh, lw, img);
            let up = upsample2(dh, dw, down);
            img.iter().zip(&up).map(|(a, b)| a - b).collect()
        };
        let (h4, w4) = (h / 2, w / 2);
        let (h5, w5) = (h / 4, w / 4);
        let high = band(h, w, &imgs[0]);
        let mid = upsample2(h4, w4, band(h4, w4, &imgs[1]));
        let low = upsample2(h4, w4, upsample2(h5, w5, imgs[2].clone()));
        let mut data: Vec<f32> = (0..h * w * 3).map(|i| high[i] + mid[i] + low[i]).collect();
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        ImagePlane::from_raw(h, w, data)
    }
}
