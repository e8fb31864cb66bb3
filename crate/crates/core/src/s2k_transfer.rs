//! Multi-scale feature transfer: encoder pyramids, salient-to-key and dense
//! attention mappers, decoding, and masked foreground stylization.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{BinaryMask, ImagePlane};
use crate::ingest::apply_mask;
use crate::inversion::{StyleRepresentation, Target};
use crate::models::features::MapperParams;
use crate::models::Checkpoint;
use crate::models::Role;

pub const LAYER_TAGS: [&str; 3] = ["relu3_1", "relu4_1", "relu5_1"];

/// One level, stored channel-major (C × H × W).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tag: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Position-major copy (H·W × C).
    fn transposed(&self) -> Vec<f32> {
        let n = self.positions();
        let mut out = vec![0.0f32; n * self.channels];
        for c in 0..self.channels {
            for p in 0..n {
                out[p * self.channels + c] = self.data[c * n + p];
            }
        }
        out
    }

    fn from_position_major(tag: &str, channels: usize, height: usize, width: usize, pm: &[f32]) -> Self {
        let n = height * width;
        let mut data = vec![0.0f32; n * channels];
        for p in 0..n {
            for c in 0..channels {
                data[c * n + p] = pm[p * channels + c];
            }
        }
        Self {
            tag: tag.into(),
            channels,
            height,
            width,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    pub source_resolution: (usize, usize),
}

impl FeaturePyramid {
    pub fn level(&self, tag: &str) -> Option<&FeatureMap> {
        self.levels.iter().find(|l| l.tag == tag)
    }

    /// Binary dump: per level a header (tag length u32, tag bytes, C, H, W as
    /// u32) followed by C·H·W float32 values, all little-endian.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.levels {
            out.extend((l.tag.len() as u32).to_le_bytes());
            out.extend(l.tag.as_bytes());
            for v in [l.channels, l.height, l.width] {
                out.extend((v as u32).to_le_bytes());
            }
            for v in &l.data {
                out.write_all(&v.to_le_bytes()).expect("vec write");
            }
        }
        out
    }

    pub fn from_dump_bytes(bytes: &[u8], source_resolution: (usize, usize)) -> Result<Self> {
        let bad = || Error::LevelMismatch("truncated pyramid dump".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        let mut levels = Vec::new();
        loop {
            let Ok(len) = take(4) else { break };
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let tag = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?;
            let mut dims = [0usize; 3];
            for d in &mut dims {
                *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            }
            let n = dims[0] * dims[1] * dims[2];
            let raw = take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            levels.push(FeatureMap {
                tag,
                channels: dims[0],
                height: dims[1],
                width: dims[2],
                data,
            });
        }
        Ok(Self {
            levels,
            source_resolution,
        })
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_dump_bytes())
    }
}

pub trait FeatureEncoder: Send + Sync {
    fn channels(&self) -> [usize; 3];
    fn extract(&self, image: &ImagePlane) -> Result<FeaturePyramid>;
}

pub trait FeatureDecoder: Send + Sync {
    fn decode(&self, feats: &FeaturePyramid) -> Result<ImagePlane>;
}

/// Row-stochastic attention weights of one level (queries × keys).
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub tag: String,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f32>,
    pub key_layout: String,
}

impl AttentionMap {
    pub fn row(&self, q: usize) -> &[f32] {
        &self.weights[q * self.keys..(q + 1) * self.keys]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StylePooling {
    /// One attention over the union of all representations' keys.
    #[default]
    Concat,
    /// Transfer against each representation separately, then average.
    PerRepAverage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    S2k,
    A2a,
}

const NORM_EPS: f32 = 1e-5;

/// Per-channel instance normalisation (position-major in and out).
fn instance_norm(pm: &[f32], n: usize, c: usize) -> Vec<f32> {
    let mut mean = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for p in 0..n {
        for ch in 0..c {
            let v = pm[p * c + ch] as f64;
            mean[ch] += v;
            sq[ch] += v * v;
        }
    }
    let inv: Vec<(f32, f32)> = (0..c)
        .map(|ch| {
            let m = mean[ch] / n as f64;
            let var = (sq[ch] / n as f64 - m * m).max(0.0);
            (m as f32, 1.0 / ((var as f32) + NORM_EPS).sqrt())
        })
        .collect();
    let mut out = vec![0.0f32; n * c];
    for p in 0..n {
        for ch in 0..c {
            out[p * c + ch] = (pm[p * c + ch] - inv[ch].0) * inv[ch].1;
        }
    }
    out
}

fn project(w: &[f32], m: usize, c: usize, x: &[f32]) -> Vec<f32> {
    (0..m)
        .map(|r| w[r * c..(r + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Keys prepared for one level: projected keys plus first and second value moments.
struct KeySet {
    m: usize,
    c: usize,
    keys: Vec<f32>,
    v1: Vec<f32>,
    v2: Vec<f32>,
    /// Key index in the next-coarser level's key set, for the progressive prior.
    parent: Vec<usize>,
    layout: String,
}

impl KeySet {
    fn len(&self) -> usize {
        self.v1.len() / self.c
    }
}

struct Prior<'a> {
    log_coarse: &'a [f32],
    coarse_keys: usize,
    query_parent: Vec<usize>,
    key_parent: &'a [usize],
}

struct Attended {
    mean: Vec<f32>,
    spread: Vec<f32>,
    weights: Option<Vec<f32>>,
}

fn attend(queries: &[f32], nq: usize, ks: &KeySet, tau: f32, prior: Option<&Prior<'_>>, keep: bool) -> Attended {
    let (m, c, nk) = (ks.m, ks.c, ks.len());
    let rows: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = (0..nq)
        .into_par_iter()
        .map(|i| {
            let q = &queries[i * m..(i + 1) * m];
            let mut logits: Vec<f32> = (0..nk)
                .map(|j| q.iter().zip(&ks.keys[j * m..(j + 1) * m]).map(|(a, b)| a * b).sum::<f32>() / tau)
                .collect();
            if let Some(pr) = prior {
                let row = &pr.log_coarse[pr.query_parent[i] * pr.coarse_keys..(pr.query_parent[i] + 1) * pr.coarse_keys];
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += row[pr.key_parent[j]];
                }
            }
            let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                sum += *l;
            }
            logits.iter_mut().for_each(|l| *l /= sum);
            let mut mean = vec![0.0f32; c];
            let mut second = vec![0.0f32; c];
            for (j, a) in logits.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let v1 = &ks.v1[j * c..(j + 1) * c];
                let v2 = &ks.v2[j * c..(j + 1) * c];
                for ch in 0..c {
                    mean[ch] += a * v1[ch];
                    second[ch] += a * v2[ch];
                }
            }
            let spread = (0..c).map(|ch| (second[ch] - mean[ch] * mean[ch]).max(0.0).sqrt()).collect();
            (mean, spread, if keep { logits } else { Vec::new() })
        })
        .collect();
    let mut mean = Vec::with_capacity(nq * c);
    let mut spread = Vec::with_capacity(nq * c);
    let mut weights = keep.then(|| Vec::with_capacity(nq * nk));
    for (mn, sp, w) in rows {
        mean.extend(mn);
        spread.extend(sp);
        if let Some(ws) = weights.as_mut() {
            ws.extend(w);
        }
    }
    Attended { mean, spread, weights }
}

pub struct AttentionMapper {
    id: String,
    params: MapperParams,
}

impl AttentionMapper {
    pub fn from_checkpoint(ck: Checkpoint<MapperParams>) -> Result<Self> {
        let p = &ck.params;
        let ok = ck.role == Role::S2kMapper
            && p.levels.len() == 3
            && p.key_window >= 1
            && p.query_region >= 1
            && p.max_dense_keys >= 1
            && p.levels
                .iter()
                .enumerate()
                .all(|(i, l)| l.tag == LAYER_TAGS[i] && l.projection.len() == p.key_dim * l.channels);
        if !ok {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "mapper level layout".into(),
            });
        }
        Ok(Self {
            id: ck.checkpoint_id,
            params: ck.params,
        })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(crate::models::features::builtin_mapper_checkpoint()).expect("builtin checkpoint")
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    fn check(&self, content: &FeaturePyramid, styles: &[FeaturePyramid]) -> Result<()> {
        if styles.is_empty() {
            return Err(Error::LevelMismatch("no style pyramids".into()));
        }
        for pyr in std::iter::once(content).chain(styles) {
            if pyr.levels.len() != 3 {
                return Err(Error::LevelMismatch(format!("expected 3 levels, got {}", pyr.levels.len())));
            }
            for (lp, map) in self.params.levels.iter().zip(&pyr.levels) {
                if map.tag != lp.tag || map.channels != lp.channels {
                    return Err(Error::LevelMismatch(format!(
                        "mapper expects {} with {} channels, got {} with {}",
                        lp.tag, lp.channels, map.tag, map.channels
                    )));
                }
                if map.data.len() != map.channels * map.positions() || map.positions() == 0 {
                    return Err(Error::LevelMismatch(format!("{} buffer does not match its shape", map.tag)));
                }
            }
        }
        Ok(())
    }

    fn tau(&self) -> f32 {
        1.0
    }

    fn queries(&self, level: usize, map: &FeatureMap) -> (Vec<f32>, Vec<f32>) {
        let c = map.channels;
        let n = map.positions();
        let normed = instance_norm(&map.transposed(), n, c);
        let w = &self.params.levels[level].projection;
        let m = self.params.key_dim;
        let mut q = vec![0.0f32; n * m];
        q.par_chunks_mut(m).enumerate().for_each(|(p, out)| {
            out.copy_from_slice(&project(w, m, c, &normed[p * c..(p + 1) * c]));
        });
        (normed, q)
    }

    fn dense_keys(&self, level: usize, styles: &[&FeatureMap]) -> KeySet {
        let m = self.params.key_dim;
        let c = styles[0].channels;
        let total: usize = styles.iter().map(|s| s.positions()).sum();
        let stride = total.div_ceil(self.params.max_dense_keys);
        let w = &self.params.levels[level].projection;
        let (mut keys, mut v1, mut v2) = (Vec::new(), Vec::new(), Vec::new());
        let mut global = 0usize;
        for s in styles {
            let n = s.positions();
            let pm = s.transposed();
            let normed = instance_norm(&pm, n, c);
            for p in 0..n {
                if global.is_multiple_of(stride) {
                    keys.extend(project(w, m, c, &normed[p * c..(p + 1) * c]));
                    v1.extend_from_slice(&pm[p * c..(p + 1) * c]);
                    v2.extend(pm[p * c..(p + 1) * c].iter().map(|v| v * v));
                }
                global += 1;
            }
        }
        KeySet {
            m,
            c,
            keys,
            v1,
            v2,
            parent: Vec::new(),
            layout: format!("dense: {} of {total} style positions (stride {stride})", total.div_ceil(stride)),
        }
    }

    /// Square style windows aggregated into distributed keys. `parent_grid`
    /// gives the window grid of the next-coarser level for the progressive prior.
    fn window_keys(&self, level: usize, styles: &[&FeatureMap], parent_grid: Option<&[(usize, usize)]>) -> KeySet {
        let m = self.params.key_dim;
        let win = self.params.key_window;
        let c = styles[0].channels;
        let w = &self.params.levels[level].projection;
        let (mut keys, mut v1, mut v2, mut parent) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut parent_offset = 0usize;
        for (r, s) in styles.iter().enumerate() {
            let (h, wd) = (s.height, s.width);
            let n = h * wd;
            let pm = s.transposed();
            let normed = instance_norm(&pm, n, c);
            let (gh, gw) = (h.div_ceil(win), wd.div_ceil(win));
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut kn = vec![0.0f32; c];
                    let mut m1 = vec![0.0f32; c];
                    let mut m2 = vec![0.0f32; c];
                    let mut count = 0usize;
                    for y in gy * win..((gy + 1) * win).min(h) {
                        for x in gx * win..((gx + 1) * win).min(wd) {
                            let p = y * wd + x;
                            for ch in 0..c {
                                let v = pm[p * c + ch];
                                kn[ch] += normed[p * c + ch];
                                m1[ch] += v;
                                m2[ch] += v * v;
                            }
                            count += 1;
                        }
                    }
                    let inv = 1.0 / count as f32;
                    for ch in 0..c {
                        kn[ch] *= inv;
                        m1[ch] *= inv;
                        m2[ch] *= inv;
                    }
                    keys.extend(project(w, m, c, &kn));
                    v1.extend(m1);
                    v2.extend(m2);
                    if let Some(grids) = parent_grid {
                        let (ph, pw) = grids[r];
                        let py = (gy / 2).min(ph - 1);
                        let px = (gx / 2).min(pw - 1);
                        parent.push(parent_offset + py * pw + px);
                    }
                }
            }
            if let Some(grids) = parent_grid {
                parent_offset += grids[r].0 * grids[r].1;
            }
        }
        KeySet {
            m,
            c,
            keys,
            v1,
            v2,
            parent,
            layout: format!("distributed: {win}x{win} style windows"),
        }
    }

    fn window_grids(&self, styles: &[&FeatureMap]) -> Vec<(usize, usize)> {
        let win = self.params.key_window;
        styles.iter().map(|s| (s.height.div_ceil(win), s.width.div_ceil(win))).collect()
    }

    fn assemble(&self, level: usize, content: &FeatureMap, normed: &[f32], att: &Attended) -> FeatureMap {
        let c = content.channels;
        let out: Vec<f32> = (0..content.positions() * c)
            .map(|i| att.spread[i] * normed[i] + att.mean[i])
            .collect();
        FeatureMap::from_position_major(&self.params.levels[level].tag, c, content.height, content.width, &out)
    }

    fn map_once(
        &self,
        kind: AttentionKind,
        content: &FeaturePyramid,
        styles: &[&FeaturePyramid],
        trace: bool,
    ) -> (FeaturePyramid, Vec<AttentionMap>) {
        let tau = self.tau();
        let mut out_levels: Vec<Option<FeatureMap>> = vec![None, None, None];
        let mut maps: Vec<Option<AttentionMap>> = vec![None, None, None];
        match kind {
            AttentionKind::A2a => {
                for level in 0..3 {
                    let cmap = &content.levels[level];
                    let smaps: Vec<&FeatureMap> = styles.iter().map(|s| &s.levels[level]).collect();
                    let (normed, q) = self.queries(level, cmap);
                    let ks = self.dense_keys(level, &smaps);
                    let att = attend(&q, cmap.positions(), &ks, tau, None, trace);
                    out_levels[level] = Some(self.assemble(level, cmap, &normed, &att));
                    if let Some(w) = att.weights {
                        maps[level] = Some(AttentionMap {
                            tag: cmap.tag.clone(),
                            queries: cmap.positions(),
                            keys: ks.len(),
                            weights: w,
                            key_layout: ks.layout.clone(),
                        });
                    }
                }
            }
            AttentionKind::S2k => {
                // Coarsest level first; each finer level adds the log-attention of
                // its parent query over its parent key as a prior.
                let mut coarse: Option<(Vec<f32>, usize, usize)> = None;
                for level in (0..3).rev() {
                    let cmap = &content.levels[level];
                    let smaps: Vec<&FeatureMap> = styles.iter().map(|s| &s.levels[level]).collect();
                    let (normed, q) = self.queries(level, cmap);
                    let parent_grids = (level < 2).then(|| {
                        let coarser: Vec<&FeatureMap> = styles.iter().map(|s| &s.levels[level + 1]).collect();
                        self.window_grids(&coarser)
                    });
                    let ks = self.window_keys(level, &smaps, parent_grids.as_deref());
                    let prior = coarse.as_ref().map(|(log_a, n_keys, _)| {
                        let coarse_map = &content.levels[level + 1];
                        let query_parent = (0..cmap.positions())
                            .map(|p| {
                                let (y, x) = (p / cmap.width, p % cmap.width);
                                let py = (y / 2).min(coarse_map.height - 1);
                                let px = (x / 2).min(coarse_map.width - 1);
                                py * coarse_map.width + px
                            })
                            .collect();
                        Prior {
                            log_coarse: log_a,
                            coarse_keys: *n_keys,
                            query_parent,
                            key_parent: &ks.parent,
                        }
                    });
                    let keep = trace || level > 0;
                    let att = attend(&q, cmap.positions(), &ks, tau, prior.as_ref(), keep);
                    out_levels[level] = Some(self.assemble(level, cmap, &normed, &att));
                    if let Some(w) = att.weights {
                        let log_a: Vec<f32> = w.iter().map(|a| a.max(1e-30).ln()).collect();
                        if trace {
                            maps[level] = Some(AttentionMap {
                                tag: cmap.tag.clone(),
                                queries: cmap.positions(),
                                keys: ks.len(),
                                weights: w,
                                key_layout: ks.layout.clone(),
                            });
                        }
                        coarse = Some((log_a, ks.len(), level));
                    }
                }
            }
        }
        let pyramid = FeaturePyramid {
            levels: out_levels.into_iter().map(|l| l.expect("every level mapped")).collect(),
            source_resolution: content.source_resolution,
        };
        (pyramid, maps.into_iter().flatten().collect())
    }

    /// Map content features onto style statistics. Attention maps are
    /// returned for every level when `trace` is set (concat pooling only).
    pub fn map_traced(
        &self,
        kind: AttentionKind,
        content: &FeaturePyramid,
        styles: &[FeaturePyramid],
        pooling: StylePooling,
        trace: bool,
    ) -> Result<(FeaturePyramid, Vec<AttentionMap>)> {
        self.check(content, styles)?;
        match pooling {
            StylePooling::Concat => {
                let refs: Vec<&FeaturePyramid> = styles.iter().collect();
                Ok(self.map_once(kind, content, &refs, trace))
            }
            StylePooling::PerRepAverage => {
                let mut acc: Option<FeaturePyramid> = None;
                for s in styles {
                    let (p, _) = self.map_once(kind, content, &[s], false);
                    match acc.as_mut() {
                        None => acc = Some(p),
                        Some(a) => {
                            for (al, pl) in a.levels.iter_mut().zip(&p.levels) {
                                al.data.iter_mut().zip(&pl.data).for_each(|(x, y)| *x += y);
                            }
                        }
                    }
                }
                let mut out = acc.expect("at least one style");
                let k = styles.len() as f32;
                for l in &mut out.levels {
                    l.data.iter_mut().for_each(|v| *v /= k);
                }
                Ok((out, Vec::new()))
            }
        }
    }

    pub fn map(
        &self,
        kind: AttentionKind,
        content: &FeaturePyramid,
        styles: &[FeaturePyramid],
        pooling: StylePooling,
    ) -> Result<FeaturePyramid> {
        Ok(self.map_traced(kind, content, styles, pooling, false)?.0)
    }
}

pub fn s2k_map(mapper: &AttentionMapper, content: &FeaturePyramid, style: &[FeaturePyramid]) -> Result<FeaturePyramid> {
    mapper.map(AttentionKind::S2k, content, style, StylePooling::Concat)
}

pub fn a2a_map(mapper: &AttentionMapper, content: &FeaturePyramid, style: &[FeaturePyramid]) -> Result<FeaturePyramid> {
    mapper.map(AttentionKind::A2a, content, style, StylePooling::Concat)
}

pub struct TransferModels<'a> {
    pub encoder: &'a dyn FeatureEncoder,
    pub mapper: &'a AttentionMapper,
    pub decoder: &'a dyn FeatureDecoder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferOptions {
    pub attention: AttentionKind,
    pub pooling: StylePooling,
}

/// Stylize the masked content with style images; the result is zero outside the mask.
pub fn stylize_salient_images(
    models: &TransferModels<'_>,
    content: &ImagePlane,
    mask: &BinaryMask,
    styles: &[&ImagePlane],
    opts: TransferOptions,
) -> Result<ImagePlane> {
    if styles.is_empty() {
        return Err(Error::LevelMismatch("no style representations".into()));
    }
    let masked = apply_mask(content, mask)?;
    let fc = models.encoder.extract(&masked)?;
    let fs = styles
        .iter()
        .map(|s| models.encoder.extract(s))
        .collect::<Result<Vec<_>>>()?;
    let mapped = models.mapper.map(opts.attention, &fc, &fs, opts.pooling)?;
    let decoded = models.decoder.decode(&mapped)?;
    apply_mask(&decoded, mask)
}

pub fn stylize_salient(
    models: &TransferModels<'_>,
    content: &ImagePlane,
    mask: &BinaryMask,
    style_reps: &[StyleRepresentation],
    opts: TransferOptions,
) -> Result<ImagePlane> {
    if let Some(r) = style_reps.iter().find(|r| r.target != Target::Fg) {
        return Err(Error::Validation(format!("salient transfer got a {:?} representation", r.target)));
    }
    let imgs: Vec<&ImagePlane> = style_reps.iter().map(|r| &r.image).collect();
    stylize_salient_images(models, content, mask, &imgs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip() {
        let pyr = FeaturePyramid {
            levels: LAYER_TAGS
                .iter()
                .enumerate()
                .map(|(i, t)| FeatureMap {
                    tag: t.to_string(),
                    channels: 2,
                    height: 3 - i,
                    width: 2,
                    data: (0..2 * (3 - i) * 2).map(|v| v as f32 * 0.5).collect(),
                })
                .collect(),
            source_resolution: (48, 32),
        };
        let back = FeaturePyramid::from_dump_bytes(&pyr.to_dump_bytes(), (48, 32)).unwrap();
        assert_eq!(back, pyr);
    }
}
