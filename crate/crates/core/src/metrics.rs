//! Alignment, perceptual and aesthetic metrics, and the evaluation-table harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip_direction::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::ingest::load_image;

pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, image: &ImagePlane, reference: &ImagePlane) -> Result<f64>;
}

pub trait AestheticModel: Send + Sync {
    /// Mean of the predicted 10-bin opinion distribution.
    fn score(&self, image: &ImagePlane) -> Result<f64>;
}

pub trait QualityModel: Send + Sync {
    fn no_reference(&self, image: &ImagePlane) -> Result<f64>;
    fn full_reference(&self, image: &ImagePlane, reference: &ImagePlane) -> Result<f64>;
}

pub enum Reference<'a> {
    Text(&'a str),
    Image(&'a ImagePlane),
}

/// Read-only handles to every metric model; a missing handle surfaces as
/// `MetricUnavailable` only when that metric is requested.
#[derive(Clone, Copy)]
pub struct MetricModels<'a> {
    pub text: Option<&'a dyn TextEncoder>,
    pub image: Option<&'a dyn ImageEncoder>,
    pub lpips: Option<&'a dyn PerceptualMetric>,
    pub nima: Option<&'a dyn AestheticModel>,
    pub contrique: Option<&'a dyn QualityModel>,
}

fn need<'a, T: ?Sized>(m: Option<&'a T>, what: &str) -> Result<&'a T> {
    m.ok_or_else(|| Error::MetricUnavailable(format!("{what} checkpoint not loaded")))
}

/// Raw cosine between the image embedding and the reference embedding.
pub fn clipscore(models: &MetricModels<'_>, image: &ImagePlane, reference: Reference<'_>) -> Result<f64> {
    let enc = models
        .image
        .ok_or_else(|| Error::EncoderUnavailable("image encoder not loaded".into()))?;
    let e = enc.encode_image(image)?;
    let r = match reference {
        Reference::Text(t) => models
            .text
            .ok_or_else(|| Error::EncoderUnavailable("text encoder not loaded".into()))?
            .encode_text(t)?,
        Reference::Image(img) => enc.encode_image(img)?,
    };
    Ok(e.cosine(&r))
}

pub fn lpips(models: &MetricModels<'_>, image: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
    need(models.lpips, "lpips")?.distance(image, reference)
}

pub fn nima(models: &MetricModels<'_>, image: &ImagePlane) -> Result<f64> {
    need(models.nima, "nima")?.score(image)
}

pub fn contrique(models: &MetricModels<'_>, image: &ImagePlane, reference: Option<&ImagePlane>, full_reference: bool) -> Result<f64> {
    let m = need(models.contrique, "contrique")?;
    if full_reference {
        m.full_reference(image, reference.ok_or(Error::MissingReference)?)
    } else {
        m.no_reference(image)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    StyleReps,
    Stylized,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::StyleReps => "style_reps",
            EvalMode::Stylized => "stylized",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style_reps" => Ok(EvalMode::StyleReps),
            "stylized" => Ok(EvalMode::Stylized),
            other => Err(Error::Validation(format!("unknown eval mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Final,
    FgStylized,
    StyleRepFg,
    StyleRepBg,
}

impl OutputKind {
    fn in_mode(&self, mode: EvalMode) -> bool {
        match mode {
            EvalMode::StyleReps => matches!(self, OutputKind::StyleRepFg | OutputKind::StyleRepBg),
            EvalMode::Stylized => matches!(self, OutputKind::Final),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub output: PathBuf,
    pub content: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    pub style_text_fg: String,
    #[serde(default)]
    pub style_text_bg: Option<String>,
    #[serde(default)]
    pub style_image_fg: Option<PathBuf>,
    #[serde(default)]
    pub style_image_bg: Option<PathBuf>,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub image_id: Option<String>,
    #[serde(default)]
    pub kind: OutputKind,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub method: String,
    pub mode: EvalMode,
    pub clipscore_text: f64,
    pub clipscore_image: f64,
    pub lpips: f64,
    pub nima: f64,
    pub contrique_fr: f64,
    pub contrique_nr: f64,
}

impl MetricRow {
    pub const COLUMNS: [&'static str; 6] = ["clipscore_text", "clipscore_image", "lpips", "nima", "contrique_fr", "contrique_nr"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.clipscore_text,
            self.clipscore_image,
            self.lpips,
            self.nima,
            self.contrique_fr,
            self.contrique_nr,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub count: usize,
    pub means: [f64; 6],
}

impl AggregateRow {
    /// Mean of the text and image clipscores.
    pub fn clipscore_mean(&self) -> f64 {
        0.5 * (self.means[0] + self.means[1])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub aggregate: Vec<AggregateRow>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<MetricRow>) -> Self {
        let mut groups: BTreeMap<String, (usize, [f64; 6])> = BTreeMap::new();
        for r in &per_image {
            let g = groups.entry(r.method.clone()).or_insert((0, [0.0; 6]));
            g.0 += 1;
            for (acc, v) in g.1.iter_mut().zip(r.values()) {
                *acc += v;
            }
        }
        let aggregate = groups
            .into_iter()
            .map(|(method, (count, sums))| AggregateRow {
                method,
                count,
                means: sums.map(|s| s / count as f64),
            })
            .collect();
        Self {
            per_image,
            aggregate,
            warnings: Vec::new(),
        }
    }

    pub fn method(&self, name: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.method == name)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "method", "mode"].iter().chain(MetricRow::COLUMNS.iter()))?;
        for r in &self.per_image {
            let mut rec = vec![r.image_id.clone(), r.method.clone(), r.mode.as_str().to_string()];
            rec.extend(r.values().iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn format_table(&self, mode: EvalMode) -> String {
        let mut s = String::new();
        match mode {
            EvalMode::StyleReps => {
                let _ = writeln!(s, "| Method | <T,S> | <I,S> | Mean | LPIPS |");
                let _ = writeln!(s, "|---|---|---|---|---|");
                for a in &self.aggregate {
                    let _ = writeln!(
                        s,
                        "| {} | {:.2} | {:.2} | {:.2} | {:.2} |",
                        a.method,
                        a.means[0],
                        a.means[1],
                        a.clipscore_mean(),
                        a.means[2]
                    );
                }
            }
            EvalMode::Stylized => {
                let _ = write!(s, "| Scores |");
                for a in &self.aggregate {
                    let _ = write!(s, " {} |", a.method);
                }
                let _ = writeln!(s);
                let _ = writeln!(s, "|---|{}", "---|".repeat(self.aggregate.len()));
                let rows = [("Clipscore", 0usize), ("Nima", 3), ("Contrique (FR)", 4), ("Contrique (NR)", 5), ("LPIPS", 2)];
                for (name, idx) in rows {
                    let _ = write!(s, "| {name} |");
                    for a in &self.aggregate {
                        let _ = write!(s, " {:.2} |", a.means[idx]);
                    }
                    let _ = writeln!(s);
                }
            }
        }
        s
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn discover(run_dir: &Path, mode: EvalMode, out: &mut Vec<PathBuf>) -> Result<()> {
    if !run_dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<_> = std::fs::read_dir(run_dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            discover(&p, mode, out)?;
            continue;
        }
        let is_png = p.extension().is_some_and(|x| x == "png");
        let parent_is_reps = p.parent().and_then(|d| d.file_name()).is_some_and(|n| n == "style_reps");
        let hit = match mode {
            EvalMode::StyleReps => is_png && parent_is_reps,
            EvalMode::Stylized => p.file_name().is_some_and(|n| n == "final.png"),
        };
        if hit {
            out.push(p);
        }
    }
    Ok(())
}

fn score_entry(models: &MetricModels<'_>, base: &Path, e: &ManifestEntry, mode: EvalMode) -> Result<MetricRow> {
    let output = load_image(&resolve(base, &e.output), None)?;
    let content = load_image(&resolve(base, &e.content), Some(output.height().min(output.width())))?;
    let (text, style_path) = match e.kind {
        OutputKind::StyleRepBg => (
            e.style_text_bg.as_deref().unwrap_or(&e.style_text_fg),
            e.style_image_bg.as_ref(),
        ),
        _ => (e.style_text_fg.as_str(), e.style_image_fg.as_ref()),
    };
    let style = style_path
        .map(|p| load_image(&resolve(base, p), None))
        .transpose()?;
    // Without a style image the image-side reference is the content image.
    let image_ref = style.as_ref().unwrap_or(&content);
    let perceptual_ref = match mode {
        EvalMode::StyleReps => image_ref,
        EvalMode::Stylized => &content,
    };
    let image_id = e
        .image_id
        .clone()
        .unwrap_or_else(|| e.output.to_string_lossy().into_owned());
    let method = e.method.clone().unwrap_or_else(|| "objmst".into());
    score_image(models, &output, text, image_ref, perceptual_ref, image_id, method, mode)
}

/// One metric row: clipscores against `text` and `image_ref`, perceptual and
/// full-reference quality against `perceptual_ref`.
#[allow(clippy::too_many_arguments)]
pub fn score_image(
    models: &MetricModels<'_>,
    output: &ImagePlane,
    text: &str,
    image_ref: &ImagePlane,
    perceptual_ref: &ImagePlane,
    image_id: String,
    method: String,
    mode: EvalMode,
) -> Result<MetricRow> {
    Ok(MetricRow {
        image_id,
        method,
        mode,
        clipscore_text: clipscore(models, output, Reference::Text(text))?,
        clipscore_image: clipscore(models, output, Reference::Image(image_ref))?,
        lpips: lpips(models, output, perceptual_ref)?,
        nima: nima(models, output)?,
        contrique_fr: contrique(models, output, Some(perceptual_ref), true)?,
        contrique_nr: contrique(models, output, None, false)?,
    })
}

/// Score every output of `mode` found under `run_dir` against its manifest
/// entry. Paths in the manifest are relative to `run_dir`.
pub fn evaluate_table(
    models: &MetricModels<'_>,
    run_dir: &Path,
    mode: EvalMode,
    manifest: &[ManifestEntry],
) -> Result<MetricReport> {
    let mut found = Vec::new();
    discover(run_dir, mode, &mut found)?;
    let entries: Vec<&ManifestEntry> = manifest.iter().filter(|e| e.kind.in_mode(mode)).collect();
    let canonical = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    let listed: Vec<PathBuf> = entries.iter().map(|e| canonical(&resolve(run_dir, &e.output))).collect();
    for f in &found {
        if !listed.contains(&canonical(f)) {
            return Err(Error::ManifestMismatch(format!("{} has no manifest entry", f.display())));
        }
    }
    for (e, p) in entries.iter().zip(&listed) {
        if !p.is_file() {
            return Err(Error::ManifestMismatch(format!("manifest output {} does not exist", e.output.display())));
        }
    }
    if entries.is_empty() {
        let msg = format!("no {} outputs under {}", mode.as_str(), run_dir.display());
        warn!("{msg}");
        let mut r = MetricReport::default();
        r.warnings.push(msg);
        return Ok(r);
    }
    let rows = entries
        .par_iter()
        .map(|e| score_entry(models, run_dir, e, mode))
        .collect::<Result<Vec<_>>>()?;
    if let Some(r) = rows.iter().find(|r| r.values().iter().any(|v| !v.is_finite())) {
        return Err(Error::MetricUnavailable(format!("non-finite metric for {}", r.image_id)));
    }
    Ok(MetricReport::from_rows(rows))
}
