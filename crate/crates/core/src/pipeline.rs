//! Job specification, the two-step pipeline, and the ablation harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::assets::StyleSetEntry;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::harmonize::{composite_background, composite_images, harmonize, BackgroundFill, Provenance};
use crate::image::{BinaryMask, ImagePlane};
use crate::ingest::{acquire_mask, apply_mask, load_image, MaskSource};
use crate::inversion::{
    invert_multi, InversionConfig, InversionModels, InversionOutcome, LossMode, StyleInputs, StyleRepresentation, Target,
};
use crate::metrics::{score_image, EvalMode, ManifestEntry, MetricReport, MetricRow, OutputKind};
use crate::models::Role;
use crate::sampler::resize_bilinear;
use crate::s2k_transfer::{stylize_salient, stylize_salient_images, AttentionKind, TransferOptions};
use crate::seed::stage_seed;
use crate::weights::ModelStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One text prompt, applied to the salient object only.
    #[default]
    TistSingle,
    /// Separate prompts for the object and its surroundings.
    TistDouble,
    /// Prompt plus style image for the object.
    MmistSingle,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::TistSingle => "tist_single",
            Mode::TistDouble => "tist_double",
            Mode::MmistSingle => "mmist_single",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tist_single" => Ok(Mode::TistSingle),
            "tist_double" => Ok(Mode::TistDouble),
            "mmist_single" => Ok(Mode::MmistSingle),
            other => Err(Error::Validation(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobSpec {
    pub mode: Mode,
    pub content: PathBuf,
    pub mask: Option<PathBuf>,
    pub style_text_fg: String,
    pub style_text_bg: Option<String>,
    pub style_image_fg: Option<PathBuf>,
    pub style_image_bg: Option<PathBuf>,
    pub inversion: InversionConfig,
    pub out_dir: PathBuf,
    /// Style representations per target.
    pub count: usize,
    /// Square side the content is brought to before transfer.
    pub working_resolution: usize,
    /// Stylize the whole frame instead of only the salient object.
    pub full_frame: bool,
    pub transfer: TransferOptions,
    pub background_fill: BackgroundFill,
    /// Pre-masked image used as the reference for the background inversion.
    /// Defaults to the content with the mask inverted.
    pub bg_reference: Option<PathBuf>,
    /// Write feature-pyramid dumps under `features/`.
    pub dump_features: bool,
}

impl Default for JobSpec {
    fn default() -> Self {
        Self {
            mode: Mode::TistSingle,
            content: PathBuf::new(),
            mask: None,
            style_text_fg: String::new(),
            style_text_bg: None,
            style_image_fg: None,
            style_image_bg: None,
            inversion: InversionConfig::default(),
            out_dir: PathBuf::from("out"),
            count: 6,
            working_resolution: 512,
            full_frame: false,
            transfer: TransferOptions::default(),
            background_fill: BackgroundFill::Resize,
            bg_reference: None,
            dump_features: false,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl JobSpec {
    /// Mode/field consistency and parameter ranges. Touches no weights.
    pub fn validate(&self) -> Result<()> {
        if self.content.as_os_str().is_empty() {
            return Err(invalid("content path is required"));
        }
        if self.style_text_fg.trim().is_empty() {
            return Err(invalid("style_text_fg is required"));
        }
        match self.mode {
            Mode::TistSingle => {
                if self.style_text_bg.is_some() {
                    return Err(invalid("tist_single takes no style_text_bg (use tist_double)"));
                }
                if self.style_image_fg.is_some() || self.style_image_bg.is_some() {
                    return Err(invalid("tist modes take no style images (use mmist_single)"));
                }
            }
            Mode::TistDouble => {
                if self.style_text_bg.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    return Err(invalid("tist_double requires style_text_bg"));
                }
                if self.style_image_fg.is_some() || self.style_image_bg.is_some() {
                    return Err(invalid("tist modes take no style images (use mmist_single)"));
                }
                if self.full_frame {
                    return Err(invalid("full_frame applies to single-condition modes only"));
                }
            }
            Mode::MmistSingle => {
                if self.style_image_fg.is_none() {
                    return Err(invalid("mmist_single requires style_image_fg"));
                }
                if self.style_text_bg.is_some() || self.style_image_bg.is_some() {
                    return Err(invalid("mmist_single takes no background style"));
                }
            }
        }
        if self.count == 0 {
            return Err(invalid("count must be at least 1"));
        }
        if self.working_resolution < crate::image::MIN_SIDE || !self.working_resolution.is_multiple_of(16) {
            return Err(invalid(format!(
                "working_resolution {} must be a multiple of 16 and at least {}",
                self.working_resolution,
                crate::image::MIN_SIDE
            )));
        }
        self.inversion.validate()
    }

    /// Checkpoints the job needs, in load order.
    pub fn required_roles(&self) -> Vec<Role> {
        let mut roles = vec![
            Role::EncoderText,
            Role::EncoderImage,
            Role::Generator,
            Role::VggEncoder,
            Role::S2kMapper,
            Role::Decoder,
        ];
        if self.mode == Mode::TistDouble {
            roles.push(Role::Harmonizer);
        }
        if self.mask.is_none() {
            roles.push(Role::Segmenter);
        }
        roles
    }

    /// Load a JSON config. Missing fields take defaults.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| invalid(format!("config: {e}")))
    }
}

/// Append-only record of everything needed to reproduce a run, rewritten
/// atomically after each stage.
struct RunLog {
    path: PathBuf,
    text: String,
}

impl RunLog {
    fn new(path: PathBuf) -> Self {
        Self { path, text: String::new() }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    fn flush(&self) -> Result<()> {
        write_atomic(&self.path, self.text.as_bytes())
    }
}

/// Flatten a JSON value into `prefix.key=value` lines.
fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, out);
            }
        }
        other => out.push(format!("{prefix}={other}")),
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub final_path: PathBuf,
    pub harmonized: bool,
    pub seeds: Vec<(String, u64)>,
    pub losses: Vec<(String, f64, f64)>,
    pub warnings: Vec<String>,
}

fn inversion_models(store: &ModelStore) -> Result<InversionModels<'_>> {
    Ok(InversionModels {
        text: store.text_encoder()?,
        image: store.image_encoder()?,
        generator: store.generator()?,
    })
}

/// Inversion settings for one target. Text-only inputs drop the image term
/// and use the masked reference as the (unused) style image.
/// Stand-in style image for text-only targets, sized like generator output so crops fit.
fn text_only_image(reference: &ImagePlane, res: usize) -> ImagePlane {
    resize_bilinear(reference, res, res)
}

fn target_config(base: &InversionConfig, seed: u64, has_style_image: bool) -> InversionConfig {
    InversionConfig {
        seed,
        lambda: if has_style_image { base.lambda } else { 0.0 },
        ..base.clone()
    }
}

fn write_reps(out_dir: &Path, target: Target, outcomes: &[InversionOutcome]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        let stem = format!("{}_{i}", target.as_str());
        let png = out_dir.join("style_reps").join(format!("{stem}.png"));
        o.rep.image.save_png(&png)?;
        write_atomic(&out_dir.join("latents").join(format!("{stem}.json")), &o.rep.latent.to_json())?;
        write_atomic(&out_dir.join("loss_curves").join(format!("{stem}.csv")), &o.curve_csv()?)?;
        paths.push(png);
    }
    Ok(paths)
}

fn content_mask(store: &ModelStore, content: &ImagePlane, mask: Option<&Path>) -> Result<BinaryMask> {
    match mask {
        Some(p) => acquire_mask(content, MaskSource::File(p)),
        None => acquire_mask(content, MaskSource::Segmenter(store.segmenter())),
    }
}

fn rel(out_dir: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out_dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Run the full pipeline for one job. Outputs are written atomically as
/// each stage completes, so a failed run keeps everything before the failure.
pub fn run_job(spec: &JobSpec, store: &ModelStore) -> Result<RunSummary> {
    spec.validate()?;
    let out = &spec.out_dir;
    std::fs::create_dir_all(out)?;
    let mut log = RunLog::new(out.join("run.log"));
    let mut summary = RunSummary {
        mode: spec.mode.as_str().into(),
        ..Default::default()
    };
    log.line(format!("objmst {}", env!("CARGO_PKG_VERSION")));
    let mut cfg_lines = Vec::new();
    flatten("config", &serde_json::to_value(spec)?, &mut cfg_lines);
    cfg_lines.iter().for_each(|l| log.line(l));
    for (role, (id, digest)) in &store.digests {
        log.line(format!("checkpoint.{role}={id} sha256:{digest}"));
    }
    let master = spec.inversion.seed;
    let fg_seed = stage_seed(master, "invert_fg");
    let bg_seed = stage_seed(master, "invert_bg");
    log.line(format!("seed.master={master}"));
    summary.seeds.push(("master".into(), master));
    log.flush()?;

    // Step 0: ingest.
    let (content, mask) = (|| -> Result<(ImagePlane, BinaryMask)> {
        let content = load_image(&spec.content, Some(spec.working_resolution))?;
        let mask = content_mask(store, &content, spec.mask.as_deref())?;
        Ok((content, mask))
    })()
    .map_err(|e| e.at_stage("ingest"))?;
    mask.save_png(&out.join("mask.png"))?;
    log.line(format!("mask.area_fraction={:.6}", mask.area_fraction()));

    // Step 1: salient-style representations.
    let inv = inversion_models(store).map_err(|e| e.at_stage("invert_fg"))?;
    let res = inv.generator.resolution();
    let masked_ref = apply_mask(&content, &mask).map_err(|e| e.at_stage("ingest"))?;
    let fg_outcomes = (|| -> Result<Vec<InversionOutcome>> {
        let style = spec
            .style_image_fg
            .as_ref()
            .map(|p| load_image(p, Some(res)))
            .transpose()?;
        let cfg = target_config(&spec.inversion, fg_seed, style.is_some());
        let fallback;
        let style_img = match &style {
            Some(s) => s,
            None => {
                fallback = text_only_image(&masked_ref, res);
                &fallback
            }
        };
        let inputs = StyleInputs {
            text: &spec.style_text_fg,
            image: style_img,
            masked_ref: &masked_ref,
            unmasked_ref: Some(&content),
        };
        invert_multi(&inv, &inputs, Target::Fg, &cfg, spec.count)
    })()
    .map_err(|e| e.at_stage("invert_fg"))?;
    let fg_paths = write_reps(out, Target::Fg, &fg_outcomes)?;
    for i in 0..fg_outcomes.len() {
        log.line(format!("seed.invert_fg_{i}={}", fg_seed.wrapping_add(i as u64)));
        summary.seeds.push((format!("invert_fg_{i}"), fg_seed.wrapping_add(i as u64)));
    }
    for (i, o) in fg_outcomes.iter().enumerate() {
        log.line(format!(
            "loss.fg_{i} initial={:.6} final={:.6} best_step={}",
            o.initial_loss, o.final_loss, o.best_step
        ));
        summary.losses.push((format!("fg_{i}"), o.initial_loss, o.final_loss));
        summary.warnings.extend(o.warnings.iter().map(|w| format!("fg_{i}: {w}")));
    }
    log.flush()?;

    // Step 2: salient-object transfer.
    let transfer_mask = if spec.full_frame {
        BinaryMask::filled(content.height(), content.width(), true)
    } else {
        mask.clone()
    };
    let fg_reps: Vec<StyleRepresentation> = fg_outcomes.into_iter().map(|o| o.rep).collect();
    let fg_stylized = (|| -> Result<ImagePlane> {
        let models = store.transfer()?;
        if spec.dump_features {
            let masked = apply_mask(&content, &transfer_mask)?;
            models.encoder.extract(&masked)?.dump(&out.join("features").join("content.bin"))?;
            for (i, r) in fg_reps.iter().enumerate() {
                models.encoder.extract(&r.image)?.dump(&out.join("features").join(format!("style_fg_{i}.bin")))?;
            }
        }
        stylize_salient(&models, &content, &transfer_mask, &fg_reps, spec.transfer)
    })()
    .map_err(|e| e.at_stage("transfer"))?;
    fg_stylized.save_png(&out.join("fg_stylized.png"))?;

    // Surroundings.
    let final_image = match spec.mode {
        Mode::TistSingle | Mode::MmistSingle => {
            if spec.full_frame {
                fg_stylized.clone()
            } else {
                let prov = Provenance {
                    fg_source: "fg_stylized".into(),
                    bg_source: "content".into(),
                };
                composite_images(&fg_stylized, &mask, &[&content], BackgroundFill::Resize, prov)
                    .map_err(|e| e.at_stage("composite"))?
                    .image
            }
        }
        Mode::TistDouble => {
            let bg_text = spec.style_text_bg.as_deref().unwrap_or_default();
            let bg_outcomes = (|| -> Result<Vec<InversionOutcome>> {
                let bg_ref = match &spec.bg_reference {
                    Some(p) => load_image(p, Some(spec.working_resolution))?,
                    None => apply_mask(&content, &mask.inverted())?,
                };
                let cfg = target_config(&spec.inversion, bg_seed, false);
                let bg_image = text_only_image(&bg_ref, res);
                let inputs = StyleInputs {
                    text: bg_text,
                    image: &bg_image,
                    masked_ref: &bg_ref,
                    unmasked_ref: Some(&content),
                };
                invert_multi(&inv, &inputs, Target::Bg, &cfg, spec.count)
            })()
            .map_err(|e| e.at_stage("invert_bg"))?;
            write_reps(out, Target::Bg, &bg_outcomes)?;
            for (i, o) in bg_outcomes.iter().enumerate() {
                log.line(format!("seed.invert_bg_{i}={}", bg_seed.wrapping_add(i as u64)));
                log.line(format!(
                    "loss.bg_{i} initial={:.6} final={:.6} best_step={}",
                    o.initial_loss, o.final_loss, o.best_step
                ));
                summary.seeds.push((format!("invert_bg_{i}"), bg_seed.wrapping_add(i as u64)));
                summary.losses.push((format!("bg_{i}"), o.initial_loss, o.final_loss));
                summary.warnings.extend(o.warnings.iter().map(|w| format!("bg_{i}: {w}")));
            }
            log.flush()?;
            let bg_reps: Vec<StyleRepresentation> = bg_outcomes.into_iter().map(|o| o.rep).collect();
            let composite = composite_background(&fg_stylized, &mask, &bg_reps, spec.background_fill)
                .map_err(|e| e.at_stage("composite"))?;
            let h = harmonize(store.harmonizer(), &composite).map_err(|e| e.at_stage("harmonize"))?;
            summary.harmonized = h.harmonized;
            if let Some(w) = h.warning {
                summary.warnings.push(w);
            }
            h.image
        }
    };
    let final_path = out.join("final.png");
    final_image.save_png(&final_path)?;
    summary.final_path = final_path.clone();
    log.line(format!("harmonized={}", summary.harmonized));

    let content_abs = absolute(&spec.content);
    let entry = |output: &Path, kind: OutputKind, method: &str| ManifestEntry {
        output: rel(out, output),
        content: content_abs.clone(),
        mask: Some(PathBuf::from("mask.png")),
        style_text_fg: spec.style_text_fg.clone(),
        style_text_bg: spec.style_text_bg.clone(),
        style_image_fg: spec.style_image_fg.as_deref().map(absolute),
        style_image_bg: spec.style_image_bg.as_deref().map(absolute),
        method: Some(method.into()),
        image_id: Some(rel(out, output).to_string_lossy().into_owned()),
        kind,
    };
    let mut manifest = vec![
        entry(&final_path, OutputKind::Final, "objmst"),
        entry(&out.join("fg_stylized.png"), OutputKind::FgStylized, "objmst"),
    ];
    manifest.extend(fg_paths.iter().map(|p| entry(p, OutputKind::StyleRepFg, "objmst")));
    if spec.mode == Mode::TistDouble {
        for i in 0..spec.count {
            manifest.push(entry(&out.join("style_reps").join(format!("bg_{i}.png")), OutputKind::StyleRepBg, "objmst"));
        }
    }
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    write_atomic(&out.join("run.json"), &serde_json::to_vec_pretty(&summary)?)?;
    for w in &summary.warnings {
        warn!("{w}");
        log.line(format!("warning={w}"));
    }
    log.line("status=ok");
    log.flush()?;
    info!("wrote {}", final_path.display());
    Ok(summary)
}

/// Segment a content image and write the binary mask.
pub fn run_segment(store: &ModelStore, content: &Path, working: Option<usize>, out: &Path) -> Result<BinaryMask> {
    let img = load_image(content, working).map_err(|e| e.at_stage("ingest"))?;
    let mask = content_mask(store, &img, None).map_err(|e| e.at_stage("segment"))?;
    mask.save_png(out)?;
    Ok(mask)
}

/// Settings shared by both ablation arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub inversion: InversionConfig,
    pub count: usize,
    pub working_resolution: usize,
    pub pooling: crate::s2k_transfer::StylePooling,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            inversion: InversionConfig::default(),
            count: 6,
            working_resolution: 256,
            pooling: Default::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    LossMaskedVsPlain,
    AttentionS2kVsA2a,
}

impl std::str::FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_masked_vs_plain" => Ok(AblationArm::LossMaskedVsPlain),
            "attention_s2k_vs_a2a" => Ok(AblationArm::AttentionS2kVsA2a),
            other => Err(invalid(format!("unknown ablation arm {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub metric: String,
    pub higher_is_better: bool,
    /// Aggregate metric of the proposed arm and the baseline arm.
    pub values: [f64; 2],
    /// Entries where the proposed arm beat the baseline.
    pub wins: usize,
    pub cases: usize,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arm: AblationArm,
    pub labels: [String; 2],
    pub reports: [MetricReport; 2],
    pub verdict: Verdict,
}

impl AblationReport {
    pub fn summary(&self) -> String {
        let v = &self.verdict;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:?}: {} {} = {:.4} vs {} = {:.4} ({} of {} entries) -> {}",
            self.arm,
            v.metric,
            self.labels[0],
            v.values[0],
            self.labels[1],
            v.values[1],
            v.wins,
            v.cases,
            if v.holds { "ordering holds" } else { "ordering does not hold" }
        );
        s
    }
}

struct LoadedEntry {
    content: ImagePlane,
    mask: BinaryMask,
    style: Option<ImagePlane>,
}

fn load_entry(store: &ModelStore, e: &StyleSetEntry, working: usize, style_res: usize) -> Result<LoadedEntry> {
    let content = load_image(&e.content, Some(working))?;
    let mask = content_mask(store, &content, e.mask.as_deref())?;
    let style = e.style_image.as_ref().map(|p| load_image(p, Some(style_res))).transpose()?;
    Ok(LoadedEntry { content, mask, style })
}

/// Invert `count` style representations for one style-set entry and score each.
pub fn style_rep_rows(
    store: &ModelStore,
    entry: &StyleSetEntry,
    cfg: &AblationConfig,
    loss_mode: LossMode,
    count: usize,
    method: &str,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let inv = inversion_models(store)?;
    let loaded = load_entry(store, entry, cfg.working_resolution, inv.generator.resolution()).map_err(|e| e.at_stage("ingest"))?;
    let masked_ref = apply_mask(&loaded.content, &loaded.mask)?;
    let inv_cfg = InversionConfig {
        loss_mode,
        ..target_config(&cfg.inversion, seed, loaded.style.is_some())
    };
    let fallback;
    let style_img = match &loaded.style {
        Some(s) => s,
        None => {
            fallback = text_only_image(&masked_ref, inv.generator.resolution());
            &fallback
        }
    };
    let inputs = StyleInputs {
        text: &entry.style_text,
        image: style_img,
        masked_ref: &masked_ref,
        unmasked_ref: Some(&loaded.content),
    };
    let outcomes = invert_multi(&inv, &inputs, Target::Fg, &inv_cfg, count)
        .map_err(|e| e.at_stage("invert_fg"))?;
    let metrics = store.metrics();
    let image_ref = loaded.style.as_ref().unwrap_or(&loaded.content);
    outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            score_image(
                &metrics,
                &o.rep.image,
                &entry.style_text,
                image_ref,
                image_ref,
                format!("{}_{i}", entry.id),
                method.into(),
                EvalMode::StyleReps,
            )
        })
        .collect()
}

/// Salient transfer of one entry with the given attention, composited over
/// the original background. The entry's style image is used directly.
pub fn attention_output(
    store: &ModelStore,
    entry: &StyleSetEntry,
    cfg: &AblationConfig,
    attention: AttentionKind,
) -> Result<(ImagePlane, ImagePlane)> {
    let res = store.generator()?.resolution();
    let loaded = load_entry(store, entry, cfg.working_resolution, res).map_err(|e| e.at_stage("ingest"))?;
    let style = loaded
        .style
        .ok_or_else(|| invalid(format!("entry {} needs a style_image for the attention arm", entry.id)))?;
    let models = store.transfer()?;
    let opts = TransferOptions {
        attention,
        pooling: cfg.pooling,
    };
    let fg = stylize_salient_images(&models, &loaded.content, &loaded.mask, &[&style], opts)
        .map_err(|e| e.at_stage("transfer"))?;
    let prov = Provenance {
        fg_source: "fg_stylized".into(),
        bg_source: "content".into(),
    };
    let out = composite_images(&fg, &loaded.mask, &[&loaded.content], BackgroundFill::Resize, prov)?.image;
    Ok((out, loaded.content))
}

/// `by_entry` decides on the majority of per-entry comparisons instead of the aggregate.
fn verdict(metric: &str, higher: bool, a: &MetricReport, b: &MetricReport, idx: usize, per_entry: &[(f64, f64)], by_entry: bool) -> Verdict {
    let mean = |r: &MetricReport| r.aggregate.first().map(|x| x.means[idx]).unwrap_or(f64::NAN);
    let beats = |x: f64, y: f64| if higher { x > y } else { x < y };
    let values = [mean(a), mean(b)];
    let wins = per_entry.iter().filter(|(x, y)| beats(*x, *y)).count();
    let holds = if by_entry {
        wins * 2 > per_entry.len()
    } else {
        beats(values[0], values[1])
    };
    Verdict {
        metric: metric.into(),
        higher_is_better: higher,
        values,
        wins,
        cases: per_entry.len(),
        holds,
    }
}

/// Paired comparison over a style set with identical seeds across arms.
pub fn run_ablation(store: &ModelStore, arm: AblationArm, entries: &[StyleSetEntry], cfg: &AblationConfig) -> Result<AblationReport> {
    let min = match arm {
        AblationArm::LossMaskedVsPlain => 5,
        AblationArm::AttentionS2kVsA2a => 3,
    };
    if entries.len() < min {
        return Err(invalid(format!("{arm:?} needs at least {min} style-set entries, got {}", entries.len())));
    }
    match arm {
        AblationArm::LossMaskedVsPlain => {
            let (mut a, mut b, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
            for e in entries {
                let seed = stage_seed(cfg.inversion.seed, &format!("ablate/{}", e.id));
                let ra = style_rep_rows(store, e, cfg, LossMode::Masked, cfg.count, "masked", seed)?;
                let rb = style_rep_rows(store, e, cfg, LossMode::Plain, cfg.count, "plain", seed)?;
                let m = |r: &[MetricRow]| r.iter().map(|x| x.clipscore_text).sum::<f64>() / r.len() as f64;
                pairs.push((m(&ra), m(&rb)));
                a.extend(ra);
                b.extend(rb);
            }
            let (ra, rb) = (MetricReport::from_rows(a), MetricReport::from_rows(b));
            let verdict = verdict("clipscore_text", true, &ra, &rb, 0, &pairs, false);
            Ok(AblationReport {
                arm,
                labels: ["masked".into(), "plain".into()],
                reports: [ra, rb],
                verdict,
            })
        }
        AblationArm::AttentionS2kVsA2a => {
            let metrics = store.metrics();
            let (mut a, mut b, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
            for e in entries {
                let row = |kind: AttentionKind, method: &str| -> Result<MetricRow> {
                    let (out, content) = attention_output(store, e, cfg, kind)?;
                    score_image(&metrics, &out, &e.style_text, &content, &content, e.id.clone(), method.into(), EvalMode::Stylized)
                };
                let ra = row(AttentionKind::S2k, "s2k")?;
                let rb = row(AttentionKind::A2a, "a2a")?;
                pairs.push((ra.lpips, rb.lpips));
                a.push(ra);
                b.push(rb);
            }
            let (ra, rb) = (MetricReport::from_rows(a), MetricReport::from_rows(b));
            let verdict = verdict("lpips_to_content", false, &ra, &rb, 2, &pairs, true);
            Ok(AblationReport {
                arm,
                labels: ["s2k".into(), "a2a".into()],
                reports: [ra, rb],
                verdict,
            })
        }
    }
}

/// Inputs of a standalone inversion run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertJob {
    pub style_text: String,
    pub style_image: Option<PathBuf>,
    pub content: PathBuf,
    pub mask: Option<PathBuf>,
    pub target: Target,
    pub count: usize,
    pub working_resolution: usize,
    pub inversion: InversionConfig,
    pub out_dir: PathBuf,
}

/// Invert style representations only, writing `style_reps/`, `latents/`
/// and `loss_curves/` under the output directory.
pub fn run_invert(job: &InvertJob, store: &ModelStore) -> Result<Vec<InversionOutcome>> {
    job.inversion.validate()?;
    if job.count == 0 {
        return Err(invalid("count must be at least 1"));
    }
    let inv = inversion_models(store)?;
    let res = inv.generator.resolution();
    let (content, mask) = (|| -> Result<(ImagePlane, BinaryMask)> {
        let content = load_image(&job.content, Some(job.working_resolution))?;
        let mask = content_mask(store, &content, job.mask.as_deref())?;
        Ok((content, mask))
    })()
    .map_err(|e| e.at_stage("ingest"))?;
    let region = match job.target {
        Target::Fg => mask,
        Target::Bg => mask.inverted(),
    };
    let masked_ref = apply_mask(&content, &region).map_err(|e| e.at_stage("ingest"))?;
    let style = job
        .style_image
        .as_ref()
        .map(|p| load_image(p, Some(res)))
        .transpose()
        .map_err(|e| e.at_stage("ingest"))?;
    let tag = match job.target {
        Target::Fg => "invert_fg",
        Target::Bg => "invert_bg",
    };
    let cfg = target_config(&job.inversion, stage_seed(job.inversion.seed, tag), style.is_some());
    let inputs = StyleInputs {
        text: &job.style_text,
        image: &style.unwrap_or_else(|| text_only_image(&masked_ref, res)),
        masked_ref: &masked_ref,
        unmasked_ref: Some(&content),
    };
    let outcomes = invert_multi(&inv, &inputs, job.target, &cfg, job.count).map_err(|e| e.at_stage(tag))?;
    write_reps(&job.out_dir, job.target, &outcomes)?;
    Ok(outcomes)
}
