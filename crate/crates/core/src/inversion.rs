//! Cross-modal latent inversion: optimise a generator latent so its output
//! follows the text direction and the masked style-image directions.

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clip_direction::{
    masked_directional_loss_grad, text_direction, Direction, Embedding, ImageEncoder, LossConfig, LossValue,
    TextEncoder,
};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::ingest::{crop_and_augment, AugmentConfig, PatchSet};
use crate::seed::indexed_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub generator_id: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl LatentVector {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("latent serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn latent_shape(&self) -> Vec<usize>;
    fn resolution(&self) -> usize;
    fn generate(&self, w: &LatentVector) -> Result<ImagePlane>;
    /// Latent gradient of `<grad, G(w)>`; `image` must be `G(w)`.
    fn backward(&self, w: &LatentVector, image: &ImagePlane, grad: &[f32]) -> Result<Vec<f64>>;

    fn mean_latent(&self) -> LatentVector {
        let shape = self.latent_shape();
        LatentVector {
            generator_id: self.id().to_string(),
            values: vec![0.0; shape.iter().product()],
            shape,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Fg,
    Bg,
}

impl Target {
    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Fg => "fg",
            Target::Bg => "bg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleRepresentation {
    pub image: ImagePlane,
    pub latent: LatentVector,
    pub target: Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    Random,
    #[default]
    MeanW,
}

/// Which image-side reference the directions are taken against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Directions relative to the masked content embedding.
    #[default]
    Masked,
    /// Directions relative to the unmasked content embedding.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub n_crop: usize,
    pub seed: u64,
    pub latent_init: LatentInit,
    /// Spread of the initial latent around mean-W (or of the random init).
    pub init_sigma: f64,
    pub loss_mode: LossMode,
    pub source_text: String,
    pub epsilon_norm: bool,
    pub augment: AugmentConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
            lambda: 1.0,
            n_crop: 16,
            seed: 0,
            latent_init: LatentInit::MeanW,
            init_sigma: 0.05,
            loss_mode: LossMode::Masked,
            source_text: "a photo".into(),
            epsilon_norm: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl InversionConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            source_text: self.source_text.clone(),
            n_crop: self.n_crop,
            epsilon_norm: self.epsilon_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("inversion steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Validation("learning_rate must be finite and nonnegative".into()));
        }
        if !(self.init_sigma >= 0.0) {
            return Err(Error::Validation("init_sigma must be nonnegative".into()));
        }
        self.loss_config().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub text_term: f64,
    pub image_term: f64,
}

#[derive(Clone, Debug)]
pub struct InversionOutcome {
    pub rep: StyleRepresentation,
    pub curve: Vec<LossRecord>,
    pub best_step: usize,
    /// Loss of the initial and returned latents on a fixed held-out crop set.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub warnings: Vec<String>,
}

impl InversionOutcome {
    pub fn curve_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.curve {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

pub struct InversionModels<'a> {
    pub text: &'a dyn TextEncoder,
    pub image: &'a dyn ImageEncoder,
    pub generator: &'a dyn Generator,
}

/// Style-side inputs shared by every step of one inversion.
struct Problem<'a> {
    models: &'a InversionModels<'a>,
    cfg: &'a InversionConfig,
    loss_cfg: LossConfig,
    text_dir: Direction,
    style_image: &'a ImagePlane,
    reference: Embedding,
}

struct StepEval {
    loss: LossValue,
    grad: Option<Vec<f64>>,
}

impl<'a> Problem<'a> {
    fn new(models: &'a InversionModels<'a>, inputs: &StyleInputs<'a>, cfg: &'a InversionConfig) -> Result<Self> {
        cfg.validate()?;
        let loss_cfg = cfg.loss_config();
        let text_dir = text_direction(models.text, inputs.text, &loss_cfg)?;
        let reference = match cfg.loss_mode {
            LossMode::Masked => models.image.encode_image(inputs.masked_ref)?,
            LossMode::Plain => {
                let r = inputs
                    .unmasked_ref
                    .ok_or_else(|| Error::Validation("plain loss mode needs the unmasked content".into()))?;
                models.image.encode_image(r)?
            }
        };
        Ok(Self {
            models,
            cfg,
            loss_cfg,
            text_dir,
            style_image: inputs.image,
            reference,
        })
    }

    fn direction(&self, e: &Embedding) -> Result<Direction> {
        Direction::between(e, &self.reference)
    }

    fn evaluate(&self, w: &LatentVector, crop_seed: u64, want_grad: bool, step: usize) -> Result<StepEval> {
        let g = self.models.generator;
        let img = g.generate(w)?;
        let (s_patches, i_patches): (PatchSet, PatchSet) =
            crop_and_augment(&img, self.style_image, self.cfg.n_crop, crop_seed, &self.cfg.augment)?;
        let enc = self.models.image;
        let s_dirs = s_patches
            .patches
            .iter()
            .map(|p| self.direction(&enc.encode_image(p)?))
            .collect::<Result<Vec<_>>>()?;
        let i_dirs = i_patches
            .patches
            .iter()
            .map(|p| self.direction(&enc.encode_image(p)?))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = masked_directional_loss_grad(&s_dirs, &i_dirs, &self.text_dir, &self.loss_cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total {} (text {}, image {})", loss.total, loss.text_term, loss.image_term),
            });
        }
        if !want_grad {
            return Ok(StepEval { loss, grad: None });
        }
        let (h, wd) = img.dims();
        let mut img_grad = vec![0.0f32; h * wd * 3];
        for ((patch, grid), ge) in s_patches.patches.iter().zip(&s_patches.grids).zip(&grads) {
            let pg = enc.backward(patch, ge)?;
            let back = grid.apply_transpose(&pg);
            img_grad.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        }
        let dw = g.backward(w, &img, &img_grad)?;
        if dw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "non-finite latent gradient".into(),
            });
        }
        Ok(StepEval { loss, grad: Some(dw) })
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub fn initial_latent(generator: &dyn Generator, cfg: &InversionConfig) -> LatentVector {
    let mut w = generator.mean_latent();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = match cfg.latent_init {
        LatentInit::MeanW => cfg.init_sigma,
        LatentInit::Random => 1.0,
    };
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in &mut w.values {
            *v += normal.sample(&mut rng);
        }
    }
    w
}

const EVAL_STREAM: u64 = u64::MAX;

/// Style-side inputs of one inversion.
#[derive(Clone, Copy)]
pub struct StyleInputs<'a> {
    pub text: &'a str,
    pub image: &'a ImagePlane,
    /// Content with everything outside the object zeroed.
    pub masked_ref: &'a ImagePlane,
    /// The same content without the mask; required by [`LossMode::Plain`].
    pub unmasked_ref: Option<&'a ImagePlane>,
}

/// `w* = argmin_w L(w)`, returning the best-seen iterate.
pub fn invert(
    models: &InversionModels<'_>,
    inputs: &StyleInputs<'_>,
    target: Target,
    cfg: &InversionConfig,
) -> Result<InversionOutcome> {
    let problem = Problem::new(models, inputs, cfg)?;
    let mut w = initial_latent(models.generator, cfg);
    let w_init = w.clone();
    let mut adam = Adam::new(w.values.len());
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, 0usize, w.clone());
    for step in 0..=cfg.steps {
        let update = step < cfg.steps;
        let eval = problem.evaluate(&w, indexed_seed(cfg.seed, step as u64), update, step)?;
        curve.push(LossRecord {
            step,
            total: eval.loss.total,
            text_term: eval.loss.text_term,
            image_term: eval.loss.image_term,
        });
        if eval.loss.total < best.0 {
            best = (eval.loss.total, step, w.clone());
        }
        if let Some(g) = eval.grad {
            adam.step(&mut w.values, &g, cfg.learning_rate);
        }
        if step % 50 == 0 {
            debug!("invert {} step {step}: loss {:.5}", target.as_str(), eval.loss.total);
        }
    }
    let eval_seed = indexed_seed(cfg.seed, EVAL_STREAM);
    let initial_loss = problem.evaluate(&w_init, eval_seed, false, 0)?.loss.total;
    let final_loss = problem.evaluate(&best.2, eval_seed, false, best.1)?.loss.total;
    let mut warnings = Vec::new();
    if final_loss >= initial_loss {
        let msg = format!("no improvement: final loss {final_loss:.5} >= initial {initial_loss:.5}");
        warn!("{msg}");
        warnings.push(msg);
    }
    let image = models.generator.generate(&best.2)?;
    Ok(InversionOutcome {
        rep: StyleRepresentation {
            image,
            latent: best.2,
            target,
        },
        curve,
        best_step: best.1,
        initial_loss,
        final_loss,
        warnings,
    })
}

/// Loss and latent gradient of `w` on the crop set drawn from `crop_seed`.
pub fn loss_at(
    models: &InversionModels<'_>,
    inputs: &StyleInputs<'_>,
    cfg: &InversionConfig,
    w: &LatentVector,
    crop_seed: u64,
) -> Result<(LossValue, Vec<f64>)> {
    let problem = Problem::new(models, inputs, cfg)?;
    let eval = problem.evaluate(w, crop_seed, true, 0)?;
    Ok((eval.loss, eval.grad.expect("gradient requested")))
}

/// `count` independent inversions with seeds `seed, seed+1, …`.
pub fn invert_multi(
    models: &InversionModels<'_>,
    inputs: &StyleInputs<'_>,
    target: Target,
    cfg: &InversionConfig,
    count: usize,
) -> Result<Vec<InversionOutcome>> {
    if count == 0 {
        return Err(Error::Validation("representation count must be at least 1".into()));
    }
    (0..count)
        .map(|i| {
            let c = InversionConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            invert(models, inputs, target, &c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut a = Adam::new(2);
        let mut x = vec![1.0, -1.0];
        a.step(&mut x, &[2.0, -3.0], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }
}
