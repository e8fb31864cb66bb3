//! Embedding directions in the joint text/image space and the masked
//! directional loss that drives latent inversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::EncoderUnavailable("encoder produced a non-finite embedding".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        dot(&self.values, &other.values) / (self.norm * other.norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub values: Vec<f64>,
}

impl Direction {
    /// `to − from`.
    pub fn between(to: &Embedding, from: &Embedding) -> Result<Self> {
        if to.dim() != from.dim() {
            return Err(Error::SizeMismatch(format!(
                "embedding dims {} and {}",
                to.dim(),
                from.dim()
            )));
        }
        Ok(Self {
            values: to.values.iter().zip(&from.values).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    fn nonzero(self, what: &str) -> Result<Self> {
        if self.is_zero() {
            Err(Error::DegenerateDirection(format!("{what} is the zero vector")))
        } else {
            Ok(self)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub source_text: String,
    pub n_crop: usize,
    /// Stabilise norms with 1e-8 instead of rejecting zero directions.
    pub epsilon_norm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            source_text: "a photo".into(),
            n_crop: 16,
            epsilon_norm: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Validation(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if self.n_crop == 0 {
            return Err(Error::Validation("n_crop must be at least 1".into()));
        }
        Ok(())
    }
}

pub const NORM_EPSILON: f64 = 1e-8;

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<Embedding>;
}

pub trait ImageEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_image(&self, image: &ImagePlane) -> Result<Embedding>;
    /// Pixel-space gradient (HWC, same shape as `image`) of `<grad, E(image)>`.
    fn backward(&self, image: &ImagePlane, grad: &[f64]) -> Result<Vec<f32>>;
}

/// `E_T(style_text) − E_T(source_text)`.
pub fn text_direction(enc: &dyn TextEncoder, style_text: &str, cfg: &LossConfig) -> Result<Direction> {
    let style = enc.encode_text(style_text)?;
    let source = enc.encode_text(&cfg.source_text)?;
    Direction::between(&style, &source)?.nonzero("text direction")
}

/// `E_I(patch) − E_I(masked_ref)`.
pub fn masked_image_direction(
    enc: &dyn ImageEncoder,
    patch: &ImagePlane,
    masked_ref: &ImagePlane,
) -> Result<Direction> {
    let p = enc.encode_image(patch)?;
    let r = enc.encode_image(masked_ref)?;
    Direction::between(&p, &r)?.nonzero("image direction")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// `(1/N) Σ_j (1 − cos(ΔS_j, ΔT))`
    pub text_term: f64,
    /// `(1/N²) Σ_j Σ_k (1 − cos(ΔS_j, ΔI_k))`, before weighting by λ.
    pub image_term: f64,
}

fn check_inputs(style: &[Direction], input: &[Direction], text: &Direction, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if style.len() != input.len() || style.len() != cfg.n_crop {
        return Err(Error::SizeMismatch(format!(
            "{} style and {} input directions for n_crop {}",
            style.len(),
            input.len(),
            cfg.n_crop
        )));
    }
    let d = text.values.len();
    if style.iter().chain(input).any(|v| v.values.len() != d) {
        return Err(Error::SizeMismatch("directions differ in dimension".into()));
    }
    if !cfg.epsilon_norm {
        let zero = text.is_zero() || style.iter().chain(input).any(Direction::is_zero);
        if zero {
            return Err(Error::DegenerateDirection("zero direction in loss".into()));
        }
    }
    Ok(())
}

fn norm_of(v: &[f64], cfg: &LossConfig) -> f64 {
    let n = dot(v, v).sqrt();
    if cfg.epsilon_norm {
        n + NORM_EPSILON
    } else {
        n
    }
}

pub fn masked_directional_loss(
    style_dirs: &[Direction],
    input_dirs: &[Direction],
    text_dir: &Direction,
    cfg: &LossConfig,
) -> Result<LossValue> {
    Ok(loss_and_grad(style_dirs, input_dirs, text_dir, cfg, false)?.0)
}

/// Loss plus its gradient with respect to each style-patch direction
/// (equivalently, each style-patch embedding).
pub fn masked_directional_loss_grad(
    style_dirs: &[Direction],
    input_dirs: &[Direction],
    text_dir: &Direction,
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<Vec<f64>>)> {
    loss_and_grad(style_dirs, input_dirs, text_dir, cfg, true)
}

fn loss_and_grad(
    style: &[Direction],
    input: &[Direction],
    text: &Direction,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossValue, Vec<Vec<f64>>)> {
    check_inputs(style, input, text, cfg)?;
    let n = style.len() as f64;
    let d = text.values.len();
    let t_norm = norm_of(&text.values, cfg);
    let t_hat: Vec<f64> = text.values.iter().map(|v| v / t_norm).collect();
    // Σ_k ΔI_k / |ΔI_k|
    let mut i_sum = vec![0.0; d];
    for dir in input {
        let inv = 1.0 / norm_of(&dir.values, cfg);
        for (acc, v) in i_sum.iter_mut().zip(&dir.values) {
            *acc += v * inv;
        }
    }
    let mut text_acc = 0.0;
    let mut image_acc = 0.0;
    let mut grads = Vec::new();
    for s in style {
        let raw = dot(&s.values, &s.values).sqrt();
        let s_norm = norm_of(&s.values, cfg);
        let ct = dot(&s.values, &t_hat) / s_norm;
        let ci = dot(&s.values, &i_sum) / s_norm;
        text_acc += 1.0 - ct;
        image_acc += n - ci;
        if want_grad {
            // d/ds (s·b / |s|) = b/|s| − (s·b) s / (|s|² |s|_raw)
            let radial = if raw > 0.0 { 1.0 / (s_norm * raw) } else { 0.0 };
            let g: Vec<f64> = (0..d)
                .map(|c| {
                    let dct = t_hat[c] / s_norm - ct * s.values[c] * radial;
                    let dci = i_sum[c] / s_norm - ci * s.values[c] * radial;
                    -dct / n - cfg.lambda * dci / (n * n)
                })
                .collect();
            grads.push(g);
        }
    }
    let text_term = text_acc / n;
    let image_term = image_acc / (n * n);
    let total = text_term + cfg.lambda * image_term;
    Ok((
        LossValue {
            total,
            text_term,
            image_term,
        },
        grads,
    ))
}
