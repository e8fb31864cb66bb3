//! Built-in procedural image generator.
//!
//! A latent `w` is mapped linearly to per-channel colour biases and the
//! amplitudes of a fixed bank of oriented sinusoids; pixels are the logistic
//! of the resulting field. The map is smooth in `w`, so gradients flow from
//! pixels back to the latent in closed form.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::inversion::{Generator, LatentVector};
use crate::models::{param_rng, Checkpoint, Role};

pub const CHECKPOINT_ID: &str = "objmst-procedural-gen-v1";
const SEED: u64 = 0x6e47_0001;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub resolution: usize,
    pub latent_dim: usize,
    /// Spatial frequencies in cycles per frame, (fy, fx).
    pub frequencies: Vec<[f32; 2]>,
    /// Phases as fractions of a period.
    pub phases: Vec<f32>,
    /// Parameter vector at w = 0: 3 biases then 3 × K amplitudes (channel-major).
    pub theta0: Vec<f32>,
    /// (3 + 3K) × latent_dim, row-major.
    pub mapping: Vec<f32>,
}

impl GeneratorParams {
    fn bases(&self) -> usize {
        self.frequencies.len()
    }

    fn theta_len(&self) -> usize {
        3 + 3 * self.bases()
    }
}

pub fn builtin_checkpoint() -> Checkpoint<GeneratorParams> {
    let mut rng = param_rng(SEED);
    let latent_dim = 64;
    let k = 48;
    let magnitudes = [1.0f64, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0];
    let orientations: [(f64, f64); 8] = [
        (1.0, 0.0),
        (0.0, 1.0),
        (1.0, 1.0),
        (1.0, -1.0),
        (2.0, 1.0),
        (1.0, 2.0),
        (2.0, -1.0),
        (-1.0, 2.0),
    ];
    let mut frequencies = Vec::with_capacity(k);
    let mut phases = Vec::with_capacity(k);
    for i in 0..k {
        let m = magnitudes[i % magnitudes.len()];
        let (dy, dx) = orientations[rng.random_range(0..orientations.len())];
        let n = (dy * dy + dx * dx).sqrt();
        frequencies.push([(m * dy / n) as f32, (m * dx / n) as f32]);
        phases.push(rng.random_range(0.0f64..1.0) as f32);
    }
    let theta_len = 3 + 3 * k;
    let row_scale = |r: usize| -> f64 {
        if r < 3 {
            1.5
        } else {
            let f = frequencies[(r - 3) % k];
            let mag = ((f[0] as f64).powi(2) + (f[1] as f64).powi(2)).sqrt();
            0.6 / (1.0 + mag / 24.0)
        }
    };
    let mut theta0 = Vec::with_capacity(theta_len);
    for r in 0..theta_len {
        let span = if r < 3 { 0.2 } else { 0.1 * row_scale(r) };
        theta0.push(rng.random_range(-span..span) as f32);
    }
    // Uniform entries with variance row_scale² / latent_dim, so a unit-variance
    // latent gives parameters of spread row_scale.
    let unit = (3.0 / latent_dim as f64).sqrt();
    let mut mapping = Vec::with_capacity(theta_len * latent_dim);
    for r in 0..theta_len {
        let s = unit * row_scale(r);
        for _ in 0..latent_dim {
            mapping.push(rng.random_range(-s..s) as f32);
        }
    }
    Checkpoint::new(
        Role::Generator,
        CHECKPOINT_ID,
        GeneratorParams {
            resolution: 256,
            latent_dim,
            frequencies,
            phases,
            theta0,
            mapping,
        },
    )
}

pub struct ProceduralGenerator {
    id: String,
    params: GeneratorParams,
    /// Basis values, pixel-major: `basis[p * K + b]`.
    basis: Vec<f32>,
}

impl ProceduralGenerator {
    pub fn from_checkpoint(ck: Checkpoint<GeneratorParams>) -> Result<Self> {
        let p = &ck.params;
        let k = p.bases();
        if p.phases.len() != k
            || p.theta0.len() != p.theta_len()
            || p.mapping.len() != p.theta_len() * p.latent_dim
            || p.resolution < crate::image::MIN_SIDE
        {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: "generator parameter shapes".into(),
            });
        }
        let res = p.resolution;
        let mut basis = vec![0.0f32; k * res * res];
        basis.par_chunks_mut(res * k).enumerate().for_each(|(y, row)| {
            let py = (y as f64 + 0.5) / res as f64;
            for x in 0..res {
                let px = (x as f64 + 0.5) / res as f64;
                for (i, v) in row[x * k..(x + 1) * k].iter_mut().enumerate() {
                    let [fy, fx] = p.frequencies[i];
                    let arg = 2.0 * std::f64::consts::PI * (fy as f64 * py + fx as f64 * px + p.phases[i] as f64);
                    *v = arg.sin() as f32;
                }
            }
        });
        Ok(Self {
            id: ck.checkpoint_id,
            params: ck.params,
            basis,
        })
    }

    pub fn builtin() -> Self {
        Self::from_checkpoint(builtin_checkpoint()).expect("builtin checkpoint")
    }

    fn check(&self, w: &LatentVector) -> Result<()> {
        let expected = self.latent_shape();
        if w.shape != expected || w.values.len() != self.params.latent_dim {
            return Err(Error::LatentShapeMismatch {
                expected,
                actual: w.shape.clone(),
            });
        }
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent contains non-finite values".into()));
        }
        Ok(())
    }

    fn theta(&self, w: &LatentVector) -> Vec<f32> {
        let p = &self.params;
        let d = p.latent_dim;
        (0..p.theta_len())
            .map(|r| {
                let row = &p.mapping[r * d..(r + 1) * d];
                let acc: f64 = row.iter().zip(&w.values).map(|(m, v)| *m as f64 * v).sum();
                (p.theta0[r] as f64 + acc) as f32
            })
            .collect()
    }
}

impl Generator for ProceduralGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![1, self.params.latent_dim]
    }

    fn resolution(&self) -> usize {
        self.params.resolution
    }

    fn generate(&self, w: &LatentVector) -> Result<ImagePlane> {
        self.check(w)?;
        let theta = self.theta(w);
        let res = self.params.resolution;
        let k = self.params.bases();
        let npix = res * res;
        let mut data = vec![0.0f32; npix * 3];
        data.par_chunks_mut(res * 3).enumerate().for_each(|(y, row)| {
            for x in 0..res {
                let p = y * res + x;
                let basis = &self.basis[p * k..(p + 1) * k];
                for c in 0..3 {
                    let amps = &theta[3 + c * k..3 + (c + 1) * k];
                    let z = theta[c] + amps.iter().zip(basis).map(|(a, v)| a * v).sum::<f32>();
                    row[x * 3 + c] = 1.0 / (1.0 + (-z).exp());
                }
            }
        });
        ImagePlane::from_raw(res, res, data)
    }

    fn backward(&self, w: &LatentVector, image: &ImagePlane, grad: &[f32]) -> Result<Vec<f64>> {
        self.check(w)?;
        let res = self.params.resolution;
        let k = self.params.bases();
        let npix = res * res;
        if image.dims() != (res, res) || grad.len() != npix * 3 {
            return Err(Error::SizeMismatch("generator gradient shape".into()));
        }
        let y_out = image.data();
        let theta_len = self.params.theta_len();
        // Per-row partial sums, reduced in row order so results do not depend
        // on thread scheduling.
        let partial: Vec<Vec<f64>> = (0..res)
            .into_par_iter()
            .map(|y| {
                let mut acc = vec![0.0f64; theta_len];
                for x in 0..res {
                    let p = y * res + x;
                    let basis = &self.basis[p * k..(p + 1) * k];
                    for c in 0..3 {
                        let v = y_out[p * 3 + c];
                        let dz = grad[p * 3 + c] * v * (1.0 - v);
                        if dz == 0.0 {
                            continue;
                        }
                        acc[c] += dz as f64;
                        for (a, b) in acc[3 + c * k..3 + (c + 1) * k].iter_mut().zip(basis) {
                            *a += (dz * b) as f64;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut d_theta = vec![0.0f64; theta_len];
        for row in &partial {
            for (a, b) in d_theta.iter_mut().zip(row) {
                *a += b;
            }
        }
        let d = self.params.latent_dim;
        let mut d_w = vec![0.0f64; d];
        for (r, g) in d_theta.iter().enumerate() {
            let row = &self.params.mapping[r * d..(r + 1) * d];
            for (dw, m) in d_w.iter_mut().zip(row) {
                *dw += g * *m as f64;
            }
        }
        Ok(d_w)
    }
}
