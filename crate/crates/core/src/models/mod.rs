//! Reference model checkpoints.
//!
//! Every frozen network the pipeline consumes is loaded from a JSON
//! checkpoint `{format, role, checkpoint_id, params}`. The built-in
//! checkpoints are small, deterministic models generated from a fixed seed;
//! their serialized bytes are pinned by sha256 in the weights manifest like
//! any downloaded checkpoint.

pub mod clip;
pub mod features;
pub mod generator;
pub mod harmonizer;
pub mod quality;
pub mod segmenter;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "objmst-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    EncoderText,
    EncoderImage,
    Generator,
    VggEncoder,
    S2kMapper,
    Decoder,
    Harmonizer,
    Segmenter,
    Nima,
    Contrique,
    Lpips,
}

impl Role {
    pub const ALL: [Role; 11] = [
        Role::EncoderText,
        Role::EncoderImage,
        Role::Generator,
        Role::VggEncoder,
        Role::S2kMapper,
        Role::Decoder,
        Role::Harmonizer,
        Role::Segmenter,
        Role::Nima,
        Role::Contrique,
        Role::Lpips,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::EncoderText => "encoder_text",
            Role::EncoderImage => "encoder_image",
            Role::Generator => "generator",
            Role::VggEncoder => "vgg_encoder",
            Role::S2kMapper => "s2k_mapper",
            Role::Decoder => "decoder",
            Role::Harmonizer => "harmonizer",
            Role::Segmenter => "segmenter",
            Role::Nima => "nima",
            Role::Contrique => "contrique",
            Role::Lpips => "lpips",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown weights role {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<P> {
    pub format: String,
    pub role: Role,
    pub checkpoint_id: String,
    pub params: P,
}

impl<P: Serialize + DeserializeOwned> Checkpoint<P> {
    pub fn new(role: Role, checkpoint_id: &str, params: P) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            role,
            checkpoint_id: checkpoint_id.into(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint params serialize")
    }

    pub fn from_bytes(bytes: &[u8], expected: Role) -> Result<Self> {
        let ck: Self = serde_json::from_slice(bytes).map_err(|e| Error::InvalidCheckpoint {
            id: expected.to_string(),
            reason: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.role != expected {
            return Err(Error::InvalidCheckpoint {
                id: ck.checkpoint_id,
                reason: format!("expected {expected} in {CHECKPOINT_FORMAT}, found {} in {}", ck.role, ck.format),
            });
        }
        Ok(ck)
    }
}

/// Seeded generator for checkpoint parameters. Only uniform draws and
/// IEEE-exact arithmetic are used so serialized parameters are identical
/// across platforms.
pub(crate) fn param_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `cols` orthonormal columns of length `rows`, stored row-major (rows × cols).
pub(crate) fn orthonormal_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    assert!(cols <= rows);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = uniform_vec(rng, rows, -1.0, 1.0);
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (c, b) in basis.iter().enumerate() {
        for r in 0..rows {
            out[r * cols + c] = b[r];
        }
    }
    out
}

/// Round parameters to f32 precision so the JSON form is short and exact.
pub(crate) fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_orthonormal() {
        let mut rng = param_rng(5);
        let (rows, cols) = (20, 7);
        let m = orthonormal_columns(&mut rng, rows, cols);
        for i in 0..cols {
            for j in 0..cols {
                let d: f64 = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn role_names_round_trip() {
        for r in Role::ALL {
            assert_eq!(r.as_str().parse::<Role>().unwrap(), r);
        }
        assert!("nope".parse::<Role>().is_err());
    }
}
