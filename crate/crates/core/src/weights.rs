//! Checkpoint manifest, digest-verified fetching, and the loaded model store.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::clip_direction::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fsutil::{sha256_file, sha256_hex, write_atomic};
use crate::harmonize::Harmonizer;
use crate::ingest::Segmenter;
use crate::inversion::Generator;
use crate::metrics::{AestheticModel, MetricModels, PerceptualMetric, QualityModel};
use crate::models::clip::{RefImageEncoder, RefTextEncoder};
use crate::models::features::{BlockFrameDecoder, BlockFrameEncoder};
use crate::models::generator::ProceduralGenerator;
use crate::models::harmonizer::StatHarmonizer;
use crate::models::quality::{FrameLpips, LinearContrique, LinearNima};
use crate::models::segmenter::SaliencySegmenter;
use crate::models::{self, Checkpoint, Role};
use crate::s2k_transfer::{AttentionMapper, FeatureDecoder, FeatureEncoder, TransferModels};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsEntry {
    pub role: Role,
    pub checkpoint_id: String,
    pub sha256: String,
    pub source_url: String,
    /// Relative paths are resolved against the weights directory.
    pub local_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub entries: Vec<WeightsEntry>,
}

/// Pinned sha256 of each built-in checkpoint's serialized bytes.
const BUILTIN_DIGESTS: [(Role, &str); 11] = [
    (Role::EncoderText, "0298f9394af46b6d27fa7adf7e633ceb5bb5b07a18f647a00721d48a8d9a8dcb"),
    (Role::EncoderImage, "abaca30c10c323042ca13b0e2604c96f463aac44702868ea1c96ab2c230fabdd"),
    (Role::Generator, "b3120c5dca9434b8dd5a67fb8f70eb21181145da12a7ee4968ef9b491fabcaf3"),
    (Role::VggEncoder, "9c803b3f797907524ecc1ebfd3f6496f32c2b334ca9b76d3a800b3d31539592f"),
    (Role::S2kMapper, "8ce74f4e31122082c17eaccc2f4f44477cdba4fd9cbc06d664db50e8657a879e"),
    (Role::Decoder, "467e352b02bf35a119b6adb2962a9318d29cac3d7cf72b4c13ec42db32665ef2"),
    (Role::Harmonizer, "470e0a834d42257691c672d8e656eb982240dd4a17e91493008d3372ec270605"),
    (Role::Segmenter, "ed22650b2638cf1ce2217e76e7d32661b5fbefe0dd8e65c73eb8e9a4887dcc97"),
    (Role::Nima, "263032cd1bf0ba477f0b142747eb71e74ccaa83d478f368ed8eb680abea4b292"),
    (Role::Contrique, "1efd94d13961a863f3fa06a0b8f5746a89868cff919ac540bf65f557e74f442f"),
    (Role::Lpips, "190f02b9756292d9580cef3de143925c67f0e7e528a18e942f27ac2009808be5"),
];

/// Serialized bytes of the built-in checkpoint for `role`, with its id.
pub fn builtin_checkpoint_bytes(role: Role) -> (String, Vec<u8>) {
    fn pack<P: Serialize + serde::de::DeserializeOwned>(ck: Checkpoint<P>) -> (String, Vec<u8>) {
        (ck.checkpoint_id.clone(), ck.to_bytes())
    }
    match role {
        Role::EncoderText => pack(models::clip::builtin_text_checkpoint()),
        Role::EncoderImage => pack(models::clip::builtin_image_checkpoint()),
        Role::Generator => pack(models::generator::builtin_checkpoint()),
        Role::VggEncoder => pack(models::features::builtin_encoder_checkpoint()),
        Role::S2kMapper => pack(models::features::builtin_mapper_checkpoint()),
        Role::Decoder => pack(models::features::builtin_decoder_checkpoint()),
        Role::Harmonizer => pack(models::harmonizer::builtin_checkpoint()),
        Role::Segmenter => pack(models::segmenter::builtin_checkpoint()),
        Role::Nima => pack(models::quality::builtin_nima_checkpoint()),
        Role::Contrique => pack(models::quality::builtin_contrique_checkpoint()),
        Role::Lpips => pack(models::quality::builtin_lpips_checkpoint()),
    }
}

pub fn pinned_digest(role: Role) -> &'static str {
    BUILTIN_DIGESTS.iter().find(|(r, _)| *r == role).map(|(_, d)| *d).expect("every role pinned")
}

impl WeightsManifest {
    /// Manifest of the built-in checkpoints under their pinned digests.
    pub fn builtin() -> Self {
        let entries = Role::ALL
            .iter()
            .map(|&role| {
                let (checkpoint_id, _) = builtin_checkpoint_bytes(role);
                WeightsEntry {
                    role,
                    local_path: PathBuf::from(role.as_str()).join(format!("{checkpoint_id}.json")),
                    checkpoint_id,
                    sha256: pinned_digest(role).to_string(),
                    source_url: format!("builtin://{}", role.as_str()),
                }
            })
            .collect();
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn entry(&self, role: Role) -> Result<&WeightsEntry> {
        self.entries
            .iter()
            .find(|e| e.role == role)
            .ok_or_else(|| Error::CheckpointMissing(role.to_string()))
    }
}

fn fetch_bytes(entry: &WeightsEntry, weights_dir: &Path) -> Result<Vec<u8>> {
    let url = &entry.source_url;
    let failed = |reason: String| Error::DownloadFailed {
        url: url.clone(),
        reason,
    };
    if let Some(role) = url.strip_prefix("builtin://") {
        let role: Role = role.parse().map_err(|_| failed(format!("unknown builtin role {role:?}")))?;
        return Ok(builtin_checkpoint_bytes(role).1);
    }
    if let Some(path) = url.strip_prefix("file://") {
        let p = Path::new(path);
        let p = if p.is_absolute() { p.to_path_buf() } else { weights_dir.join(p) };
        return std::fs::read(&p).map_err(|e| failed(e.to_string()));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        let resp = ureq::get(url).call().map_err(|e| failed(e.to_string()))?;
        let mut body = Vec::new();
        resp.into_body()
            .into_reader()
            .read_to_end(&mut body)
            .map_err(|e| failed(e.to_string()))?;
        return Ok(body);
    }
    Err(failed("unsupported URL scheme".into()))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub paths: BTreeMap<Role, PathBuf>,
    pub downloaded: Vec<Role>,
    pub cached: Vec<Role>,
}

/// Ensure every requested checkpoint is present under `weights_dir` with
/// its manifest digest. Cached files are verified and never re-fetched;
/// fetched bytes are verified before they are moved into place.
pub fn fetch_weights(manifest: &WeightsManifest, roles: &[Role], weights_dir: &Path) -> Result<FetchReport> {
    let mut report = FetchReport::default();
    for &role in roles {
        let entry = manifest.entry(role)?;
        let path = if entry.local_path.is_absolute() {
            entry.local_path.clone()
        } else {
            weights_dir.join(&entry.local_path)
        };
        if path.is_file() {
            let actual = sha256_file(&path)?;
            if actual != entry.sha256 {
                return Err(Error::DigestMismatch {
                    role: role.to_string(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            report.cached.push(role);
        } else {
            let bytes = fetch_bytes(entry, weights_dir)?;
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(Error::DigestMismatch {
                    role: role.to_string(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            write_atomic(&path, &bytes)?;
            info!("fetched {role} ({}) from {}", entry.checkpoint_id, entry.source_url);
            report.downloaded.push(role);
        }
        report.paths.insert(role, path);
    }
    Ok(report)
}

/// Loaded, digest-verified models. Absent roles stay `None`.
#[derive(Default)]
pub struct ModelStore {
    pub text: Option<RefTextEncoder>,
    pub image: Option<RefImageEncoder>,
    pub generator: Option<ProceduralGenerator>,
    pub encoder: Option<BlockFrameEncoder>,
    pub mapper: Option<AttentionMapper>,
    pub decoder: Option<BlockFrameDecoder>,
    pub harmonizer: Option<StatHarmonizer>,
    pub segmenter: Option<SaliencySegmenter>,
    pub nima: Option<LinearNima>,
    pub contrique: Option<LinearContrique>,
    pub lpips: Option<FrameLpips>,
    /// role → (checkpoint id, sha256) of every loaded checkpoint.
    pub digests: BTreeMap<Role, (String, String)>,
}

impl std::fmt::Debug for ModelStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelStore").field("digests", &self.digests).finish_non_exhaustive()
    }
}

fn read_checkpoint<P: Serialize + serde::de::DeserializeOwned>(path: &Path, role: Role) -> Result<Checkpoint<P>> {
    Checkpoint::from_bytes(&std::fs::read(path)?, role)
}

impl ModelStore {
    /// Fetch, verify and load the given roles.
    pub fn load(manifest: &WeightsManifest, roles: &[Role], weights_dir: &Path) -> Result<Self> {
        let report = fetch_weights(manifest, roles, weights_dir)?;
        let mut store = ModelStore::default();
        for (&role, path) in &report.paths {
            let entry = manifest.entry(role)?;
            // The digest was verified by fetch; re-check the bytes actually parsed.
            let bytes = std::fs::read(path)?;
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(Error::DigestMismatch {
                    role: role.to_string(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            match role {
                Role::EncoderText => store.text = Some(RefTextEncoder::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::EncoderImage => store.image = Some(RefImageEncoder::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::Generator => {
                    store.generator = Some(ProceduralGenerator::from_checkpoint(read_checkpoint(path, role)?)?)
                }
                Role::VggEncoder => store.encoder = Some(BlockFrameEncoder::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::S2kMapper => store.mapper = Some(AttentionMapper::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::Decoder => store.decoder = Some(BlockFrameDecoder::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::Harmonizer => store.harmonizer = Some(StatHarmonizer::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::Segmenter => store.segmenter = Some(SaliencySegmenter::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::Nima => store.nima = Some(LinearNima::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::Contrique => store.contrique = Some(LinearContrique::from_checkpoint(read_checkpoint(path, role)?)?),
                Role::Lpips => store.lpips = Some(FrameLpips::from_checkpoint(read_checkpoint(path, role)?)?),
            }
            store.digests.insert(role, (entry.checkpoint_id.clone(), actual));
        }
        Ok(store)
    }

    /// All built-in models, constructed in memory without touching disk.
    pub fn builtin() -> Self {
        let mut digests = BTreeMap::new();
        for role in Role::ALL {
            let (id, bytes) = builtin_checkpoint_bytes(role);
            digests.insert(role, (id, sha256_hex(&bytes)));
        }
        Self {
            text: Some(RefTextEncoder::builtin()),
            image: Some(RefImageEncoder::builtin()),
            generator: Some(ProceduralGenerator::builtin()),
            encoder: Some(BlockFrameEncoder::builtin()),
            mapper: Some(AttentionMapper::builtin()),
            decoder: Some(BlockFrameDecoder::builtin()),
            harmonizer: Some(StatHarmonizer::builtin()),
            segmenter: Some(SaliencySegmenter::builtin()),
            nima: Some(LinearNima::builtin()),
            contrique: Some(LinearContrique::builtin()),
            lpips: Some(FrameLpips::builtin()),
            digests,
        }
    }

    pub fn text_encoder(&self) -> Result<&dyn TextEncoder> {
        self.text
            .as_ref()
            .map(|m| m as &dyn TextEncoder)
            .ok_or_else(|| Error::EncoderUnavailable("text encoder not loaded".into()))
    }

    pub fn image_encoder(&self) -> Result<&dyn ImageEncoder> {
        self.image
            .as_ref()
            .map(|m| m as &dyn ImageEncoder)
            .ok_or_else(|| Error::EncoderUnavailable("image encoder not loaded".into()))
    }

    pub fn generator(&self) -> Result<&dyn Generator> {
        self.generator
            .as_ref()
            .map(|m| m as &dyn Generator)
            .ok_or_else(|| Error::GeneratorUnavailable("generator not loaded".into()))
    }

    pub fn transfer(&self) -> Result<TransferModels<'_>> {
        Ok(TransferModels {
            encoder: self
                .encoder
                .as_ref()
                .map(|m| m as &dyn FeatureEncoder)
                .ok_or_else(|| Error::EncoderUnavailable("feature encoder not loaded".into()))?,
            mapper: self
                .mapper
                .as_ref()
                .ok_or_else(|| Error::CheckpointMissing(Role::S2kMapper.to_string()))?,
            decoder: self
                .decoder
                .as_ref()
                .map(|m| m as &dyn FeatureDecoder)
                .ok_or_else(|| Error::DecoderUnavailable("decoder not loaded".into()))?,
        })
    }

    pub fn harmonizer(&self) -> Option<&dyn Harmonizer> {
        self.harmonizer.as_ref().map(|m| m as &dyn Harmonizer)
    }

    pub fn segmenter(&self) -> Option<&dyn Segmenter> {
        self.segmenter.as_ref().map(|m| m as &dyn Segmenter)
    }

    pub fn metrics(&self) -> MetricModels<'_> {
        MetricModels {
            text: self.text.as_ref().map(|m| m as &dyn TextEncoder),
            image: self.image.as_ref().map(|m| m as &dyn ImageEncoder),
            lpips: self.lpips.as_ref().map(|m| m as &dyn PerceptualMetric),
            nima: self.nima.as_ref().map(|m| m as &dyn AestheticModel),
            contrique: self.contrique.as_ref().map(|m| m as &dyn QualityModel),
        }
    }
}
