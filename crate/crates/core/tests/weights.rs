use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use objmst::fsutil::sha256_hex;
use objmst::models::Role;
use objmst::weights::{builtin_checkpoint_bytes, fetch_weights, pinned_digest, ModelStore, WeightsEntry, WeightsManifest};
use objmst::Error;

/// Serves `body` for every GET until the process exits; counts requests.
fn serve(body: Vec<u8>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            loop {
                line.clear();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let head = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&body);
        }
    });
    (format!("http://{addr}/generator.json"), hits)
}

fn entry(role: Role, url: String, sha: String) -> WeightsEntry {
    let (checkpoint_id, _) = builtin_checkpoint_bytes(role);
    WeightsEntry {
        role,
        local_path: format!("{}/{checkpoint_id}.json", role.as_str()).into(),
        checkpoint_id,
        sha256: sha,
        source_url: url,
    }
}

#[test]
fn pinned_digests_match_builtin_bytes() {
    for role in Role::ALL {
        let (_, bytes) = builtin_checkpoint_bytes(role);
        assert_eq!(sha256_hex(&bytes), pinned_digest(role), "{role}");
    }
}

#[test]
fn http_fetch_verifies_and_caches() {
    let (_, bytes) = builtin_checkpoint_bytes(Role::Generator);
    let (url, hits) = serve(bytes.clone());
    let dir = tempfile::tempdir().unwrap();
    let manifest = WeightsManifest {
        entries: vec![entry(Role::Generator, url, sha256_hex(&bytes))],
    };
    let first = fetch_weights(&manifest, &[Role::Generator], dir.path()).unwrap();
    assert_eq!(first.downloaded, [Role::Generator]);
    assert_eq!(std::fs::read(&first.paths[&Role::Generator]).unwrap(), bytes);
    let second = fetch_weights(&manifest, &[Role::Generator], dir.path()).unwrap();
    assert_eq!(second.cached, [Role::Generator]);
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    let store = ModelStore::load(&manifest, &[Role::Generator], dir.path()).unwrap();
    let loaded = store.generator().unwrap();
    let builtin = ModelStore::builtin();
    let reference = builtin.generator().unwrap();
    let w = reference.mean_latent();
    assert_eq!(loaded.generate(&w).unwrap(), reference.generate(&w).unwrap());
}

#[test]
fn wrong_digest_is_rejected_before_writing() {
    let (_, bytes) = builtin_checkpoint_bytes(Role::Generator);
    let (url, _) = serve(bytes);
    let dir = tempfile::tempdir().unwrap();
    let manifest = WeightsManifest {
        entries: vec![entry(Role::Generator, url, "00".repeat(32))],
    };
    let err = fetch_weights(&manifest, &[Role::Generator], dir.path()).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }));
    assert!(err.is_weights_error());
    assert!(!dir.path().join("generator").exists());
}

#[test]
fn corrupted_cache_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = WeightsManifest::builtin();
    let report = fetch_weights(&manifest, &[Role::Nima], dir.path()).unwrap();
    let path = &report.paths[&Role::Nima];
    let mut bytes = std::fs::read(path).unwrap();
    bytes[10] ^= 1;
    std::fs::write(path, bytes).unwrap();
    let err = ModelStore::load(&manifest, &[Role::Nima], dir.path()).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }));
}

#[test]
fn unreachable_source_is_a_download_failure() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let manifest = WeightsManifest {
        entries: vec![entry(Role::Lpips, format!("http://{addr}/x.json"), pinned_digest(Role::Lpips).into())],
    };
    let err = fetch_weights(&manifest, &[Role::Lpips], dir.path()).unwrap_err();
    assert!(matches!(err, Error::DownloadFailed { .. }));
}

#[test]
fn file_sources_resolve_against_weights_dir() {
    let dir = tempfile::tempdir().unwrap();
    let (_, bytes) = builtin_checkpoint_bytes(Role::Harmonizer);
    std::fs::write(dir.path().join("h.json"), &bytes).unwrap();
    let manifest = WeightsManifest {
        entries: vec![entry(Role::Harmonizer, "file://h.json".into(), sha256_hex(&bytes))],
    };
    let store = ModelStore::load(&manifest, &[Role::Harmonizer], dir.path()).unwrap();
    assert!(store.harmonizer().is_some());
    assert!(store.segmenter().is_none());
}

#[test]
fn missing_role_and_bad_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let empty = WeightsManifest { entries: vec![] };
    assert!(matches!(
        fetch_weights(&empty, &[Role::Decoder], dir.path()),
        Err(Error::CheckpointMissing(_))
    ));
    let manifest = WeightsManifest {
        entries: vec![entry(Role::Decoder, "ftp://x".into(), pinned_digest(Role::Decoder).into())],
    };
    assert!(matches!(
        fetch_weights(&manifest, &[Role::Decoder], dir.path()),
        Err(Error::DownloadFailed { .. })
    ));
}

#[test]
fn checkpoint_for_wrong_role_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let (_, bytes) = builtin_checkpoint_bytes(Role::Nima);
    std::fs::write(dir.path().join("n.json"), &bytes).unwrap();
    let manifest = WeightsManifest {
        entries: vec![entry(Role::Contrique, "file://n.json".into(), sha256_hex(&bytes))],
    };
    let err = ModelStore::load(&manifest, &[Role::Contrique], dir.path()).unwrap_err();
    assert!(err.is_weights_error(), "{err}");
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("weights.json");
    let m = WeightsManifest::builtin();
    std::fs::write(&p, serde_json::to_vec(&m).unwrap()).unwrap();
    assert_eq!(WeightsManifest::load(&p).unwrap(), m);
    assert_eq!(m.entries.len(), Role::ALL.len());
}
