use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use objmst::assets::content_scene;
use objmst::weights::WeightsManifest;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (c, m) = content_scene(3, 128);
        c.save_png(&dir.path().join("content.png")).unwrap();
        m.save_png(&dir.path().join("mask.png")).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_objmst"))
            .args(args)
            .env("OBJMST_WEIGHTS_DIR", self.path("weights"))
            .env_remove("OBJMST_DEVICE")
            .env_remove("OBJMST_DETERMINISTIC")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn stylize(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "stylize",
            "--content",
            "content.png",
            "--mask",
            "mask.png",
            "--style-text-fg",
            "Ice",
            "--out-dir",
            out,
            "--count",
            "1",
            "--working-resolution",
            "128",
            "--steps",
            "5",
            "--n-crop",
            "4",
        ];
        args.extend_from_slice(extra);
        self.run(&args)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn repeated_stylize_is_bitwise_identical() {
    let env = Env::new();
    let a = env.stylize("a", &[]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = env.stylize("b", &[]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    assert_eq!(read(&env.path("a/final.png")), read(&env.path("b/final.png")));
    assert_eq!(read(&env.path("a/latents/fg_0.json")), read(&env.path("b/latents/fg_0.json")));
    let stdout = String::from_utf8_lossy(&a.stdout);
    assert!(stdout.trim_end().ends_with("final.png"));
}

#[test]
fn cli_flags_override_config_file() {
    let env = Env::new();
    std::fs::write(
        env.path("job.json"),
        br#"{"style_text_fg": "Fire", "count": 3, "inversion": {"steps": 2, "seed": 9}}"#,
    )
    .unwrap();
    let o = env.stylize("run", &["--config", "job.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(env.path("run/run.log")).unwrap();
    assert!(log.contains("config.style_text_fg=\"Ice\""), "{log}");
    assert!(log.contains("config.count=1"), "{log}");
    assert!(log.contains("config.inversion.steps=5\n"), "{log}");
    assert!(log.contains("config.inversion.seed=9\n"), "{log}");
}

#[test]
fn validation_errors_exit_with_two() {
    let env = Env::new();
    for extra in [
        &["--mode", "sideways"][..],
        &["--style-text-fg", " "],
        &["--lambda", "-1"],
        &["--working-resolution", "10"],
    ] {
        let o = env.stylize("bad", extra);
        assert_eq!(code(&o), 2, "{extra:?}: {}", stderr(&o));
    }
    std::fs::write(env.path("job.json"), br#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(code(&env.stylize("bad", &["--config", "job.json"])), 2);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_objmst"));
    let o = cmd
        .args(["fetch-weights", "--roles", "decoder"])
        .env("OBJMST_DEVICE", "cuda")
        .env("OBJMST_WEIGHTS_DIR", env.path("weights"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = env.run(&["fetch-weights", "--roles", "teleporter"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn stage_failures_exit_with_three() {
    let env = Env::new();
    let o = env.run(&[
        "stylize",
        "--content",
        "nowhere.png",
        "--mask",
        "mask.png",
        "--style-text-fg",
        "Ice",
        "--out-dir",
        "run",
        "--working-resolution",
        "128",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: "));
    assert!(env.path("run/run.log").is_file());
}

#[test]
fn weights_errors_exit_with_four() {
    let env = Env::new();
    let mut m = WeightsManifest::builtin();
    for e in &mut m.entries {
        e.sha256 = "ab".repeat(32);
    }
    std::fs::write(env.path("weights.json"), serde_json::to_vec(&m).unwrap()).unwrap();
    let o = env.stylize("run", &["--weights-manifest", "weights.json"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = env.run(&["fetch-weights", "--weights-manifest", "weights.json", "--roles", "nima"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    std::fs::write(env.path("empty.json"), br#"{"entries": []}"#).unwrap();
    let o = env.run(&["fetch-weights", "--weights-manifest", "empty.json", "--roles", "nima"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn fetch_weights_then_cached() {
    let env = Env::new();
    let first = env.run(&["fetch-weights", "--roles", "nima,lpips"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(String::from_utf8_lossy(&first.stdout).contains("fetched"));
    let second = env.run(&["fetch-weights", "--roles", "nima,lpips"]);
    let out = String::from_utf8_lossy(&second.stdout);
    assert_eq!(out.matches("cached").count(), 2, "{out}");
}

#[test]
fn segment_invert_and_eval() {
    let env = Env::new();
    let o = env.run(&["segment", "--content", "content.png", "--out", "seg.png", "--working-resolution", "128"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(env.path("seg.png").is_file());

    let o = env.run(&[
        "invert",
        "--text",
        "Ice",
        "--content",
        "content.png",
        "--mask",
        "seg.png",
        "--target",
        "bg",
        "--count",
        "2",
        "--working-resolution",
        "128",
        "--steps",
        "2",
        "--n-crop",
        "2",
        "--out-dir",
        "inv",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(env.path("inv/style_reps/bg_1.png").is_file());
    assert!(env.path("inv/latents/bg_0.json").is_file());

    let o = env.stylize("run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = env.run(&[
        "eval",
        "--run-dir",
        "run",
        "--manifest",
        "run/manifest.json",
        "--csv",
        "scores.csv",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(env.path("scores.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "image_id,method,mode,clipscore_text,clipscore_image,lpips,nima,contrique_fr,contrique_nr"
    );
    assert!(csv.lines().count() >= 2);
}
