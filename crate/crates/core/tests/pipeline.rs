use std::path::{Path, PathBuf};

use objmst::assets::{content_scene, style_image, write_desk_set};
use objmst::harmonize::fg_bg_separation;
use objmst::image::BinaryMask;
use objmst::ingest::load_image;
use objmst::inversion::{InversionConfig, LatentVector, Target};
use objmst::metrics::{evaluate_table, load_manifest, EvalMode, OutputKind};
use objmst::pipeline::{run_ablation, run_invert, run_job, AblationArm, AblationConfig, InvertJob, JobSpec, Mode};
use objmst::assets::StyleSetEntry;
use objmst::weights::ModelStore;
use objmst::Error;

fn scene(dir: &Path, index: usize, size: usize) -> (PathBuf, PathBuf) {
    let (c, m) = content_scene(index, size);
    let cp = dir.join(format!("scene_{index}.png"));
    let mp = dir.join(format!("scene_{index}_mask.png"));
    c.save_png(&cp).unwrap();
    m.save_png(&mp).unwrap();
    (cp, mp)
}

fn small_spec(dir: &Path, mode: Mode) -> JobSpec {
    let (content, mask) = scene(dir, 0, 64);
    JobSpec {
        mode,
        content,
        mask: Some(mask),
        style_text_fg: "Fire".into(),
        out_dir: dir.join("run"),
        count: 2,
        working_resolution: 64,
        inversion: InversionConfig {
            steps: 3,
            n_crop: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn files(dir: &Path, sub: &str) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir.join(sub))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn tist_single_writes_the_full_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), Mode::TistSingle);
    let store = ModelStore::builtin();
    let summary = run_job(&spec, &store).unwrap();
    let out = &spec.out_dir;
    for f in ["final.png", "fg_stylized.png", "manifest.json", "run.log", "mask.png"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(files(out, "style_reps"), ["fg_0.png", "fg_1.png"]);
    assert_eq!(files(out, "latents"), ["fg_0.json", "fg_1.json"]);
    assert_eq!(files(out, "loss_curves"), ["fg_0.csv", "fg_1.csv"]);
    let latent = LatentVector::from_json(&std::fs::read(out.join("latents/fg_0.json")).unwrap()).unwrap();
    assert_eq!(latent.shape, [1, 64]);
    let curve = std::fs::read_to_string(out.join("loss_curves/fg_1.csv")).unwrap();
    assert!(curve.starts_with("step,total,text_term,image_term\n"));
    assert!(!summary.harmonized);

    let log = std::fs::read_to_string(out.join("run.log")).unwrap();
    assert!(log.contains("config.style_text_fg=\"Fire\""));
    assert!(log.contains("checkpoint.generator=objmst-procedural-gen-v1 sha256:"));
    assert!(log.contains("seed.invert_fg_0="));
    assert!(log.trim_end().ends_with("status=ok"));

    // Single condition: background pixels come straight from the content.
    let content = load_image(&spec.content, Some(64)).unwrap();
    let final_img = load_image(&out.join("final.png"), None).unwrap();
    let mask = BinaryMask::load(&out.join("mask.png")).unwrap();
    for i in 0..mask.data().len() {
        if !mask.is_set(i) {
            assert_eq!(&final_img.data()[i * 3..i * 3 + 3], &content.data()[i * 3..i * 3 + 3]);
        }
    }
}

#[test]
fn manifest_feeds_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), Mode::TistSingle);
    let store = ModelStore::builtin();
    run_job(&spec, &store).unwrap();
    let manifest = load_manifest(&spec.out_dir.join("manifest.json")).unwrap();
    assert!(manifest.iter().any(|e| e.kind == OutputKind::Final));
    assert_eq!(manifest.iter().filter(|e| e.kind == OutputKind::StyleRepFg).count(), 2);
    let stylized = evaluate_table(&store.metrics(), &spec.out_dir, EvalMode::Stylized, &manifest).unwrap();
    assert_eq!(stylized.per_image.len(), 1);
    let reps = evaluate_table(&store.metrics(), &spec.out_dir, EvalMode::StyleReps, &manifest).unwrap();
    assert_eq!(reps.per_image.len(), 2);
    assert!(reps.per_image.iter().all(|r| r.mode == EvalMode::StyleReps));
}

#[test]
fn tist_double_harmonizes_and_separates_regions() {
    let dir = tempfile::tempdir().unwrap();
    let (content, mask) = scene(dir.path(), 5, 128);
    let spec = JobSpec {
        mode: Mode::TistDouble,
        content: content.clone(),
        mask: Some(mask.clone()),
        style_text_fg: "Copper plate engraving".into(),
        style_text_bg: Some("Underwater".into()),
        out_dir: dir.path().join("run"),
        count: 1,
        working_resolution: 128,
        inversion: InversionConfig {
            steps: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let store = ModelStore::builtin();
    let summary = run_job(&spec, &store).unwrap();
    assert!(summary.harmonized);
    assert_eq!(files(&spec.out_dir, "style_reps"), ["bg_0.png", "fg_0.png"]);
    let log = std::fs::read_to_string(spec.out_dir.join("run.log")).unwrap();
    assert!(log.contains("harmonized=true"));
    let m = BinaryMask::load(&mask).unwrap();
    let original = load_image(&content, Some(128)).unwrap();
    let final_img = load_image(&spec.out_dir.join("final.png"), None).unwrap();
    assert!(fg_bg_separation(&final_img, &m) > fg_bg_separation(&original, &m));
}

#[test]
fn mmist_and_full_frame_variants() {
    let dir = tempfile::tempdir().unwrap();
    let style = dir.path().join("style.png");
    style_image("fire", 64).save_png(&style).unwrap();
    let store = ModelStore::builtin();
    let mut spec = small_spec(dir.path(), Mode::MmistSingle);
    spec.style_image_fg = Some(style);
    spec.count = 1;
    run_job(&spec, &store).unwrap();
    spec.out_dir = dir.path().join("ff");
    spec.full_frame = true;
    spec.dump_features = true;
    run_job(&spec, &store).unwrap();
    let mask = BinaryMask::load(&spec.out_dir.join("mask.png")).unwrap();
    let fg = load_image(&spec.out_dir.join("fg_stylized.png"), None).unwrap();
    let final_img = load_image(&spec.out_dir.join("final.png"), None).unwrap();
    assert_eq!(fg, final_img);
    let outside = (0..mask.data().len())
        .filter(|&i| !mask.is_set(i) && fg.data()[i * 3..i * 3 + 3].iter().any(|v| *v > 0.0))
        .count();
    assert!(outside > 0);
    assert!(spec.out_dir.join("features").is_dir());
}

#[test]
fn validation_rejects_inconsistent_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_spec(dir.path(), Mode::TistSingle);
    let bad = [
        JobSpec {
            style_text_fg: " ".into(),
            ..base.clone()
        },
        JobSpec {
            style_text_bg: Some("Ice".into()),
            ..base.clone()
        },
        JobSpec {
            mode: Mode::TistDouble,
            ..base.clone()
        },
        JobSpec {
            mode: Mode::MmistSingle,
            ..base.clone()
        },
        JobSpec { count: 0, ..base.clone() },
        JobSpec {
            working_resolution: 40,
            ..base.clone()
        },
        JobSpec {
            content: PathBuf::new(),
            ..base.clone()
        },
    ];
    for spec in bad {
        assert!(matches!(spec.validate(), Err(Error::Validation(_))), "{spec:?}");
    }
    assert!(base.validate().is_ok());
    assert!(matches!(JobSpec::from_json(br#"{"bogus": 1}"#), Err(Error::Validation(_))));
    let parsed = JobSpec::from_json(br#"{"mode":"tist_double","style_text_fg":"a","count":3}"#).unwrap();
    assert_eq!(parsed.mode, Mode::TistDouble);
    assert_eq!(parsed.count, 3);
    assert_eq!(parsed.working_resolution, 512);
}

#[test]
fn stage_failure_keeps_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(dir.path(), Mode::TistSingle);
    spec.content = dir.path().join("missing.png");
    let err = run_job(&spec, &ModelStore::builtin()).unwrap_err();
    assert!(matches!(err.root(), Error::FileNotFound(_)));
    assert!(spec.out_dir.join("run.log").is_file());
}

#[test]
fn missing_segmenter_without_mask_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(dir.path(), Mode::TistSingle);
    spec.mask = None;
    let mut store = ModelStore::builtin();
    store.segmenter = None;
    let err = run_job(&spec, &store).unwrap_err();
    assert!(matches!(err.root(), Error::SegmenterUnavailable(_)));
}

#[test]
fn standalone_background_inversion() {
    let dir = tempfile::tempdir().unwrap();
    let (content, mask) = scene(dir.path(), 2, 64);
    let job = InvertJob {
        style_text: "Ice".into(),
        style_image: None,
        content,
        mask: Some(mask),
        target: Target::Bg,
        count: 1,
        working_resolution: 64,
        inversion: InversionConfig {
            steps: 3,
            n_crop: 2,
            ..Default::default()
        },
        out_dir: dir.path().join("inv"),
    };
    let outs = run_invert(&job, &ModelStore::builtin()).unwrap();
    assert_eq!(outs[0].rep.target, Target::Bg);
    assert!(outs[0].curve.iter().all(|r| r.image_term == 0.0 || r.total == r.text_term));
    assert!(job.out_dir.join("style_reps/bg_0.png").is_file());
}

#[test]
fn ablation_arms_need_enough_entries_and_report_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let desk = write_desk_set(dir.path(), 64, 64).unwrap();
    let store = ModelStore::builtin();
    let cfg = AblationConfig {
        inversion: InversionConfig {
            steps: 2,
            n_crop: 2,
            ..Default::default()
        },
        count: 1,
        working_resolution: 64,
        ..Default::default()
    };
    let styles: Vec<StyleSetEntry> = objmst::assets::load_style_set(&desk.root.join("styles.json")).unwrap();
    assert_eq!(styles, desk.styles);
    let faces = desk.faces;
    assert!(run_ablation(&store, AblationArm::LossMaskedVsPlain, &styles[..4], &cfg).is_err());
    let loss = run_ablation(&store, AblationArm::LossMaskedVsPlain, &styles[..5], &cfg).unwrap();
    assert_eq!(loss.verdict.cases, 5);
    assert_eq!(loss.reports[0].per_image.len(), 5);
    assert!(loss.summary().contains("clipscore_text"));
    let att = run_ablation(&store, AblationArm::AttentionS2kVsA2a, &faces, &cfg).unwrap();
    assert_eq!(att.verdict.cases, 3);
    assert_eq!(att.labels, ["s2k".to_string(), "a2a".to_string()]);
}
