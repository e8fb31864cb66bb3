use objmst::assets::{content_scene, style_image};
use objmst::image::ImagePlane;
use objmst::ingest::apply_mask;
use objmst::inversion::{
    initial_latent, invert, invert_multi, loss_at, InversionConfig, InversionModels, LatentVector, LossMode, StyleInputs,
    Target,
};
use objmst::seed::indexed_seed;
use objmst::weights::ModelStore;
use objmst::Error;

struct Fixture {
    store: ModelStore,
    content: ImagePlane,
    masked: ImagePlane,
    style: ImagePlane,
}

impl Fixture {
    fn new() -> Self {
        let (content, mask) = content_scene(4, 128);
        let masked = apply_mask(&content, &mask).unwrap();
        Self {
            store: ModelStore::builtin(),
            content,
            masked,
            style: style_image("green_crystal", 128),
        }
    }

    fn models(&self) -> InversionModels<'_> {
        InversionModels {
            text: self.store.text_encoder().unwrap(),
            image: self.store.image_encoder().unwrap(),
            generator: self.store.generator().unwrap(),
        }
    }

    fn inputs(&self) -> StyleInputs<'_> {
        StyleInputs {
            text: "Green crystal",
            image: &self.style,
            masked_ref: &self.masked,
            unmasked_ref: Some(&self.content),
        }
    }
}

fn quick(steps: usize) -> InversionConfig {
    InversionConfig {
        steps,
        n_crop: 4,
        seed: 21,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_latent() {
    let f = Fixture::new();
    let a = invert(&f.models(), &f.inputs(), Target::Fg, &quick(6)).unwrap();
    let b = invert(&f.models(), &f.inputs(), Target::Fg, &quick(6)).unwrap();
    assert_eq!(a.rep.latent, b.rep.latent);
    assert_eq!(a.rep.image, b.rep.image);
    let c = invert(&f.models(), &f.inputs(), Target::Fg, &InversionConfig { seed: 22, ..quick(6) }).unwrap();
    assert_ne!(a.rep.latent, c.rep.latent);
}

#[test]
fn returns_best_seen_iterate() {
    let f = Fixture::new();
    let o = invert(&f.models(), &f.inputs(), Target::Fg, &quick(12)).unwrap();
    assert_eq!(o.curve.len(), 13);
    let min = o.curve.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    assert_eq!(o.curve[o.best_step].total, min);
    for r in &o.curve {
        assert!((r.total - (r.text_term + r.image_term)).abs() < 1e-9);
    }
    let csv = String::from_utf8(o.curve_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,total,text_term,image_term");
    assert_eq!(csv.lines().count(), 14);
}

#[test]
fn latent_json_round_trip() {
    let f = Fixture::new();
    let w = initial_latent(f.models().generator, &quick(1));
    let v: serde_json::Value = serde_json::from_slice(&w.to_json()).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["generator_id", "shape", "values"]);
    assert_eq!(LatentVector::from_json(&w.to_json()).unwrap(), w);
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let f = Fixture::new();
    let m = f.models();
    let cfg = quick(1);
    let w = initial_latent(m.generator, &cfg);
    let seed = indexed_seed(5, 0);
    let (_, g) = loss_at(&m, &f.inputs(), &cfg, &w, seed).unwrap();
    let h = 1e-3;
    let mut num = Vec::new();
    let mut ana = Vec::new();
    for k in (0..w.values.len()).step_by(7) {
        let mut p = w.clone();
        let mut q = w.clone();
        p.values[k] += h;
        q.values[k] -= h;
        let lp = loss_at(&m, &f.inputs(), &cfg, &p, seed).unwrap().0.total;
        let lq = loss_at(&m, &f.inputs(), &cfg, &q, seed).unwrap().0.total;
        num.push((lp - lq) / (2.0 * h));
        ana.push(g[k]);
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / scale < 5e-2, "relative error {}", diff / scale);
}

#[test]
fn plain_mode_needs_unmasked_content() {
    let f = Fixture::new();
    let inputs = StyleInputs {
        unmasked_ref: None,
        ..f.inputs()
    };
    let cfg = InversionConfig {
        loss_mode: LossMode::Plain,
        ..quick(2)
    };
    assert!(matches!(invert(&f.models(), &inputs, Target::Fg, &cfg), Err(Error::Validation(_))));
    assert!(invert(&f.models(), &f.inputs(), Target::Fg, &cfg).is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    let f = Fixture::new();
    for cfg in [
        InversionConfig { steps: 0, ..quick(1) },
        InversionConfig { lambda: -1.0, ..quick(1) },
        InversionConfig { n_crop: 0, ..quick(1) },
        InversionConfig {
            learning_rate: f64::NAN,
            ..quick(1)
        },
    ] {
        assert!(matches!(invert(&f.models(), &f.inputs(), Target::Fg, &cfg), Err(Error::Validation(_))));
    }
    assert!(invert_multi(&f.models(), &f.inputs(), Target::Fg, &quick(1), 0).is_err());
}

#[test]
fn empty_style_text_is_rejected() {
    let f = Fixture::new();
    let inputs = StyleInputs { text: "  ", ..f.inputs() };
    assert!(invert(&f.models(), &inputs, Target::Fg, &quick(1)).is_err());
}

#[test]
fn text_only_inversion_reduces_loss() {
    let f = Fixture::new();
    let inputs = StyleInputs {
        image: &f.masked,
        ..f.inputs()
    };
    let cfg = InversionConfig {
        lambda: 0.0,
        steps: 40,
        ..quick(40)
    };
    let o = invert(&f.models(), &inputs, Target::Bg, &cfg).unwrap();
    assert_eq!(o.rep.target, Target::Bg);
    assert!(o.curve.iter().all(|r| r.total == r.text_term));
    assert!(o.final_loss < o.initial_loss);
}

#[test]
fn multi_uses_consecutive_seeds() {
    let f = Fixture::new();
    let outs = invert_multi(&f.models(), &f.inputs(), Target::Fg, &quick(3), 2).unwrap();
    let second = invert(&f.models(), &f.inputs(), Target::Fg, &InversionConfig { seed: 22, ..quick(3) }).unwrap();
    assert_eq!(outs[1].rep.latent, second.rep.latent);
}
