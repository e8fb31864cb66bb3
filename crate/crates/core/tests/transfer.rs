use objmst::assets::{content_scene, face_content, style_image, DESK_STYLES};
use objmst::image::{BinaryMask, ImagePlane};
use objmst::ingest::apply_mask;
use objmst::inversion::{invert, InversionConfig, InversionModels, StyleInputs, Target};
use objmst::s2k_transfer::{
    stylize_salient, AttentionKind, FeatureEncoder, StylePooling, TransferOptions, LAYER_TAGS,
};
use objmst::weights::ModelStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturb_outside(img: &ImagePlane, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> ImagePlane {
    let mut out = img.clone();
    let (h, w) = img.dims();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                out.set_pixel(y, x, [rng.random(), rng.random(), rng.random()]);
            }
        }
    }
    out
}

#[test]
fn foreground_ignores_pixels_outside_the_mask() {
    let store = ModelStore::builtin();
    let inv = InversionModels {
        text: store.text_encoder().unwrap(),
        image: store.image_encoder().unwrap(),
        generator: store.generator().unwrap(),
    };
    let tm = store.transfer().unwrap();
    let (content, mask) = content_scene(1, 128);
    let style = style_image("fire", 128);
    let cfg = InversionConfig {
        steps: 4,
        seed: 3,
        ..Default::default()
    };
    let run = |c: &ImagePlane| {
        let masked = apply_mask(c, &mask).unwrap();
        let inputs = StyleInputs {
            text: "Fire",
            image: &style,
            masked_ref: &masked,
            unmasked_ref: None,
        };
        let rep = invert(&inv, &inputs, Target::Fg, &cfg).unwrap().rep;
        stylize_salient(&tm, c, &mask, &[rep], TransferOptions::default()).unwrap()
    };
    let base = run(&content);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let p = perturb_outside(&content, &mask, &mut rng);
        assert_ne!(p, content);
        let out = run(&p);
        assert_eq!(out.data(), base.data());
    }
}

#[test]
fn stylized_foreground_is_zero_outside_mask() {
    let store = ModelStore::builtin();
    let tm = store.transfer().unwrap();
    let (content, mask) = content_scene(2, 96);
    let style = style_image("neon", 96);
    let out = objmst::s2k_transfer::stylize_salient_images(&tm, &content, &mask, &[&style], TransferOptions::default())
        .unwrap();
    for i in 0..mask.data().len() {
        if !mask.is_set(i) {
            assert_eq!(&out.data()[i * 3..i * 3 + 3], &[0.0, 0.0, 0.0]);
        }
    }
}

#[test]
fn attention_rows_are_stochastic_and_shapes_follow_content() {
    let store = ModelStore::builtin();
    let tm = store.transfer().unwrap();
    let enc: &dyn FeatureEncoder = tm.encoder;
    for pair in 0..20 {
        let size = [64, 96][pair % 2];
        let (content, mask) = if pair % 3 == 0 {
            face_content(pair % 3, size)
        } else {
            content_scene(pair, size)
        };
        let masked = apply_mask(&content, &mask).unwrap();
        let style = style_image(DESK_STYLES[pair % DESK_STYLES.len()].name, [64, 128][pair % 2]);
        let fc = enc.extract(&masked).unwrap();
        let fs = vec![enc.extract(&style).unwrap()];
        for kind in [AttentionKind::S2k, AttentionKind::A2a] {
            let (mapped, maps) = tm.mapper.map_traced(kind, &fc, &fs, StylePooling::Concat, true).unwrap();
            assert_eq!(maps.len(), LAYER_TAGS.len());
            for m in &maps {
                for q in 0..m.queries {
                    let s: f64 = m.row(q).iter().map(|v| *v as f64).sum();
                    assert!((s - 1.0).abs() < 1e-5, "{kind:?} {} row {q} sums to {s}", m.tag);
                }
            }
            for (a, b) in mapped.levels.iter().zip(&fc.levels) {
                assert_eq!(a.shape(), b.shape());
                assert_eq!(a.tag, b.tag);
                assert!(a.data.iter().all(|v| v.is_finite()));
            }
            let decoded = tm.decoder.decode(&mapped).unwrap();
            assert_eq!(decoded.dims(), content.dims());
        }
    }
}

#[test]
fn per_rep_average_preserves_shapes() {
    let store = ModelStore::builtin();
    let tm = store.transfer().unwrap();
    let (content, mask) = content_scene(0, 64);
    let styles = [style_image("ice", 64), style_image("money", 64)];
    let refs: Vec<&ImagePlane> = styles.iter().collect();
    let opts = TransferOptions {
        attention: AttentionKind::S2k,
        pooling: StylePooling::PerRepAverage,
    };
    let out = objmst::s2k_transfer::stylize_salient_images(&tm, &content, &mask, &refs, opts).unwrap();
    assert_eq!(out.dims(), content.dims());
}

#[test]
fn mismatched_target_is_rejected() {
    let store = ModelStore::builtin();
    let tm = store.transfer().unwrap();
    let (content, mask) = content_scene(0, 64);
    let rep = objmst::inversion::StyleRepresentation {
        image: style_image("ice", 64),
        latent: store.generator().unwrap().mean_latent(),
        target: Target::Bg,
    };
    assert!(stylize_salient(&tm, &content, &mask, &[rep], TransferOptions::default()).is_err());
}
