use objmst::assets::{content_scene, style_image};
use objmst::harmonize::{composite_background, composite_images, fg_bg_separation, harmonize, BackgroundFill, Provenance};
use objmst::image::{BinaryMask, ImagePlane};
use objmst::inversion::{Generator, StyleRepresentation, Target};
use objmst::models::generator::ProceduralGenerator;
use objmst::models::harmonizer::StatHarmonizer;
use objmst::sampler::resize_bilinear;

fn provenance() -> Provenance {
    Provenance {
        fg_source: "fg".into(),
        bg_source: "bg".into(),
    }
}

fn masks(h: usize, w: usize) -> Vec<(&'static str, BinaryMask)> {
    vec![
        ("checkerboard", BinaryMask::checkerboard(h, w, 4)),
        ("all_ones", BinaryMask::filled(h, w, true)),
        ("all_zeros", BinaryMask::filled(h, w, false)),
    ]
}

#[test]
fn composite_partitions_pixels_by_mask() {
    let (h, w) = (48, 40);
    let fg = style_image("fire", 48);
    let fg = resize_bilinear(&fg, h, w);
    let bg = style_image("ice", 32);
    for fill in [BackgroundFill::Resize, BackgroundFill::Tile] {
        for (name, mask) in masks(h, w) {
            let c = composite_images(&fg, &mask, &[&bg], fill, provenance()).unwrap();
            let expected_bg = composite_images(&fg, &BinaryMask::filled(h, w, false), &[&bg], fill, provenance())
                .unwrap()
                .image;
            for i in 0..h * w {
                let got = &c.image.data()[i * 3..i * 3 + 3];
                let want = if mask.is_set(i) {
                    &fg.data()[i * 3..i * 3 + 3]
                } else {
                    &expected_bg.data()[i * 3..i * 3 + 3]
                };
                assert_eq!(got, want, "{name} {fill:?} pixel {i}");
            }
            assert_eq!(c.mask, mask);
        }
    }
}

#[test]
fn resize_fill_matches_bilinear_resize() {
    let (h, w) = (40, 56);
    let fg = ImagePlane::filled(h, w, [1.0, 0.0, 0.0]);
    let bg = style_image("desert_sand", 24);
    let c = composite_images(&fg, &BinaryMask::filled(h, w, false), &[&bg], BackgroundFill::Resize, provenance()).unwrap();
    assert_eq!(c.image, resize_bilinear(&bg, h, w));
}

#[test]
fn tile_fill_cycles_representations() {
    let a = ImagePlane::filled(8, 8, [1.0, 0.0, 0.0]);
    let b = ImagePlane::filled(8, 8, [0.0, 1.0, 0.0]);
    let fg = ImagePlane::filled(16, 16, [0.0, 0.0, 1.0]);
    let c = composite_images(&fg, &BinaryMask::filled(16, 16, false), &[&a, &b], BackgroundFill::Tile, provenance()).unwrap();
    assert_eq!(c.image.pixel(0, 0), [1.0, 0.0, 0.0]);
    assert_eq!(c.image.pixel(0, 8), [0.0, 1.0, 0.0]);
    assert_eq!(c.image.pixel(8, 0), [1.0, 0.0, 0.0]);
}

#[test]
fn background_requires_bg_representations() {
    let g = ProceduralGenerator::builtin();
    let w = g.mean_latent();
    let fg = ImagePlane::filled(32, 32, [0.5; 3]);
    let mask = BinaryMask::checkerboard(32, 32, 8);
    let rep = |target| StyleRepresentation {
        image: g.generate(&w).unwrap(),
        latent: w.clone(),
        target,
    };
    assert!(composite_background(&fg, &mask, &[], BackgroundFill::Resize).is_err());
    assert!(composite_background(&fg, &mask, &[rep(Target::Fg)], BackgroundFill::Resize).is_err());
    let c = composite_background(&fg, &mask, &[rep(Target::Bg)], BackgroundFill::Resize).unwrap();
    assert_eq!(c.provenance.bg_source, "style_reps/bg_0");
}

#[test]
fn harmonizer_moves_foreground_toward_background() {
    let (content, mask) = content_scene(3, 96);
    let bg = ImagePlane::filled(96, 96, [0.1, 0.1, 0.6]);
    let c = composite_images(&content, &mask, &[&bg], BackgroundFill::Resize, provenance()).unwrap();
    let h = StatHarmonizer::builtin();
    let out = harmonize(Some(&h), &c).unwrap();
    assert!(out.harmonized);
    assert_eq!(out.image.dims(), c.image.dims());
    assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(fg_bg_separation(&out.image, &mask) < fg_bg_separation(&c.image, &mask));
}

#[test]
fn harmonizer_handles_degenerate_masks() {
    let h = StatHarmonizer::builtin();
    let fg = style_image("neon", 32);
    let bg = style_image("ice", 32);
    for (_, mask) in masks(32, 32).into_iter().skip(1) {
        let c = composite_images(&fg, &mask, &[&bg], BackgroundFill::Resize, provenance()).unwrap();
        let out = harmonize(Some(&h), &c).unwrap();
        assert_eq!(out.image, c.image);
    }
}

#[test]
fn missing_harmonizer_passes_composite_through() {
    let fg = style_image("neon", 32);
    let bg = style_image("ice", 32);
    let mask = BinaryMask::checkerboard(32, 32, 4);
    let c = composite_images(&fg, &mask, &[&bg], BackgroundFill::Resize, provenance()).unwrap();
    let out = harmonize(None, &c).unwrap();
    assert!(!out.harmonized);
    assert!(out.warning.is_some());
    assert_eq!(out.image, c.image);
}
