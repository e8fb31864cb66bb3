//! Procedural desk-scale asset set: content scenes with a salient object,
//! face portraits, and style textures paired with style prompts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{BinaryMask, ImagePlane};
use crate::seed::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StyleAsset {
    pub name: &'static str,
    pub text: &'static str,
}

pub const DESK_STYLES: [StyleAsset; 10] = [
    StyleAsset { name: "ice", text: "Ice" },
    StyleAsset { name: "fire", text: "Fire" },
    StyleAsset { name: "desert_sand", text: "Desert sand" },
    StyleAsset { name: "green_crystal", text: "Green crystal" },
    StyleAsset { name: "starry_night", text: "Starry night" },
    StyleAsset { name: "lisa_frank", text: "Lisa Frank" },
    StyleAsset { name: "copper_engraving", text: "Copper plate engraving" },
    StyleAsset { name: "underwater", text: "Underwater" },
    StyleAsset { name: "money", text: "Money" },
    StyleAsset { name: "neon", text: "Neon" },
];

pub fn desk_style(name: &str) -> Option<StyleAsset> {
    DESK_STYLES.iter().copied().find(|s| s.name == name)
}

/// Lattice value noise with smoothstep interpolation.
struct ValueNoise {
    cells: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, cells: usize) -> Self {
        let grid = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        Self { cells, grid }
    }

    /// u, v in [0,1].
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let fx = (u.clamp(0.0, 1.0) * n as f64).min(n as f64 - 1e-9);
        let fy = (v.clamp(0.0, 1.0) * n as f64).min(n as f64 - 1e-9);
        let (x0, y0) = (fx as usize, fy as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(fx - x0 as f64), s(fy - y0 as f64));
        let g = |x: usize, y: usize| self.grid[y * (n + 1) + x];
        let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
        let bot = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Sum of value-noise octaves, normalised to [0,1].
struct Fbm {
    octaves: Vec<ValueNoise>,
}

impl Fbm {
    fn new(rng: &mut impl Rng, base: usize, count: usize) -> Self {
        Self {
            octaves: (0..count).map(|i| ValueNoise::new(rng, base << i)).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let mut acc = 0.0;
        let mut total = 0.0;
        let mut amp = 1.0;
        for o in &self.octaves {
            acc += amp * o.at(u, v);
            total += amp;
            amp *= 0.5;
        }
        acc / total
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn plane(size: usize, mut f: impl FnMut(f64, f64) -> [f64; 3]) -> ImagePlane {
    ImagePlane::from_fn(size, size, |y, x| {
        let u = (x as f64 + 0.5) / size as f64;
        let v = (y as f64 + 0.5) / size as f64;
        let c = f(u, v);
        [c[0].clamp(0.0, 1.0) as f32, c[1].clamp(0.0, 1.0) as f32, c[2].clamp(0.0, 1.0) as f32]
    })
}

fn asset_rng(tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(tag) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Texture image for a desk style. Unknown names fall back to a neutral noise texture.
pub fn style_image(name: &str, size: usize) -> ImagePlane {
    let mut rng = asset_rng(name, 0);
    let coarse = Fbm::new(&mut rng, 4, 4);
    let fine = Fbm::new(&mut rng, 32, 2);
    match name {
        "ice" => {
            let cracks: Vec<(f64, f64, f64)> = (0..14)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * PI))
                .collect();
            plane(size, |u, v| {
                let mut c = mix([0.70, 0.84, 0.95], [0.92, 0.97, 1.0], coarse.at(u, v));
                let g = fine.at(u, v) - 0.5;
                for &(cx, cy, a) in &cracks {
                    let d = ((u - cx) * a.sin() - (v - cy) * a.cos()).abs();
                    let along = ((u - cx) * a.cos() + (v - cy) * a.sin()).abs();
                    if d < 0.004 && along < 0.25 {
                        c = mix(c, [0.35, 0.55, 0.75], 0.8);
                    }
                }
                [c[0] + 0.25 * g, c[1] + 0.25 * g, c[2] + 0.15 * g]
            })
        }
        "fire" => plane(size, |u, v| {
            let flick = coarse.at(u * 0.7, v * 0.3 + 0.1 * (u * 20.0).sin());
            let streak = (0.5 + 0.5 * (u * 40.0 + 6.0 * flick).sin()) * 0.3 + 0.7 * flick;
            let heat = (1.0 - v) * 0.4 + streak * 0.8 + 0.2 * (fine.at(u, v) - 0.5);
            if heat < 0.45 {
                mix([0.35, 0.03, 0.0], [0.85, 0.15, 0.0], heat / 0.45)
            } else {
                mix([0.95, 0.30, 0.02], [1.0, 0.85, 0.25], (heat - 0.45) / 0.55)
            }
        }),
        "desert_sand" => plane(size, |u, v| {
            let ripple = (v * 60.0 + 5.0 * coarse.at(u, v)).sin() * 0.5 + 0.5;
            let grain = fine.at(u, v) - 0.5;
            let c = mix([0.78, 0.60, 0.36], [0.95, 0.82, 0.58], 0.6 * ripple + 0.4 * coarse.at(u, v));
            [c[0] + 0.2 * grain, c[1] + 0.2 * grain, c[2] + 0.15 * grain]
        }),
        "green_crystal" => {
            let sites: Vec<(f64, f64, f64)> = (0..40)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()))
                .collect();
            plane(size, |u, v| {
                let mut best = (f64::INFINITY, f64::INFINITY, 0.0);
                for &(sx, sy, shade) in &sites {
                    let d = (u - sx).powi(2) + (v - sy).powi(2);
                    if d < best.0 {
                        best = (d, best.0, shade);
                    } else if d < best.1 {
                        best.1 = d;
                    }
                }
                let edge = (best.1.sqrt() - best.0.sqrt()) < 0.008;
                let base = mix([0.05, 0.35, 0.12], [0.45, 0.95, 0.55], best.2);
                if edge {
                    mix(base, [0.9, 1.0, 0.9], 0.7)
                } else {
                    base
                }
            })
        }
        "starry_night" => {
            let stars: Vec<(f64, f64, f64)> = (0..60)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>(), 0.004 + 0.012 * rng.random::<f64>()))
                .collect();
            plane(size, |u, v| {
                let (dx, dy) = (u - 0.45, v - 0.4);
                let r = (dx * dx + dy * dy).sqrt();
                let ang = dy.atan2(dx);
                let swirl = (r * 45.0 - ang * 3.0 + 4.0 * coarse.at(u, v)).sin() * 0.5 + 0.5;
                let mut c = mix([0.05, 0.09, 0.30], [0.30, 0.45, 0.80], swirl * 0.8);
                for &(sx, sy, rad) in &stars {
                    let d = ((u - sx).powi(2) + (v - sy).powi(2)).sqrt();
                    if d < rad {
                        c = mix(c, [1.0, 0.92, 0.35], 1.0 - d / rad);
                    }
                }
                c
            })
        }
        "lisa_frank" => {
            let spots = Fbm::new(&mut rng, 12, 2);
            plane(size, |u, v| {
                let hue = 0.80 + 0.35 * (u + v) + 0.2 * coarse.at(u, v);
                let mut c = hsv(hue, 0.85, 0.95);
                let s = spots.at(u, v);
                if (s - 0.62).abs() < 0.03 {
                    c = [0.08, 0.02, 0.10];
                } else if s > 0.62 {
                    c = hsv(hue + 0.5, 0.7, 1.0);
                }
                c
            })
        }
        "copper_engraving" => plane(size, |u, v| {
            let tone = coarse.at(u, v);
            let line = (v * size as f64 * 0.5 * PI + 3.0 * coarse.at(u * 2.0, v)).sin();
            let ink = if line > 1.6 * tone - 0.8 { 1.0 } else { 0.0 };
            mix([0.30, 0.16, 0.08], [0.88, 0.62, 0.42], ink * (0.7 + 0.3 * fine.at(u, v)))
        }),
        "underwater" => plane(size, |u, v| {
            let w = coarse.at(u, v) * 6.0;
            let caustic = ((u * 30.0 + w).sin() * (v * 26.0 - w).sin()).abs().powf(0.3);
            let depth = mix([0.05, 0.45, 0.60], [0.02, 0.20, 0.38], v);
            let c = mix(depth, [0.55, 0.90, 0.95], 0.35 * (1.0 - caustic));
            let g = fine.at(u, v) - 0.5;
            [c[0] + 0.05 * g, c[1] + 0.08 * g, c[2] + 0.08 * g]
        }),
        "money" => plane(size, |u, v| {
            let (dx, dy) = (u - 0.5, v - 0.5);
            let r = (dx * dx + dy * dy).sqrt();
            let ang = dy.atan2(dx);
            let guilloche = (r * 220.0 + 6.0 * (ang * 12.0).sin()).sin();
            let hatch = ((u + v) * size as f64 * 0.7).sin() * 0.5;
            let t = 0.5 + 0.35 * guilloche + 0.25 * hatch;
            let base = mix([0.22, 0.36, 0.24], [0.78, 0.86, 0.74], t);
            let tint = coarse.at(u, v) - 0.5;
            [base[0] + 0.1 * tint, base[1] + 0.08 * tint, base[2] + 0.1 * tint]
        }),
        "neon" => {
            let tubes: Vec<(f64, f64, f64)> = (0..10)
                .map(|_| (rng.random::<f64>(), 4.0 + 10.0 * rng.random::<f64>(), rng.random::<f64>()))
                .collect();
            plane(size, |u, v| {
                let mut c = [0.05, 0.02, 0.10];
                for &(off, freq, hue) in &tubes {
                    let d = (v - off - 0.08 * (u * freq).sin()).abs();
                    let glow = (-d * d / 0.00008).exp();
                    let col = hsv(0.75 + 0.3 * hue, 0.8, 1.0);
                    for k in 0..3 {
                        c[k] += glow * col[k];
                    }
                }
                c
            })
        }
        _ => plane(size, |u, v| {
            let t = coarse.at(u, v);
            [0.3 + 0.4 * t, 0.3 + 0.4 * t, 0.3 + 0.4 * t]
        }),
    }
}

/// Content scene with a central salient object on a sky/ground background.
pub fn content_scene(index: usize, size: usize) -> (ImagePlane, BinaryMask) {
    let mut rng = asset_rng("scene", index as u64);
    let tex = Fbm::new(&mut rng, 6, 4);
    let hue = rng.random::<f64>();
    let (cx, cy) = (0.5 + 0.1 * (rng.random::<f64>() - 0.5), 0.55 + 0.1 * (rng.random::<f64>() - 0.5));
    let (rx, ry) = (0.22 + 0.08 * rng.random::<f64>(), 0.16 + 0.08 * rng.random::<f64>());
    let horizon = 0.6 + 0.1 * rng.random::<f64>();
    let inside = |u: f64, v: f64| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0;
    let img = plane(size, |u, v| {
        if inside(u, v) {
            let shade = 0.55 + 0.45 * (1.0 - ((u - cx + 0.3 * rx) / rx).powi(2) - ((v - cy + 0.4 * ry) / ry).powi(2)).max(0.0);
            let stripe = if ((u - cx) / rx * 5.0).sin() > 0.8 { 0.8 } else { 1.0 };
            let c = hsv(hue, 0.7, shade * stripe);
            let t = tex.at(u * 3.0 % 1.0, v * 3.0 % 1.0) - 0.5;
            [c[0] + 0.1 * t, c[1] + 0.1 * t, c[2] + 0.1 * t]
        } else if v < horizon {
            mix([0.55, 0.72, 0.92], [0.85, 0.90, 0.95], v / horizon + 0.1 * tex.at(u, v))
        } else {
            let t = tex.at(u, v);
            mix([0.30, 0.42, 0.20], [0.50, 0.55, 0.30], t)
        }
    });
    let mask = BinaryMask::from_fn(size, size, |y, x| {
        inside((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64)
    });
    (img, mask)
}

/// Portrait with a head as the salient object.
pub fn face_content(index: usize, size: usize) -> (ImagePlane, BinaryMask) {
    let mut rng = asset_rng("face", index as u64);
    let skins = [[0.93, 0.78, 0.66], [0.78, 0.57, 0.42], [0.52, 0.36, 0.26]];
    let hairs = [[0.90, 0.78, 0.42], [0.25, 0.15, 0.08], [0.08, 0.06, 0.05]];
    let skin = skins[index % 3];
    let hair = hairs[(index + rng.random_range(0..3)) % 3];
    let bg_hue = rng.random::<f64>();
    let tex = Fbm::new(&mut rng, 8, 3);
    let (cx, cy) = (0.5 + 0.06 * (rng.random::<f64>() - 0.5), 0.52);
    let (rx, ry) = (0.22 + 0.03 * rng.random::<f64>(), 0.29 + 0.03 * rng.random::<f64>());
    let eye_dy = -0.06 * ry / 0.29;
    let eye_dx = 0.42 * rx;
    let head = |u: f64, v: f64| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0;
    let hair_cap = |u: f64, v: f64| {
        ((u - cx) / (rx * 1.15)).powi(2) + ((v - cy + 0.05) / (ry * 1.12)).powi(2) <= 1.0 && v < cy - 0.35 * ry
    };
    let img = plane(size, |u, v| {
        let du = (u - cx) / rx;
        let dv = (v - cy) / ry;
        if hair_cap(u, v) {
            let strand = 0.8 + 0.2 * (u * 120.0 + 8.0 * tex.at(u, v)).sin();
            return [hair[0] * strand, hair[1] * strand, hair[2] * strand];
        }
        if head(u, v) {
            let shade = 1.0 - 0.25 * (du * du + dv * dv);
            let mut c = [skin[0] * shade, skin[1] * shade, skin[2] * shade];
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                let ey = cy + eye_dy;
                let e = ((u - ex) / (0.07 * rx / 0.22)).powi(2) + ((v - ey) / (0.025 * ry / 0.29)).powi(2);
                if e <= 1.0 {
                    let iris = ((u - ex).powi(2) + (v - ey).powi(2)).sqrt() < 0.018;
                    c = if iris { [0.12, 0.20, 0.30] } else { [0.97, 0.97, 0.95] };
                }
                let brow = (v - (ey - 0.045)).abs() < 0.008 && (u - ex).abs() < 0.06;
                if brow {
                    c = [hair[0] * 0.6, hair[1] * 0.6, hair[2] * 0.6];
                }
            }
            let nose = (u - cx).abs() < 0.012 && v > cy - 0.02 && v < cy + 0.08;
            if nose {
                c = [c[0] * 0.85, c[1] * 0.82, c[2] * 0.8];
            }
            let mouth_y = cy + 0.16 * ry / 0.29 + 40.0 * (u - cx).powi(2) * 0.1;
            if (v - mouth_y).abs() < 0.012 && (u - cx).abs() < 0.07 {
                c = [0.70, 0.22, 0.25];
            }
            return c;
        }
        let t = tex.at(u, v);
        let c = hsv(bg_hue, 0.25, 0.55 + 0.3 * v);
        [c[0] + 0.08 * (t - 0.5), c[1] + 0.08 * (t - 0.5), c[2] + 0.08 * (t - 0.5)]
    });
    let mask = BinaryMask::from_fn(size, size, |y, x| {
        let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
        head(u, v) || hair_cap(u, v)
    });
    (img, mask)
}

/// One style entry of a desk-set manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSetEntry {
    pub id: String,
    pub style_text: String,
    #[serde(default)]
    pub style_image: Option<PathBuf>,
    pub content: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

pub fn load_style_set(path: &Path) -> Result<Vec<StyleSetEntry>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => crate::error::Error::FileNotFound(path.to_path_buf()),
        _ => crate::error::Error::Io(e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Clone, Debug)]
pub struct DeskSet {
    pub root: PathBuf,
    /// Ten styles on scene contents.
    pub styles: Vec<StyleSetEntry>,
    /// Three faces paired with the money style.
    pub faces: Vec<StyleSetEntry>,
}

/// Write the desk set as PNGs plus `styles.json` and `faces.json` manifests.
pub fn write_desk_set(root: &Path, content_size: usize, style_size: usize) -> Result<DeskSet> {
    std::fs::create_dir_all(root)?;
    let save = |img: &ImagePlane, name: &str| -> Result<PathBuf> {
        let p = root.join(name);
        img.save_png(&p)?;
        Ok(p)
    };
    let save_mask = |m: &BinaryMask, name: &str| -> Result<PathBuf> {
        let p = root.join(name);
        m.save_png(&p)?;
        Ok(p)
    };
    let mut styles = Vec::new();
    for (i, s) in DESK_STYLES.iter().enumerate() {
        let (c, m) = content_scene(i, content_size);
        let content = save(&c, &format!("scene_{i}.png"))?;
        let mask = save_mask(&m, &format!("scene_{i}_mask.png"))?;
        let style_image = save(&style_image(s.name, style_size), &format!("style_{}.png", s.name))?;
        styles.push(StyleSetEntry {
            id: s.name.to_string(),
            style_text: s.text.to_string(),
            style_image: Some(style_image),
            content,
            mask: Some(mask),
        });
    }
    let money = root.join("style_money.png");
    let mut faces = Vec::new();
    for i in 0..3 {
        let (c, m) = face_content(i, content_size);
        let content = save(&c, &format!("face_{i}.png"))?;
        let mask = save_mask(&m, &format!("face_{i}_mask.png"))?;
        faces.push(StyleSetEntry {
            id: format!("face_{i}"),
            style_text: "Money".into(),
            style_image: Some(money.clone()),
            content,
            mask: Some(mask),
        });
    }
    crate::fsutil::write_atomic(&root.join("styles.json"), &serde_json::to_vec_pretty(&styles)?)?;
    crate::fsutil::write_atomic(&root.join("faces.json"), &serde_json::to_vec_pretty(&faces)?)?;
    Ok(DeskSet {
        root: root.to_path_buf(),
        styles,
        faces,
    })
}
