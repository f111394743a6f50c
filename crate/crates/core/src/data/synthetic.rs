//! Procedural aerial-style tiles with exact ground truth.
//!
//! Each tile starts as background (class 0). Foreground classes are painted in a
//! fixed order, each onto background pixels only, until its pixel count reaches an
//! area target, so every label is exactly the geometry that produced the colour.
//! Shadow bands then darken the image multiplicatively (labels unchanged unless
//! configured to mark deep shadow as ignored) and additive noise adds texture,
//! strongest on trees.
//!
//! A tile depends only on `(spec, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{quantize, Mask, IGNORE_LABEL};
use super::Sample;
use crate::config::SyntheticSpec;
use crate::error::Result;
use crate::tensor::Tensor;

/// Share of the canvas given to foreground classes at density 1.
pub const FOREGROUND_SHARE: f64 = 0.6;
const MAX_FOREGROUND: f64 = 0.9;
/// Relative area of building, low vegetation, tree, car, clutter in six-class tiles.
const SIX_CLASS_WEIGHTS: [f64; 5] = [0.35, 0.25, 0.25, 0.05, 0.10];
const PAINT_ORDER: [usize; 5] = [1, 3, 2, 5, 4];
const ATTEMPTS_PER_CLASS: usize = 400;
/// Pixels darkened by more than this share of the band strength count as deep shadow.
const DEEP_SHADOW: f64 = 0.9;

const BASE_COLORS: [[f64; 3]; 6] = [
    [0.60, 0.60, 0.62],
    [0.78, 0.42, 0.35],
    [0.55, 0.75, 0.40],
    [0.20, 0.45, 0.20],
    [0.20, 0.30, 0.80],
    [0.85, 0.75, 0.25],
];
const TEXTURE_GAIN: [f64; 6] = [1.0, 0.5, 1.5, 3.0, 0.5, 1.0];

/// Target area fraction of every class; index 0 is the background remainder.
pub fn class_targets(spec: &SyntheticSpec) -> Vec<f64> {
    let k = spec.num_classes;
    let fg = (spec.density * FOREGROUND_SHARE).min(MAX_FOREGROUND);
    let mut t = vec![0.0; k];
    if k == 6 {
        for (c, w) in SIX_CLASS_WEIGHTS.iter().enumerate() {
            t[c + 1] = fg * w;
        }
    } else {
        for v in t.iter_mut().skip(1) {
            *v = fg / (k - 1) as f64;
        }
    }
    t[0] = 1.0 - t.iter().sum::<f64>();
    t
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    /// Centre, half extents, rotation.
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    /// Star-shaped polygon: centre and vertex radii at evenly spaced angles.
    Blob { cx: f64, cy: f64, phase: f64, radii: [f64; 8], n: usize },
}

impl Shape {
    fn reach(&self) -> (f64, f64, f64) {
        match *self {
            Shape::Rect { cx, cy, hw, hh, .. } => (cx, cy, hw.hypot(hh)),
            Shape::Disc { cx, cy, r } => (cx, cy, r),
            Shape::Blob { cx, cy, radii, n, .. } => (cx, cy, radii[..n].iter().cloned().fold(0.0, f64::max)),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (dx * c + dy * s).abs() <= hw && (-dx * s + dy * c).abs() <= hh
            }
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Blob { cx, cy, phase, radii, n } => {
                let verts: Vec<(f64, f64)> = (0..n)
                    .map(|i| {
                        let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
                        (cx + radii[i] * a.cos(), cy + radii[i] * a.sin())
                    })
                    .collect();
                let mut inside = false;
                let mut j = n - 1;
                for i in 0..n {
                    let (xi, yi) = verts[i];
                    let (xj, yj) = verts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn draw_shape(class: usize, s: f64, rng: &mut ChaCha8Rng) -> Shape {
    let cx = rng.gen_range(0.0..s);
    let cy = rng.gen_range(0.0..s);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let blob = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let n = rng.gen_range(5..=8);
        let base = rng.gen_range(lo..hi) * s;
        let mut radii = [0.0; 8];
        for r in radii.iter_mut().take(n) {
            *r = base * rng.gen_range(0.6..1.0);
        }
        Shape::Blob { cx, cy, phase: angle, radii, n }
    };
    match class {
        1 => Shape::Rect {
            cx,
            cy,
            hw: rng.gen_range(0.06..0.15) * s,
            hh: rng.gen_range(0.06..0.15) * s,
            angle,
        },
        2 => blob(rng, 0.08, 0.2),
        3 => Shape::Disc {
            cx,
            cy,
            r: (rng.gen_range(0.03..0.08) * s).max(1.5),
        },
        4 => {
            let hh = (0.02 * s).max(1.0);
            Shape::Rect { cx, cy, hw: 2.0 * hh, hh, angle }
        }
        _ => blob(rng, 0.03, 0.08),
    }
}

/// Background pixels the shape would cover.
fn new_pixels(shape: &Shape, labels: &[usize], size: usize) -> Vec<usize> {
    let (cx, cy, r) = shape.reach();
    let lo = |c: f64| ((c - r).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + r).ceil().max(0.0) as usize + 1).min(size);
    let mut out = Vec::new();
    for y in lo(cy)..hi(cy) {
        for x in lo(cx)..hi(cx) {
            let p = y * size + x;
            if labels[p] == 0 && shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                out.push(p);
            }
        }
    }
    out
}

/// Paints class `class` until its pixel count is as close to `target` as whole shapes allow.
fn paint_class(class: usize, target: f64, size: usize, labels: &mut [usize], tint: &mut [f64], rng: &mut ChaCha8Rng) {
    let mut count = 0.0;
    for _ in 0..ATTEMPTS_PER_CLASS {
        if count >= target {
            break;
        }
        let shape = draw_shape(class, size as f64, rng);
        let shade = rng.gen_range(-0.06..0.06);
        let px = new_pixels(&shape, labels, size);
        if px.is_empty() {
            continue;
        }
        let after = count + px.len() as f64;
        let first = count == 0.0;
        // Overshooting shapes are kept only when they land closer to the target.
        if after > target && !first && after - target >= target - count {
            continue;
        }
        for p in px {
            labels[p] = class;
            tint[p] = shade;
        }
        count = after;
    }
}

/// Generates tile `index` of the corpus described by `spec`.
pub fn generate(spec: &SyntheticSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = spec.size;
    let plane = n * n;
    let mut labels = vec![0usize; plane];
    let mut tint = vec![0.0; plane];

    let targets = class_targets(spec);
    if spec.density > 0.0 {
        for class in PAINT_ORDER.into_iter().filter(|&c| c < spec.num_classes) {
            paint_class(class, targets[class] * plane as f64, n, &mut labels, &mut tint, &mut rng);
        }
    }

    let mut shadow = vec![1.0; plane];
    let mut deep = vec![false; plane];
    if spec.shadow_strength > 0.0 {
        for _ in 0..spec.shadow_bands {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            let offset = rng.gen_range(-0.35..0.35) * n as f64;
            let half = rng.gen_range(0.06..0.14) * n as f64;
            let mid = n as f64 / 2.0;
            for y in 0..n {
                for x in 0..n {
                    let d = ((x as f64 + 0.5 - mid) * c + (y as f64 + 0.5 - mid) * s - offset).abs();
                    if d < half {
                        let profile = (std::f64::consts::FRAC_PI_2 * d / half).cos().powi(2);
                        let p = y * n + x;
                        shadow[p] *= 1.0 - spec.shadow_strength * profile;
                        deep[p] |= profile > DEEP_SHADOW;
                    }
                }
            }
        }
    }

    let mut img = vec![0.0; 3 * plane];
    for p in 0..plane {
        let class = labels[p];
        let amp = spec.texture_amplitude * TEXTURE_GAIN[class];
        for ch in 0..3 {
            let noise = if amp > 0.0 { rng.gen_range(-amp..amp) } else { 0.0 };
            let v = (BASE_COLORS[class][ch] + tint[p] + noise) * shadow[p];
            img[ch * plane + p] = quantize(v) as f64 / 255.0;
        }
    }
    if spec.shadow_ignore {
        for (l, &d) in labels.iter_mut().zip(&deep) {
            if d {
                *l = IGNORE_LABEL;
            }
        }
    }
    Ok(Sample {
        image: Tensor::new([1, 3, n, n], img)?,
        mask: Mask { h: n, w: n, labels },
    })
}
