//! Geometric augmentation applied identically to an image and its label map.
//!
//! Order: random scale (bilinear image, nearest labels, both sampled at
//! half-pixel centres), horizontal flip, vertical flip, quarter-turn rotation,
//! then a random crop. Scaled tiles smaller than the crop are padded on the
//! bottom/right with zeros and ignore labels before cropping.

use rand::Rng;

use super::io::{Mask, IGNORE_LABEL};
use super::Sample;
use crate::autograd::bilinear_forward;
use crate::config::AugmentSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rebuilds every channel of `img` and the label map through one index map:
/// output `(y, x)` reads source `f(y, x)`, or the fill values when `None`.
fn remap(s: &Sample, oh: usize, ow: usize, f: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Result<Sample> {
    let [n, c, h, w] = s.image.dims();
    let src = s.image.data();
    let mut img = vec![0.0; n * c * oh * ow];
    let mut labels = vec![IGNORE_LABEL; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let Some((sy, sx)) = f(y, x) else { continue };
            labels[y * ow + x] = s.mask.labels[sy * w + sx];
            for plane in 0..n * c {
                img[plane * oh * ow + y * ow + x] = src[plane * h * w + sy * w + sx];
            }
        }
    }
    Ok(Sample {
        image: Tensor::new([n, c, oh, ow], img)?,
        mask: Mask { h: oh, w: ow, labels },
    })
}

pub fn hflip(s: &Sample) -> Result<Sample> {
    let (h, w) = (s.mask.h, s.mask.w);
    remap(s, h, w, |y, x| Some((y, w - 1 - x)))
}

pub fn vflip(s: &Sample) -> Result<Sample> {
    let (h, w) = (s.mask.h, s.mask.w);
    remap(s, h, w, |y, x| Some((h - 1 - y, x)))
}

/// Rotates by `k` counter-clockwise quarter turns.
pub fn rotate(s: &Sample, k: u8) -> Result<Sample> {
    let (h, w) = (s.mask.h, s.mask.w);
    match k % 4 {
        0 => Ok(s.clone()),
        1 => remap(s, w, h, |y, x| Some((x, w - 1 - y))),
        2 => remap(s, h, w, |y, x| Some((h - 1 - y, w - 1 - x))),
        _ => remap(s, w, h, |y, x| Some((h - 1 - x, y))),
    }
}

/// Source index sampled by output index `o` when resizing `from -> to` with
/// half-pixel centres.
fn nearest(o: usize, from: usize, to: usize) -> usize {
    (((o as f64 + 0.5) * from as f64 / to as f64) as usize).min(from - 1)
}

pub fn scale(s: &Sample, factor: f64) -> Result<Sample> {
    let (h, w) = (s.mask.h, s.mask.w);
    let oh = ((h as f64 * factor).round() as usize).max(1);
    let ow = ((w as f64 * factor).round() as usize).max(1);
    if (oh, ow) == (h, w) {
        return Ok(s.clone());
    }
    let mut labels = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = nearest(y, h, oh);
        for x in 0..ow {
            labels.push(s.mask.labels[sy * w + nearest(x, w, ow)]);
        }
    }
    Ok(Sample {
        image: bilinear_forward(&s.image, oh, ow)?,
        mask: Mask { h: oh, w: ow, labels },
    })
}

/// Extends the tile to at least `oh x ow` with zero pixels and ignore labels.
pub fn pad_to(s: &Sample, oh: usize, ow: usize) -> Result<Sample> {
    let (h, w) = (s.mask.h, s.mask.w);
    if oh <= h && ow <= w {
        return Ok(s.clone());
    }
    remap(s, oh.max(h), ow.max(w), |y, x| (y < h && x < w).then_some((y, x)))
}

/// Uniformly placed `ch x cw` window of both image and labels.
pub fn random_crop(s: &Sample, ch: usize, cw: usize, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = (s.mask.h, s.mask.w);
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::Config(format!("crop {ch}x{cw} does not fit a {h}x{w} tile")));
    }
    let oy = rng.gen_range(0..=h - ch);
    let ox = rng.gen_range(0..=w - cw);
    crop_at(s, oy, ox, ch, cw)
}

pub fn crop_at(s: &Sample, oy: usize, ox: usize, ch: usize, cw: usize) -> Result<Sample> {
    if oy + ch > s.mask.h || ox + cw > s.mask.w {
        return Err(Error::Config(format!(
            "crop {ch}x{cw} at ({oy}, {ox}) exceeds a {}x{} tile",
            s.mask.h, s.mask.w
        )));
    }
    if (ch, cw) == (s.mask.h, s.mask.w) {
        return Ok(s.clone());
    }
    remap(s, ch, cw, |y, x| Some((oy + y, ox + x)))
}

/// Crop extent used by [`augment`] for an `h x w` tile.
pub fn crop_extent(spec: &AugmentSpec, h: usize, w: usize) -> (usize, usize) {
    if spec.crop > 0 {
        (spec.crop, spec.crop)
    } else {
        ((h / 16 * 16).max(16), (w / 16 * 16).max(16))
    }
}

/// Applies one random draw of `spec`.
pub fn augment(s: &Sample, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<Sample> {
    let factor = spec.scales[rng.gen_range(0..spec.scales.len())];
    let hf = rng.gen_bool(spec.hflip);
    let vf = rng.gen_bool(spec.vflip);
    let turns = spec.rotations[rng.gen_range(0..spec.rotations.len())];

    let mut out = scale(s, factor)?;
    if hf {
        out = hflip(&out)?;
    }
    if vf {
        out = vflip(&out)?;
    }
    out = rotate(&out, turns)?;
    let (ch, cw) = crop_extent(spec, out.mask.h, out.mask.w);
    out = pad_to(&out, ch, cw)?;
    random_crop(&out, ch, cw, rng)
}
