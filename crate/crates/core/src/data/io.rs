//! Binary tensor files and PNG images/masks.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `SFFT` |
//! | 2 | version, currently 1 |
//! | 1 | dtype tag: 1 = f32, 2 = f64 |
//! | 1 | ndim, 1..=4 |
//! | 4 * ndim | extents, each positive |
//! | numel * size | payload, row-major |
//!
//! Masks are 8-bit palette PNGs whose indices are class ids; the palette colours
//! follow the usual aerial-labelling convention so the files open sensibly in an
//! image viewer. Index 255 (black) marks ignored pixels.

use std::fs::File;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"SFFT";
pub const TENSOR_VERSION: u16 = 1;
pub const IGNORE_LABEL: usize = 255;

/// Colours of classes 0..=5: impervious, building, low vegetation, tree, car, clutter.
pub const CLASS_COLORS: [[u8; 3]; 6] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

pub const CLASS_NAMES: [&str; 6] = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// A decoded tensor file. `shape` keeps the stored rank so re-encoding is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn from_tensor(t: &Tensor, dtype: DType) -> Self {
        Self {
            dtype,
            shape: t.dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    /// Left-pads the stored shape with ones to four axes.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut dims: Dims = [1; 4];
        dims[4 - self.shape.len()..].copy_from_slice(&self.shape);
        Tensor::new(dims, self.data.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        if !(1..=4).contains(&self.shape.len()) || self.shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::shape("tensor file", format!("unsupported shape {:?}", self.shape)));
        }
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "tensor file",
                format!("{} values for shape {:?}", self.data.len(), self.shape),
            ));
        }
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(self.dtype.tag());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(())
    }

    /// Decodes one file that must span all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let t = Self::decode_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::Parse {
                offset: r.pos,
                detail: format!("{} trailing bytes after payload", r.remaining()),
            });
        }
        Ok(t)
    }

    /// Decodes one file starting at the reader's position, leaving it after the payload.
    pub fn decode_from(r: &mut ByteReader) -> Result<Self> {
        let start = r.pos;
        let magic = r.take(4, "magic")?;
        if magic != TENSOR_MAGIC {
            return Err(Error::Parse {
                offset: start,
                detail: format!("bad magic {magic:02x?}, expected \"SFFT\""),
            });
        }
        let at = r.pos;
        let version = r.u16("version")?;
        if version != TENSOR_VERSION {
            return Err(Error::Parse {
                offset: at,
                detail: format!("unsupported version {version}"),
            });
        }
        let at = r.pos;
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Parse {
            offset: at,
            detail: format!("unknown dtype tag {tag}"),
        })?;
        let at = r.pos;
        let ndim = r.u8("ndim")? as usize;
        if !(1..=4).contains(&ndim) {
            return Err(Error::Parse {
                offset: at,
                detail: format!("ndim {ndim} outside 1..=4"),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let at = r.pos;
            let d = r.u32("dims")? as usize;
            if d == 0 {
                return Err(Error::Parse {
                    offset: at,
                    detail: "zero extent".into(),
                });
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
        let Some((numel, nbytes)) = numel else {
            return Err(Error::Parse {
                offset: r.pos,
                detail: format!("shape {shape:?} overflows"),
            });
        };
        if r.remaining() < nbytes {
            return Err(Error::Parse {
                offset: r.pos,
                detail: format!(
                    "truncated payload: expected {nbytes} bytes for shape {shape:?}, found {}",
                    r.remaining()
                ),
            });
        }
        let payload = r.take(nbytes, "payload")?;
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        debug_assert_eq!(numel, shape.iter().product::<usize>());
        Ok(Self { dtype, shape, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}

/// Cursor over a byte slice that reports the offset of every failure.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("{what}: expected {n} bytes, found {}", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            detail: format!("{what} is not UTF-8"),
        })
    }
}

pub fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// 256-entry palette: class colours first, black at the ignore index, grey ramp elsewhere.
pub fn mask_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(768);
    for i in 0..256usize {
        let rgb = match i {
            _ if i < CLASS_COLORS.len() => CLASS_COLORS[i],
            IGNORE_LABEL => [0, 0, 0],
            _ => [i as u8; 3],
        };
        pal.extend_from_slice(&rgb);
    }
    pal
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

struct Decoded {
    w: usize,
    h: usize,
    color: png::ColorType,
    data: Vec<u8>,
}

fn decode_png(path: &Path, transform: png::Transformations) -> Result<Decoded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        w: info.width as usize,
        h: info.height as usize,
        color: info.color_type,
        data: buf,
    })
}

/// Writes a `(1, 3, H, W)` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let [n, c, h, w] = img.dims();
    if n != 1 || c != 3 {
        return Err(Error::shape("write_image", format!("expected (1, 3, H, W), got {:?}", img.dims())));
    }
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            bytes.push(quantize(d[ch * h * w + p]));
        }
    }
    encode_png(path, w, h, png::ColorType::Rgb, None, &bytes)
}

/// Writes a single-channel `(1, 1, H, W)` tensor in `[0, 1]` as an 8-bit greyscale PNG.
pub fn write_gray(path: &Path, img: &Tensor) -> Result<()> {
    let [n, c, h, w] = img.dims();
    if n != 1 || c != 1 {
        return Err(Error::shape("write_gray", format!("expected (1, 1, H, W), got {:?}", img.dims())));
    }
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    encode_png(path, w, h, png::ColorType::Grayscale, None, &bytes)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads any 8-bit PNG as a `(1, 3, H, W)` tensor scaled to `[0, 1]`; alpha is dropped.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = decode_png(path, png::Transformations::normalize_to_color8())?;
    let (h, w) = (img.h, img.w);
    let stride = match img.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    let mut out = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        let px = &img.data[p * stride..(p + 1) * stride];
        for ch in 0..3 {
            let v = if stride < 3 { px[0] } else { px[ch] };
            out[ch * h * w + p] = v as f64 / 255.0;
        }
    }
    Tensor::new([1, 3, h, w], out)
}

/// A label map; values are class ids or [`IGNORE_LABEL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = Vec::with_capacity(mask.labels.len());
    for (i, &l) in mask.labels.iter().enumerate() {
        if l > 255 {
            return Err(image_err(path, format!("pixel {i}: label {l} does not fit in 8 bits")));
        }
        bytes.push(l as u8);
    }
    encode_png(path, mask.w, mask.h, png::ColorType::Indexed, Some(mask_palette()), &bytes)
}

/// Reads a palette mask (indices are labels) or an RGB mask (colours mapped back
/// through the class palette; black is ignore).
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = decode_png(path, png::Transformations::IDENTITY)?;
    let (h, w) = (img.h, img.w);
    let labels = match img.color {
        png::ColorType::Indexed | png::ColorType::Grayscale => img.data.iter().map(|&v| v as usize).collect(),
        png::ColorType::Rgb | png::ColorType::Rgba => {
            let stride = if img.color == png::ColorType::Rgb { 3 } else { 4 };
            let mut labels = Vec::with_capacity(h * w);
            for (i, px) in img.data.chunks_exact(stride).enumerate() {
                let rgb = [px[0], px[1], px[2]];
                let label = if rgb == [0, 0, 0] {
                    IGNORE_LABEL
                } else {
                    CLASS_COLORS
                        .iter()
                        .position(|c| *c == rgb)
                        .ok_or_else(|| image_err(path, format!("pixel {i}: colour {rgb:?} is not a class colour")))?
                };
                labels.push(label);
            }
            labels
        }
        other => return Err(image_err(path, format!("unsupported mask colour type {other:?}"))),
    };
    Ok(Mask { h, w, labels })
}
