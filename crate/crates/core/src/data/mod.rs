//! Samples, batches, and the on-disk dataset layout.
//!
//! A dataset directory holds `images/NNN.png` (RGB), `masks/NNN.png` (palette
//! indices are class ids) and `manifest.csv` with columns
//! `index,split,image,mask`, paths relative to the directory.

pub mod augment;
pub mod io;
pub mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SyntheticSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use io::Mask;

pub const MANIFEST: &str = "manifest.csv";

/// One tile: a `(1, 3, H, W)` image in `[0, 1]` and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
}

impl Sample {
    pub fn check(&self, num_classes: usize, ignore: usize) -> Result<()> {
        let [n, c, h, w] = self.image.dims();
        if n != 1 || c != 3 || (h, w) != (self.mask.h, self.mask.w) || self.mask.labels.len() != h * w {
            return Err(Error::shape(
                "sample",
                format!("image {:?} with a {}x{} mask", self.image.dims(), self.mask.h, self.mask.w),
            ));
        }
        match self.mask.labels.iter().find(|&&l| l >= num_classes && l != ignore) {
            Some(&id) => Err(Error::ClassRange { id, classes: num_classes }),
            None => Ok(()),
        }
    }
}

/// Images `(N, 3, H, W)` with labels flattened in the same `(N, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ignore_index: usize,
}

impl SampleBatch {
    pub fn from_samples(samples: &[Sample], ignore_index: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let [_, c, h, w] = first.image.dims();
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        let mut labels = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.image.dims() != [1, c, h, w] || (s.mask.h, s.mask.w) != (h, w) {
                return Err(Error::shape(
                    "batch",
                    format!("sample {:?} does not match {:?}", s.image.dims(), first.image.dims()),
                ));
            }
            data.extend_from_slice(s.image.data());
            labels.extend_from_slice(&s.mask.labels);
        }
        Ok(Self {
            images: Tensor::new([samples.len(), c, h, w], data)?,
            labels,
            ignore_index,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// The last `round(count * val_fraction)` tiles form the validation split.
pub fn assign_splits(count: usize, val_fraction: f64) -> Vec<Split> {
    let val = ((count as f64 * val_fraction).round() as usize).min(count);
    (0..count)
        .map(|i| if i + val >= count { Split::Val } else { Split::Train })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    index: usize,
    split: Split,
    image: String,
    mask: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn synthetic(spec: &SyntheticSpec, count: usize) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| synthetic::generate(spec, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            splits: assign_splits(count, spec.val_fraction),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn check(&self, num_classes: usize, ignore: usize) -> Result<()> {
        self.samples.iter().try_for_each(|s| s.check(num_classes, ignore))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = dir.join(MANIFEST);
        let mut out = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
        if self.is_empty() {
            out.write_record(["index", "split", "image", "mask"])
                .map_err(|e| csv_err(&manifest, e))?;
        }
        for (i, (s, split)) in self.samples.iter().zip(&self.splits).enumerate() {
            let row = ManifestRow {
                index: i,
                split: *split,
                image: format!("images/{i:03}.png"),
                mask: format!("masks/{i:03}.png"),
            };
            io::write_image(&dir.join(&row.image), &s.image)?;
            io::write_mask(&dir.join(&row.mask), &s.mask)?;
            out.serialize(row).map_err(|e| csv_err(&manifest, e))?;
        }
        out.flush().map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let manifest = dir.join(MANIFEST);
        let mut rdr = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
        let mut rows: Vec<ManifestRow> = rdr
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(&manifest, e))?;
        rows.sort_by_key(|r| r.index);
        let mut ds = Dataset::default();
        for r in rows {
            let image = io::read_image(&dir.join(&r.image))?;
            let mask = io::read_mask(&dir.join(&r.mask))?;
            let [_, _, h, w] = image.dims();
            if (h, w) != (mask.h, mask.w) {
                return Err(Error::shape(
                    "dataset",
                    format!("{}: image {h}x{w}, mask {}x{}", r.image, mask.h, mask.w),
                ));
            }
            ds.samples.push(Sample { image, mask });
            ds.splits.push(r.split);
        }
        Ok(ds)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!("is_io_error implies an Io kind");
    }
    Error::Parse {
        offset: e.position().map_or(0, |p| p.byte() as usize),
        detail: format!("{}: {e}", path.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_takes_the_tail() {
        assert_eq!(assign_splits(4, 0.5), vec![Split::Train, Split::Train, Split::Val, Split::Val]);
        assert!(assign_splits(5, 0.0).iter().all(|&s| s == Split::Train));
        assert_eq!(assign_splits(0, 0.5), vec![]);
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let spec = SyntheticSpec {
            size: 32,
            val_fraction: 0.25,
            ..SyntheticSpec::default()
        };
        let ds = Dataset::synthetic(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.indices(Split::Val), vec![3]);
        assert!(dir.path().join("images/000.png").exists());
        assert!(dir.path().join("masks/003.png").exists());
    }

    #[test]
    fn empty_corpus_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::default().write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(text.trim(), "index,split,image,mask");
        assert!(Dataset::load(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = Dataset::load(Path::new("/nonexistent/sffnet-data")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn batch_stacks_in_order() {
        let spec = SyntheticSpec {
            size: 16,
            ..SyntheticSpec::default()
        };
        let ds = Dataset::synthetic(&spec, 3).unwrap();
        let b = SampleBatch::from_samples(&ds.samples[1..], 255).unwrap();
        assert_eq!(b.images.dims(), [2, 3, 16, 16]);
        assert_eq!(&b.labels[256..], &ds.samples[2].mask.labels[..]);
        assert_eq!(&b.images.data()[768..], ds.samples[2].image.data());
        assert!(ds.check(6, 255).is_ok());
        assert!(matches!(ds.check(3, 255), Err(Error::ClassRange { .. })));
    }
}
