//! Confusion-matrix accumulation and the derived segmentation scores.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// `K x K` counts with rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignore: Option<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<usize>) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignore,
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>, ignore: Option<usize>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(
                "confusion matrix",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(Self { classes, counts, ignore })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore(&self) -> Option<usize> {
        self.ignore
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose truth is not the ignore label.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} predictions for {} labels", pred.len(), truth.len()),
            ));
        }
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == self.ignore {
                continue;
            }
            if t >= k {
                return Err(Error::ClassRange { id: t, classes: k });
            }
            if p >= k {
                return Err(Error::ClassRange { id: p, classes: k });
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "merge",
                format!("{} vs {} classes", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    pub fn fp(&self, k: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, k)).sum::<u64>() - self.tp(k)
    }

    pub fn fn_(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum::<u64>() - self.tp(k)
    }

    /// Scores with the listed classes left out of the means.
    pub fn metrics(&self, exclude: &[usize]) -> Metrics {
        let per_class: Vec<ClassScores> = (0..self.classes)
            .map(|k| {
                let (tp, fp, fn_) = (self.tp(k) as f64, self.fp(k) as f64, self.fn_(k) as f64);
                let ratio = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
                let precision = ratio(tp, tp + fp);
                let recall = ratio(tp, tp + fn_);
                ClassScores {
                    precision,
                    recall,
                    f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
                    iou: ratio(tp, tp + fp + fn_),
                    empty: tp + fp + fn_ == 0.0,
                }
            })
            .collect();
        let evaluated: Vec<usize> = (0..self.classes)
            .filter(|k| !exclude.contains(k) && !per_class[*k].empty)
            .collect();
        let mean = |f: fn(&ClassScores) -> f64| {
            if evaluated.is_empty() {
                0.0
            } else {
                evaluated.iter().map(|&k| f(&per_class[k])).sum::<f64>() / evaluated.len() as f64
            }
        };
        let total = self.total();
        let trace: u64 = (0..self.classes).map(|k| self.tp(k)).sum();
        Metrics {
            mean_precision: mean(|s| s.precision),
            mean_recall: mean(|s| s.recall),
            mean_f1: mean(|s| s.f1),
            miou: mean(|s| s.iou),
            oa: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
            evaluated,
            per_class,
        }
    }

    /// Row-major counts, one truth class per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.get(t, p).to_string()).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn from_csv(text: &str, ignore: Option<usize>) -> Result<Self> {
        let mut counts = Vec::new();
        let mut rows = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            for cell in line.split(',') {
                counts.push(cell.trim().parse::<u64>().map_err(|e| Error::Parse {
                    offset: i,
                    detail: format!("confusion row {i}: {e}"),
                })?);
            }
            rows += 1;
        }
        Self::from_counts(rows, counts, ignore)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Neither present in the truth nor predicted; left out of the means.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassScores>,
    /// Classes contributing to the means.
    pub evaluated: Vec<usize>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub miou: f64,
    pub oa: f64,
}

/// Percentage with two decimals, as in result tables: `0.848 -> "84.80"`.
pub fn format_percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn parse_percent(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map(|v| v / 100.0)
        .map_err(|e| Error::Parse {
            offset: 0,
            detail: format!("percentage {s:?}: {e}"),
        })
}

/// One summary line `meanF1 OA mIoU`, in percent.
pub fn format_summary(m: &Metrics) -> String {
    format!(
        "meanF1 {} OA {} mIoU {}",
        format_percent(m.mean_f1),
        format_percent(m.oa),
        format_percent(m.miou)
    )
}

/// Parses a line produced by [`format_summary`] into `(meanF1, OA, mIoU)` fractions.
pub fn parse_summary(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    match parts.as_slice() {
        ["meanF1", f1, "OA", oa, "mIoU", miou] => Ok((parse_percent(f1)?, parse_percent(oa)?, parse_percent(miou)?)),
        _ => Err(Error::Parse {
            offset: 0,
            detail: format!("summary line {s:?}"),
        }),
    }
}

pub const REPORT_HEADER: [&str; 8] = ["class", "name", "precision", "recall", "f1", "iou", "evaluated", "oa"];

/// CSV report: one row per class, then a `mean` row whose f1/iou columns hold
/// meanF1/mIoU and whose `oa` column holds the overall accuracy.
pub fn write_report(path: &Path, m: &Metrics, names: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REPORT_HEADER).map_err(|e| csv_err(path, e))?;
    for (k, s) in m.per_class.iter().enumerate() {
        let name = names.get(k).copied().unwrap_or("");
        w.write_record([
            k.to_string(),
            name.to_string(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.f1.to_string(),
            s.iou.to_string(),
            m.evaluated.contains(&k).to_string(),
            String::new(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.write_record([
        "mean".to_string(),
        String::new(),
        m.mean_precision.to_string(),
        m.mean_recall.to_string(),
        m.mean_f1.to_string(),
        m.miou.to_string(),
        String::new(),
        m.oa.to_string(),
    ])
    .map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header-only report for an empty evaluation split.
pub fn write_empty_report(path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REPORT_HEADER).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3, None);
        let t = [0, 1, 2, 2, 1, 0];
        cm.accumulate(&t, &t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.get(i, j), if i == j { 2 } else { 0 });
            }
        }
        let m = cm.metrics(&[]);
        assert_eq!((m.miou, m.mean_f1, m.oa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_by_two_hand_case() {
        let mut cm = ConfusionMatrix::new(2, None);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
    }

    #[test]
    fn ignored_pixels_are_skipped() {
        let mut cm = ConfusionMatrix::new(2, Some(255));
        cm.accumulate(&[0, 1, 1], &[255, 255, 255]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.accumulate(&[0], &[2]), Err(Error::ClassRange { id: 2, .. })));
        assert!(matches!(cm.accumulate(&[3], &[1]), Err(Error::ClassRange { id: 3, .. })));
    }

    #[test]
    fn binary_scores_by_formula() {
        // tp=50, fp=10, fn=10, tn=30 for class 1
        let cm = ConfusionMatrix::from_counts(2, vec![30, 10, 10, 50], None).unwrap();
        let s = cm.metrics(&[]).per_class[1];
        assert!((s.precision - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.recall - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.f1 - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.iou - 50.0 / 70.0).abs() < 1e-12);
        assert!((cm.metrics(&[]).oa - 0.8).abs() < 1e-12);
    }

    #[test]
    fn empty_and_excluded_classes_leave_the_means() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 0, 0, 2], None).unwrap();
        let m = cm.metrics(&[]);
        assert!(m.per_class[1].empty);
        assert_eq!(m.evaluated, vec![0, 2]);
        assert_eq!(m.miou, 1.0);
        assert_eq!(cm.metrics(&[2]).evaluated, vec![0]);
    }

    #[test]
    fn merge_adds_entrywise() {
        let mut a = ConfusionMatrix::new(2, None);
        a.accumulate(&[0, 1], &[0, 0]).unwrap();
        let mut b = ConfusionMatrix::new(2, None);
        b.accumulate(&[1, 1], &[1, 0]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.counts(), &[1, 2, 0, 1]);
        assert!(a.merge(&ConfusionMatrix::new(3, None)).is_err());
    }

    #[test]
    fn table_style_round_trip() {
        let line = "meanF1 91.67 OA 91.91 mIoU 84.80";
        let (f1, oa, miou) = parse_summary(line).unwrap();
        assert!((miou - 0.848).abs() < 1e-12 && (f1 - 0.9167).abs() < 1e-12 && (oa - 0.9191).abs() < 1e-12);
        let m = Metrics {
            per_class: vec![],
            evaluated: vec![],
            mean_precision: 0.0,
            mean_recall: 0.0,
            mean_f1: f1,
            miou,
            oa,
        };
        assert_eq!(format_summary(&m), line);
        assert_eq!(format_percent(parse_percent("84.80").unwrap()), "84.80");
    }

    #[test]
    fn csv_counts_round_trip() {
        let cm = ConfusionMatrix::from_counts(3, (0..9).map(|x| x * 7).collect(), Some(255)).unwrap();
        assert_eq!(ConfusionMatrix::from_csv(&cm.to_csv(), Some(255)).unwrap(), cm);
        assert!(ConfusionMatrix::from_csv("1,2\n3,x\n", None).is_err());
    }

    #[test]
    fn report_has_class_and_mean_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let cm = ConfusionMatrix::from_counts(2, vec![30, 10, 10, 50], None).unwrap();
        write_report(&path, &cm.metrics(&[]), &["a", "b"]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("class,name,precision,recall,f1,iou"));
        assert!(lines[3].starts_with("mean,"));
    }

    /// Counts recomputed pixel by pixel with no matrix.
    fn brute(pred: &[usize], truth: &[usize], k: usize) -> (u64, u64, u64) {
        let mut r = (0, 0, 0);
        for (&p, &t) in pred.iter().zip(truth) {
            if p == k && t == k {
                r.0 += 1;
            } else if p == k {
                r.1 += 1;
            } else if t == k {
                r.2 += 1;
            }
        }
        r
    }

    #[test]
    fn brute_force_recount_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pred: Vec<usize> = (0..256).map(|_| rng.gen_range(0..5)).collect();
            let truth: Vec<usize> = (0..256).map(|_| rng.gen_range(0..5)).collect();
            let mut cm = ConfusionMatrix::new(5, None);
            cm.accumulate(&pred, &truth).unwrap();
            let m = cm.metrics(&[]);
            for k in 0..5 {
                let (tp, fp, fn_) = brute(&pred, &truth, k);
                assert_eq!((cm.tp(k), cm.fp(k), cm.fn_(k)), (tp, fp, fn_));
                let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
                assert!((m.per_class[k].iou - tp / (tp + fp + fn_)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn f1_iou_identity(counts in proptest::collection::vec(0u64..50, 16)) {
            let cm = ConfusionMatrix::from_counts(4, counts, None).unwrap();
            for s in cm.metrics(&[]).per_class {
                prop_assert!(s.iou <= s.f1 && s.f1 <= 1.0);
                prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
            }
        }
    }
}
