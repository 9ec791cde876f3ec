//! Evaluation metrics on the 0–255 scale and foreground-ratio bucketing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{compensated_sum, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

fn check_images(pred: &Tensor, target: &Tensor, op: &'static str) -> Result<()> {
    pred.shape().expect_eq(&target.shape(), op)
}

pub fn mse_metric(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_images(pred, target, "mse_metric")?;
    let sum = compensated_sum(
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b)),
    );
    Ok(sum / pred.numel() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForegroundMse {
    pub value: f64,
    /// Set when the mask has no foreground; `value` is then 0.
    pub empty_mask: bool,
}

/// Mean squared error over foreground pixel-channels only. Mask values above 0.5
/// count as foreground.
pub fn fmse_metric(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<ForegroundMse> {
    const OP: &str = "fmse_metric";
    check_images(pred, target, OP)?;
    let s = pred.shape();
    s.with_channels(1).expect_eq(&mask.shape(), OP)?;
    let plane = s.plane();
    let mut terms = Vec::new();
    for b in 0..s.batch {
        let m = &mask.data()[b * plane..(b + 1) * plane];
        for c in 0..s.channels {
            let off = (b * s.channels + c) * plane;
            for (i, &mv) in m.iter().enumerate() {
                if mv > 0.5 {
                    let d = pred.data()[off + i] - target.data()[off + i];
                    terms.push(d * d);
                }
            }
        }
    }
    if terms.is_empty() {
        return Ok(ForegroundMse {
            value: 0.0,
            empty_mask: true,
        });
    }
    let n = terms.len() as f64;
    Ok(ForegroundMse {
        value: compensated_sum(terms) / n,
        empty_mask: false,
    })
}

/// `10 · log10(peak² / mse)`, capped at 100 dB when `mse < 1e-10`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse_metric(pred, target)?, peak))
}

/// Foreground-ratio ranges: `[0, 0.05)`, `[0.05, 0.15)`, `[0.15, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgRatioBucket {
    Small,
    Medium,
    Large,
}

impl FgRatioBucket {
    pub const ALL: [FgRatioBucket; 3] = [Self::Small, Self::Medium, Self::Large];

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Small => (0.0, 0.05),
            Self::Medium => (0.05, 0.15),
            Self::Large => (0.15, 1.0),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Small => "0%~5%",
            Self::Medium => "5%~15%",
            Self::Large => "15%~100%",
        }
    }
}

pub fn bucketize(fg_ratio: f64) -> Result<FgRatioBucket> {
    if !(0.0..=1.0).contains(&fg_ratio) {
        return Err(Error::Validation(vec![format!(
            "foreground ratio {fg_ratio} outside [0, 1]"
        )]));
    }
    Ok(if fg_ratio < 0.05 {
        FgRatioBucket::Small
    } else if fg_ratio < 0.15 {
        FgRatioBucket::Medium
    } else {
        FgRatioBucket::Large
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub mse: f64,
    pub fmse: f64,
    pub psnr: f64,
    pub fg_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: FgRatioBucket,
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bucket.
    pub mean_mse: Option<f64>,
    pub mean_fmse: Option<f64>,
    pub mean_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallSummary {
    pub count: usize,
    pub mean_mse: f64,
    pub mean_fmse: f64,
    pub mean_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleRecord>,
    pub buckets: Vec<BucketSummary>,
    pub overall: OverallSummary,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| compensated_sum(v.iter().copied()) / v.len() as f64)
}

/// Groups records into the three ratio buckets. Samples keep their input order.
pub fn aggregate(records: Vec<SampleRecord>) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::argument("aggregate", "no records to aggregate"));
    }
    let mut assigned = Vec::with_capacity(records.len());
    for r in &records {
        assigned.push(bucketize(r.fg_ratio)?);
    }
    let buckets = FgRatioBucket::ALL
        .iter()
        .map(|&bucket| {
            let members: Vec<&SampleRecord> = records
                .iter()
                .zip(&assigned)
                .filter(|(_, b)| **b == bucket)
                .map(|(r, _)| r)
                .collect();
            let (lower, upper) = bucket.bounds();
            BucketSummary {
                bucket,
                label: bucket.label().to_string(),
                lower,
                upper,
                count: members.len(),
                mean_mse: mean(members.iter().map(|r| r.mse)),
                mean_fmse: mean(members.iter().map(|r| r.fmse)),
                mean_psnr: mean(members.iter().map(|r| r.psnr)),
            }
        })
        .collect();
    let overall = OverallSummary {
        count: records.len(),
        mean_mse: mean(records.iter().map(|r| r.mse)).expect("non-empty"),
        mean_fmse: mean(records.iter().map(|r| r.fmse)).expect("non-empty"),
        mean_psnr: mean(records.iter().map(|r| r.psnr)).expect("non-empty"),
    };
    Ok(MetricReport {
        samples: records,
        buckets,
        overall,
    })
}

impl MetricReport {
    pub fn bucket(&self, bucket: FgRatioBucket) -> &BucketSummary {
        self.buckets
            .iter()
            .find(|b| b.bucket == bucket)
            .expect("every bucket is reported")
    }

    /// Plain-text table: one column per ratio range plus the overall column.
    pub fn to_text_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let mut header = vec!["Foreground ratios".to_string()];
        header.extend(self.buckets.iter().map(|b| b.label.clone()));
        header.push("0%~100%".to_string());

        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut row = |name: &str, f: &dyn Fn(&BucketSummary) -> Option<f64>, overall: f64| {
            let mut r = vec![name.to_string()];
            r.extend(self.buckets.iter().map(|b| fmt(f(b))));
            r.push(format!("{overall:.2}"));
            rows.push(r);
        };
        row("MSE", &|b| b.mean_mse, self.overall.mean_mse);
        row("fMSE", &|b| b.mean_fmse, self.overall.mean_fmse);
        row("PSNR", &|b| b.mean_psnr, self.overall.mean_psnr);
        let mut counts = vec!["count".to_string()];
        counts.extend(self.buckets.iter().map(|b| b.count.to_string()));
        counts.push(self.overall.count.to_string());
        rows.push(counts);

        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", padded.join(" | "));
        };
        line(&header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&rule);
        for r in &rows {
            line(r);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn record(id: &str, mse: f64, fmse: f64, ratio: f64) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            mse,
            fmse,
            psnr: psnr_from_mse(mse, 255.0),
            fg_ratio: ratio,
        }
    }

    #[test]
    fn mse_basics() {
        let a = Tensor::full(Shape::new(1, 3, 4, 4), 10.0);
        assert_eq!(mse_metric(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert_eq!(mse_metric(&a, &b).unwrap(), 1.0);
        assert!(mse_metric(&a, &Tensor::zeros(Shape::new(1, 3, 4, 5))).is_err());
    }

    #[test]
    fn fmse_cases() {
        let target = Tensor::zeros(Shape::new(1, 3, 8, 8));
        let mut mask = Tensor::zeros(Shape::new(1, 1, 8, 8));
        let mut pred = target.clone();
        pred.set(0, 1, 7, 7, 9.0); // background-only difference
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            mask.set(0, 0, y, x, 1.0);
        }
        assert_eq!(fmse_metric(&pred, &target, &mask).unwrap().value, 0.0);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            for c in 0..3 {
                pred.set(0, c, y, x, 2.0);
            }
        }
        assert_eq!(fmse_metric(&pred, &target, &mask).unwrap().value, 4.0);

        let full = Tensor::ones(mask.shape());
        let f = fmse_metric(&pred, &target, &full).unwrap().value;
        assert_eq!(f, mse_metric(&pred, &target).unwrap());

        let empty = fmse_metric(&pred, &target, &Tensor::zeros(mask.shape())).unwrap();
        assert_eq!(
            empty,
            ForegroundMse {
                value: 0.0,
                empty_mask: true
            }
        );
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::full(Shape::new(1, 3, 2, 2), 7.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), 100.0);
        assert!((psnr_from_mse(1.0, 255.0) - 48.1308).abs() < 1e-3);
        assert!(psnr_from_mse(65025.0, 255.0).abs() < 1e-12);
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucketize(0.03).unwrap(), FgRatioBucket::Small);
        assert_eq!(bucketize(0.05).unwrap(), FgRatioBucket::Medium);
        assert_eq!(bucketize(0.15).unwrap(), FgRatioBucket::Large);
        assert_eq!(bucketize(1.0).unwrap(), FgRatioBucket::Large);
        assert_eq!(bucketize(0.0).unwrap(), FgRatioBucket::Small);
        assert!(bucketize(1.01).is_err());
        assert!(bucketize(-0.01).is_err());
        assert!(bucketize(f64::NAN).is_err());
    }

    #[test]
    fn aggregate_small_cases() {
        assert!(aggregate(vec![]).is_err());
        let one = aggregate(vec![record("a", 4.0, 40.0, 0.2)]).unwrap();
        assert_eq!(one.overall.mean_mse, 4.0);
        assert_eq!(one.overall.mean_fmse, 40.0);
        assert_eq!(one.bucket(FgRatioBucket::Small).mean_mse, None);

        let two = aggregate(vec![
            record("a", 4.0, 40.0, 0.2),
            record("b", 2.0, 10.0, 0.01),
        ])
        .unwrap();
        assert_eq!(two.overall.mean_mse, 3.0);
        assert_eq!(two.overall.mean_fmse, 25.0);
        assert_eq!(two.bucket(FgRatioBucket::Small).count, 1);
    }

    #[test]
    fn text_table_has_four_ratio_columns() {
        let r = aggregate(vec![
            record("a", 4.0, 40.0, 0.2),
            record("b", 2.0, 10.0, 0.01),
        ])
        .unwrap();
        let table = r.to_text_table();
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split('|').map(str::trim).collect();
        assert_eq!(
            cols,
            [
                "Foreground ratios",
                "0%~5%",
                "5%~15%",
                "15%~100%",
                "0%~100%"
            ]
        );
        assert!(table.lines().any(|l| l.trim_start().starts_with("fMSE")));
    }
}
