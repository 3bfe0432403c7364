//! Threshold-free and thresholded anomaly-prediction metrics.
//!
//! VUS-PR here is the mean of average precision over hard label dilations
//! `ℓ = 0..=L_buf`: every labeled timestep is widened by `ℓ` steps on each
//! side before AP is computed. The graded buffer labels of the original
//! VUS formulation are not reproduced, so values are not numerically
//! comparable with other VUS-PR implementations.

use std::cmp::Ordering;

use crate::error::{F2aError, Result};
use crate::loss::threshold_labels;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSeries {
    /// Timestep of `scores[0]` within the source series.
    pub start: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSeries {
    pub fn new(start: usize, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(F2aError::shape("scores vs labels", scores.len(), labels.len()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(F2aError::InvalidArgument {
                arg: "scores",
                reason: format!("score at {i} is not finite"),
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(F2aError::InvalidArgument {
                arg: "labels",
                reason: "labels must be 0 or 1".into(),
            });
        }
        Ok(ScoredSeries { start, scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Averages overlapping horizon predictions into one score per timestep.
///
/// `horizons` holds `(first horizon timestep, p)` per window; `labels` is the
/// full label vector of the series. Leading and trailing uncovered timesteps
/// are dropped; an uncovered timestep between covered ones is an error.
pub fn stitch_scores(horizons: &[(usize, &[f64])], labels: &[u8]) -> Result<ScoredSeries> {
    let t = labels.len();
    let mut sum = vec![0.0; t];
    let mut count = vec![0usize; t];
    for &(start, p) in horizons {
        if start + p.len() > t {
            return Err(F2aError::InvalidArgument {
                arg: "horizons",
                reason: format!("horizon {start}..{} runs past series end {t}", start + p.len()),
            });
        }
        for (i, &v) in p.iter().enumerate() {
            sum[start + i] += v;
            count[start + i] += 1;
        }
    }
    let first = count.iter().position(|&c| c > 0).ok_or_else(|| F2aError::InvalidArgument {
        arg: "horizons",
        reason: "no timestep is covered".into(),
    })?;
    let last = count.iter().rposition(|&c| c > 0).unwrap();
    if let Some(gap) = (first..=last).find(|&i| count[i] == 0) {
        let end = (gap..=last).find(|&i| count[i] > 0).unwrap();
        return Err(F2aError::CoverageGap { start: gap, end });
    }
    let scores = (first..=last).map(|i| sum[i] / count[i] as f64).collect();
    ScoredSeries::new(first, scores, labels[first..=last].to_vec())
}

fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// AP over tie-grouped descending thresholds, given a precomputed order.
fn ap_with_order(scores: &[f64], labels: &[u8], order: &[usize]) -> Result<f64> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(F2aError::DegenerateLabels(
            "average precision needs at least one positive label".into(),
        ));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]].total_cmp(&s) == Ordering::Equal {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn average_precision(s: &ScoredSeries) -> Result<f64> {
    ap_with_order(&s.scores, &s.labels, &descending_order(&s.scores))
}

/// Widens every positive label by `radius` steps on each side.
pub fn dilate_labels(labels: &[u8], radius: usize) -> Vec<u8> {
    let n = labels.len();
    // Distance to the nearest positive, from both directions.
    let mut dist = vec![usize::MAX; n];
    let mut last = None;
    for i in 0..n {
        if labels[i] == 1 {
            last = Some(i);
        }
        if let Some(j) = last {
            dist[i] = i - j;
        }
    }
    last = None;
    for i in (0..n).rev() {
        if labels[i] == 1 {
            last = Some(i);
        }
        if let Some(j) = last {
            dist[i] = dist[i].min(j - i);
        }
    }
    dist.into_iter().map(|d| u8::from(d <= radius)).collect()
}

pub fn vus_pr(s: &ScoredSeries, l_buf: usize) -> Result<f64> {
    let order = descending_order(&s.scores);
    let mut total = 0.0;
    for radius in 0..=l_buf {
        let dilated = if radius == 0 {
            s.labels.clone()
        } else {
            dilate_labels(&s.labels, radius)
        };
        total += ap_with_order(&s.scores, &dilated, &order)?;
    }
    Ok(total / (l_buf + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> Prf1 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 { precision, recall, f1 }
}

pub fn prf1(s: &ScoredSeries, u: f64) -> Prf1 {
    let pred = threshold_labels(ndarray::ArrayView1::from(&s.scores[..]), u);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &y) in pred.iter().zip(&s.labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dataset: String,
    pub variant: String,
    pub k: usize,
    pub vus_pr: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub l_buf: usize,
}

pub const METRIC_CSV_HEADER: &str = "dataset,variant,k,vus_pr,ap,precision,recall,f1,u,L_buf";

impl MetricReport {
    pub fn compute(
        dataset: impl Into<String>,
        variant: impl Into<String>,
        k: usize,
        s: &ScoredSeries,
        u: f64,
        l_buf: usize,
    ) -> Result<Self> {
        let prf = prf1(s, u);
        Ok(MetricReport {
            dataset: dataset.into(),
            variant: variant.into(),
            k,
            vus_pr: vus_pr(s, l_buf)?,
            ap: average_precision(s)?,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            threshold: u,
            l_buf,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.variant,
            self.k,
            self.vus_pr,
            self.ap,
            self.precision,
            self.recall,
            self.f1,
            self.threshold,
            self.l_buf
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || F2aError::Config(format!("malformed metric row {line:?}"));
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        Ok(MetricReport {
            dataset: f[0].to_string(),
            variant: f[1].to_string(),
            k: int(f[2])?,
            vus_pr: num(f[3])?,
            ap: num(f[4])?,
            precision: num(f[5])?,
            recall: num(f[6])?,
            f1: num(f[7])?,
            threshold: num(f[8])?,
            l_buf: int(f[9])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(scores: &[f64], labels: &[u8]) -> ScoredSeries {
        ScoredSeries::new(0, scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn stitch_non_overlapping_concatenates() {
        let labels = vec![0u8; 10];
        let a = [0.1, 0.2];
        let b = [0.3, 0.4];
        let s = stitch_scores(&[(4, &a), (6, &b)], &labels).unwrap();
        assert_eq!(s.start, 4);
        assert_eq!(s.scores, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn stitch_averages_overlap() {
        let labels = vec![0u8; 4];
        let a = [0.2, 0.2];
        let b = [0.6, 0.6];
        let s = stitch_scores(&[(0, &a), (1, &b)], &labels).unwrap();
        assert!((s.scores[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stitch_reports_gap() {
        let labels = vec![0u8; 10];
        let a = [0.1, 0.2];
        let err = stitch_scores(&[(0, &a), (5, &a)], &labels).unwrap_err();
        assert!(matches!(err, F2aError::CoverageGap { start: 2, end: 5 }));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&series(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&series(&[0.1, 0.9], &[1, 0])).unwrap(), 0.5);
        assert_eq!(average_precision(&series(&[0.3; 5], &[1, 0, 1, 0, 0])).unwrap(), 0.4);
        assert!(average_precision(&series(&[0.3, 0.2], &[0, 0])).is_err());
    }

    #[test]
    fn vus_worked_case() {
        let s = series(&[0.0, 0.0, 1.0, 0.0, 0.0], &[0, 0, 1, 0, 0]);
        assert_eq!(vus_pr(&s, 0).unwrap(), average_precision(&s).unwrap());
        assert!((vus_pr(&s, 1).unwrap() - 13.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn dilation_clips_at_boundaries() {
        assert_eq!(dilate_labels(&[1, 0, 0, 0, 0, 0, 1], 2), vec![1, 1, 1, 0, 1, 1, 1]);
        assert_eq!(dilate_labels(&[0, 0, 0], 5), vec![0, 0, 0]);
    }

    #[test]
    fn prf1_cases() {
        let perfect = series(&[0.9, 0.1, 0.8], &[1, 0, 1]);
        let p = prf1(&perfect, 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let none = series(&[0.1, 0.1], &[1, 0]);
        let p = prf1(&none, 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        // TP=1, FP=1, FN=1
        let mixed = series(&[0.9, 0.9, 0.1, 0.1], &[1, 0, 1, 0]);
        let p = prf1(&mixed, 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn report_row_round_trip() {
        let s = series(&[0.9, 0.1, 0.4], &[1, 0, 0]);
        let r = MetricReport::compute("d", "rag3", 3, &s, 0.5, 1).unwrap();
        assert_eq!(MetricReport::parse_row(&r.csv_row()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(
            scores in prop::collection::vec(0.0f64..1.0, 2..60),
            bits in prop::collection::vec(0u8..2, 60),
        ) {
            let mut labels = bits[..scores.len()].to_vec();
            labels[0] = 1;
            let a = average_precision(&series(&scores, &labels)).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let b = average_precision(&series(&t, &labels)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn metrics_bounded(
            scores in prop::collection::vec(0.0f64..1.0, 2..60),
            bits in prop::collection::vec(0u8..2, 60),
            l_buf in 0usize..6,
            u in 0.01f64..0.99,
        ) {
            let mut labels = bits[..scores.len()].to_vec();
            labels[0] = 1;
            let s = series(&scores, &labels);
            let v = vus_pr(&s, l_buf).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let p = prf1(&s, u);
            for m in [p.precision, p.recall, p.f1] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }
}
