//! Study-level screening metrics: ROC AUC, confusion counts, F1, and the
//! missed detection rate of the selected patches.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::PixelBox;

pub const DEFAULT_TAU: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(invalid!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(invalid!("labels must be 0 or 1, got {l}"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve via midranks (ties count one half).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(invalid!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC vertices from the strictest threshold down, starting at `(0, 0)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(invalid!(
            "ROC needs both classes, got {pos} positive and {neg} negative"
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(pts)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

/// Counts with a score predicted positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_binary(scores, labels)?;
    if scores.is_empty() {
        return Err(invalid!("confusion counts need at least one study"));
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Harmonic mean of precision and recall; zero when there is no true positive.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Ground truth and selected patches of one view, in the same pixel frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewDetections {
    pub lesions: Vec<PixelBox>,
    pub patches: Vec<PixelBox>,
}

/// A lesion is detected when some patch covers at least `tau` of its area.
pub fn lesion_detected(lesion: &PixelBox, patches: &[PixelBox], tau: f64) -> bool {
    let area = lesion.area() as f64;
    area > 0.0
        && patches
            .iter()
            .any(|p| p.intersection_area(lesion) as f64 / area >= tau)
}

/// `(n_miss, n_gt)` over all views.
pub fn miss_counts(views: &[ViewDetections], tau: f64) -> (usize, usize) {
    let mut n_gt = 0;
    let mut n_miss = 0;
    for v in views {
        for l in &v.lesions {
            n_gt += 1;
            if !lesion_detected(l, &v.patches, tau) {
                n_miss += 1;
            }
        }
    }
    (n_miss, n_gt)
}

/// Missed detection rate `n_miss / n_gt`.
pub fn mdr(views: &[ViewDetections], tau: f64) -> Result<f64> {
    let (miss, gt) = miss_counts(views, tau);
    if gt == 0 {
        return Err(invalid!("missed detection rate is undefined without lesions"));
    }
    Ok(miss as f64 / gt as f64)
}

/// Written as `metrics.json`; `mdr` is absent when no study has boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub acc: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mdr: Option<f64>,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub threshold: f64,
    pub n_gt: usize,
    pub n_miss: usize,
}

impl MetricsReport {
    /// `auc` is `None` when the labels are single-class.
    pub fn compute(
        scores: &[f64],
        labels: &[u8],
        threshold: f64,
        detections: &[ViewDetections],
        tau: f64,
    ) -> Result<MetricsReport> {
        let c = confusion(scores, labels, threshold)?;
        let auc = match auc(scores, labels) {
            Ok(a) => Some(a),
            Err(_) => None,
        };
        let (n_miss, n_gt) = miss_counts(detections, tau);
        Ok(MetricsReport {
            auc,
            acc: c.accuracy(),
            f1: f1(c.tp, c.fp, c.fn_),
            mdr: (n_gt > 0).then(|| n_miss as f64 / n_gt as f64),
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            threshold,
            n_gt,
            n_miss,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialise");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pb(x0: usize, y0: usize, x1: usize, y1: usize) -> PixelBox {
        PixelBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.3, 0.4], &[1, 1]).is_err());
    }

    #[test]
    fn roc_ends_at_one_one() {
        let r = roc_curve(&[0.2, 0.8, 0.5, 0.5], &[0, 1, 1, 0]).unwrap();
        assert_eq!((r[0].fpr, r[0].tpr), (0.0, 0.0));
        let last = r.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(r.len(), 4);
        assert!(roc_csv(&r).starts_with("fpr,tpr,threshold\n"));
    }

    #[test]
    fn confusion_fixtures() {
        let c = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, tn: 1, fp: 0, fn_: 0 });
        assert_eq!(c.accuracy(), 1.0);
        let c = confusion(&[0.7; 4], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!(c.accuracy(), 0.5);
        let c = confusion(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(c.tp, 1);
        assert!(confusion(&[], &[], 0.5).is_err());
    }

    #[test]
    fn f1_fixtures() {
        assert_eq!(f1(5, 5, 5), 0.5);
        assert_eq!(f1(4, 0, 0), 1.0);
        assert_eq!(f1(0, 3, 2), 0.0);
    }

    #[test]
    fn mdr_fixtures() {
        let lesions = vec![pb(0, 0, 10, 10), pb(20, 20, 30, 30), pb(40, 0, 50, 10)];
        let all = ViewDetections {
            lesions: lesions.clone(),
            patches: lesions.clone(),
        };
        assert_eq!(mdr(&[all], 0.25).unwrap(), 0.0);
        let none = ViewDetections {
            lesions: lesions.clone(),
            patches: vec![pb(60, 60, 64, 64)],
        };
        assert_eq!(mdr(&[none], 0.25).unwrap(), 1.0);
        assert!(mdr(&[ViewDetections::default()], 0.25).is_err());
    }

    #[test]
    fn report_omits_mdr_without_boxes() {
        let r = MetricsReport::compute(&[0.9, 0.1], &[1, 0], 0.5, &[], 0.25).unwrap();
        let json = r.to_json();
        assert!(!json.contains("mdr"));
        assert!(json.contains("\"n_gt\": 0"));
        for key in ["auc", "acc", "f1", "tp", "tn", "fp", "\"fn\"", "threshold", "n_miss"] {
            assert!(json.contains(key), "{key}");
        }
    }
}
