//! Classification and detection metrics with bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{box_iou, BBox};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// Thresholds `scores` at `threshold` (inclusive) and tallies against `labels`.
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        Self::from_predictions(&pred, labels)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// How the accuracy figure is formed from a confusion table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyRule {
    /// `(sensitivity + specificity) / 2`.
    #[default]
    Balanced,
    /// `TP / (2 (TP + FP)) + TN / (2 (TN + FN))`, the mean of the two predictive values.
    PredictiveMean,
}

/// `(accuracy, sensitivity, specificity)`; undefined when either class is absent.
pub fn acc_sens_spec(conf: &Confusion) -> Result<(f64, f64, f64)> {
    acc_sens_spec_with(conf, AccuracyRule::Balanced)
}

pub fn acc_sens_spec_with(conf: &Confusion, rule: AccuracyRule) -> Result<(f64, f64, f64)> {
    let pos = conf.tp + conf.fn_;
    let neg = conf.tn + conf.fp;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("sensitivity/specificity with an empty class"));
    }
    let sens = conf.tp as f64 / pos as f64;
    let spec = conf.tn as f64 / neg as f64;
    let acc = match rule {
        AccuracyRule::Balanced => (sens + spec) / 2.0,
        AccuracyRule::PredictiveMean => {
            let (pp, pn) = (conf.tp + conf.fp, conf.tn + conf.fn_);
            if pp == 0 || pn == 0 {
                return Err(Error::Undefined("predictive-mean accuracy with an empty prediction class"));
            }
            conf.tp as f64 / (2.0 * pp as f64) + conf.tn as f64 / (2.0 * pn as f64)
        }
    };
    Ok((acc, sens, spec))
}

/// Precision is `None` without positive predictions, recall `None` without positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(conf: &Confusion) -> PrecisionRecall {
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    PrecisionRecall { precision: ratio(conf.tp, conf.tp + conf.fp), recall: ratio(conf.tp, conf.tp + conf.fn_) }
}

/// A scored detection on image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// A ground-truth box on image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
}

/// True-positive flag per detection in descending-score order (ties keep input order).
/// Each detection takes the unmatched ground truth of highest IoU `>= iou_thr`.
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image != d.image {
                    continue;
                }
                let iou = box_iou(&d.bbox, &g.bbox);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Area under the 101-point interpolated precision-recall curve.
pub fn average_precision(dets: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Undefined("average precision without ground truth"));
    }
    let flags = match_detections(dets, gts, iou_thr);
    let mut curve = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(interpolated_ap(&curve))
}

/// 101-point interpolation over `(recall, precision)` points.
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve.iter().filter(|&&(rc, _)| rc >= r - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// `(mAP@.5, mAP@.5:.95)`, the latter averaging thresholds 0.50, 0.55, …, 0.95.
pub fn map_range(dets: &[ScoredBox], gts: &[GroundTruth]) -> Result<(f64, f64)> {
    let m50 = average_precision(dets, gts, 0.5)?;
    let mut total = 0.0;
    for i in 0..10 {
        total += average_precision(dets, gts, 0.5 + 0.05 * i as f64)?;
    }
    Ok((m50, total / 10.0))
}

fn check_classes(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(invalid("roc", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Undefined("ROC with a single class"));
    }
    Ok(())
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct score threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_classes(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / neg, tp / pos));
    }
    Ok(points)
}

/// Trapezoidal area under [`roc_curve`].
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Percentile bootstrap interval of `metric` over resampled `(score, label)` pairs.
///
/// Replicate `r` draws from its own stream of the master seed. Replicates on which
/// the metric is undefined (for example a single resampled class) are discarded.
pub fn bootstrap_ci<F>(scores: &[f64], labels: &[bool], metric: F, samples: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(invalid("bootstrap_ci", "scores and labels must be non-empty and equal length"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid("bootstrap_ci", format!("level {level} outside (0, 1)")));
    }
    let n = scores.len();
    let mut values = Vec::with_capacity(samples);
    let (mut s, mut l) = (vec![0.0; n], vec![false; n]);
    for r in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        for k in 0..n {
            let j = rng.random_range(0..n);
            s[k] = scores[j];
            l[k] = labels[j];
        }
        if let Ok(v) = metric(&s, &l) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::Undefined("bootstrap interval: metric undefined on every replicate"));
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&values, tail), quantile(&values, 1.0 - tail)))
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One row of the slide-level metrics table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMetrics {
    pub acc: f64,
    pub sens: f64,
    pub spec: f64,
    pub auc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub const METRICS_CSV_HEADER: &str = "acc,sens,spec,auc,ci_lo,ci_hi";

impl SlideMetrics {
    /// Predictions are `score >= threshold`; the interval is a bootstrap of the AUC
    /// at confidence `level`.
    pub fn compute(
        scores: &[f64],
        labels: &[bool],
        threshold: f64,
        rule: AccuracyRule,
        samples: usize,
        level: f64,
        seed: u64,
    ) -> Result<Self> {
        let conf = Confusion::at_threshold(scores, labels, threshold);
        let (acc, sens, spec) = acc_sens_spec_with(&conf, rule)?;
        let auc = roc_auc(scores, labels)?;
        let (ci_lo, ci_hi) = bootstrap_ci(scores, labels, roc_auc, samples, level, seed)?;
        Ok(Self { acc, sens, spec, auc, ci_lo, ci_hi })
    }

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", self.acc, self.sens, self.spec, self.auc, self.ci_lo, self.ci_hi)
    }
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in points {
        s.push_str(&format!("{f:.6},{t:.6}\n"));
    }
    s
}
