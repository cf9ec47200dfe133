//! Pixel-level OOD detection and segmentation metrics.
//!
//! Ranking metrics treat equal scores as one threshold group. A pixel is
//! predicted anomalous at threshold `t` when its score is `>= t`.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use crate::error::{PebalError, Result};
use crate::grid::{LabelMap, PixelGrid, IGNORE};

/// Pooled anomaly scores with per-pixel ground truth (`true` = anomaly).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPixels {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(PebalError::arg(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(PebalError::arg(format!("score {i} is NaN")));
        }
        Ok(Self { scores, labels })
    }

    /// Appends every non-IGNORE pixel of one image.
    pub fn push_map(&mut self, score: &PixelGrid, gt: &LabelMap) -> Result<()> {
        if !gt.same_plane(score) || score.depth() != 1 {
            return Err(PebalError::arg("score map and label map shapes differ"));
        }
        for (&s, &l) in score.as_slice().iter().zip(gt.as_slice()) {
            if l == IGNORE {
                continue;
            }
            if s.is_nan() {
                return Err(PebalError::Numerical("NaN anomaly score".into()));
            }
            self.scores.push(s);
            self.labels.push(gt.is_anomaly(l));
        }
        Ok(())
    }

    pub fn from_map(score: &PixelGrid, gt: &LabelMap) -> Result<Self> {
        let mut sp = Self::default();
        sp.push_map(score, gt)?;
        Ok(sp)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both(&self, metric: &'static str) -> Result<(usize, usize)> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(PebalError::UndefinedMetric {
                metric,
                reason: format!("needs both classes, got {p} positives and {n} negatives"),
            });
        }
        Ok((p, n))
    }

    /// Threshold groups in descending score order: `(score, positives, negatives)`.
    fn groups_descending(&self) -> Vec<(f64, usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            match groups.last_mut() {
                Some(g) if g.0 == s => {}
                _ => groups.push((s, 0, 0)),
            }
            let g = groups.last_mut().expect("just pushed");
            if self.labels[i] {
                g.1 += 1;
            } else {
                g.2 += 1;
            }
        }
        groups
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic with mid-ranks.
pub fn auroc(sp: &ScoredPixels) -> Result<f64> {
    let (p, n) = sp.require_both("auroc")?;
    let groups = sp.groups_descending();
    // walk ascending so `below` counts negatives strictly under the group
    let mut below = 0usize;
    let mut u = 0.0;
    for &(_, gp, gn) in groups.iter().rev() {
        u += gp as f64 * (below as f64 + 0.5 * gn as f64);
        below += gn;
    }
    Ok(u / (p as f64 * n as f64))
}

/// Step-wise average precision: `Σ ΔRecall · Precision` over threshold groups.
pub fn average_precision(sp: &ScoredPixels) -> Result<f64> {
    let p = sp.positives();
    if p == 0 {
        return Err(PebalError::UndefinedMetric {
            metric: "ap",
            reason: "no positive pixels".into(),
        });
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, gp, gn) in sp.groups_descending() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += gp as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Largest distinct score `t` with `TPR(score >= t) >= target`, and the FPR there.
fn operating_point(
    sp: &ScoredPixels,
    tpr_target: f64,
    metric: &'static str,
) -> Result<(f64, f64, usize)> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(PebalError::arg(format!(
            "TPR target must lie in (0, 1], got {tpr_target}"
        )));
    }
    let (p, n) = sp.require_both(metric)?;
    let groups = sp.groups_descending();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (gi, &(s, gp, gn)) in groups.iter().enumerate() {
        tp += gp;
        fp += gn;
        if tp as f64 >= tpr_target * p as f64 {
            return Ok((s, fp as f64 / n as f64, gi));
        }
    }
    unreachable!("TPR reaches 1 at the lowest threshold")
}

/// False positive rate at the first operating point reaching `tpr_target`.
pub fn fpr_at_tpr(sp: &ScoredPixels, tpr_target: f64) -> Result<f64> {
    Ok(operating_point(sp, tpr_target, "fpr95")?.1)
}

/// A threshold `τ` for the strict rule `score > τ` that selects exactly the
/// pixels of the `tpr_target` operating point: the midpoint between the
/// operating score and the next lower distinct score (or one unit below when
/// none exists).
pub fn threshold_at_tpr(sp: &ScoredPixels, tpr_target: f64) -> Result<f64> {
    let (s, _, gi) = operating_point(sp, tpr_target, "threshold")?;
    let groups = sp.groups_descending();
    Ok(match groups.get(gi + 1) {
        Some(&(lower, _, _)) => {
            let mid = 0.5 * (s + lower);
            if mid < s {
                mid
            } else {
                lower
            }
        }
        None => s - 1.0,
    })
}

/// Mean IoU over inlier classes present in `gt`. IGNORE and anomaly pixels
/// of `gt` are excluded; a predicted anomaly on an inlier pixel is a miss.
pub fn miou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let mut acc = IouAccumulator::new(gt.num_inlier_classes());
    acc.add(pred, gt)?;
    acc.miou()
}

/// Confusion counts pooled over many images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_: Vec<usize>,
    pixels: usize,
}

impl IouAccumulator {
    pub fn new(num_inlier_classes: usize) -> Self {
        Self {
            tp: vec![0; num_inlier_classes],
            fp: vec![0; num_inlier_classes],
            fn_: vec![0; num_inlier_classes],
            pixels: 0,
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(PebalError::arg("prediction and ground truth shapes differ"));
        }
        if gt.num_inlier_classes() != self.tp.len() {
            return Err(PebalError::arg("class count mismatch"));
        }
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if !gt.is_inlier(g) {
                continue;
            }
            self.pixels += 1;
            let gi = g as usize - 1;
            if p == g {
                self.tp[gi] += 1;
            } else {
                self.fn_[gi] += 1;
                if gt.is_inlier(p) {
                    self.fp[p as usize - 1] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<usize> = (0..self.tp.len())
            .filter(|&c| self.tp[c] + self.fn_[c] > 0)
            .collect();
        if present.is_empty() {
            return Err(PebalError::UndefinedMetric {
                metric: "miou",
                reason: "no inlier ground-truth pixels".into(),
            });
        }
        let sum: f64 = present
            .iter()
            .map(|&c| self.tp[c] as f64 / (self.tp[c] + self.fp[c] + self.fn_[c]) as f64)
            .sum();
        Ok(sum / present.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub ece: f64,
    pub mce: f64,
    pub pixels: usize,
}

/// Equal-width confidence bins with accumulated `(count, conf, correct)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationAccumulator {
    count: Vec<usize>,
    conf: Vec<f64>,
    correct: Vec<usize>,
}

impl CalibrationAccumulator {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 1 {
            return Err(PebalError::arg("calibration needs at least one bin"));
        }
        Ok(Self {
            count: vec![0; bins],
            conf: vec![0.0; bins],
            correct: vec![0; bins],
        })
    }

    /// Adds the inlier-labeled pixels of one image. `probs` holds the
    /// inlier class distribution per pixel.
    pub fn add(&mut self, probs: &PixelGrid, gt: &LabelMap) -> Result<()> {
        let y = gt.num_inlier_classes();
        if !gt.same_plane(probs) || probs.depth() != y {
            return Err(PebalError::arg(format!(
                "probabilities must be {}x{}x{}",
                gt.height(),
                gt.width(),
                y
            )));
        }
        let bins = self.count.len();
        for (row, &g) in probs.pixels().zip(gt.as_slice()) {
            if !gt.is_inlier(g) {
                continue;
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(PebalError::arg(format!(
                    "probabilities sum to {total}, expected 1"
                )));
            }
            let (arg, conf) = argmax(row);
            let bin = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
            self.count[bin] += 1;
            self.conf[bin] += conf;
            if arg + 1 == g as usize {
                self.correct[bin] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Calibration> {
        let total: usize = self.count.iter().sum();
        if total == 0 {
            return Err(PebalError::UndefinedMetric {
                metric: "calibration",
                reason: "no inlier ground-truth pixels".into(),
            });
        }
        let (mut ece, mut mce) = (0.0f64, 0.0f64);
        for b in 0..self.count.len() {
            let n = self.count[b];
            if n == 0 {
                continue;
            }
            let gap = (self.correct[b] as f64 / n as f64 - self.conf[b] / n as f64).abs();
            ece += n as f64 / total as f64 * gap;
            mce = mce.max(gap);
        }
        Ok(Calibration {
            ece,
            mce,
            pixels: total,
        })
    }
}

/// ECE and MCE of the max-probability prediction over inlier pixels.
pub fn calibration(probs: &PixelGrid, gt: &LabelMap, bins: usize) -> Result<Calibration> {
    let mut acc = CalibrationAccumulator::new(bins)?;
    acc.add(probs, gt)?;
    acc.finish()
}

/// Index and value of the maximum; the lowest index wins ties.
pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub const CALIBRATION_BINS: usize = 15;

/// Per-image model outputs for [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    /// Anomaly score, depth 1.
    pub score: &'a PixelGrid,
    /// Inlier class distribution, depth `Y`.
    pub probs: &'a PixelGrid,
    pub pred: &'a LabelMap,
    pub gt: &'a LabelMap,
}

/// Split-level metrics. An undefined metric is NaN and listed in `undefined`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auroc: f64,
    pub ap: f64,
    pub fpr95: f64,
    pub miou: f64,
    pub ece: f64,
    pub mce: f64,
    pub positives: usize,
    pub negatives: usize,
    pub inlier_pixels: usize,
    pub undefined: Vec<(String, String)>,
}

impl EvalReport {
    /// `(metric, value, count)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(&'static str, f64, usize)> {
        let ranked = self.positives + self.negatives;
        vec![
            ("auroc", self.auroc, ranked),
            ("ap", self.ap, ranked),
            ("fpr95", self.fpr95, ranked),
            ("miou", self.miou, self.inlier_pixels),
            ("ece", self.ece, self.inlier_pixels),
            ("mce", self.mce, self.inlier_pixels),
        ]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\tcount\n");
        for (m, v, c) in self.rows() {
            writeln!(s, "{m}\t{v}\t{c}").expect("string write");
        }
        writeln!(s, "positives\t{}\t{}", self.positives, self.positives).expect("string write");
        writeln!(s, "negatives\t{}\t{}", self.negatives, self.negatives).expect("string write");
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| PebalError::io(path, e))
    }

    /// Appends `run_id  metric  value  count` rows, writing a header first
    /// when the log is new.
    pub fn append_run_log(&self, path: &Path, run_id: &str) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PebalError::io(path, e))?;
        let mut s = String::new();
        if fresh {
            s.push_str("run_id\tmetric\tvalue\tcount\n");
        }
        for (m, v, c) in self.rows() {
            writeln!(s, "{run_id}\t{m}\t{v}\t{c}").expect("string write");
        }
        f.write_all(s.as_bytes())
            .map_err(|e| PebalError::io(path, e))
    }
}

/// Pools all pixels of a split and computes every metric.
pub fn evaluate(items: &[EvalItem<'_>]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(PebalError::arg("cannot evaluate an empty split"));
    }
    let y = items[0].gt.num_inlier_classes();
    let mut sp = ScoredPixels::default();
    let mut iou = IouAccumulator::new(y);
    let mut cal = CalibrationAccumulator::new(CALIBRATION_BINS)?;
    for item in items {
        sp.push_map(item.score, item.gt)?;
        iou.add(item.pred, item.gt)?;
        cal.add(item.probs, item.gt)?;
    }
    let mut undefined = Vec::new();
    let mut take = |name: &str, r: Result<f64>| match r {
        Ok(v) => v,
        Err(PebalError::UndefinedMetric { reason, .. }) => {
            undefined.push((name.to_string(), reason));
            f64::NAN
        }
        Err(e) => {
            undefined.push((name.to_string(), e.to_string()));
            f64::NAN
        }
    };
    let auroc = take("auroc", auroc(&sp));
    let ap = take("ap", average_precision(&sp));
    let fpr95 = take("fpr95", fpr_at_tpr(&sp, 0.95));
    let miou = take("miou", iou.miou());
    let calibrated = cal.finish();
    let ece = take(
        "ece",
        calibrated.as_ref().map(|c| c.ece).map_err(clone_undefined),
    );
    let mce = take(
        "mce",
        calibrated.as_ref().map(|c| c.mce).map_err(clone_undefined),
    );
    Ok(EvalReport {
        auroc,
        ap,
        fpr95,
        miou,
        ece,
        mce,
        positives: sp.positives(),
        negatives: sp.negatives(),
        inlier_pixels: iou.pixels(),
        undefined,
    })
}

fn clone_undefined(e: &PebalError) -> PebalError {
    match e {
        PebalError::UndefinedMetric { metric, reason } => PebalError::UndefinedMetric {
            metric,
            reason: reason.clone(),
        },
        other => PebalError::Numerical(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sp(scores: &[f64], labels: &[u8]) -> ScoredPixels {
        ScoredPixels::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&sp(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0])).unwrap(),
            1.0
        );
        assert_eq!(auroc(&sp(&[0.5; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(
            auroc(&sp(&[0.9, 0.1, 0.8, 0.3], &[1, 0, 0, 1])).unwrap(),
            0.75
        );
        assert!(matches!(
            auroc(&sp(&[0.1, 0.2], &[1, 1])),
            Err(PebalError::UndefinedMetric { .. })
        ));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&sp(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        assert_abs_diff_eq!(
            average_precision(&sp(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap(),
            (1.0 + 2.0 / 3.0) / 2.0,
            epsilon = 1e-15
        );
        assert!(average_precision(&sp(&[0.3], &[0])).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(
            fpr_at_tpr(&sp(&[0.9, 0.8, 0.7, 0.2], &[1, 1, 0, 0]), 0.95).unwrap(),
            0.0
        );
        assert_eq!(
            fpr_at_tpr(&sp(&[0.9, 0.8, 0.8, 0.2], &[1, 1, 0, 0]), 0.95).unwrap(),
            0.5
        );
        assert_eq!(
            fpr_at_tpr(&sp(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]), 0.95).unwrap(),
            1.0
        );
        assert!(fpr_at_tpr(&sp(&[0.1, 0.2], &[1, 0]), 0.0).is_err());
    }

    #[test]
    fn threshold_selects_operating_point_under_strict_rule() {
        let s = sp(&[0.9, 0.8, 0.8, 0.2, 0.1], &[1, 1, 0, 0, 1]);
        let t = threshold_at_tpr(&s, 0.6).unwrap();
        assert!(t < 0.8 && t > 0.2);
        let t_all = threshold_at_tpr(&s, 1.0).unwrap();
        assert!(t_all < 0.1);
    }

    fn lm(labels: &[u8], w: usize) -> LabelMap {
        LabelMap::new(labels.len() / w, w, 2, labels.to_vec()).unwrap()
    }

    #[test]
    fn miou_examples() {
        let gt = lm(&[1, 2, 1, 2], 2);
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(
            miou(&lm(&[2, 2, 2, 2], 2), &lm(&[1, 1, 1, 1], 2)).unwrap(),
            0.0
        );
        // checkerboard gt, half the pixels flipped
        let gt = lm(&[1, 2, 2, 1], 2);
        let pred = lm(&[1, 1, 2, 2], 2);
        assert_abs_diff_eq!(miou(&pred, &gt).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn miou_skips_ignore_and_anomaly_gt() {
        let gt = lm(&[1, IGNORE, 3, 2], 2);
        let pred = lm(&[1, 2, 1, 2], 2);
        assert_eq!(miou(&pred, &gt).unwrap(), 1.0);
        assert!(miou(&pred, &lm(&[IGNORE, 3, 3, IGNORE], 2)).is_err());
    }

    #[test]
    fn calibration_examples() {
        let gt = lm(&[1, 2, 1, 2], 2);
        let certain = PixelGrid::from_fn(2, 2, 2, |r, c, ch| {
            let g = gt.get(r, c) as usize - 1;
            if ch == g {
                1.0
            } else {
                0.0
            }
        });
        let c = calibration(&certain, &gt, 15).unwrap();
        assert_eq!((c.ece, c.mce), (0.0, 0.0));

        // confidence 0.6 on class 1 everywhere, 3 of 5 pixels really class 1
        let gt = LabelMap::new(1, 5, 2, vec![1, 1, 1, 2, 2]).unwrap();
        let probs = PixelGrid::from_fn(1, 5, 2, |_, _, ch| if ch == 0 { 0.6 } else { 0.4 });
        assert_abs_diff_eq!(
            calibration(&probs, &gt, 15).unwrap().ece,
            0.0,
            epsilon = 1e-12
        );

        // two bins: 0.9 confident & right, 0.9 & wrong, 0.6 & right
        let gt = LabelMap::new(1, 3, 2, vec![1, 2, 2]).unwrap();
        let probs = PixelGrid::from_vec(1, 3, 2, vec![0.9, 0.1, 0.9, 0.1, 0.4, 0.6]).unwrap();
        let c = calibration(&probs, &gt, 2).unwrap();
        // bin 2 holds {0.9 ok, 0.9 wrong, 0.6 ok}: acc 2/3, conf 0.8
        assert_abs_diff_eq!(c.ece, (2.0f64 / 3.0 - 0.8).abs(), epsilon = 1e-12);
        let c = calibration(&probs, &gt, 10).unwrap();
        // bins 9 and 6: |0.5-0.9| * 2/3 + |1-0.6| * 1/3
        assert_abs_diff_eq!(c.ece, 0.4 * 2.0 / 3.0 + 0.4 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mce, 0.4, epsilon = 1e-12);
        assert!(calibration(&probs, &gt, 0).is_err());
    }

    #[test]
    fn evaluate_toy_split() {
        let gt1 = lm(&[1, 3, 2, 2], 2);
        let gt2 = lm(&[1, 1, 2, IGNORE], 2);
        let s1 = PixelGrid::from_vec(2, 2, 1, vec![0.1, 0.9, 0.2, 0.3]).unwrap();
        let s2 = PixelGrid::from_vec(2, 2, 1, vec![0.4, 0.0, 0.1, 5.0]).unwrap();
        let probs = PixelGrid::from_fn(2, 2, 2, |_, _, ch| if ch == 0 { 0.75 } else { 0.25 });
        let pred1 = lm(&[1, 3, 2, 2], 2);
        let pred2 = lm(&[1, 1, 2, 2], 2);
        let r = evaluate(&[
            EvalItem {
                score: &s1,
                probs: &probs,
                pred: &pred1,
                gt: &gt1,
            },
            EvalItem {
                score: &s2,
                probs: &probs,
                pred: &pred2,
                gt: &gt2,
            },
        ])
        .unwrap();
        assert_eq!((r.positives, r.negatives, r.inlier_pixels), (1, 6, 6));
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.fpr95, 0.0);
        assert_eq!(r.miou, 1.0);
        // 6 inlier pixels at confidence 0.75, three of class 1
        assert_abs_diff_eq!(r.ece, 0.25, epsilon = 1e-12);
        assert!(r.undefined.is_empty());
        let tsv = r.to_tsv();
        assert!(tsv.starts_with("metric\tvalue\tcount\nauroc\t1\t7\n"));
    }

    #[test]
    fn evaluate_pure_inlier_split_marks_ranking_undefined() {
        let gt = lm(&[1, 2, 1, 2], 2);
        let s = PixelGrid::zeros(2, 2, 1);
        let probs = PixelGrid::filled(2, 2, 2, 0.5);
        let r = evaluate(&[EvalItem {
            score: &s,
            probs: &probs,
            pred: &gt,
            gt: &gt,
        }])
        .unwrap();
        assert!(r.auroc.is_nan() && r.ap.is_nan() && r.fpr95.is_nan());
        assert_eq!(r.miou, 1.0);
        let names: Vec<&str> = r.undefined.iter().map(|(m, _)| m.as_str()).collect();
        assert_eq!(names, ["auroc", "ap", "fpr95"]);
    }

    #[test]
    fn run_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.tsv");
        let gt = lm(&[1, 3, 2, 2], 2);
        let s = PixelGrid::from_vec(2, 2, 1, vec![0.1, 0.9, 0.2, 0.3]).unwrap();
        let probs = PixelGrid::filled(2, 2, 2, 0.5);
        let r = evaluate(&[EvalItem {
            score: &s,
            probs: &probs,
            pred: &gt,
            gt: &gt,
        }])
        .unwrap();
        r.append_run_log(&path, "abc").unwrap();
        r.append_run_log(&path, "def").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 6);
        assert_eq!(text.lines().filter(|l| l.starts_with("run_id")).count(), 1);
    }

    fn arb_scored() -> impl Strategy<Value = ScoredPixels> {
        (2usize..64).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..6, n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(s, l)| {
                    ScoredPixels::new(s.into_iter().map(|v| v as f64 / 5.0).collect(), l).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn ranking_metrics_invariant_under_monotone_transform(s in arb_scored()) {
            let t = ScoredPixels::new(
                s.scores().iter().map(|v| (3.0 * v).exp() - 7.0).collect(),
                s.labels().to_vec(),
            ).unwrap();
            if s.positives() > 0 && s.negatives() > 0 {
                prop_assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());
                prop_assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), fpr_at_tpr(&t, 0.95).unwrap());
            }
            if s.positives() > 0 {
                prop_assert_eq!(average_precision(&s).unwrap(), average_precision(&t).unwrap());
            }
        }

        #[test]
        fn auroc_of_negated_scores_complements(
            n in 2usize..64,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc(&ScoredPixels::new(scores.clone(), labels.clone()).unwrap()).unwrap();
            let b = auroc(&ScoredPixels::new(scores.iter().map(|v| -v).collect(), labels).unwrap()).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_lie_in_unit_interval(s in arb_scored()) {
            if s.positives() > 0 && s.negatives() > 0 {
                for v in [auroc(&s).unwrap(), average_precision(&s).unwrap(), fpr_at_tpr(&s, 0.95).unwrap()] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn random_ranker_ap_averages_prevalence() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut labels: Vec<bool> = (0..200).map(|i| i % 5 == 0).collect();
        let scores: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let mut total = 0.0;
        for _ in 0..1000 {
            labels.shuffle(&mut rng);
            total += average_precision(&ScoredPixels::new(scores.clone(), labels.clone()).unwrap())
                .unwrap();
        }
        assert!((total / 1000.0 - 0.2).abs() < 0.05, "{}", total / 1000.0);
    }
}
