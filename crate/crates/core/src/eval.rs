//! Detection/label matching, detection and classification metrics, the
//! ratio error, sequential threshold search and magnification-sweep output.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::annotations::{CellClass, PointAnnotation, Rect};
use crate::postprocess::{classify, Scores, TcrSummary, Thresholds};

/// Matching radius in microns (14 px at 40X).
pub const MATCH_RADIUS_UM: f64 = 3.2;
/// Default threshold grid step.
pub const GRID_STEP: f64 = 0.05;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("mpp must be positive and finite, got {0}")]
    Mpp(f64),
    #[error("length mismatch: {0} predictions vs {1} ground-truth values")]
    Length(usize, usize),
    #[error("evaluation set is empty")]
    Empty,
    #[error("grid step must be in (0, 0.5], got {0}")]
    Step(f64),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(detection index, label index, distance in microns)`, in acceptance order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_labels: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_detections.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_labels.len()
    }
}

/// Greedy closest-first matching. All detection/label pairs within
/// `radius_um` are sorted by `(distance, detection index, label index)` and
/// accepted in that order unless either endpoint is already taken.
pub fn greedy_match(
    detections: &[(f64, f64)],
    labels: &[(f64, f64)],
    radius_um: f64,
    mpp: f64,
) -> Result<MatchResult, EvalError> {
    if !(mpp > 0.0 && mpp.is_finite()) {
        return Err(EvalError::Mpp(mpp));
    }
    let r = radius_um / mpp;
    let r2 = r * r;
    // bucket labels on an r-sized grid so only neighboring cells are compared
    let key = |x: f64, y: f64| ((x / r).floor() as i64, (y / r).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, &(x, y)) in labels.iter().enumerate() {
        buckets.entry(key(x, y)).or_default().push(j);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &(x, y)) in detections.iter().enumerate() {
        let (kx, ky) = key(x, y);
        for by in ky - 1..=ky + 1 {
            for bx in kx - 1..=kx + 1 {
                let Some(list) = buckets.get(&(bx, by)) else { continue };
                for &j in list {
                    let (lx, ly) = labels[j];
                    let d2 = (x - lx) * (x - lx) + (y - ly) * (y - ly);
                    if d2 <= r2 {
                        pairs.push((d2.sqrt(), i, j));
                    }
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; detections.len()];
    let mut lab_used = vec![false; labels.len()];
    let mut out = MatchResult::default();
    for (d, i, j) in pairs {
        if !det_used[i] && !lab_used[j] {
            det_used[i] = true;
            lab_used[j] = true;
            out.pairs.push((i, j, d * mpp));
        }
    }
    out.unmatched_detections = (0..detections.len()).filter(|&i| !det_used[i]).collect();
    out.unmatched_labels = (0..labels.len()).filter(|&j| !lab_used[j]).collect();
    Ok(out)
}

/// `num / den`, or 0 with the flag raised when `den` is 0.
fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64, degenerate: &mut bool) -> f64 {
    if p + r == 0.0 {
        *degenerate = true;
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some denominator was zero and the affected metric was set to 0.
    pub degenerate: bool,
}

pub fn detection_metrics(tp: usize, fp: usize, fn_: usize) -> DetectionMetrics {
    let mut degenerate = false;
    let accuracy = ratio(tp, tp + fp + fn_, &mut degenerate);
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = f1_of(precision, recall, &mut degenerate);
    DetectionMetrics { tp, fp, fn_, accuracy, precision, recall, f1, degenerate }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision_pos: f64,
    pub recall_pos: f64,
    pub precision_neg: f64,
    pub recall_neg: f64,
    /// Mean of the two per-class precisions.
    pub precision: f64,
    /// Mean of the two per-class recalls.
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

/// Tumor-positive confusion counts over `(predicted, true)` pairs.
pub fn confusion(pairs: impl IntoIterator<Item = (CellClass, CellClass)>) -> (usize, usize, usize, usize) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (pred, truth) in pairs {
        match (pred, truth) {
            (CellClass::Tumor, CellClass::Tumor) => tp += 1,
            (CellClass::Normal, CellClass::Normal) => tn += 1,
            (CellClass::Tumor, CellClass::Normal) => fp += 1,
            (CellClass::Normal, CellClass::Tumor) => fn_ += 1,
        }
    }
    (tp, tn, fp, fn_)
}

pub fn classification_metrics(tp: usize, tn: usize, fp: usize, fn_: usize) -> ClassificationMetrics {
    let mut degenerate = false;
    let accuracy = ratio(tp + tn, tp + tn + fp + fn_, &mut degenerate);
    let precision_pos = ratio(tp, tp + fp, &mut degenerate);
    let recall_pos = ratio(tp, tp + fn_, &mut degenerate);
    let precision_neg = ratio(tn, tn + fn_, &mut degenerate);
    let recall_neg = ratio(tn, tn + fp, &mut degenerate);
    let precision = (precision_pos + precision_neg) / 2.0;
    let recall = (recall_pos + recall_neg) / 2.0;
    let f1 = f1_of(precision, recall, &mut degenerate);
    ClassificationMetrics {
        tp,
        tn,
        fp,
        fn_,
        accuracy,
        precision_pos,
        recall_pos,
        precision_neg,
        recall_neg,
        precision,
        recall,
        f1,
        degenerate,
    }
}

/// Mean absolute ratio error over ROIs.
pub fn tcr_error(predicted: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Length(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64)
}

/// Interior grid points `k * step`, `k = 1 .. round(1 / step) - 1`, rounded
/// to 1e-9 so that decimal steps give clean values.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>, EvalError> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(EvalError::Step(step));
    }
    let m = (1.0 / step).round() as usize;
    Ok((1..m).map(|k| ((k as f64 * step) * 1e9).round() / 1e9).collect())
}

/// A peak found on an ROI before thresholding, in level-0 pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x: u64,
    pub y: u64,
    pub scores: ScoresSer,
}

/// Serializable mirror of [`Scores`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoresSer {
    pub i_d: f64,
    pub i_c: f64,
    pub i_s: f64,
}

impl From<Scores> for ScoresSer {
    fn from(s: Scores) -> Self {
        Self { i_d: s.i_d, i_c: s.i_c, i_s: s.i_s }
    }
}

impl From<ScoresSer> for Scores {
    fn from(s: ScoresSer) -> Self {
        Self { i_d: s.i_d, i_c: s.i_c, i_s: s.i_s }
    }
}

/// One evaluated ROI: every peak of the detection map (threshold 0) with its
/// scores, and the ground-truth points inside the ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRoi {
    pub roi: Rect,
    pub mpp: f64,
    pub candidates: Vec<Candidate>,
    pub labels: Vec<PointAnnotation>,
}

impl EvalRoi {
    pub fn detections(&self, t_d: f64) -> impl Iterator<Item = &Candidate> + '_ {
        self.candidates.iter().filter(move |c| c.scores.i_d >= t_d)
    }

    fn matched(&self, t_d: f64) -> Result<(Vec<&Candidate>, MatchResult), EvalError> {
        let dets: Vec<&Candidate> = self.detections(t_d).collect();
        let dpos: Vec<(f64, f64)> = dets.iter().map(|c| (c.x as f64, c.y as f64)).collect();
        let lpos: Vec<(f64, f64)> = self.labels.iter().map(|p| (p.x, p.y)).collect();
        let m = greedy_match(&dpos, &lpos, MATCH_RADIUS_UM, self.mpp)?;
        Ok((dets, m))
    }

    /// Predicted ratio summary at the given thresholds.
    pub fn predicted(&self, th: &Thresholds) -> TcrSummary {
        let (mut tumor, mut total) = (0, 0);
        for c in self.detections(th.t_d) {
            total += 1;
            tumor += usize::from(classify(&c.scores.into(), th).0 == CellClass::Tumor);
        }
        TcrSummary::from_counts(tumor, total)
    }

    pub fn true_tcr(&self) -> f64 {
        let t = self.labels.iter().filter(|p| p.class == CellClass::Tumor).count();
        TcrSummary::from_counts(t, self.labels.len()).tcr
    }
}

/// Pooled evaluation over a set of ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Thresholds,
    pub detection: DetectionMetrics,
    pub classification: ClassificationMetrics,
    pub predicted_tcr: Vec<f64>,
    pub true_tcr: Vec<f64>,
    pub tcr_error: f64,
    /// Macro F1 over per-class matching, used for the joint mode of the
    /// magnification sweep.
    pub detcls_f1: f64,
}

pub fn evaluate(rois: &[EvalRoi], th: &Thresholds) -> Result<MetricReport, EvalError> {
    if rois.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut conf = (0, 0, 0, 0);
    let mut per_class = [(0usize, 0usize, 0usize); 2];
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for roi in rois {
        let (dets, m) = roi.matched(th.t_d)?;
        tp += m.tp();
        fp += m.fp();
        fn_ += m.fn_();
        let c = confusion(
            m.pairs.iter().map(|&(i, j, _)| (classify(&dets[i].scores.into(), th).0, roi.labels[j].class)),
        );
        conf = (conf.0 + c.0, conf.1 + c.1, conf.2 + c.2, conf.3 + c.3);
        for (k, class) in [CellClass::Normal, CellClass::Tumor].into_iter().enumerate() {
            let d: Vec<(f64, f64)> = dets
                .iter()
                .filter(|c| classify(&c.scores.into(), th).0 == class)
                .map(|c| (c.x as f64, c.y as f64))
                .collect();
            let l: Vec<(f64, f64)> = roi.labels.iter().filter(|p| p.class == class).map(|p| (p.x, p.y)).collect();
            let mk = greedy_match(&d, &l, MATCH_RADIUS_UM, roi.mpp)?;
            per_class[k].0 += mk.tp();
            per_class[k].1 += mk.fp();
            per_class[k].2 += mk.fn_();
        }
        pred.push(roi.predicted(th).tcr);
        truth.push(roi.true_tcr());
    }
    let detcls_f1 =
        per_class.iter().map(|&(tp, fp, fn_)| detection_metrics(tp, fp, fn_).f1).sum::<f64>() / 2.0;
    Ok(MetricReport {
        thresholds: *th,
        detection: detection_metrics(tp, fp, fn_),
        classification: classification_metrics(conf.0, conf.1, conf.2, conf.3),
        tcr_error: tcr_error(&pred, &truth)?,
        predicted_tcr: pred,
        true_tcr: truth,
        detcls_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub thresholds: Thresholds,
    /// Pooled detection F1 at the chosen `t_d`.
    pub detection_f1: f64,
    /// Ratio error at the chosen pair.
    pub tcr_error: f64,
    /// `(t_d, F1)` for each grid point of stage 1.
    pub stage1: Vec<(f64, f64)>,
    /// `(t_c, E_TCR)` for each grid point of stage 2.
    pub stage2: Vec<(f64, f64)>,
}

fn pooled_detection_f1(rois: &[EvalRoi], t_d: f64) -> Result<f64, EvalError> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for roi in rois {
        let (_, m) = roi.matched(t_d)?;
        tp += m.tp();
        fp += m.fp();
        fn_ += m.fn_();
    }
    Ok(detection_metrics(tp, fp, fn_).f1)
}

fn ratio_error(rois: &[EvalRoi], th: &Thresholds) -> Result<f64, EvalError> {
    let pred: Vec<f64> = rois.iter().map(|r| r.predicted(th).tcr).collect();
    let truth: Vec<f64> = rois.iter().map(EvalRoi::true_tcr).collect();
    tcr_error(&pred, &truth)
}

/// Sequential grid search: `t_d` maximizes pooled detection F1 (ties go to
/// the smaller value), then with `t_d` fixed `t_c` minimizes the ratio error
/// (ties go to the smaller value). `alpha` is kept as given.
pub fn tune_thresholds(rois: &[EvalRoi], step: f64, alpha: f64) -> Result<TuneResult, EvalError> {
    if rois.is_empty() {
        return Err(EvalError::Empty);
    }
    let grid = threshold_grid(step)?;
    let mut stage1 = Vec::with_capacity(grid.len());
    let mut best_d = (grid[0], f64::NEG_INFINITY);
    for &t in &grid {
        let f1 = pooled_detection_f1(rois, t)?;
        stage1.push((t, f1));
        if f1 > best_d.1 {
            best_d = (t, f1);
        }
    }
    let mut stage2 = Vec::with_capacity(grid.len());
    let mut best_c = (grid[0], f64::INFINITY);
    for &t in &grid {
        let e = ratio_error(rois, &Thresholds { t_d: best_d.0, t_c: t, alpha })?;
        stage2.push((t, e));
        if e < best_c.1 {
            best_c = (t, e);
        }
    }
    Ok(TuneResult {
        thresholds: Thresholds { t_d: best_d.0, t_c: best_c.0, alpha },
        detection_f1: best_d.1,
        tcr_error: best_c.1,
        stage1,
        stage2,
    })
}

/// Diagnostic joint search minimizing the ratio error over all grid pairs.
pub fn tune_joint(rois: &[EvalRoi], step: f64, alpha: f64) -> Result<(Thresholds, f64), EvalError> {
    if rois.is_empty() {
        return Err(EvalError::Empty);
    }
    let grid = threshold_grid(step)?;
    let mut best = (Thresholds { t_d: grid[0], t_c: grid[0], alpha }, f64::INFINITY);
    for &t_d in &grid {
        for &t_c in &grid {
            let th = Thresholds { t_d, t_c, alpha };
            let e = ratio_error(rois, &th)?;
            if e < best.1 {
                best = (th, e);
            }
        }
    }
    Ok(best)
}

/// Resize factors of the magnification sweep (1.0 is 40X).
pub const SWEEP_FACTORS: [f64; 8] = [1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.25, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Det,
    Cls,
    DetCls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub factor: f64,
    pub det: Option<f64>,
    pub cls: Option<f64>,
    pub det_cls: Option<f64>,
}

/// Writes `resize_factor,det_f1,cls_f1,detcls_f1`; skipped points are empty
/// fields.
pub fn write_sweep_csv<W: Write>(out: W, points: &[SweepPoint]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["resize_factor", "det_f1", "cls_f1", "detcls_f1"])?;
    let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for p in points {
        w.write_record([format!("{}", p.factor), f(p.det), f(p.cls), f(p.det_cls)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        let g = threshold_grid(0.05).unwrap();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[18], 0.95);
        assert_eq!(threshold_grid(0.5).unwrap(), vec![0.5]);
        assert!(threshold_grid(0.0).is_err());
    }

    #[test]
    fn sweep_csv_marks_skipped_points() {
        let mut buf = Vec::new();
        let pts = [SweepPoint { factor: 0.5, det: Some(0.9), cls: None, det_cls: Some(0.8) }];
        write_sweep_csv(&mut buf, &pts).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(1).unwrap(), "0.5,0.900000,,0.800000");
    }

    #[test]
    fn rejects_bad_mpp() {
        assert_eq!(greedy_match(&[], &[], 3.2, 0.0), Err(EvalError::Mpp(0.0)));
    }
}
