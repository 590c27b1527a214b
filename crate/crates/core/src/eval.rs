//! Frame-level phase recognition metrics, strict and with transition
//! tolerance, plus causal per-video evaluation.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{PhaseClassifier, PhasePrediction};
use crate::tokenizer::{FrameSource, FrameVolume};

/// Seconds on either side of a ground-truth transition in which a
/// neighbouring-phase prediction still counts as correct.
pub const RELAXED_WINDOW_SECONDS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSequence {
    pub labels: Vec<usize>,
    pub fps: f64,
    pub num_phases: usize,
}

impl PhaseSequence {
    pub fn new(labels: Vec<usize>, fps: f64, num_phases: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("empty phase sequence".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Input(format!("fps must be positive, got {fps}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_phases) {
            return Err(Error::Input(format!("label {l} outside {num_phases} phases")));
        }
        Ok(PhaseSequence { labels, fps, num_phases })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PhaseCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Unrelaxed,
    Relaxed,
}

fn check_pair(gt: &PhaseSequence, pred: &PhaseSequence) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::Input(format!("{} ground-truth frames but {} predictions", gt.len(), pred.len())));
    }
    Ok(())
}

fn counts(gt: &[usize], pred: &[usize], num_phases: usize) -> Vec<PhaseCounts> {
    let mut out = vec![PhaseCounts::default(); num_phases];
    for (&g, &p) in gt.iter().zip(pred) {
        if g == p {
            out[g].tp += 1;
        } else {
            out[p].fp += 1;
            out[g].fn_ += 1;
        }
    }
    out
}

/// Per-phase frame counts.
pub fn confusion(gt: &PhaseSequence, pred: &PhaseSequence) -> Result<Vec<PhaseCounts>> {
    check_pair(gt, pred)?;
    Ok(counts(&gt.labels, &pred.labels, gt.num_phases.max(pred.num_phases)))
}

/// Predictions with tolerated transition errors replaced by the ground truth.
///
/// For a transition at frame `b` and window `w = round(10·fps)`, frames in
/// `[b-w, b)` predicted as `gt[b]` and frames in `[b, b+w)` predicted as
/// `gt[b-1]` are accepted.
pub fn relax_predictions(gt: &PhaseSequence, pred: &PhaseSequence) -> Result<Vec<usize>> {
    check_pair(gt, pred)?;
    let n = gt.len();
    let w = (RELAXED_WINDOW_SECONDS * gt.fps).round() as usize;
    let mut out = pred.labels.clone();
    for b in 1..n {
        let (before, after) = (gt.labels[b - 1], gt.labels[b]);
        if before == after {
            continue;
        }
        for f in b.saturating_sub(w)..b {
            if pred.labels[f] == after {
                out[f] = gt.labels[f];
            }
        }
        for f in b..(b + w).min(n) {
            if pred.labels[f] == before {
                out[f] = gt.labels[f];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseMetrics {
    pub phase: usize,
    /// Whether the phase occurs in the ground truth or the (scored) predictions.
    pub present: bool,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub f1: f64,
    pub counts: PhaseCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub f1: f64,
    pub per_phase: Vec<PhaseMetrics>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn report_from(gt: &[usize], scored: &[usize], num_phases: usize, mode: EvalMode) -> MetricReport {
    let c = counts(gt, scored, num_phases);
    let per_phase: Vec<PhaseMetrics> = c
        .iter()
        .enumerate()
        .map(|(phase, k)| {
            let precision = ratio(k.tp, k.tp + k.fp);
            let recall = ratio(k.tp, k.tp + k.fn_);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            PhaseMetrics {
                phase,
                present: k.tp + k.fp + k.fn_ > 0,
                precision,
                recall,
                jaccard: ratio(k.tp, k.tp + k.fp + k.fn_),
                f1,
                counts: *k,
            }
        })
        .collect();
    let present: Vec<&PhaseMetrics> = per_phase.iter().filter(|m| m.present).collect();
    let mean = |f: fn(&PhaseMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
    let hits = gt.iter().zip(scored).filter(|(a, b)| a == b).count();
    MetricReport {
        mode,
        accuracy: ratio(hits, gt.len()),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        jaccard: mean(|m| m.jaccard),
        f1: mean(|m| m.f1),
        per_phase,
    }
}

/// Accuracy and per-phase metrics; macro averages skip phases absent from both sequences.
pub fn metrics(gt: &PhaseSequence, pred: &PhaseSequence, mode: EvalMode) -> Result<MetricReport> {
    check_pair(gt, pred)?;
    let num_phases = gt.num_phases.max(pred.num_phases);
    let scored = match mode {
        EvalMode::Unrelaxed => pred.labels.clone(),
        EvalMode::Relaxed => relax_predictions(gt, pred)?,
    };
    Ok(report_from(&gt.labels, &scored, num_phases, mode))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(xs: &[f64]) -> MeanStd {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std =
            if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    /// Percent with one decimal, e.g. `93.4 ± 6.4`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mode: EvalMode,
    pub videos: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub jaccard: MeanStd,
    pub f1: MeanStd,
}

/// Across-video mean ± std of each headline metric.
pub fn summarize(reports: &[MetricReport]) -> Result<Summary> {
    let first = reports.first().ok_or_else(|| Error::Input("no reports to summarize".into()))?;
    if reports.iter().any(|r| r.mode != first.mode) {
        return Err(Error::Input("cannot mix relaxed and unrelaxed reports".into()));
    }
    let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(Summary {
        mode: first.mode,
        videos: reports.len(),
        accuracy: col(|r| r.accuracy),
        precision: col(|r| r.precision),
        recall: col(|r| r.recall),
        jaccard: col(|r| r.jaccard),
        f1: col(|r| r.f1),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEvaluation {
    pub predictions: Vec<PhasePrediction>,
    pub unrelaxed: MetricReport,
    pub relaxed: MetricReport,
}

/// Predicts every frame from the window ending at it, then scores both modes.
pub fn evaluate_video(
    classifier: &dyn PhaseClassifier,
    source: &dyn FrameSource,
    annotations: &PhaseSequence,
) -> Result<VideoEvaluation> {
    let n = source.num_frames();
    if annotations.len() != n {
        return Err(Error::Input(format!("{} annotations for a {n}-frame video", annotations.len())));
    }
    let cfg = classifier.patch_config();
    let mut predictions = Vec::with_capacity(n);
    for target in 0..n {
        let vol = FrameVolume::from_source(source, target, &cfg)?;
        predictions.push(classifier.predict(&vol)?);
    }
    score_predictions(&predictions, annotations)
}

/// Scores an existing prediction list against annotations.
pub fn score_predictions(predictions: &[PhasePrediction], annotations: &PhaseSequence) -> Result<VideoEvaluation> {
    if predictions.len() != annotations.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} annotated frames",
            predictions.len(),
            annotations.len()
        )));
    }
    for (i, p) in predictions.iter().enumerate() {
        if p.target_index != i as u64 {
            return Err(Error::Input(format!("prediction {i} targets frame {}", p.target_index)));
        }
    }
    let num_phases = predictions.iter().map(|p| p.phase + 1).max().unwrap_or(0).max(annotations.num_phases);
    let pred = PhaseSequence::new(predictions.iter().map(|p| p.phase).collect(), annotations.fps, num_phases)?;
    Ok(VideoEvaluation {
        predictions: predictions.to_vec(),
        unrelaxed: metrics(annotations, &pred, EvalMode::Unrelaxed)?,
        relaxed: metrics(annotations, &pred, EvalMode::Relaxed)?,
    })
}

pub fn write_predictions_csv(mut w: impl Write, predictions: &[PhasePrediction], num_phases: usize) -> Result<()> {
    writeln!(w, "{}", PhasePrediction::csv_header(num_phases))?;
    for p in predictions {
        if p.logits.len() != num_phases {
            return Err(Error::Input(format!("prediction has {} logits, expected {num_phases}", p.logits.len())));
        }
        writeln!(w, "{}", p.csv_row())?;
    }
    Ok(())
}

fn csv_reader(r: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn fmt_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{what}: {e}"))
}

pub fn read_predictions_csv(r: impl Read) -> Result<Vec<PhasePrediction>> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers().map_err(|e| fmt_err("prediction csv", e))?.clone();
    let num_phases = header.len().saturating_sub(2);
    if num_phases == 0 || &header[0] != "target_index" || &header[1] != "phase" {
        return Err(Error::Format("prediction csv header must be target_index,phase,logit_...".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fmt_err("prediction csv", e))?;
        let bad = |e: &dyn std::fmt::Display| fmt_err(&format!("prediction csv row {}", line + 1), e);
        let target_index: u64 = rec[0].parse().map_err(|e| bad(&e))?;
        let phase: usize = rec[1].parse().map_err(|e| bad(&e))?;
        let logits = (2..rec.len()).map(|i| rec[i].parse::<f64>().map_err(|e| bad(&e))).collect::<Result<Vec<_>>>()?;
        if phase >= num_phases {
            return Err(bad(&format!("phase {phase} outside {num_phases} logits")));
        }
        out.push(PhasePrediction { logits, phase, target_index });
    }
    Ok(out)
}

pub fn write_annotations_csv(mut w: impl Write, labels: &[usize]) -> Result<()> {
    writeln!(w, "frame_index,phase_id")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

/// Reads `frame_index,phase_id` rows; indices must run `0, 1, 2, ...`.
pub fn read_annotations_csv(r: impl Read) -> Result<Vec<usize>> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers().map_err(|e| fmt_err("annotation csv", e))?.clone();
    if header.len() != 2 || &header[0] != "frame_index" || &header[1] != "phase_id" {
        return Err(Error::Format("annotation csv header must be frame_index,phase_id".into()));
    }
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt_err("annotation csv", e))?;
        let row = labels.len();
        let bad = |e: &dyn std::fmt::Display| fmt_err(&format!("annotation csv row {}", row + 1), e);
        let idx: usize = rec[0].parse().map_err(|e| bad(&e))?;
        if idx != row {
            return Err(bad(&format!("frame_index {idx}, expected {row}")));
        }
        labels.push(rec[1].parse().map_err(|e| bad(&e))?);
    }
    if labels.is_empty() {
        return Err(Error::Format("annotation csv has no rows".into()));
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(labels: &[usize], fps: f64) -> PhaseSequence {
        PhaseSequence::new(labels.to_vec(), fps, 1 + labels.iter().max().unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = seq(&[0, 0, 1, 2, 2, 1], 1.0);
        assert!(confusion(&gt, &gt).unwrap().iter().all(|c| c.fp == 0 && c.fn_ == 0));
        for mode in [EvalMode::Unrelaxed, EvalMode::Relaxed] {
            let r = metrics(&gt, &gt, mode).unwrap();
            assert_eq!((r.accuracy, r.precision, r.recall, r.jaccard, r.f1), (1.0, 1.0, 1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn four_frame_case() {
        let gt = seq(&[0, 0, 1, 1], 1.0);
        let pred = seq(&[0, 1, 1, 1], 1.0);
        let c = confusion(&gt, &pred).unwrap();
        assert_eq!(c[0], PhaseCounts { tp: 1, fp: 0, fn_: 1 });
        assert_eq!(c[1], PhaseCounts { tp: 2, fp: 1, fn_: 0 });
        let r = metrics(&gt, &pred, EvalMode::Unrelaxed).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_phase[0].jaccard, 0.5);
        assert!((r.per_phase[1].jaccard - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        assert!((r.f1 - 0.733).abs() < 1e-3);
    }

    #[test]
    fn disjoint_labels_have_no_hits() {
        let gt = PhaseSequence::new(vec![0, 0, 1], 1.0, 4).unwrap();
        let pred = PhaseSequence::new(vec![2, 3, 3], 1.0, 4).unwrap();
        assert!(confusion(&gt, &pred).unwrap().iter().all(|c| c.tp == 0));
    }

    #[test]
    fn early_switch_is_forgiven_when_relaxed() {
        let gt: Vec<usize> = (0..40).map(|i| (i >= 20) as usize).collect();
        let pred: Vec<usize> = (0..40).map(|i| (i >= 15) as usize).collect();
        let (gt, pred) = (seq(&gt, 1.0), seq(&pred, 1.0));
        assert_eq!(metrics(&gt, &pred, EvalMode::Unrelaxed).unwrap().accuracy, 35.0 / 40.0);
        assert_eq!(metrics(&gt, &pred, EvalMode::Relaxed).unwrap().accuracy, 1.0);
        // 11 frames early falls outside the window
        let late: Vec<usize> = (0..40).map(|i| (i >= 9) as usize).collect();
        assert_eq!(metrics(&gt, &seq(&late, 1.0), EvalMode::Relaxed).unwrap().accuracy, 39.0 / 40.0);
    }

    #[test]
    fn non_neighbouring_phase_is_not_forgiven() {
        let gt = PhaseSequence::new(vec![0, 0, 1, 1], 1.0, 3).unwrap();
        let pred = PhaseSequence::new(vec![0, 2, 1, 1], 1.0, 3).unwrap();
        assert_eq!(metrics(&gt, &pred, EvalMode::Relaxed).unwrap().accuracy, 0.75);
    }

    #[test]
    fn absent_phases_are_excluded_from_macro() {
        let gt = PhaseSequence::new(vec![0, 0, 2, 2], 1.0, 5).unwrap();
        let r = metrics(&gt, &gt, EvalMode::Unrelaxed).unwrap();
        assert_eq!(r.f1, 1.0);
        assert!(!r.per_phase[1].present && r.per_phase[2].present);
    }

    #[test]
    fn length_mismatch_is_input_error() {
        assert!(matches!(confusion(&seq(&[0, 1], 1.0), &seq(&[0], 1.0)), Err(Error::Input(_))));
        assert!(PhaseSequence::new(vec![], 1.0, 2).is_err());
        assert!(PhaseSequence::new(vec![3], 1.0, 2).is_err());
        assert!(PhaseSequence::new(vec![0], 0.0, 2).is_err());
    }

    #[test]
    fn summary_uses_sample_std() {
        let gt = seq(&[0, 1], 1.0);
        let a = metrics(&gt, &seq(&[0, 1], 1.0), EvalMode::Unrelaxed).unwrap();
        let b = metrics(&gt, &seq(&[0, 0], 1.0), EvalMode::Unrelaxed).unwrap();
        let s = summarize(&[a, b]).unwrap();
        assert_eq!(s.accuracy.mean, 0.75);
        assert!((s.accuracy.std - (0.125f64).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd { mean: 0.934, std: 0.064 }.to_string(), "93.4 ± 6.4");
    }

    #[test]
    fn csv_round_trips() {
        let mut buf = Vec::new();
        write_annotations_csv(&mut buf, &[0, 0, 1, 2]).unwrap();
        assert_eq!(read_annotations_csv(buf.as_slice()).unwrap(), vec![0, 0, 1, 2]);
        assert!(read_annotations_csv("frame_index,phase_id\n1,0\n".as_bytes()).is_err());
        assert!(read_annotations_csv("frame,phase\n0,0\n".as_bytes()).is_err());

        let preds = vec![
            PhasePrediction::from_logits(vec![0.1, -2.5e-7, 3.0], 0),
            PhasePrediction::from_logits(vec![1.0 / 3.0, 0.0, -1.0], 1),
        ];
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &preds, 3).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("target_index,phase,logit_0,logit_1,logit_2\n"));
        assert_eq!(read_predictions_csv(buf.as_slice()).unwrap(), preds);
    }
}
