//! Frame accuracy, edit score and segmental F1 for multi-label sequences.
//!
//! The unit everywhere is a frame's full labelset: ACC counts exact-set
//! matches, EDIT compares sequences of segment labelsets (the empty set is
//! a token like any other), and F1 matches segments with equal non-empty
//! labelsets. All scores are percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::LabelSequence;

/// Overlap thresholds of the headline F1 scores.
pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Maximal run `[start, end)` of one labelset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Sorted active class ids; empty for background.
    pub labels: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn is_background(&self) -> bool {
        self.labels.is_empty()
    }

    /// Temporal intersection over union.
    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Maximal-run decomposition; tiles `[0, L)`.
pub fn to_segments(y: &LabelSequence) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for t in 0..y.len() {
        let labels = y.labelset(t);
        match out.last_mut() {
            Some(last) if last.labels == labels => last.end = t + 1,
            _ => out.push(Segment {
                start: t,
                end: t + 1,
                labels,
            }),
        }
    }
    out
}

/// Inverse of [`to_segments`].
pub fn rasterize(segments: &[Segment], classes: usize) -> Result<LabelSequence> {
    let len = segments.last().map_or(0, |s| s.end);
    let mut sets = Vec::with_capacity(len);
    let mut cursor = 0;
    for s in segments {
        if s.start != cursor || s.end < s.start {
            return Err(Error::Contract(format!("segments do not tile at frame {cursor}")));
        }
        sets.extend(std::iter::repeat_n(s.labels.clone(), s.len()));
        cursor = s.end;
    }
    LabelSequence::from_labelsets(&sets, classes)
}

fn check_pair(pred: &LabelSequence, gt: &LabelSequence) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Contract(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    Ok(())
}

fn matching_frames(pred: &LabelSequence, gt: &LabelSequence) -> usize {
    (0..gt.len()).filter(|&t| pred.frame(t) == gt.frame(t)).count()
}

/// Percentage of frames whose predicted labelset equals the ground truth's.
pub fn frame_accuracy(pred: &LabelSequence, gt: &LabelSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    if gt.is_empty() {
        return Err(Error::Contract("frame accuracy of an empty sequence".into()));
    }
    Ok(100.0 * matching_frames(pred, gt) as f64 / gt.len() as f64)
}

fn levenshtein(a: &[Segment], b: &[Segment]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, sa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(sa.labels != sb.labels);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(1 − lev / max(|pred|, |gt|)) × 100` over segment labelsets, clamped at 0.
pub fn edit_score(pred: &[Segment], gt: &[Segment]) -> f64 {
    let m = pred.len().max(gt.len());
    if m == 0 {
        return 100.0;
    }
    ((1.0 - levenshtein(pred, gt) as f64 / m as f64) * 100.0).max(0.0)
}

/// True positives, false positives and false negatives of the greedy matcher.
pub fn f1_counts(pred: &[Segment], gt: &[Segment], tau: f64) -> (usize, usize, usize) {
    let mut used = vec![false; gt.len()];
    let (mut tp, mut fp) = (0, 0);
    for p in pred.iter().filter(|s| !s.is_background()) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.labels != p.labels {
                continue;
            }
            let iou = p.iou(g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= tau => {
                used[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_ = gt
        .iter()
        .zip(&used)
        .filter(|(g, &u)| !u && !g.is_background())
        .count();
    (tp, fp, fn_)
}

/// Segmental F1 at overlap `tau`. Background segments take no part; when
/// neither side has a foreground segment the score is 100.
pub fn f1_at(pred: &[Segment], gt: &[Segment], tau: f64) -> f64 {
    let (tp, fp, fn_) = f1_counts(pred, gt, tau);
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * (2 * tp) as f64 / denom as f64
    }
}

/// Scores of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "EDIT")]
    pub edit: f64,
    #[serde(rename = "F1@10")]
    pub f1_10: f64,
    #[serde(rename = "F1@25")]
    pub f1_25: f64,
    #[serde(rename = "F1@50")]
    pub f1_50: f64,
}

/// Headline scores: ACC pooled over all frames, EDIT and F1 averaged over
/// samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "EDIT")]
    pub edit: f64,
    #[serde(rename = "F1@10")]
    pub f1_10: f64,
    #[serde(rename = "F1@25")]
    pub f1_25: f64,
    #[serde(rename = "F1@50")]
    pub f1_50: f64,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn score_sample(pred: &LabelSequence, gt: &LabelSequence) -> Result<SampleMetrics> {
    let acc = frame_accuracy(pred, gt)?;
    let (ps, gs) = (to_segments(pred), to_segments(gt));
    Ok(SampleMetrics {
        id: None,
        acc,
        edit: edit_score(&ps, &gs),
        f1_10: f1_at(&ps, &gs, F1_THRESHOLDS[0]),
        f1_25: f1_at(&ps, &gs, F1_THRESHOLDS[1]),
        f1_50: f1_at(&ps, &gs, F1_THRESHOLDS[2]),
    })
}

pub fn evaluate(preds: &[LabelSequence], gts: &[LabelSequence]) -> Result<MetricReport> {
    if gts.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!("{} predictions for {} references", preds.len(), gts.len())));
    }
    let per_sample = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| score_sample(p, g))
        .collect::<Result<Vec<_>>>()?;
    let frames: usize = gts.iter().map(LabelSequence::len).sum();
    let hits: usize = preds.iter().zip(gts).map(|(p, g)| matching_frames(p, g)).sum();
    let n = per_sample.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        acc: 100.0 * hits as f64 / frames as f64,
        edit: mean(|s| s.edit),
        f1_10: mean(|s| s.f1_10),
        f1_25: mean(|s| s.f1_25),
        f1_50: mean(|s| s.f1_50),
        per_sample,
    })
}
