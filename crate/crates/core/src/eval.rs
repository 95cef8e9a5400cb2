//! Detection extraction and per-class average precision at fixed IOU
//! thresholds, with all-points precision-recall interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_box, iou, AnchorGrid, BBox, BoxParam};
use crate::model::HeadOutputs;

/// A decoded predicted box with its objectness confidence and class scores.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BBox,
    /// p(obj) from the two-way objectness softmax.
    pub confidence: f64,
    pub class_probs: Vec<f64>,
}

/// One candidate per grid cell per labeled frame, decoded against the cell's
/// anchor. Detections with confidence below `conf_floor` are discarded
/// (0 for evaluation, 0.8 for overlays).
pub fn extract_detections(
    heads: &HeadOutputs,
    grid: &AnchorGrid,
    conf_floor: f64,
    labeled_frames: &[usize],
) -> Result<Vec<Vec<Detection>>> {
    let shape = heads.obj_probs.shape().to_vec();
    if shape.len() != 4 || shape[0] != 2 {
        return Err(Error::invalid(format!("objectness head shape {shape:?}")));
    }
    let (t_lab, rows, cols) = (shape[1], shape[2], shape[3]);
    if t_lab != labeled_frames.len() || rows != grid.rows || cols != grid.cols {
        return Err(Error::invalid(format!(
            "head maps {t_lab}x{rows}x{cols} do not match {} labeled frames on a {}x{} grid",
            labeled_frames.len(),
            grid.rows,
            grid.cols
        )));
    }
    let num_classes = heads.class_probs.shape()[0];
    let cells = t_lab * rows * cols;
    let obj = heads.obj_probs.data();
    let cls = heads.class_probs.data();
    let boxes = heads.box_params.data();
    let mut per_frame = vec![Vec::new(); t_lab];
    for t in 0..t_lab {
        for row in 0..rows {
            for col in 0..cols {
                let j = (t * rows + row) * cols + col;
                let confidence = obj[cells + j];
                if confidence < conf_floor {
                    continue;
                }
                let class_probs: Vec<f64> = (0..num_classes).map(|k| cls[k * cells + j]).collect();
                let class_id = class_probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap();
                let param = BoxParam {
                    tx: boxes[j],
                    ty: boxes[cells + j],
                    tw: boxes[2 * cells + j],
                    th: boxes[3 * cells + j],
                };
                let mut bbox = decode_box(&param, &grid.anchor(row, col));
                bbox.class_id = class_id;
                bbox.frame = labeled_frames[t];
                per_frame[t].push(Detection { bbox, confidence, class_probs });
            }
        }
    }
    Ok(per_frame)
}

/// Confidence plus the TP/FP verdict for one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub confidence: f64,
    pub tp: bool,
}

/// Greedy matching in descending confidence over one frame's detections and
/// ground truths of one class: a detection is a true positive when its IOU
/// with some unmatched ground truth reaches the threshold (taking the
/// highest-IOU one); duplicates on a consumed ground truth are false
/// positives.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Vec<MatchRecord> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut records = Vec::with_capacity(dets.len());
    for &i in &order {
        let det = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&det.bbox, gt);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        let tp = if let Some((g, _)) = best {
            taken[g] = true;
            true
        } else {
            false
        };
        records.push(MatchRecord { confidence: det.confidence, tp });
    }
    records
}

/// Area under the precision-recall curve with all-points interpolation:
/// the sum over ranked detections of (recall step) x (max precision at that
/// recall or beyond). With no ground truth, an empty detection list scores 1
/// and any detection scores 0.
pub fn average_precision(records: &[MatchRecord], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if records.is_empty() { 1.0 } else { 0.0 };
    }
    let mut sorted: Vec<&MatchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut precisions = Vec::with_capacity(sorted.len());
    let mut recalls = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in &sorted {
        if r.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope from the right.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IouSection {
    pub per_class: BTreeMap<String, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gt: usize,
    pub detections: usize,
}

/// Per-class AP and mAP at each IOU threshold, plus input counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: BTreeMap<String, IouSection>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn map_at(&self, thresh: f64) -> Option<f64> {
        self.iou.get(&format_thresh(thresh)).map(|s| s.map)
    }
}

pub fn format_thresh(t: f64) -> String {
    format!("{t}")
}

/// Pools frames, computes per-class AP at each threshold over the classes
/// present in the ground truth, and averages them (unweighted) into mAP.
pub fn mean_average_precision(
    frames: &[(Vec<Detection>, Vec<BBox>)],
    class_names: &[String],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if class_names.is_empty() {
        return Err(Error::invalid("at least one class required"));
    }
    let n_dets: usize = frames.iter().map(|(d, _)| d.len()).sum();
    let n_gt: usize = frames.iter().map(|(_, g)| g.len()).sum();
    let mut report = EvalReport {
        iou: BTreeMap::new(),
        counts: EvalCounts { gt: n_gt, detections: n_dets },
    };
    let classes_present: Vec<usize> = (0..class_names.len())
        .filter(|&c| frames.iter().any(|(_, gts)| gts.iter().any(|g| g.class_id == c)))
        .collect();
    for &thresh in thresholds {
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        for &class in &classes_present {
            let mut records = Vec::new();
            let mut class_gt = 0usize;
            for (dets, gts) in frames {
                let class_dets: Vec<Detection> = dets
                    .iter()
                    .filter(|d| d.bbox.class_id == class)
                    .cloned()
                    .collect();
                let class_gts: Vec<BBox> =
                    gts.iter().filter(|g| g.class_id == class).copied().collect();
                class_gt += class_gts.len();
                records.extend(match_detections(&class_dets, &class_gts, thresh));
            }
            let ap = average_precision(&records, class_gt);
            sum += ap;
            per_class.insert(class_names[class].clone(), ap);
        }
        let map = if classes_present.is_empty() { 0.0 } else { sum / classes_present.len() as f64 };
        report.iou.insert(format_thresh(thresh), IouSection { per_class, map });
    }
    Ok(report)
}

/// Greedy same-class non-maximum suppression; off by default in evaluation
/// (duplicates are already penalized as false positives) but available for
/// experimentation.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let mut keep: Vec<Detection> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = keep.iter().any(|k| {
            k.bbox.class_id == candidate.bbox.class_id && iou(&k.bbox, &candidate.bbox) > iou_thresh
        });
        if !suppressed {
            keep.push(candidate.clone());
        }
    }
    keep
}
