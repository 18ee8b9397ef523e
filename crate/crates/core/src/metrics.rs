//! Detection evaluation: IoU, per-class average precision, mAP, recall and
//! mRecall (the unweighted mean of per-class recalls).
//!
//! Matching is greedy per class and per image. Detections are visited in
//! descending score order; among equal scores the one with the higher IoU
//! against its best still-unmatched ground truth goes first, then the one
//! earlier in the input. A detection claims the unmatched ground truth of the
//! same image with the highest IoU (lowest index on ties) if that IoU reaches
//! the threshold, otherwise it is a false positive.
//!
//! AP is the all-points area under the precision/recall curve after taking
//! the monotone precision envelope. Recall only increases at true positives,
//! each by `1 / n_gt`, so the area is the sum of the enveloped precision at
//! every true positive divided by `n_gt`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous scene coordinates. Serialised as
/// `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::try_from([x1, y1, x2, y2])
    }

    /// Box spanning two arbitrary corners.
    pub fn from_corners(a: (f64, f64), b: (f64, f64)) -> Self {
        BBox {
            x1: a.0.min(b.0),
            y1: a.1.min(b.1),
            x2: a.0.max(b.0),
            y2: a.1.max(b.1),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.area() > 0.0)
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(BBox { x1, y1, x2, y2 })
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("box", format!("non-finite coordinate in {c:?}")));
        }
        if c[0] > c[2] || c[1] > c[3] {
            return Err(Error::param("box", format!("corners out of order in {c:?}")));
        }
        Ok(BBox {
            x1: c[0],
            y1: c[1],
            x2: c[2],
            y2: c[3],
        })
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

fn id_as_string<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Text(String),
        Int(i64),
    }
    Ok(match Id::deserialize(d)? {
        Id::Text(s) => s,
        Id::Int(i) => i.to_string(),
    })
}

fn is_empty(s: &str) -> bool {
    s.is_empty()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    #[serde(default, deserialize_with = "id_as_string")]
    pub image_id: String,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub source: String,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Result<Self> {
        let d = Detection {
            bbox,
            class_id,
            score,
            image_id: String::new(),
            source: String::new(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::param("score", format!("{} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn with_image(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    #[serde(default, deserialize_with = "id_as_string")]
    pub image_id: String,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        GroundTruth {
            bbox,
            class_id,
            image_id: String::new(),
        }
    }

    pub fn with_image(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

/// Anything carrying a box that geometry and fusion can move around.
pub trait HasBox: Clone {
    fn bbox(&self) -> BBox;
    fn with_bbox(&self, bbox: BBox) -> Self;
}

impl HasBox for BBox {
    fn bbox(&self) -> BBox {
        *self
    }
    fn with_bbox(&self, bbox: BBox) -> Self {
        bbox
    }
}

impl HasBox for Detection {
    fn bbox(&self) -> BBox {
        self.bbox
    }
    fn with_bbox(&self, bbox: BBox) -> Self {
        Detection {
            bbox,
            ..self.clone()
        }
    }
}

impl HasBox for GroundTruth {
    fn bbox(&self) -> BBox {
        self.bbox
    }
    fn with_bbox(&self, bbox: BBox) -> Self {
        GroundTruth {
            bbox,
            ..self.clone()
        }
    }
}

/// Intersection over union. Zero-area boxes always give 0, even against
/// themselves.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = match a.intersection(b) {
        Some(i) => i.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Outcome of greedy matching for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatch {
    /// Input indices of the detections in the order they were visited.
    pub order: Vec<usize>,
    /// True-positive flag per visited detection, aligned with `order`.
    pub tp: Vec<bool>,
    /// Ground truth index claimed by each detection, if any.
    pub matched_gt: Vec<Option<usize>>,
    pub n_gt: usize,
}

impl ClassMatch {
    pub fn matched(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    /// All-points interpolated AP; `None` when there are neither ground
    /// truths nor detections.
    pub fn average_precision(&self) -> Option<f64> {
        if self.n_gt == 0 {
            return if self.tp.is_empty() { None } else { Some(0.0) };
        }
        let mut precision = Vec::with_capacity(self.tp.len());
        let mut hits = 0usize;
        for (rank, &t) in self.tp.iter().enumerate() {
            if t {
                hits += 1;
            }
            precision.push(hits as f64 / (rank + 1) as f64);
        }
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let sum: f64 = self
            .tp
            .iter()
            .zip(&precision)
            .filter(|(t, _)| **t)
            .map(|(_, p)| *p)
            .sum();
        Some(sum / self.n_gt as f64)
    }
}

fn best_unmatched(det: &Detection, gts: &[GroundTruth], taken: &[bool]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if taken[g] || gt.image_id != det.image_id {
            continue;
        }
        let v = iou(&det.bbox, &gt.bbox);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best
}

/// Greedy matching of one class's detections against its ground truths.
/// Callers are expected to pass a single class; `class_id` is not checked.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> ClassMatch {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    remaining.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut result = ClassMatch {
        order: Vec::with_capacity(dets.len()),
        tp: Vec::with_capacity(dets.len()),
        matched_gt: Vec::with_capacity(dets.len()),
        n_gt: gts.len(),
    };
    let mut start = 0;
    while start < remaining.len() {
        let score = dets[remaining[start]].score;
        let mut end = start;
        while end < remaining.len() && dets[remaining[end]].score == score {
            end += 1;
        }
        // resolve the tie group one detection at a time
        while start < end {
            let mut pick = start;
            let mut pick_iou = f64::NEG_INFINITY;
            for k in start..end {
                let v = best_unmatched(&dets[remaining[k]], gts, &taken).map_or(-1.0, |(_, v)| v);
                if v > pick_iou {
                    pick = k;
                    pick_iou = v;
                }
            }
            // keep input order among the rest of the group
            let det_idx = remaining.remove(pick);
            remaining.insert(start, det_idx);
            let hit = best_unmatched(&dets[det_idx], gts, &taken)
                .filter(|&(_, v)| v >= iou_thresh && v > 0.0)
                .map(|(g, _)| g);
            if let Some(g) = hit {
                taken[g] = true;
            }
            result.order.push(det_idx);
            result.tp.push(hit.is_some());
            result.matched_gt.push(hit);
            start += 1;
        }
    }
    result
}

/// AP for one class. `None` means the class has no ground truths and no
/// detections and should be left out of any mean.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    match_detections(dets, gts, iou_thresh).average_precision()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub n_gt: usize,
    pub n_det: usize,
    pub matched: usize,
    pub ap: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub map: f64,
    pub recall: f64,
    pub mrecall: f64,
    pub iou_thresh: f64,
    pub per_class: Vec<ClassEval>,
}

pub fn map_and_mrecall(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Result<EvalSummary> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::param("iou_thresh", format!("{iou_thresh} outside (0, 1)")));
    }
    if gts.is_empty() {
        return Err(Error::EmptyInput("ground truth"));
    }
    let mut det_by_class: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        det_by_class.entry(d.class_id).or_default().push(d.clone());
    }
    let mut gt_by_class: BTreeMap<usize, Vec<GroundTruth>> = BTreeMap::new();
    for g in gts {
        gt_by_class.entry(g.class_id).or_default().push(g.clone());
    }
    let classes: BTreeSet<usize> = det_by_class.keys().chain(gt_by_class.keys()).copied().collect();

    let mut per_class = Vec::with_capacity(classes.len());
    for class_id in classes {
        let d = det_by_class.get(&class_id).map_or(&[][..], |v| &v[..]);
        let g = gt_by_class.get(&class_id).map_or(&[][..], |v| &v[..]);
        let m = match_detections(d, g, iou_thresh);
        per_class.push(ClassEval {
            class_id,
            n_gt: g.len(),
            n_det: d.len(),
            matched: m.matched(),
            ap: m.average_precision(),
            recall: (!g.is_empty()).then(|| m.matched() as f64 / g.len() as f64),
        });
    }
    let with_gt: Vec<&ClassEval> = per_class.iter().filter(|c| c.n_gt > 0).collect();
    let n = with_gt.len() as f64;
    let map = with_gt.iter().map(|c| c.ap.unwrap_or(0.0)).sum::<f64>() / n;
    let mrecall = with_gt.iter().map(|c| c.recall.unwrap_or(0.0)).sum::<f64>() / n;
    let matched: usize = with_gt.iter().map(|c| c.matched).sum();
    Ok(EvalSummary {
        map,
        recall: matched as f64 / gts.len() as f64,
        mrecall,
        iou_thresh,
        per_class,
    })
}

/// One JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = read_jsonl(r)?;
    for (i, d) in dets.iter().enumerate() {
        d.validate()
            .map_err(|e| Error::Parse(format!("detection {}: {e}", i + 1)))?;
    }
    Ok(dets)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
