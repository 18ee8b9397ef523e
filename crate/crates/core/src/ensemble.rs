//! Voting fusion of detections from several models or TTA passes.
//!
//! Per class, detections are visited by descending score (ties: source tag,
//! then input index). Each joins the first existing cluster whose current
//! fused box overlaps it with IoU >= `iou_thresh`, or opens a new cluster.
//! A cluster's fused box is the weighted mean of its members' corners with
//! weight `score * source_weight`, clamped to the members' corner range. A
//! cluster survives only if its members come from at least `min_votes`
//! distinct sources.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{invert_tta, SceneDims, TtaTransform};
use crate::metrics::{iou, BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Plain mean of member scores.
    Mean,
    /// Highest member score.
    Max,
    /// Mean weighted by each member's source weight.
    WeightedMean,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mean" => Ok(ScoreMode::Mean),
            "max" => Ok(ScoreMode::Max),
            "weighted_mean" | "weighted" => Ok(ScoreMode::WeightedMean),
            other => Err(Error::param("score_mode", format!("unknown mode `{other}`"))),
        }
    }
}

fn default_iou() -> f64 {
    0.55
}

fn default_votes() -> usize {
    1
}

fn default_mode() -> ScoreMode {
    ScoreMode::Mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "default_iou")]
    pub iou_thresh: f64,
    #[serde(default = "default_votes")]
    pub min_votes: usize,
    #[serde(default = "default_mode")]
    pub score_mode: ScoreMode,
    /// Missing sources weigh 1.
    #[serde(default)]
    pub source_weights: BTreeMap<String, f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iou_thresh: default_iou(),
            min_votes: default_votes(),
            score_mode: default_mode(),
            source_weights: BTreeMap::new(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_thresh > 0.0 && self.iou_thresh < 1.0) {
            return Err(Error::param("iou_thresh", format!("{} outside (0, 1)", self.iou_thresh)));
        }
        if self.min_votes < 1 {
            return Err(Error::param("min_votes", "must be at least 1"));
        }
        for (src, &w) in &self.source_weights {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::param("source_weights", format!("`{src}` has weight {w}")));
            }
        }
        Ok(())
    }

    fn weight(&self, source: &str) -> f64 {
        self.source_weights.get(source).copied().unwrap_or(1.0)
    }
}

/// A surviving cluster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusedCluster {
    pub detection: Detection,
    /// Distinct source tags among the members.
    pub votes: usize,
    /// Input indices of the members, in visiting order.
    pub members: Vec<usize>,
}

struct Cluster {
    members: Vec<usize>,
    fused: BBox,
}

fn fused_box(dets: &[Detection], members: &[usize], cfg: &FusionConfig) -> BBox {
    let weights: Vec<f64> = members
        .iter()
        .map(|&i| dets[i].score * cfg.weight(&dets[i].source))
        .collect();
    let total: f64 = weights.iter().sum();
    let corner = |get: fn(&BBox) -> f64| -> f64 {
        let lo = members.iter().map(|&i| get(&dets[i].bbox)).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|&i| get(&dets[i].bbox)).fold(f64::NEG_INFINITY, f64::max);
        let v = if total > 0.0 {
            members
                .iter()
                .zip(&weights)
                .map(|(&i, w)| (w / total) * get(&dets[i].bbox))
                .sum::<f64>()
        } else {
            members.iter().map(|&i| get(&dets[i].bbox)).sum::<f64>() / members.len() as f64
        };
        v.clamp(lo, hi)
    };
    BBox {
        x1: corner(|b| b.x1),
        y1: corner(|b| b.y1),
        x2: corner(|b| b.x2),
        y2: corner(|b| b.y2),
    }
}

fn overlapping_pair(clusters: &[Cluster], thresh: f64) -> Option<(usize, usize)> {
    for a in 0..clusters.len() {
        for b in a + 1..clusters.len() {
            if iou(&clusters[a].fused, &clusters[b].fused) >= thresh {
                return Some((a, b));
            }
        }
    }
    None
}

fn fused_score(dets: &[Detection], members: &[usize], cfg: &FusionConfig) -> f64 {
    if let [only] = members {
        return dets[*only].score;
    }
    let scores = members.iter().map(|&i| dets[i].score);
    let s = match cfg.score_mode {
        ScoreMode::Mean => scores.sum::<f64>() / members.len() as f64,
        ScoreMode::Max => scores.fold(f64::NEG_INFINITY, f64::max),
        ScoreMode::WeightedMean => {
            let (num, den) = members.iter().fold((0.0, 0.0), |(n, d), &i| {
                let w = cfg.weight(&dets[i].source);
                (n + w * dets[i].score, d + w)
            });
            num / den
        }
    };
    s.clamp(0.0, 1.0)
}

/// Fuses detections and reports every surviving cluster with its votes.
/// Detections from different images never share a cluster. Output is
/// ordered by class id, image id, fused score (descending), then source.
pub fn fuse_clusters(dets: &[Detection], cfg: &FusionConfig) -> Result<Vec<FusedCluster>> {
    cfg.validate()?;
    let mut by_class: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_class.entry((d.class_id, d.image_id.as_str())).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut idx) in by_class {
        idx.sort_by(|&a, &b| {
            dets[b]
                .score
                .total_cmp(&dets[a].score)
                .then_with(|| dets[a].source.cmp(&dets[b].source))
                .then(a.cmp(&b))
        });
        let mut clusters: Vec<Cluster> = Vec::new();
        for i in idx {
            let found = clusters
                .iter_mut()
                .find(|c| iou(&c.fused, &dets[i].bbox) >= cfg.iou_thresh);
            match found {
                Some(c) => {
                    c.members.push(i);
                    c.fused = fused_box(dets, &c.members, cfg);
                }
                None => clusters.push(Cluster {
                    members: vec![i],
                    fused: dets[i].bbox,
                }),
            }
        }
        // fused boxes drift as members join, so merge until clusters are
        // mutually below the threshold
        while let Some((a, b)) = overlapping_pair(&clusters, cfg.iou_thresh) {
            let absorbed = clusters.remove(b);
            let c = &mut clusters[a];
            c.members.extend(absorbed.members);
            c.fused = fused_box(dets, &c.members, cfg);
        }
        let start = out.len();
        for c in clusters {
            let sources: BTreeSet<&str> = c.members.iter().map(|&i| dets[i].source.as_str()).collect();
            if sources.len() < cfg.min_votes {
                continue;
            }
            let lead = &dets[c.members[0]];
            let detection = Detection {
                bbox: c.fused,
                class_id: lead.class_id,
                score: fused_score(dets, &c.members, cfg),
                image_id: lead.image_id.clone(),
                source: lead.source.clone(),
            };
            out.push(FusedCluster {
                detection,
                votes: sources.len(),
                members: c.members,
            });
        }
        // canonical order makes fusing the output a fixpoint
        out[start..].sort_by(|a, b| {
            b.detection
                .score
                .total_cmp(&a.detection.score)
                .then_with(|| a.detection.source.cmp(&b.detection.source))
        });
    }
    Ok(out)
}

pub fn fuse(dets: &[Detection], cfg: &FusionConfig) -> Result<Vec<Detection>> {
    Ok(fuse_clusters(dets, cfg)?
        .into_iter()
        .map(|c| c.detection)
        .collect())
}

/// Detections of one inference pass, expressed in that pass's transformed
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TtaPass {
    pub source: String,
    pub transform: TtaTransform,
    pub detections: Vec<Detection>,
}

/// Maps every pass back into the scene frame, tags its detections with the
/// pass source and fuses the pool.
pub fn ensemble_pipeline(
    passes: &[TtaPass],
    scene: SceneDims,
    cfg: &FusionConfig,
) -> Result<Vec<FusedCluster>> {
    let mut pooled = Vec::new();
    for pass in passes {
        pass.transform.validate()?;
        let frame = pass.transform.output_dims(scene);
        let tol = 1e-9 * frame.width.max(frame.height);
        if let Some(bad) = pass.detections.iter().find(|d| !frame.contains(&d.bbox, tol)) {
            return Err(Error::param(
                "transform",
                format!(
                    "pass `{}`: box {:?} lies outside its {}x{} frame",
                    pass.source,
                    <[f64; 4]>::from(bad.bbox),
                    frame.width,
                    frame.height
                ),
            ));
        }
        let tagged: Vec<Detection> = pass
            .detections
            .iter()
            .map(|d| d.clone().with_source(pass.source.clone()))
            .collect();
        pooled.extend(invert_tta(&tagged, scene, &pass.transform));
    }
    fuse_clusters(&pooled, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_tta, TtaStep};

    fn d(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, source: &str) -> Detection {
        Detection::new(BBox::new(x1, y1, x2, y2).unwrap(), 0, score)
            .unwrap()
            .with_source(source)
    }

    fn cfg(iou_thresh: f64, min_votes: usize) -> FusionConfig {
        FusionConfig {
            iou_thresh,
            min_votes,
            ..FusionConfig::default()
        }
    }

    #[test]
    fn disjoint_single_source_is_fixpoint() {
        let dets = vec![
            d(0.0, 0.0, 10.0, 10.0, 0.9, "a"),
            d(20.0, 0.0, 30.0, 10.0, 0.5, "a"),
            d(0.0, 40.0, 5.0, 45.0, 0.7, "a"),
        ];
        let out = fuse(&dets, &cfg(0.5, 1)).unwrap();
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        assert_eq!(out, sorted);
    }

    #[test]
    fn identical_boxes_average_scores() {
        let dets = vec![d(0.0, 0.0, 10.0, 10.0, 0.6, "a"), d(0.0, 0.0, 10.0, 10.0, 0.8, "b")];
        let out = fuse_clusters(&dets, &cfg(0.5, 1)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].detection.bbox, dets[0].bbox);
        assert!((out[0].detection.score - 0.7).abs() < 1e-15);
        assert_eq!(out[0].votes, 2);
    }

    #[test]
    fn weighted_corner_fixture() {
        let dets = vec![d(0.0, 0.0, 10.0, 10.0, 0.6, "a"), d(1.0, 1.0, 11.0, 11.0, 0.2, "a")];
        let out = fuse(&dets, &cfg(0.5, 1)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, BBox::new(0.25, 0.25, 10.25, 10.25).unwrap());
        assert_eq!(out[0].score, 0.4);
    }

    #[test]
    fn score_modes() {
        let dets = vec![d(0.0, 0.0, 10.0, 10.0, 0.6, "a"), d(0.0, 0.0, 10.0, 10.0, 0.2, "b")];
        let mut c = cfg(0.5, 1);
        c.score_mode = ScoreMode::Max;
        assert_eq!(fuse(&dets, &c).unwrap()[0].score, 0.6);
        c.score_mode = ScoreMode::WeightedMean;
        c.source_weights.insert("b".into(), 3.0);
        let s = fuse(&dets, &c).unwrap()[0].score;
        assert!((s - (0.6 + 3.0 * 0.2) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn votes_threshold_and_classes() {
        let mut dets = vec![d(0.0, 0.0, 10.0, 10.0, 0.6, "a"), d(0.0, 0.0, 10.0, 10.0, 0.5, "a")];
        assert!(fuse(&dets, &cfg(0.5, 2)).unwrap().is_empty());
        dets[1].class_id = 1;
        let out = fuse_clusters(&dets, &cfg(0.5, 1)).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn config_validation() {
        assert!(fuse(&[], &cfg(0.0, 1)).is_err());
        assert!(fuse(&[], &cfg(0.5, 0)).is_err());
        let mut c = cfg(0.5, 1);
        c.source_weights.insert("x".into(), -1.0);
        assert!(fuse(&[], &c).is_err());
        assert_eq!("weighted-mean".parse::<ScoreMode>().unwrap(), ScoreMode::WeightedMean);
    }

    #[test]
    fn pipeline_identity_equals_fuse() {
        let dets = vec![d(0.0, 0.0, 10.0, 10.0, 0.9, "m"), d(1.0, 0.0, 11.0, 10.0, 0.4, "m")];
        let scene = SceneDims::new(100.0, 100.0).unwrap();
        let pass = TtaPass {
            source: "m".into(),
            transform: TtaTransform::identity(),
            detections: dets.clone(),
        };
        assert_eq!(
            ensemble_pipeline(&[pass], scene, &cfg(0.5, 1)).unwrap(),
            fuse_clusters(&dets, &cfg(0.5, 1)).unwrap()
        );
    }

    #[test]
    fn pipeline_rot90_pass_votes_twice() {
        let scene = SceneDims::new(200.0, 120.0).unwrap();
        let base = vec![d(10.0, 20.0, 30.0, 45.0, 0.9, ""), d(100.0, 60.0, 150.0, 100.0, 0.6, "")];
        let rot = TtaTransform::single(TtaStep::Rot90);
        let passes = [
            TtaPass {
                source: "p1".into(),
                transform: TtaTransform::identity(),
                detections: base.clone(),
            },
            TtaPass {
                source: "p2".into(),
                transform: rot.clone(),
                detections: apply_tta(&base, scene, &rot),
            },
        ];
        let out = ensemble_pipeline(&passes, scene, &cfg(0.5, 2)).unwrap();
        assert_eq!(out.len(), 2);
        for (c, b) in out.iter().zip(&base) {
            assert_eq!(c.votes, 2);
            assert_eq!(c.detection.bbox, b.bbox);
        }
        assert!(ensemble_pipeline(&passes, scene, &cfg(0.5, 3)).unwrap().is_empty());
    }

    #[test]
    fn pipeline_rejects_frame_mismatch() {
        let scene = SceneDims::new(200.0, 100.0).unwrap();
        let pass = TtaPass {
            source: "p".into(),
            transform: TtaTransform::single(TtaStep::Rot90),
            detections: vec![d(150.0, 0.0, 180.0, 10.0, 0.5, "")],
        };
        assert!(ensemble_pipeline(&[pass], scene, &cfg(0.5, 1)).is_err());
    }
}
