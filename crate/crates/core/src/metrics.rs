//! Keypoint evaluation metrics.
//!
//! Three layers: a per-instance similarity (`oks`), a pre-paired per-joint
//! rate (`pckh`), and detection-style aggregation (`match_and_ap`) that
//! greedily matches scored predictions to ground truth per image and
//! reports interpolated average precision and recall over a sweep of
//! similarity thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::PoseAnnotation;
use crate::error::{Error, Result};

/// Per-joint falloff constants for the 17-keypoint COCO skeleton (nose,
/// eyes, ears, shoulders, elbows, wrists, hips, knees, ankles). Torso
/// joints tolerate larger errors than facial ones.
pub const COCO_FALLOFF: [f64; 17] = [
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214,
    0.174, 0.174, 0.178, 0.178,
];

/// Similarity-evaluation settings: per-joint falloff constants, the
/// threshold sweep, and the instance-area intervals for the size
/// breakdowns. Intervals are half-open `(lo, hi]`, with `None` meaning
/// unbounded above, so medium and large never overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OksConfig {
    pub k_i: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub medium_range: (f64, Option<f64>),
    pub large_range: (f64, Option<f64>),
}

impl Default for OksConfig {
    fn default() -> Self {
        Self::for_falloff(COCO_FALLOFF.to_vec())
    }
}

impl OksConfig {
    /// Default sweep and area splits around the given falloff constants.
    pub fn for_falloff(k_i: Vec<f64>) -> Self {
        Self {
            k_i,
            thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            medium_range: (32.0 * 32.0, Some(96.0 * 96.0)),
            large_range: (96.0 * 96.0, None),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.k_i.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_i.is_empty() {
            return Err(Error::Config("falloff constants must be non-empty".into()));
        }
        if let Some(bad) = self.k_i.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(Error::Config(format!("falloff constants must be positive, got {bad}")));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("threshold sweep must be non-empty".into()));
        }
        for pair in self.thresholds.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config("thresholds must be strictly increasing".into()));
            }
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("thresholds must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn in_range(area: f64, range: (f64, Option<f64>)) -> bool {
    area > range.0 && range.1.map_or(true, |hi| area <= hi)
}

/// Object keypoint similarity between one prediction and one ground-truth
/// instance: mean over the gt-labeled joints of
/// `exp(-d_j^2 / (2 * area * k_j^2))`, where `d_j` is the Euclidean
/// distance and `area` the gt's squared scale. Errors when the gt has no
/// labeled joints, since the mean is then undefined and the caller must
/// skip the instance instead of treating it as zero.
pub fn oks(pred: &PoseAnnotation, gt: &PoseAnnotation, cfg: &OksConfig) -> Result<f64> {
    cfg.validate()?;
    let k = cfg.num_joints();
    if pred.num_joints() != k || gt.num_joints() != k {
        return Err(Error::Data(format!(
            "expected {k} joints, got {} predicted and {} ground truth",
            pred.num_joints(),
            gt.num_joints()
        )));
    }
    if !(gt.area.is_finite() && gt.area > 0.0) {
        return Err(Error::Data(format!("annotation {} has non-positive area {}", gt.id, gt.area)));
    }
    let mut sum = 0.0;
    let mut labeled = 0usize;
    for j in 0..k {
        let g = &gt.keypoints[j];
        if !g.labeled() {
            continue;
        }
        labeled += 1;
        let p = &pred.keypoints[j];
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        sum += (-d2 / (2.0 * gt.area * cfg.k_i[j] * cfg.k_i[j])).exp();
    }
    if labeled == 0 {
        return Err(Error::Data(format!(
            "annotation {} has no labeled keypoints; similarity is undefined",
            gt.id
        )));
    }
    Ok(sum / labeled as f64)
}

/// Per-joint correctness rates for pre-paired instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckhReport {
    pub alpha: f64,
    /// Rate per joint index; None when no instance labels that joint.
    pub per_joint: Vec<Option<f64>>,
    pub labeled_per_joint: Vec<u64>,
    pub correct_per_joint: Vec<u64>,
    /// Overall rate: total correct over total labeled joints.
    pub mean: f64,
}

impl PckhReport {
    /// Aligned text table, one row per joint plus the overall rate.
    /// `joint_names` supplies row labels when it matches the joint count.
    pub fn table(&self, joint_names: Option<&[String]>) -> String {
        let mut out = String::new();
        let name = |j: usize| match joint_names {
            Some(names) if names.len() == self.per_joint.len() => names[j].clone(),
            _ => format!("joint{j}"),
        };
        out.push_str(&format!("{:<16} {:>9} {:>9} {:>9}\n", "joint", "correct", "labeled", "rate"));
        for j in 0..self.per_joint.len() {
            let rate = match self.per_joint[j] {
                Some(r) => format!("{:.2}%", 100.0 * r),
                None => "n/a".to_string(),
            };
            out.push_str(&format!(
                "{:<16} {:>9} {:>9} {:>9}\n",
                name(j),
                self.correct_per_joint[j],
                self.labeled_per_joint[j],
                rate
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>9} {:>9} {:>8.2}%\n",
            "mean",
            self.correct_per_joint.iter().sum::<u64>(),
            self.labeled_per_joint.iter().sum::<u64>(),
            100.0 * self.mean
        ));
        out
    }
}

/// Fraction of joints within `alpha * head_size` of the ground truth,
/// inclusive at the boundary. Instances are paired by (image_id, id);
/// labeled gt joints without a paired prediction count as incorrect.
/// Every ground-truth instance must carry a head size.
pub fn pckh(preds: &[PoseAnnotation], gts: &[PoseAnnotation], alpha: f64) -> Result<PckhReport> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let k = match gts.first() {
        Some(g) => g.num_joints(),
        None => return Err(Error::Data("no ground-truth instances to evaluate".into())),
    };
    let mut by_key: BTreeMap<(i64, i64), &PoseAnnotation> = BTreeMap::new();
    for p in preds {
        if p.num_joints() != k {
            return Err(Error::Data(format!(
                "prediction {} has {} joints, expected {k}",
                p.id,
                p.num_joints()
            )));
        }
        if by_key.insert((p.image_id, p.id), p).is_some() {
            return Err(Error::Data(format!(
                "duplicate prediction for image {} instance {}",
                p.image_id, p.id
            )));
        }
    }
    let mut labeled = vec![0u64; k];
    let mut correct = vec![0u64; k];
    for (i, gt) in gts.iter().enumerate() {
        if gt.num_joints() != k {
            return Err(Error::Data(format!(
                "annotation {} has {} joints, expected {k}",
                gt.id,
                gt.num_joints()
            )));
        }
        let head = gt.head_size.ok_or_else(|| Error::Schema {
            path: format!("annotations[{i}].head_size"),
            message: format!("annotation {} lacks the head_size this metric needs", gt.id),
        })?;
        if !(head.is_finite() && head > 0.0) {
            return Err(Error::Data(format!("annotation {} has head_size {head}", gt.id)));
        }
        let paired = by_key.get(&(gt.image_id, gt.id));
        for j in 0..k {
            let g = &gt.keypoints[j];
            if !g.labeled() {
                continue;
            }
            labeled[j] += 1;
            if let Some(p) = paired {
                let d = ((p.keypoints[j].x - g.x).powi(2) + (p.keypoints[j].y - g.y).powi(2)).sqrt();
                if d <= alpha * head {
                    correct[j] += 1;
                }
            }
        }
    }
    let total_labeled: u64 = labeled.iter().sum();
    if total_labeled == 0 {
        return Err(Error::Data("no labeled ground-truth joints to evaluate".into()));
    }
    let per_joint = labeled
        .iter()
        .zip(&correct)
        .map(|(&l, &c)| if l == 0 { None } else { Some(c as f64 / l as f64) })
        .collect();
    Ok(PckhReport {
        alpha,
        per_joint,
        mean: correct.iter().sum::<u64>() as f64 / total_labeled as f64,
        labeled_per_joint: labeled,
        correct_per_joint: correct,
    })
}

/// One matched prediction/ground-truth pair, recorded at the loosest
/// threshold of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub image_id: i64,
    pub pred_id: i64,
    pub gt_id: i64,
    pub oks: f64,
}

/// Average precision of one threshold in the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
    pub max_recall: f64,
}

/// Detection-style evaluation summary. The size-restricted values are
/// None when no ground truth falls in the corresponding area range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksApReport {
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar: f64,
    pub per_threshold: Vec<ThresholdAp>,
    pub num_gts: usize,
    pub num_preds: usize,
    /// Ground-truth instances dropped for having no labeled joints.
    pub ignored_gts: usize,
    pub matches: Vec<MatchRecord>,
}

impl OksApReport {
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "n/a".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "AP", "AP50", "AP75", "AP_M", "AP_L", "AR"
        ));
        out.push_str(&format!(
            "{:>8.4} {:>8} {:>8} {:>8} {:>8} {:>8.4}\n",
            self.ap,
            fmt(self.ap50),
            fmt(self.ap75),
            fmt(self.ap_medium),
            fmt(self.ap_large),
            self.ar
        ));
        out
    }
}

/// Full evaluation output, holding whichever metric families were run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pckh: Option<PckhReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oks_ap: Option<OksApReport>,
}

/// One pooled detection after per-image matching.
struct PredRecord {
    score: f64,
    image_id: i64,
    pred_id: i64,
    seq: usize,
    /// Matched gt's (id, area, oks); None for an unmatched prediction.
    matched: Option<(i64, f64, f64)>,
}

/// Greedy per-image matching plus interpolated AP/AR over the threshold
/// sweep.
///
/// Per image and threshold, predictions are taken in descending score
/// order and each claims the unmatched ground truth with the highest
/// similarity, if that similarity reaches the threshold; ties prefer the
/// earlier ground-truth instance. Matched predictions are true positives,
/// the rest false positives, unmatched ground truths false negatives.
/// Detections are then pooled across images (score descending, ties by
/// image then id) and AP is the 101-point interpolated area under the
/// precision-recall curve; AR is the mean over thresholds of the final
/// recall. Ground truths with no labeled joints are excluded entirely,
/// and images with no ground truth contribute only false positives.
pub fn match_and_ap(
    preds: &[PoseAnnotation],
    gts: &[PoseAnnotation],
    cfg: &OksConfig,
) -> Result<OksApReport> {
    cfg.validate()?;
    let k = cfg.num_joints();
    for p in preds {
        if p.num_joints() != k {
            return Err(Error::Data(format!(
                "prediction {} has {} joints, expected {k}",
                p.id,
                p.num_joints()
            )));
        }
        match p.score {
            Some(s) if s.is_finite() => {}
            Some(s) => {
                return Err(Error::Data(format!("prediction {} has non-finite score {s}", p.id)))
            }
            None => {
                return Err(Error::Data(format!(
                    "prediction {} lacks the score matching needs",
                    p.id
                )))
            }
        }
    }
    let mut ignored_gts = 0usize;
    let mut live_gts: Vec<&PoseAnnotation> = Vec::with_capacity(gts.len());
    for g in gts {
        if g.num_joints() != k {
            return Err(Error::Data(format!(
                "annotation {} has {} joints, expected {k}",
                g.id,
                g.num_joints()
            )));
        }
        if g.score.is_some() {
            return Err(Error::Data(format!(
                "annotation {} carries a score; ground truth must not",
                g.id
            )));
        }
        if g.num_labeled() == 0 {
            ignored_gts += 1;
        } else {
            live_gts.push(g);
        }
    }
    if live_gts.is_empty() {
        return Err(Error::Data(
            "no ground-truth instances with labeled keypoints; precision is undefined".into(),
        ));
    }

    // Group both sides by image, preserving file order within an image.
    let mut images: BTreeMap<i64, (Vec<(usize, &PoseAnnotation)>, Vec<&PoseAnnotation>)> =
        BTreeMap::new();
    for g in &live_gts {
        images.entry(g.image_id).or_default().1.push(g);
    }
    for (seq, p) in preds.iter().enumerate() {
        images.entry(p.image_id).or_default().0.push((seq, p));
    }

    // Similarities and score order never change across thresholds, so
    // compute them once per image.
    struct ImageBlock<'a> {
        preds: Vec<(usize, &'a PoseAnnotation)>,
        gts: Vec<&'a PoseAnnotation>,
        sim: Vec<Vec<f64>>,
    }
    let mut blocks = Vec::new();
    for (_, (mut ps, gs)) in images {
        ps.sort_by(|a, b| b.1.score.unwrap().partial_cmp(&a.1.score.unwrap()).unwrap());
        let mut sim = Vec::with_capacity(ps.len());
        for (_, p) in &ps {
            let row: Result<Vec<f64>> = gs.iter().map(|g| oks(p, g, cfg)).collect();
            sim.push(row?);
        }
        blocks.push(ImageBlock { preds: ps, gts: gs, sim });
    }

    let num_gts = live_gts.len();
    let mut per_threshold = Vec::with_capacity(cfg.thresholds.len());
    let mut matches = Vec::new();
    let mut ap_medium_acc = RangeAccumulator::new(cfg.medium_range, &live_gts);
    let mut ap_large_acc = RangeAccumulator::new(cfg.large_range, &live_gts);

    for (ti, &t) in cfg.thresholds.iter().enumerate() {
        let mut records: Vec<PredRecord> = Vec::new();
        for block in &blocks {
            let mut taken = vec![false; block.gts.len()];
            for (pi, &(seq, p)) in block.preds.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g_taken) in taken.iter().enumerate() {
                    if *g_taken {
                        continue;
                    }
                    let s = block.sim[pi][gi];
                    if s >= t && best.map_or(true, |(_, bs)| s > bs) {
                        best = Some((gi, s));
                    }
                }
                let matched = best.map(|(gi, s)| {
                    taken[gi] = true;
                    (block.gts[gi].id, block.gts[gi].area, s)
                });
                records.push(PredRecord {
                    score: p.score.unwrap(),
                    image_id: p.image_id,
                    pred_id: p.id,
                    seq,
                    matched,
                });
            }
        }
        records.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.image_id.cmp(&b.image_id))
                .then(a.pred_id.cmp(&b.pred_id))
                .then(a.seq.cmp(&b.seq))
        });
        if ti == 0 {
            for r in &records {
                if let Some((gt_id, _, s)) = r.matched {
                    matches.push(MatchRecord {
                        image_id: r.image_id,
                        pred_id: r.pred_id,
                        gt_id,
                        oks: s,
                    });
                }
            }
            matches.sort_by_key(|m| (m.image_id, m.pred_id, m.gt_id));
        }
        let flags: Vec<bool> = records.iter().map(|r| r.matched.is_some()).collect();
        let (ap, max_recall) = interpolated_ap(&flags, num_gts);
        per_threshold.push(ThresholdAp { threshold: t, ap, max_recall });
        ap_medium_acc.push(&records);
        ap_large_acc.push(&records);
    }

    let mean = |vals: &[f64]| vals.iter().sum::<f64>() / vals.len() as f64;
    let ap = mean(&per_threshold.iter().map(|x| x.ap).collect::<Vec<_>>());
    let ar = mean(&per_threshold.iter().map(|x| x.max_recall).collect::<Vec<_>>());
    let at = |want: f64| {
        per_threshold.iter().find(|x| (x.threshold - want).abs() < 1e-9).map(|x| x.ap)
    };
    Ok(OksApReport {
        ap,
        ap50: at(0.50),
        ap75: at(0.75),
        ap_medium: ap_medium_acc.finish(),
        ap_large: ap_large_acc.finish(),
        ar,
        per_threshold,
        num_gts,
        num_preds: preds.len(),
        ignored_gts,
        matches,
    })
}

/// AP restricted to one instance-area interval: ground truths outside the
/// interval drop out together with the predictions matched to them, while
/// unmatched predictions stay false positives.
struct RangeAccumulator {
    range: (f64, Option<f64>),
    num_gts: usize,
    aps: Vec<f64>,
}

impl RangeAccumulator {
    fn new(range: (f64, Option<f64>), gts: &[&PoseAnnotation]) -> Self {
        let num_gts = gts.iter().filter(|g| in_range(g.area, range)).count();
        Self { range, num_gts, aps: Vec::new() }
    }

    fn push(&mut self, pooled: &[PredRecord]) {
        if self.num_gts == 0 {
            return;
        }
        let flags: Vec<bool> = pooled
            .iter()
            .filter_map(|r| match r.matched {
                Some((_, area, _)) if in_range(area, self.range) => Some(true),
                Some(_) => None,
                None => Some(false),
            })
            .collect();
        self.aps.push(interpolated_ap(&flags, self.num_gts).0);
    }

    fn finish(self) -> Option<f64> {
        if self.num_gts == 0 {
            None
        } else {
            Some(self.aps.iter().sum::<f64>() / self.aps.len() as f64)
        }
    }
}

/// 101-point interpolated average precision over a pooled detection list
/// already sorted by descending score. `flags[i]` says whether detection i
/// is a true positive. Also returns the final (maximum) recall.
fn interpolated_ap(flags: &[bool], num_gts: usize) -> (f64, f64) {
    assert!(num_gts > 0, "recall needs at least one ground truth");
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gts as f64);
    }
    // Monotone envelope: the best precision achievable at or beyond each
    // position.
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        if let Some(idx) = recall.iter().position(|&rc| rc >= r - 1e-12) {
            ap += envelope[idx];
        }
    }
    (ap / 101.0, recall.last().copied().unwrap_or(0.0))
}
