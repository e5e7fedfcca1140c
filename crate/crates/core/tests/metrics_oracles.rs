//! Matching and average-precision checks against brute-force oracles:
//! the greedy matcher is compared with an exhaustive enumeration of all
//! assignments, and the interpolated AP with a from-the-definition
//! recomputation.

mod common;

use omnipose_core::codec::{Keypoint, PoseAnnotation};
use omnipose_core::metrics::{match_and_ap, oks, OksConfig};
use rand::Rng;

const AREA: f64 = 900.0;

fn one_joint_cfg(thresholds: Vec<f64>) -> OksConfig {
    let mut cfg = OksConfig::for_falloff(vec![0.1]);
    cfg.thresholds = thresholds;
    cfg
}

fn gt(image_id: i64, id: i64, x: f64, y: f64) -> PoseAnnotation {
    PoseAnnotation {
        image_id,
        id,
        keypoints: vec![Keypoint::new(x, y, 2)],
        area: AREA,
        head_size: None,
        score: None,
    }
}

fn pred(image_id: i64, id: i64, x: f64, y: f64, score: f64) -> PoseAnnotation {
    PoseAnnotation { score: Some(score), ..gt(image_id, id, x, y) }
}

/// Exhaustive reference matcher. Enumerates every injective partial
/// assignment of predictions (already in match order) to ground truths
/// with similarity >= t, and keeps the lexicographically best one, where
/// earlier predictions dominate, higher similarity beats lower, any match
/// beats none, and equal similarities prefer the earlier ground truth.
fn exhaustive_match(sim: &[Vec<f64>], t: f64) -> Vec<Option<usize>> {
    fn better(a: &[Option<usize>], b: &[Option<usize>], sim: &[Vec<f64>]) -> bool {
        for (pi, (x, y)) in a.iter().zip(b).enumerate() {
            match (x, y) {
                (Some(g1), Some(g2)) => {
                    let (s1, s2) = (sim[pi][*g1], sim[pi][*g2]);
                    if s1 != s2 {
                        return s1 > s2;
                    }
                    if g1 != g2 {
                        return g1 < g2;
                    }
                }
                (Some(_), None) => return true,
                (None, Some(_)) => return false,
                (None, None) => {}
            }
        }
        false
    }
    fn recurse(
        sim: &[Vec<f64>],
        t: f64,
        pi: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<Vec<Option<usize>>>,
    ) {
        if pi == sim.len() {
            if best.as_ref().map_or(true, |b| better(cur, b, sim)) {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push(None);
        recurse(sim, t, pi + 1, used, cur, best);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && sim[pi][g] >= t {
                used[g] = true;
                cur.push(Some(g));
                recurse(sim, t, pi + 1, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let ng = sim.first().map_or(0, Vec::len);
    let mut best = None;
    recurse(sim, t, 0, &mut vec![false; ng], &mut Vec::new(), &mut best);
    best.unwrap_or_default()
}

/// 101-point interpolated AP straight from its definition: for each
/// recall grid point, the best precision among pooled prefixes reaching
/// that recall.
fn ap_oracle(tp: &[bool], num_gts: usize) -> f64 {
    let mut ap = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let mut best = 0.0f64;
        let mut tps = 0usize;
        for (i, &is_tp) in tp.iter().enumerate() {
            if is_tp {
                tps += 1;
            }
            let prec = tps as f64 / (i + 1) as f64;
            let rec = tps as f64 / num_gts as f64;
            if rec >= r - 1e-12 {
                best = best.max(prec);
            }
        }
        ap += best;
    }
    ap / 101.0
}

#[test]
fn greedy_matching_equals_exhaustive_enumeration_up_to_three_by_three() {
    let mut rng = common::rng(0xface);
    // A far-away instance on its own image keeps the evaluation well
    // defined when the image under test has no ground truth at all.
    let spectator = gt(99, 1000, 1e6, 1e6);
    for ng in 0..=3usize {
        for np in 0..=3usize {
            for _ in 0..40 {
                let gts: Vec<_> = (0..ng)
                    .map(|i| gt(0, i as i64, rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)))
                    .collect();
                let preds: Vec<_> = (0..np)
                    .map(|i| {
                        // Coarse score grid so ties actually occur.
                        let score = (rng.gen_range(1..=5) as f64) / 5.0;
                        pred(0, i as i64, rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0), score)
                    })
                    .collect();
                let t = *[0.3, 0.5, 0.75, 0.9].iter().nth(rng.gen_range(0..4)).unwrap();
                let cfg = one_joint_cfg(vec![t]);

                let mut all_gts = gts.clone();
                all_gts.push(spectator.clone());
                let report = match_and_ap(&preds, &all_gts, &cfg).unwrap();

                // Reference: same match order (score descending, stable),
                // assignment by exhaustive search.
                let mut order: Vec<usize> = (0..np).collect();
                order.sort_by(|&a, &b| {
                    preds[b].score.unwrap().partial_cmp(&preds[a].score.unwrap()).unwrap()
                });
                let sim: Vec<Vec<f64>> = order
                    .iter()
                    .map(|&pi| gts.iter().map(|g| oks(&preds[pi], g, &cfg).unwrap()).collect())
                    .collect();
                let assignment = exhaustive_match(&sim, t);

                let mut want: Vec<(i64, i64)> = assignment
                    .iter()
                    .enumerate()
                    .filter_map(|(oi, g)| g.map(|gi| (preds[order[oi]].id, gts[gi].id)))
                    .collect();
                want.sort_unstable();
                let got: Vec<(i64, i64)> =
                    report.matches.iter().map(|m| (m.pred_id, m.gt_id)).collect();
                assert_eq!(got, want, "ng={ng} np={np} t={t}");

                // The pooled AP must also agree with the definitional
                // recomputation built on the reference assignment.
                let mut records: Vec<(f64, i64, i64, bool)> = assignment
                    .iter()
                    .enumerate()
                    .map(|(oi, g)| {
                        let p = &preds[order[oi]];
                        (p.score.unwrap(), p.image_id, p.id, g.is_some())
                    })
                    .collect();
                records.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
                });
                let flags: Vec<bool> = records.iter().map(|r| r.3).collect();
                let want_ap = ap_oracle(&flags, ng + 1);
                assert!(
                    (report.per_threshold[0].ap - want_ap).abs() < 1e-12,
                    "ap ng={ng} np={np} t={t}: {} vs {want_ap}",
                    report.per_threshold[0].ap
                );
            }
        }
    }
}

#[test]
fn equal_similarities_prefer_the_earlier_ground_truth() {
    // One prediction exactly halfway between two ground truths.
    let gts = vec![gt(0, 10, 0.0, 0.0), gt(0, 11, 10.0, 0.0)];
    let preds = vec![pred(0, 0, 5.0, 0.0, 0.9)];
    let report = match_and_ap(&preds, &gts, &one_joint_cfg(vec![0.1])).unwrap();
    assert_eq!(report.matches.len(), 1);
    assert_eq!(report.matches[0].gt_id, 10);
}

#[test]
fn hand_built_fixture_straddling_a_threshold_matches_hand_computed_ap() {
    // Similarities: exp(-d^2/18) with area 900 and falloff 0.1.
    // p0 (score .9) sits 3px from g0: oks 0.6065, above 0.5, below 0.75.
    // p1 (score .8) sits 1px from g1: oks 0.9460.
    // p2 (score .7) sits 1px from g0: oks 0.9460, but g0 is taken at 0.5.
    let gts = vec![gt(0, 0, 0.0, 0.0), gt(0, 1, 30.0, 0.0)];
    let preds = vec![
        pred(0, 0, 3.0, 0.0, 0.9),
        pred(0, 1, 31.0, 0.0, 0.8),
        pred(0, 2, 1.0, 0.0, 0.7),
    ];
    let report = match_and_ap(&preds, &gts, &one_joint_cfg(vec![0.5, 0.75])).unwrap();
    // At 0.5: matches (p0,g0) and (p1,g1), p2 a false positive: perfect
    // precision at every recall grid point.
    assert!((report.per_threshold[0].ap - 1.0).abs() < 1e-12);
    // At 0.75: p0 falls below the bar and becomes the top-scored false
    // positive; p1 and p2 recover both instances. Precision on the grid is
    // flat 2/3.
    assert!((report.per_threshold[1].ap - 2.0 / 3.0).abs() < 1e-12);
    assert!((report.ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(report.ar, 1.0);
}

#[test]
fn similarity_never_rises_when_a_joint_moves_away() {
    let mut rng = common::rng(4242);
    let cfg = OksConfig::for_falloff(vec![0.08, 0.15, 0.2]);
    for _ in 0..200 {
        let g = PoseAnnotation {
            image_id: 0,
            id: 0,
            keypoints: (0..3)
                .map(|_| Keypoint::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), 2))
                .collect(),
            area: rng.gen_range(100.0..2000.0),
            head_size: None,
            score: None,
        };
        let mut p = g.clone();
        for kp in &mut p.keypoints {
            kp.x += rng.gen_range(-5.0..5.0);
            kp.y += rng.gen_range(-5.0..5.0);
        }
        let base = oks(&p, &g, &cfg).unwrap();
        // Push one joint strictly farther from its target along the
        // displacement direction.
        let j = rng.gen_range(0..3);
        let (dx, dy) = (p.keypoints[j].x - g.keypoints[j].x, p.keypoints[j].y - g.keypoints[j].y);
        let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
        p.keypoints[j].x += dx / norm * 2.0;
        p.keypoints[j].y += dy / norm * 2.0;
        let moved = oks(&p, &g, &cfg).unwrap();
        assert!(moved <= base + 1e-15, "{moved} > {base}");
    }
}
