//! Evaluation: temporal and spatio-temporal AP at IoU 0.25, recovery and success.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, PredictionRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::inference::ResponseTrack;

pub const AP_IOU_THRESHOLD: f64 = 0.25;
pub const RECOVERY_IOU: f64 = 0.5;
pub const SUCCESS_IOU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub query_id: String,
    pub prediction: Option<ResponseTrack>,
    pub ground_truth: ResponseTrack,
}

/// Inclusive frame ranges `[s, e]`.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = (a.1.min(b.1) + 1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.intersection(b).map_or(0.0, |i| i.area())
}

/// Tube IoU over the union of the two tracks' frames.
pub fn spatiotemporal_iou(a: &ResponseTrack, b: &ResponseTrack) -> f64 {
    let (lo, hi) = (a.s.min(b.s), a.e.max(b.e));
    let (mut inter, mut union) = (0.0, 0.0);
    for t in lo..=hi {
        match (a.box_at(t), b.box_at(t)) {
            (Some(x), Some(y)) => {
                let i = intersection_area(x, y);
                inter += i;
                union += x.area() + y.area() - i;
            }
            (Some(x), None) | (None, Some(x)) => union += x.area(),
            (None, None) => {}
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn temporal_track_iou(a: &ResponseTrack, b: &ResponseTrack) -> f64 {
    temporal_iou((a.s, a.e), (b.s, b.e))
}

/// All-points interpolated AP. Predictions are ranked by score, ties by query id; a query
/// without prediction only contributes to the recall denominator.
pub fn average_precision(pairs: &[EvalPair], iou_fn: impl Fn(&ResponseTrack, &ResponseTrack) -> f64, threshold: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<(f64, &str, bool)> = pairs
        .iter()
        .filter_map(|p| {
            let pred = p.prediction.as_ref()?;
            Some((pred.score, p.query_id.as_str(), iou_fn(pred, &p.ground_truth) >= threshold))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let n_gt = pairs.len() as f64;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &(_, _, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Percentage of ground-truth frames with a predicted box of IoU ≥ 0.5.
pub fn recovery(pred: Option<&ResponseTrack>, gt: &ResponseTrack) -> f64 {
    let Some(pred) = pred else { return 0.0 };
    let hits = (gt.s..=gt.e)
        .filter(|&t| match (pred.box_at(t), gt.box_at(t)) {
            (Some(p), Some(g)) => iou(p, g).is_ok_and(|v| v >= RECOVERY_IOU),
            _ => false,
        })
        .count();
    100.0 * hits as f64 / gt.len() as f64
}

pub fn success(pred: Option<&ResponseTrack>, gt: &ResponseTrack) -> bool {
    pred.is_some_and(|p| spatiotemporal_iou(p, gt) > SUCCESS_IOU)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub found: bool,
    pub score: Option<f64>,
    pub temporal_iou: f64,
    pub spatiotemporal_iou: f64,
    pub recovery_pct: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "tAP25")]
    pub tap25: f64,
    #[serde(rename = "stAP25")]
    pub stap25: f64,
    pub recovery_pct: f64,
    pub success_pct: f64,
    pub queries: usize,
    pub per_query: Vec<QueryMetrics>,
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Domain("no queries to evaluate".into()));
    }
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert(p.query_id.as_str()) {
            return Err(Error::Domain(format!("query {} appears twice", p.query_id)));
        }
        if p.ground_truth.is_empty() {
            return Err(Error::Domain(format!("query {} has an empty ground truth", p.query_id)));
        }
    }
    let mut per_query: Vec<QueryMetrics> = pairs
        .iter()
        .map(|p| {
            let pred = p.prediction.as_ref();
            QueryMetrics {
                query_id: p.query_id.clone(),
                found: pred.is_some(),
                score: pred.map(|t| t.score),
                temporal_iou: pred.map_or(0.0, |t| temporal_track_iou(t, &p.ground_truth)),
                spatiotemporal_iou: pred.map_or(0.0, |t| spatiotemporal_iou(t, &p.ground_truth)),
                recovery_pct: recovery(pred, &p.ground_truth),
                success: success(pred, &p.ground_truth),
            }
        })
        .collect();
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let n = pairs.len() as f64;
    Ok(MetricsReport {
        tap25: average_precision(pairs, temporal_track_iou, AP_IOU_THRESHOLD),
        stap25: average_precision(pairs, spatiotemporal_iou, AP_IOU_THRESHOLD),
        recovery_pct: per_query.iter().map(|q| q.recovery_pct).sum::<f64>() / n,
        success_pct: 100.0 * per_query.iter().filter(|q| q.success).count() as f64 / n,
        queries: pairs.len(),
        per_query,
    })
}

/// Joins predictions to annotations by query id. Queries without a prediction are misses;
/// predictions for unknown or repeated queries are errors.
pub fn pair_records(annotations: &[AnnotationRecord], predictions: &[PredictionRecord]) -> Result<Vec<EvalPair>> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in predictions {
        if by_id.insert(p.query_id.as_str(), p).is_some() {
            return Err(Error::Domain(format!("two predictions for query {}", p.query_id)));
        }
    }
    let known: HashSet<&str> = annotations.iter().map(|a| a.query_id.as_str()).collect();
    if let Some(p) = predictions.iter().find(|p| !known.contains(p.query_id.as_str())) {
        return Err(Error::Domain(format!("prediction for unknown query {}", p.query_id)));
    }
    Ok(annotations
        .iter()
        .map(|a| EvalPair {
            query_id: a.query_id.clone(),
            prediction: by_id.get(a.query_id.as_str()).map(|p| p.track()),
            ground_truth: a.track(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track(s: usize, boxes: Vec<BoundingBox>, score: f64) -> ResponseTrack {
        ResponseTrack {
            s,
            e: s + boxes.len() - 1,
            boxes,
            score,
        }
    }

    fn still(s: usize, e: usize, b: BoundingBox, score: f64) -> ResponseTrack {
        track(s, vec![b; e - s + 1], score)
    }

    const UNIT: BoundingBox = BoundingBox::new(5.0, 5.0, 10.0, 10.0);

    fn pair(id: &str, pred: Option<ResponseTrack>, gt: ResponseTrack) -> EvalPair {
        EvalPair {
            query_id: id.into(),
            prediction: pred,
            ground_truth: gt,
        }
    }

    #[test]
    fn temporal_iou_examples() {
        assert_eq!(temporal_iou((10, 20), (15, 25)), 6.0 / 16.0);
        assert_eq!(temporal_iou((3, 9), (3, 9)), 1.0);
        assert_eq!(temporal_iou((0, 4), (5, 9)), 0.0);
        assert_eq!(temporal_iou((7, 7), (7, 7)), 1.0);
    }

    #[test]
    fn tube_iou_examples() {
        let a = still(2, 6, UNIT, 1.0);
        assert_eq!(spatiotemporal_iou(&a, &a), 1.0);
        assert_eq!(spatiotemporal_iou(&a, &still(7, 9, UNIT, 1.0)), 0.0);
        // two 10x10 boxes sharing a 5x5 corner: 25 / 175
        let diag = BoundingBox::from_corners(5.0, 5.0, 15.0, 15.0);
        let t = spatiotemporal_iou(&still(4, 4, UNIT, 1.0), &still(4, 4, diag, 1.0));
        assert!((t - 1.0 / 7.0).abs() < 1e-12);
        // a frame present in one track only adds its whole area to the union
        let t = spatiotemporal_iou(&still(0, 1, UNIT, 1.0), &still(0, 0, UNIT, 1.0));
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        let gt = still(0, 4, UNIT, 1.0);
        let good = still(0, 4, UNIT, 0.9);
        let bad = still(10, 12, UNIT, 0.8);
        let all = [pair("a", Some(good.clone()), gt.clone()), pair("b", Some(good.clone()), gt.clone())];
        assert_eq!(average_precision(&all, temporal_track_iou, 0.25), 1.0);
        let none = [pair("a", None, gt.clone()), pair("b", None, gt.clone())];
        assert_eq!(average_precision(&none, temporal_track_iou, 0.25), 0.0);
        let mixed = [pair("a", Some(good.clone()), gt.clone()), pair("b", Some(bad), gt.clone())];
        assert_eq!(average_precision(&mixed, temporal_track_iou, 0.25), 0.5);
        // a miss only lowers recall
        let miss = [pair("a", Some(good), gt.clone()), pair("b", None, gt)];
        assert_eq!(average_precision(&miss, temporal_track_iou, 0.25), 0.5);
    }

    #[test]
    fn recovery_and_success_examples() {
        let gt = still(10, 19, UNIT, 1.0);
        assert_eq!(recovery(Some(&gt), &gt), 100.0);
        assert_eq!(recovery(Some(&still(10, 14, UNIT, 1.0)), &gt), 50.0);
        assert_eq!(recovery(None, &gt), 0.0);
        let far = BoundingBox::new(50.0, 50.0, 10.0, 10.0);
        assert_eq!(recovery(Some(&still(10, 19, far, 1.0)), &gt), 0.0);

        assert!(success(Some(&gt), &gt));
        assert!(!success(None, &gt));
        // one shared frame out of twenty in the union: tube IoU is exactly 1/20
        let g = still(0, 9, UNIT, 1.0);
        let p = still(9, 19, UNIT, 1.0);
        assert_eq!(spatiotemporal_iou(&p, &g), 0.05);
        assert!(!success(Some(&p), &g));
        let p = still(8, 17, UNIT, 1.0);
        assert!(success(Some(&p), &g));
    }

    #[test]
    fn report_ranges_and_breakdown() {
        let gt = still(0, 4, UNIT, 1.0);
        let pairs = vec![
            pair("q1", Some(still(0, 4, UNIT, 0.7)), gt.clone()),
            pair("q0", None, gt.clone()),
            pair("q2", Some(still(2, 6, UNIT, 0.9)), gt.clone()),
        ];
        let r = evaluate(&pairs).unwrap();
        assert_eq!(r.queries, 3);
        assert_eq!(r.per_query.iter().map(|q| q.query_id.as_str()).collect::<Vec<_>>(), ["q0", "q1", "q2"]);
        assert!(!r.per_query[0].found);
        assert!((r.recovery_pct - (0.0 + 100.0 + 60.0) / 3.0).abs() < 1e-9);
        assert!((r.success_pct - 200.0 / 3.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&r.tap25) && (0.0..=1.0).contains(&r.stap25));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("tAP25").is_some() && json.get("stAP25").is_some());

        assert!(evaluate(&[]).is_err());
        let dup = vec![pairs[0].clone(), pairs[0].clone()];
        assert!(evaluate(&dup).is_err());
    }

    /// AP by sweeping a score threshold: each distinct threshold gives one (recall,
    /// precision) operating point; AP integrates the best precision available at or beyond
    /// each recall level.
    fn sweep_ap(pairs: &[EvalPair], iou_fn: fn(&ResponseTrack, &ResponseTrack) -> f64) -> f64 {
        let mut thresholds: Vec<f64> = pairs.iter().filter_map(|p| p.prediction.as_ref().map(|t| t.score)).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let points: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&tau| {
                let mut tp = 0;
                let mut n = 0;
                for p in pairs {
                    if let Some(t) = p.prediction.as_ref().filter(|t| t.score >= tau) {
                        n += 1;
                        if iou_fn(t, &p.ground_truth) >= 0.25 {
                            tp += 1;
                        }
                    }
                }
                (tp as f64 / pairs.len() as f64, tp as f64 / n as f64)
            })
            .collect();
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
        ap
    }

    fn random_track(rng: &mut ChaCha8Rng, score: f64) -> ResponseTrack {
        let s = rng.gen_range(0..20);
        let len = rng.gen_range(1..8);
        let boxes = (0..len)
            .map(|_| {
                BoundingBox::new(
                    rng.gen_range(10.0..30.0),
                    rng.gen_range(10.0..30.0),
                    rng.gen_range(4.0..20.0),
                    rng.gen_range(4.0..20.0),
                )
            })
            .collect();
        track(s, boxes, score)
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvalPair> {
        // distinct scores: the sweep cannot separate tied predictions
        let mut scores: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen_range(0.0..0.9)) / n as f64).collect();
        for i in (1..n).rev() {
            scores.swap(i, rng.gen_range(0..=i));
        }
        (0..n)
            .map(|i| {
                let gt = random_track(rng, 1.0);
                let pred = rng.gen_bool(0.8).then(|| {
                    if rng.gen_bool(0.4) {
                        ResponseTrack { score: scores[i], ..gt.clone() }
                    } else {
                        random_track(rng, scores[i])
                    }
                });
                pair(&format!("q{i:02}"), pred, gt)
            })
            .collect()
    }

    #[test]
    fn ap_matches_threshold_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let n = rng.gen_range(1..=10);
            let pairs = random_pairs(&mut rng, n);
            for f in [temporal_track_iou as fn(&ResponseTrack, &ResponseTrack) -> f64, spatiotemporal_iou] {
                let a = average_precision(&pairs, f, 0.25);
                let b = sweep_ap(&pairs, f);
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ap_is_invariant_to_monotone_score_maps_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.gen_range(1..=12);
            let pairs = random_pairs(&mut rng, n);
            let base = evaluate(&pairs).unwrap();
            let mapped: Vec<EvalPair> = pairs
                .iter()
                .map(|p| EvalPair {
                    prediction: p.prediction.clone().map(|t| ResponseTrack { score: (3.0 * t.score).exp() - 7.0, ..t }),
                    ..p.clone()
                })
                .collect();
            let m = evaluate(&mapped).unwrap();
            assert_eq!((base.tap25, base.stap25), (m.tap25, m.stap25));
            let mut shuffled = pairs.clone();
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.gen_range(0..=i));
            }
            assert_eq!(evaluate(&shuffled).unwrap(), base);
        }
    }

    #[test]
    fn tied_scores_rank_by_query_id() {
        let gt = still(0, 4, UNIT, 1.0);
        let hit = still(0, 4, UNIT, 0.5);
        let miss = still(20, 24, UNIT, 0.5);
        let a = [pair("a", Some(hit.clone()), gt.clone()), pair("b", Some(miss.clone()), gt.clone())];
        let b = [pair("a", Some(miss), gt.clone()), pair("b", Some(hit), gt)];
        assert_eq!(average_precision(&a, temporal_track_iou, 0.25), 0.5);
        assert_eq!(average_precision(&b, temporal_track_iou, 0.25), 0.25);
    }

    proptest! {
        // Holds when all boxes share one area: the numerator is at most a·|frames ∩| and
        // the denominator at least a·|frames ∪|.
        #[test]
        fn tube_iou_bounded_by_temporal_iou_for_equal_area_boxes(
            s1 in 0usize..10, l1 in 1usize..8, s2 in 0usize..10, l2 in 1usize..8,
            centers in prop::collection::vec((0.0..40.0f64, 0.0..40.0f64), 16),
            aspect in prop::collection::vec(0.5..2.0f64, 16),
        ) {
            let mk = |s: usize, l: usize, off: usize| {
                let boxes = (0..l).map(|k| {
                    let (cx, cy) = centers[off + k];
                    let r = aspect[off + k];
                    BoundingBox::new(cx, cy, 10.0 * r.sqrt(), 10.0 / r.sqrt())
                }).collect();
                track(s, boxes, 1.0)
            };
            let a = mk(s1, l1, 0);
            let b = mk(s2, l2, 8);
            prop_assert!(spatiotemporal_iou(&a, &b) <= temporal_track_iou(&a, &b) + 1e-12);
        }
    }

    #[test]
    fn tube_iou_can_exceed_temporal_iou_when_areas_differ() {
        let big = BoundingBox::new(50.0, 50.0, 100.0, 100.0);
        let tiny = BoundingBox::new(5.0, 5.0, 1.0, 1.0);
        let a = track(0, vec![big, tiny], 1.0);
        let b = track(0, vec![big], 1.0);
        assert_eq!(temporal_track_iou(&a, &b), 0.5);
        assert!(spatiotemporal_iou(&a, &b) > 0.99);
    }

    #[test]
    fn pairing_records() {
        use crate::data::{QueryRef, TrackBox};
        let ann = |id: &str| AnnotationRecord {
            query_id: id.into(),
            video_id: "v".into(),
            frame_count: 10,
            fps: 5.0,
            query: QueryRef {
                image: "q".into(),
                source_box: UNIT,
            },
            response_track: vec![TrackBox { frame: 2, bbox: UNIT }],
        };
        let anns = vec![ann("a"), ann("b")];
        let preds = vec![PredictionRecord::new("b", &still(2, 2, UNIT, 0.3))];
        let pairs = pair_records(&anns, &preds).unwrap();
        assert!(pairs[0].prediction.is_none());
        assert_eq!(pairs[1].prediction.as_ref().unwrap().score, 0.3);
        assert!(pair_records(&anns, &[PredictionRecord::new("zz", &still(2, 2, UNIT, 0.3))]).is_err());
        assert!(pair_records(&anns, &[preds[0].clone(), preds[0].clone()]).is_err());
    }
}
