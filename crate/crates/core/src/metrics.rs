//! Open-loop planning metrics and toy detection metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{dist, OrientedBox, Point};

/// Contact counts as a collision.
pub fn disc_hits_box(center: Point, radius: f64, b: &OrientedBox) -> bool {
    b.distance(center) <= radius
}

pub fn disc_hits_any(center: Point, radius: f64, boxes: &[OrientedBox]) -> bool {
    boxes.iter().any(|b| disc_hits_box(center, radius, b))
}

/// Horizon indices standing in for 1s/2s/3s: waypoints T/3, 2T/3 and T (1-based).
pub fn default_horizons(t: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [t / 3, 2 * t / 3, t].iter().filter(|&&k| k >= 1).map(|k| k - 1).collect();
    out.dedup();
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanMetrics {
    pub horizons: Vec<usize>,
    pub l2_per_horizon: Vec<f64>,
    pub l2_avg: f64,
    pub collision_per_horizon: Vec<f64>,
    pub collision_avg: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// L2 displacement at each listed horizon index for one trajectory.
pub fn l2_error(pred: &[Point], gt: &[Point], horizons: &[usize]) -> Result<PlanMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(alloc::format!("trajectory lengths differ: {} vs {}", pred.len(), gt.len())));
    }
    let mut per = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h >= pred.len() {
            return Err(Error::Shape(alloc::format!("horizon index {h} beyond trajectory length {}", pred.len())));
        }
        per.push(dist(pred[h], gt[h]));
    }
    Ok(PlanMetrics { horizons: horizons.to_vec(), l2_avg: mean(&per), l2_per_horizon: per, ..Default::default() })
}

/// L2 metrics averaged over a set of `(pred, gt)` pairs.
pub fn l2_error_set(pairs: &[(Vec<Point>, Vec<Point>)], horizons: &[usize]) -> Result<PlanMetrics> {
    let mut per = vec![0.0; horizons.len()];
    for (p, g) in pairs {
        let m = l2_error(p, g, horizons)?;
        for (a, b) in per.iter_mut().zip(&m.l2_per_horizon) {
            *a += b;
        }
    }
    if !pairs.is_empty() {
        per.iter_mut().for_each(|v| *v /= pairs.len() as f64);
    }
    Ok(PlanMetrics { horizons: horizons.to_vec(), l2_avg: mean(&per), l2_per_horizon: per, ..Default::default() })
}

/// Fraction of samples whose ego disc at each horizon touches any box.
/// Waypoints and boxes share the world frame.
pub fn collision_rate(samples: &[(Vec<Point>, Vec<OrientedBox>)], ego_radius: f64, horizons: &[usize]) -> Result<PlanMetrics> {
    if !(ego_radius > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("ego_radius must be > 0, got {ego_radius}")));
    }
    let mut per = vec![0.0; horizons.len()];
    for (wps, boxes) in samples {
        for (slot, &h) in per.iter_mut().zip(horizons) {
            let p = *wps.get(h).ok_or_else(|| Error::Shape(alloc::format!("horizon index {h} out of range")))?;
            if disc_hits_any(p, ego_radius, boxes) {
                *slot += 1.0;
            }
        }
    }
    if !samples.is_empty() {
        per.iter_mut().for_each(|v| *v /= samples.len() as f64);
    }
    Ok(PlanMetrics {
        horizons: horizons.to_vec(),
        collision_avg: mean(&per),
        collision_per_horizon: per,
        ..Default::default()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub center: Point,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub center: Point,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub n_pred: usize,
    pub n_gt: usize,
}

/// Center-distance detection metrics over frames.
///
/// Predictions are matched greedily in descending score order to the nearest unclaimed
/// ground truth of the same class within `match_radius`. Precision is 0 when there are
/// no predictions; recall and AP are 1 when there is no ground truth and no prediction.
pub fn detection_metrics(frames: &[(Vec<Detection>, Vec<GtBox>)], match_radius: f64) -> Result<DetMetrics> {
    if !(match_radius > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("match_radius must be > 0, got {match_radius}")));
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for (preds, gts) in frames {
        n_gt += gts.len();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
        let mut claimed = vec![false; gts.len()];
        for i in order {
            let p = preds[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| !claimed[*j] && g.class == p.class)
                .map(|(j, g)| (j, dist(p.center, g.center)))
                .filter(|&(_, d)| d <= match_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, _)) = best {
                claimed[j] = true;
                scored.push((p.score, true));
            } else {
                scored.push((p.score, false));
            }
        }
    }
    let n_pred = scored.len();
    let tp = scored.iter().filter(|s| s.1).count();
    if n_gt == 0 {
        let (recall, ap) = if n_pred == 0 { (1.0, 1.0) } else { (1.0, 0.0) };
        return Ok(DetMetrics { precision: 0.0, recall, ap, n_pred, n_gt });
    }
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = tp as f64 / n_gt as f64;

    // All-point interpolated AP over the pooled ranking.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::with_capacity(n_pred);
    let mut hits = 0usize;
    for (k, &(_, hit)) in scored.iter().enumerate() {
        if hit {
            hits += 1;
        }
        curve.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Ok(DetMetrics { precision, recall, ap, n_pred, n_gt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotate;

    #[test]
    fn l2_examples() {
        let gt = [[1.0, 0.0], [2.0, 0.0]];
        let m = l2_error(&gt, &gt, &[0, 1]).unwrap();
        assert_eq!(m.l2_per_horizon, vec![0.0, 0.0]);
        let shifted = [[2.0, 0.0], [3.0, 0.0]];
        let m = l2_error(&shifted, &gt, &[0, 1]).unwrap();
        assert_eq!((m.l2_per_horizon.clone(), m.l2_avg), (vec![1.0, 1.0], 1.0));
        let m = l2_error(&[[1.0, 1.0], [2.0, 2.0]], &gt, &[0, 1]).unwrap();
        assert_eq!(m.l2_per_horizon, vec![1.0, 2.0]);
        assert_eq!(m.l2_avg, 1.5);
        assert!(l2_error(&gt[..1], &gt, &[0]).is_err());
    }

    #[test]
    fn collision_examples() {
        let b = OrientedBox { center: [0.0, 0.0], width: 1.0, length: 1.0, heading: 0.4 };
        let far = (vec![[10.0, 10.0], [-12.0, 3.0]], vec![b]);
        assert_eq!(collision_rate(&[far], 0.5, &[0, 1]).unwrap().collision_avg, 0.0);
        let hit = (vec![[0.0, 0.0], [20.0, 0.0]], vec![b]);
        let m = collision_rate(&[hit], 0.5, &[0, 1]).unwrap();
        assert_eq!(m.collision_per_horizon, vec![1.0, 0.0]);
        assert!(collision_rate(&[], 0.0, &[0]).is_err());
    }

    #[test]
    fn tangent_disc_counts_as_collision() {
        // Closed form: along the box x axis the boundary sits at length/2, so a disc
        // centered at length/2 + radius touches it exactly.
        let heading = 0.0;
        let b = OrientedBox { center: [1.0, -2.0], width: 1.0, length: 2.0, heading };
        let offset = rotate([1.0 + 0.5, 0.0], heading);
        let p = [1.0 + offset[0], -2.0 + offset[1]];
        assert_eq!(b.distance(p), 0.5);
        assert!(disc_hits_box(p, 0.5, &b));
        assert!(!disc_hits_box([p[0] + 1e-9, p[1]], 0.5, &b));
    }

    #[test]
    fn detection_examples() {
        let gt = vec![GtBox { center: [0.0, 0.0], class: 0 }, GtBox { center: [3.0, 0.0], class: 1 }];
        let perfect: Vec<Detection> = gt.iter().map(|g| Detection { center: g.center, class: g.class, score: 0.9 }).collect();
        let m = detection_metrics(&[(perfect, gt.clone())], 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.ap), (1.0, 1.0, 1.0));

        let m = detection_metrics(&[(vec![], gt)], 0.5).unwrap();
        assert_eq!((m.precision, m.recall), (0.0, 0.0));

        // Hand walk: the inside prediction ranks first and claims the gt; the outside one
        // is a false positive. P = 1/2, R = 1, and the curve reaches R = 1 at P = 1.
        let one = vec![GtBox { center: [0.0, 0.0], class: 0 }];
        let preds = vec![
            Detection { center: [0.1, 0.0], class: 0, score: 0.9 },
            Detection { center: [2.0, 0.0], class: 0, score: 0.5 },
        ];
        let m = detection_metrics(&[(preds, one)], 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.ap), (0.5, 1.0, 1.0));
    }

    #[test]
    fn default_horizons_split_in_thirds() {
        assert_eq!(default_horizons(6), vec![1, 3, 5]);
        assert_eq!(default_horizons(1), vec![0]);
    }
}
