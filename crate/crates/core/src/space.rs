//! Points in the state and action spaces together with their metrics.
//!
//! States and actions are real vectors with an optional discrete tag. The
//! distance between two points is the Euclidean distance on the real
//! coordinates plus the discrete metric on the tags (0 if equal, 1
//! otherwise). The pair metric is the sum of the state and action metrics.

use crate::error::ModelError;

/// A point in the state space: real coordinates plus an optional discrete tag.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePoint {
    pub coords: Vec<f64>,
    pub tag: Option<i64>,
}

impl StatePoint {
    pub fn new(coords: Vec<f64>) -> Self {
        StatePoint { coords, tag: None }
    }

    pub fn tagged(coords: Vec<f64>, tag: i64) -> Self {
        StatePoint { coords, tag: Some(tag) }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// A point in the action space. Finite-action models use only the tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionPoint {
    pub coords: Vec<f64>,
    pub tag: Option<i64>,
}

impl ActionPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        ActionPoint { coords, tag: None }
    }

    /// An action identified purely by a discrete label.
    pub fn label(tag: i64) -> Self {
        ActionPoint { coords: Vec::new(), tag: Some(tag) }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq.sqrt())
}

fn tag_dist(a: Option<i64>, b: Option<i64>) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// State metric d_S: Euclidean on coordinates plus discrete metric on tags.
pub fn dist_state(a: &StatePoint, b: &StatePoint) -> Result<f64, ModelError> {
    Ok(euclidean(&a.coords, &b.coords)? + tag_dist(a.tag, b.tag))
}

/// Action metric d_Act, same convention as the state metric.
pub fn dist_action(a: &ActionPoint, b: &ActionPoint) -> Result<f64, ModelError> {
    Ok(euclidean(&a.coords, &b.coords)? + tag_dist(a.tag, b.tag))
}

/// Pair metric d_x((s,a),(s',a')) = d_S(s,s') + d_Act(a,a').
pub fn dist_pair(
    a: (&StatePoint, &ActionPoint),
    b: (&StatePoint, &ActionPoint),
) -> Result<f64, ModelError> {
    Ok(dist_state(a.0, b.0)? + dist_action(a.1, b.1)?)
}

/// An axis-aligned compact box, possibly degenerate in some dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl BoxBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self, ModelError> {
        if low.len() != high.len() {
            return Err(ModelError::DimensionMismatch { expected: low.len(), got: high.len() });
        }
        for (l, h) in low.iter().zip(&high) {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(ModelError::InvalidParameter(format!(
                    "box bounds must be finite with low <= high, got [{l}, {h}]"
                )));
            }
        }
        Ok(BoxBounds { low, high })
    }

    /// A box containing a single point.
    pub fn point(p: &[f64]) -> Self {
        BoxBounds { low: p.to_vec(), high: p.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.high[i] - self.low[i]
    }

    /// Euclidean length of the box diagonal.
    pub fn diagonal(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: &[f64], slack: f64) -> bool {
        p.len() == self.dim()
            && p.iter()
                .enumerate()
                .all(|(i, &x)| x >= self.low[i] - slack && x <= self.high[i] + slack)
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (i, x) in p.iter_mut().enumerate() {
            *x = x.max(self.low[i]).min(self.high[i]);
        }
    }

    /// Volume of the box; degenerate dimensions contribute factor 1 so that a
    /// point box has "volume" 1 (a Dirac in those dimensions).
    pub fn pseudo_volume(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| if h > l { h - l } else { 1.0 })
            .product()
    }

    /// Grid of points covering the box so that every box point is within `h`
    /// (Euclidean) of some grid point. Endpoints are always included, so nets
    /// for halved `h` are supersets of coarser ones when segment counts double.
    pub fn net(&self, h: f64) -> Net {
        let d = self.dim();
        if d == 0 {
            return Net { points_per_dim: Vec::new(), covering_radius: 0.0 };
        }
        // Per-dimension spacing g with sqrt(sum (g_i/2)^2) <= h: g = 2h/sqrt(d).
        let g = 2.0 * h / (d as f64).sqrt();
        let mut points_per_dim = Vec::with_capacity(d);
        let mut radius_sq = 0.0;
        for i in 0..d {
            let w = self.width(i);
            if w <= 0.0 {
                points_per_dim.push(vec![self.low[i]]);
                continue;
            }
            let segments = (w / g).ceil().max(1.0) as usize;
            let pts: Vec<f64> = (0..=segments)
                .map(|k| self.low[i] + w * (k as f64) / (segments as f64))
                .collect();
            let half = w / (2.0 * segments as f64);
            radius_sq += half * half;
            points_per_dim.push(pts);
        }
        Net { points_per_dim, covering_radius: radius_sq.sqrt() }
    }
}

/// A finite covering net of a box, as a per-dimension grid.
#[derive(Debug, Clone)]
pub struct Net {
    pub points_per_dim: Vec<Vec<f64>>,
    /// Every box point is within this Euclidean distance of some net point.
    pub covering_radius: f64,
}

impl Net {
    pub fn len(&self) -> usize {
        self.points_per_dim.iter().map(|p| p.len()).product::<usize>().max(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Iterate over all net points in lexicographic order.
    pub fn iter(&self) -> NetIter<'_> {
        NetIter { net: self, index: vec![0; self.points_per_dim.len()], done: false }
    }
}

pub struct NetIter<'a> {
    net: &'a Net,
    index: Vec<usize>,
    done: bool,
}

impl<'a> Iterator for NetIter<'a> {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.done {
            return None;
        }
        let point: Vec<f64> = self
            .index
            .iter()
            .enumerate()
            .map(|(d, &i)| self.net.points_per_dim[d][i])
            .collect();
        // Advance the mixed-radix counter.
        let mut d = 0;
        loop {
            if d == self.index.len() {
                self.done = true;
                break;
            }
            self.index[d] += 1;
            if self.index[d] < self.net.points_per_dim[d].len() {
                break;
            }
            self.index[d] = 0;
            d += 1;
        }
        Some(point)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn state_distance_basics() {
        let a = StatePoint::new(vec![0.0]);
        let b = StatePoint::new(vec![0.5]);
        assert_eq!(dist_state(&a, &a).unwrap(), 0.0);
        assert_eq!(dist_state(&a, &b).unwrap(), 0.5);
        let c = StatePoint::new(vec![0.0, 0.0]);
        let d = StatePoint::new(vec![3.0, 4.0]);
        assert_eq!(dist_state(&c, &d).unwrap(), 5.0);
    }

    #[test]
    fn pair_distance_is_sum() {
        let s1 = StatePoint::new(vec![0.0]);
        let s2 = StatePoint::new(vec![0.2]);
        let a1 = ActionPoint::new(vec![0.0]);
        let a2 = ActionPoint::new(vec![0.3]);
        assert_eq!(dist_pair((&s1, &a1), (&s1, &a1)).unwrap(), 0.0);
        assert!((dist_pair((&s1, &a1), (&s1, &a2)).unwrap() - 0.3).abs() < 1e-15);
        assert!((dist_pair((&s1, &a1), (&s2, &a2)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tags_use_discrete_metric() {
        let a = StatePoint::tagged(vec![0.0], 1);
        let b = StatePoint::tagged(vec![0.0], 2);
        let c = StatePoint::new(vec![0.0]);
        assert_eq!(dist_state(&a, &b).unwrap(), 1.0);
        assert_eq!(dist_state(&a, &c).unwrap(), 1.0);
        assert_eq!(dist_state(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = StatePoint::new(vec![0.0]);
        let b = StatePoint::new(vec![0.0, 1.0]);
        assert!(dist_state(&a, &b).is_err());
    }

    #[test]
    fn net_covers_box() {
        let b = BoxBounds::new(vec![-1.0, 0.0], vec![1.0, 0.5]).unwrap();
        let net = b.net(0.05);
        assert!(net.covering_radius <= 0.05);
        // Probe random points; each must be within the covering radius of the net.
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let t = i as f64 / 199.0;
            let p = [b.low[0] + 2.0 * t, b.low[1] + 0.5 * (1.0 - t)];
            let best = net
                .iter()
                .map(|q| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
        assert!(worst <= net.covering_radius + 1e-12);
    }

    #[test]
    fn degenerate_net_is_single_point() {
        let b = BoxBounds::point(&[0.3, 0.7]);
        let net = b.net(0.1);
        assert_eq!(net.len(), 1);
        assert_eq!(net.iter().next().unwrap(), vec![0.3, 0.7]);
    }

    proptest! {
        // Metric axioms for the combined coordinate + tag metric.
        #[test]
        fn metric_axioms(
            xs in proptest::collection::vec(-10.0f64..10.0, 3),
            ys in proptest::collection::vec(-10.0f64..10.0, 3),
            zs in proptest::collection::vec(-10.0f64..10.0, 3),
            tx in 0i64..3, ty in 0i64..3, tz in 0i64..3,
        ) {
            let a = StatePoint::tagged(xs, tx);
            let b = StatePoint::tagged(ys, ty);
            let c = StatePoint::tagged(zs, tz);
            let ab = dist_state(&a, &b).unwrap();
            let ba = dist_state(&b, &a).unwrap();
            let ac = dist_state(&a, &c).unwrap();
            let cb = dist_state(&c, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
