//! Incrementally painted grid cache of the state-action bound envelopes,
//! used to keep integrand evaluation cheap during expectation backups.
//!
//! For models that declare a shared finite action list, the envelope value
//! of (s, a) depends on records only through `value -/+ C * (d_S + d_Act)`.
//! The cache keeps, per action, the exact envelope values on a regular node
//! grid over the primary (untagged) state box. Every accepted record update
//! paints its influence region onto the grids; since records evolve
//! monotonically, painted values never need invalidation. Reads extend the
//! nearest node's value by `C * distance`, which is sound in both directions
//! and off by at most `C * covering_radius` from the exact envelope.

use crate::model::MdpModel;
use crate::space::{ActionPoint, BoxBounds, StatePoint};
use crate::store::{RecordScope, SampleRecord};

pub(crate) struct ValueCache {
    actions: Vec<ActionPoint>,
    axes: Vec<Vec<f64>>,
    counts: Vec<usize>,
    /// Per action: lower and upper node values, row-major over `counts`.
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
    /// Region id per node when the model is partitioned.
    regions: Option<Vec<u32>>,
    /// Largest distance from any box point to its nearest node.
    covering_radius: f64,
    /// Per-dimension node spacing.
    spacing: Vec<f64>,
    constant: f64,
    bounds: BoxBounds,
}

impl ValueCache {
    /// Builds a cache able to answer evaluations with one-sided error at most
    /// `target_error` (via `C * covering_radius <= target_error`), subject to
    /// a node-count cap. Returns None when the model does not declare shared
    /// actions or the box is degenerate.
    pub(crate) fn build(model: &MdpModel, target_error: f64, max_nodes: usize) -> Option<Self> {
        let actions = model.shared_actions.clone()?;
        if actions.is_empty() {
            return None;
        }
        let bounds = model.primary_box().clone();
        let dims: Vec<usize> = (0..bounds.dim()).filter(|&i| bounds.width(i) > 0.0).collect();
        if dims.is_empty() {
            return None;
        }
        let constant = model
            .partition
            .as_ref()
            .map(|p| p.constants.iter().map(|(_, c)| *c).fold(model.lipschitz_pair, f64::max))
            .unwrap_or(model.lipschitz_pair);
        if constant <= 0.0 {
            return None;
        }
        let d = dims.len() as f64;
        // Covering radius r with C * r <= target_error.
        let r = (target_error / constant).max(1e-12);
        let edge = 2.0 * r / d.sqrt();
        let mut counts = vec![1usize; bounds.dim()];
        let mut total: usize = 1;
        for &i in &dims {
            let c = ((bounds.width(i) / edge).ceil() as usize).clamp(1, 1 << 14) + 1;
            counts[i] = c;
            total = total.saturating_mul(c);
        }
        // Respect the node cap by coarsening uniformly; reads that then miss
        // the requested precision fall back to exact envelope queries.
        if total > max_nodes {
            let shrink = (total as f64 / max_nodes as f64).powf(1.0 / d);
            total = 1;
            for &i in &dims {
                counts[i] = (((counts[i] - 1) as f64 / shrink).floor() as usize).max(1) + 1;
                total = total.saturating_mul(counts[i]);
            }
        }
        let axes: Vec<Vec<f64>> = (0..bounds.dim())
            .map(|i| {
                if counts[i] == 1 {
                    vec![bounds.low[i]]
                } else {
                    (0..counts[i])
                        .map(|k| {
                            bounds.low[i] + bounds.width(i) * k as f64 / (counts[i] - 1) as f64
                        })
                        .collect()
                }
            })
            .collect();
        let spacing: Vec<f64> = (0..bounds.dim())
            .map(|i| if counts[i] > 1 { bounds.width(i) / (counts[i] - 1) as f64 } else { 0.0 })
            .collect();
        let covering_radius =
            spacing.iter().map(|s| (s / 2.0) * (s / 2.0)).sum::<f64>().sqrt();
        let regions = model.partition.as_ref().map(|p| {
            let mut out = Vec::with_capacity(total);
            let mut idx = vec![0usize; counts.len()];
            loop {
                let coords: Vec<f64> =
                    idx.iter().enumerate().map(|(i, &k)| axes[i][k]).collect();
                out.push((p.region_of)(&StatePoint { coords, tag: None }));
                if !advance(&mut idx, &counts) {
                    break;
                }
            }
            out
        });
        Some(ValueCache {
            lower: vec![vec![0.0; total]; actions.len()],
            upper: vec![vec![1.0; total]; actions.len()],
            actions,
            axes,
            counts,
            regions,
            covering_radius,
            spacing,
            constant,
            bounds,
        })
    }

    pub(crate) fn covering_radius(&self) -> f64 {
        self.covering_radius
    }

    pub(crate) fn constant(&self) -> f64 {
        self.constant
    }

    fn flat(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (i, &k) in idx.iter().enumerate() {
            flat += k * stride;
            stride *= self.counts[i];
        }
        flat
    }

    fn nearest_idx(&self, coords: &[f64]) -> Vec<usize> {
        coords
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if self.counts[i] == 1 {
                    0
                } else {
                    let t = (x - self.bounds.low[i]) / self.spacing[i];
                    (t.round() as i64).clamp(0, self.counts[i] as i64 - 1) as usize
                }
            })
            .collect()
    }

    fn node_coords(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().enumerate().map(|(i, &k)| self.axes[i][k]).collect()
    }

    /// Paints the influence of an accepted record onto the node grids. Sound
    /// because stored record values are monotone: node values only tighten.
    pub(crate) fn paint(&mut self, rec: &SampleRecord, model: &MdpModel) {
        if rec.state.tag.is_some() {
            // Tagged states are at discrete distance >= 1 from every cached
            // node; with C >= value range their influence cannot tighten
            // anything, and below that the raw fallback still answers
            // exactly. Painting skips them.
            return;
        }
        let c = model.pair_constant(rec.region);
        for (ai, action) in self.actions.clone().iter().enumerate() {
            let offset = match rec.scope {
                RecordScope::State => 0.0,
                RecordScope::Pair => action_distance(&rec.action, action),
            };
            // Lower side: candidate = rec.lower - c * (d_S + offset) > 0.
            let reach_l = rec.lower / c - offset;
            if reach_l > 0.0 {
                self.paint_one(ai, true, rec, c, offset, reach_l);
            }
            // Upper side: candidate = rec.upper + c * (d_S + offset) < 1.
            let reach_u = (1.0 - rec.upper) / c - offset;
            if reach_u > 0.0 {
                self.paint_one(ai, false, rec, c, offset, reach_u);
            }
        }
    }

    fn paint_one(
        &mut self,
        action_idx: usize,
        lower_side: bool,
        rec: &SampleRecord,
        c: f64,
        offset: f64,
        reach: f64,
    ) {
        // Node index ranges covering the L-infinity box around the record.
        let lo_hi: Vec<(usize, usize)> = (0..self.counts.len())
            .map(|i| {
                if self.counts[i] == 1 {
                    (0, 0)
                } else {
                    let x = rec.state.coords[i];
                    let lo = ((x - reach - self.bounds.low[i]) / self.spacing[i]).floor() as i64;
                    let hi = ((x + reach - self.bounds.low[i]) / self.spacing[i]).ceil() as i64;
                    (
                        lo.clamp(0, self.counts[i] as i64 - 1) as usize,
                        hi.clamp(0, self.counts[i] as i64 - 1) as usize,
                    )
                }
            })
            .collect();
        let mut idx: Vec<usize> = lo_hi.iter().map(|&(l, _)| l).collect();
        loop {
            let flat = self.flat(&idx);
            let eligible = match (&self.regions, rec.region) {
                (Some(regions), Some(r)) => regions[flat] == r,
                _ => true,
            };
            if eligible {
                let node = self.node_coords(&idx);
                let d: f64 = node
                    .iter()
                    .zip(&rec.state.coords)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if lower_side {
                    let cand = rec.lower - c * (d + offset);
                    let slot = &mut self.lower[action_idx][flat];
                    if cand > *slot {
                        *slot = cand;
                    }
                } else {
                    let cand = rec.upper + c * (d + offset);
                    let slot = &mut self.upper[action_idx][flat];
                    if cand < *slot {
                        *slot = cand;
                    }
                }
            }
            // Advance within the index window.
            let mut i = 0;
            loop {
                if i == idx.len() {
                    return;
                }
                idx[i] += 1;
                if idx[i] <= lo_hi[i].1 {
                    break;
                }
                idx[i] = lo_hi[i].0;
                i += 1;
            }
        }
    }

    /// Cached state-level lower bound at `s`: max over actions of the node
    /// envelope extended by `C * distance`. One-sided error at most
    /// `C * covering_radius` relative to the exact envelope, and always sound
    /// (never above it). Returns None for states the grid does not cover or
    /// when the node's region differs from the query's.
    pub(crate) fn lower_state(&self, s: &StatePoint, model: &MdpModel) -> Option<f64> {
        self.read(s, model, true)
    }

    /// Dual upper read; never below the exact envelope.
    pub(crate) fn upper_state(&self, s: &StatePoint, model: &MdpModel) -> Option<f64> {
        self.read(s, model, false)
    }

    /// Cached per-action upper values, for guidance.
    pub(crate) fn action_uppers(&self, s: &StatePoint) -> Option<Vec<(ActionPoint, f64)>> {
        if s.tag.is_some() || !self.bounds.contains(&s.coords, 1e-9) {
            return None;
        }
        let idx = self.nearest_idx(&s.coords);
        let flat = self.flat(&idx);
        let node = self.node_coords(&idx);
        let d: f64 = node
            .iter()
            .zip(&s.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Some(
            self.actions
                .iter()
                .enumerate()
                .map(|(ai, a)| {
                    (a.clone(), (self.upper[ai][flat] + self.constant * d).min(1.0))
                })
                .collect(),
        )
    }

    fn read(&self, s: &StatePoint, model: &MdpModel, lower_side: bool) -> Option<f64> {
        if s.tag.is_some() || !self.bounds.contains(&s.coords, 1e-9) {
            return None;
        }
        let idx = self.nearest_idx(&s.coords);
        let flat = self.flat(&idx);
        if let Some(regions) = &self.regions {
            let query_region = model.region_of(s)?;
            if regions[flat] != query_region {
                return None;
            }
        }
        let node = self.node_coords(&idx);
        let d: f64 = node
            .iter()
            .zip(&s.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let slack = self.constant * d;
        let v = if lower_side {
            (0..self.actions.len())
                .map(|ai| self.lower[ai][flat])
                .fold(f64::NEG_INFINITY, f64::max)
                - slack
        } else {
            (0..self.actions.len())
                .map(|ai| self.upper[ai][flat])
                .fold(f64::NEG_INFINITY, f64::max)
                + slack
        };
        Some(v.clamp(0.0, 1.0))
    }
}

fn action_distance(a: &ActionPoint, b: &ActionPoint) -> f64 {
    let coord: f64 = a
        .coords
        .iter()
        .zip(&b.coords)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    coord + if a.tag == b.tag { 0.0 } else { 1.0 }
}

fn advance(idx: &mut [usize], counts: &[usize]) -> bool {
    let mut i = 0;
    loop {
        if i == idx.len() {
            return false;
        }
        idx[i] += 1;
        if idx[i] < counts[i] {
            return true;
        }
        idx[i] = 0;
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSet, Kernel, TagRegion};
    use crate::store::{BoundStore, StoreConfig};
    use std::sync::Arc;

    fn model_2a() -> MdpModel {
        MdpModel {
            state_space: vec![TagRegion {
                tag: None,
                bounds: BoxBounds::new(vec![0.0], vec![1.0]).unwrap(),
            }],
            actions: Arc::new(|_| {
                ActionSet::Finite(vec![ActionPoint::label(0), ActionPoint::label(1)])
            }),
            kernel: Arc::new(|s, _| Kernel::dirac(s.clone())),
            target: Arc::new(|_| false),
            sink: Arc::new(|_| false),
            target_margin: None,
            sink_margin: None,
            lipschitz_state: 2.0,
            lipschitz_pair: 2.0,
            partition: None,
            initial_state: StatePoint::new(vec![0.5]),
            sink_witness: None,
            shared_actions: Some(vec![ActionPoint::label(0), ActionPoint::label(1)]),
            fingerprint: "cache-test".into(),
        }
    }

    #[test]
    fn cache_tracks_exact_envelope_at_nodes() {
        let model = model_2a();
        let mut cache = ValueCache::build(&model, 0.01, 1 << 20).unwrap();
        let mut store = BoundStore::new(StoreConfig::new(2.0).with_bucket_edge(0.1));
        let updates: Vec<(f64, i64, f64, f64)> = vec![
            (0.2, 0, 0.6, 0.9),
            (0.8, 1, 0.4, 0.7),
            (0.5, 0, 0.5, 0.95),
            (0.2, 0, 0.7, 0.8),
        ];
        for (i, (x, tag, l, u)) in updates.iter().enumerate() {
            let s = StatePoint::new(vec![*x]);
            let a = ActionPoint::label(*tag);
            let out = store.record_update(&s, &a, *l, *u, i as u64).unwrap();
            let rec = store.records()[out.record_index].clone();
            cache.paint(&rec, &model);
        }
        store.record_target(&StatePoint::new(vec![0.95]), 9).unwrap();
        let rec = store.records().last().unwrap().clone();
        cache.paint(&rec, &model);

        // At every node, the cached values equal the exact state envelope.
        let actions = ActionSet::Finite(model.shared_actions.clone().unwrap());
        for k in 0..cache.counts[0] {
            let s = StatePoint::new(vec![cache.axes[0][k]]);
            let exact_l = store.lower_state(&s, &actions, 1e-9, 1 << 20).unwrap();
            let exact_u = store.upper_state(&s, &actions, 1e-9, 1 << 20).unwrap();
            let got_l = cache.lower_state(&s, &model).unwrap();
            let got_u = cache.upper_state(&s, &model).unwrap();
            assert!((got_l - exact_l).abs() < 1e-9, "node {k}: {got_l} vs {exact_l}");
            assert!((got_u - exact_u).abs() < 1e-9, "node {k}: {got_u} vs {exact_u}");
        }

        // Between nodes the cached reads are sound and within the slack.
        for i in 0..200 {
            let x = i as f64 / 199.0;
            let s = StatePoint::new(vec![x]);
            let exact_l = store.lower_state(&s, &actions, 1e-9, 1 << 20).unwrap();
            let exact_u = store.upper_state(&s, &actions, 1e-9, 1 << 20).unwrap();
            let got_l = cache.lower_state(&s, &model).unwrap();
            let got_u = cache.upper_state(&s, &model).unwrap();
            let slack = cache.constant() * cache.covering_radius() + 1e-9;
            assert!(got_l <= exact_l + 1e-9, "lower unsound at {x}");
            assert!(got_l >= exact_l - slack - 1e-9, "lower too loose at {x}");
            assert!(got_u >= exact_u - 1e-9, "upper unsound at {x}");
            assert!(got_u <= exact_u + slack + 1e-9, "upper too loose at {x}");
        }
    }
}
