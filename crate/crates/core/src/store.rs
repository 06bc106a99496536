//! The growing set of sampled state-action records with their lower/upper
//! values, answering Lipschitz-extrapolated envelope queries for arbitrary
//! pairs.
//!
//! The lower bound at a pair is the maximum over records of
//! `L - C * d((s,a), record)` floored at 0 (0 when the store is empty); the
//! upper bound is the dual minimum capped at 1. Records are updated with the
//! max/min of the old and the newly computed value, so both envelopes evolve
//! monotonically. Target and sink rules store state-scoped records that
//! constrain every action of their state at once.

use std::collections::HashMap;

use crate::approx::{approx_max, ApproxRequest, Direction};
use crate::error::{ApproxError, StoreError};
use crate::model::{ActionSet, Partition};
use crate::space::{ActionPoint, StatePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordScope {
    /// Bounds one state-action pair; envelope terms use the pair metric.
    Pair,
    /// Bounds every action of one state (target/sink rule); envelope terms
    /// use the state metric only.
    State,
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub scope: RecordScope,
    pub state: StatePoint,
    /// Canonical action for state-scoped records; queried action distance is
    /// not applied to them.
    pub action: ActionPoint,
    pub lower: f64,
    pub upper: f64,
    pub region: Option<u32>,
    /// Iteration index of the last merge into this record.
    pub step: u64,
}

/// Post-state of an accepted update: the record it landed in and the merged
/// bounds stored there.
#[derive(Debug, Clone, Copy)]
pub struct MergeOutcome {
    pub record_index: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone)]
pub struct StoreConfig {
    /// Global pair-metric Lipschitz constant of the value function.
    pub pair_lipschitz: f64,
    /// Records closer than this (same scope and region) merge instead of
    /// inserting; pure duplicate suppression by default.
    pub dedupe_radius: f64,
    /// Edge length of the spatial index buckets.
    pub bucket_edge: f64,
    pub partition: Option<Partition>,
}

impl StoreConfig {
    pub fn new(pair_lipschitz: f64) -> Self {
        let dedupe_radius = 1e-9;
        StoreConfig {
            pair_lipschitz,
            dedupe_radius,
            // The dedupe-derived edge is kept as a floor; callers working on
            // a concrete model should set an edge near 1/16 of its diameter.
            bucket_edge: dedupe_radius * 8.0,
            partition: None,
        }
    }

    pub fn with_bucket_edge(mut self, edge: f64) -> Self {
        self.bucket_edge = edge.max(self.dedupe_radius * 8.0);
        self
    }

    pub fn with_partition(mut self, partition: Partition) -> Self {
        self.partition = Some(partition);
        self
    }

    pub fn with_dedupe_radius(mut self, r: f64) -> Self {
        self.dedupe_radius = r;
        self
    }
}

type BucketKey = (Vec<i64>, Option<i64>, Option<i64>);

#[derive(Debug, Default)]
struct Bucket {
    indices: Vec<usize>,
    max_lower: f64,
    min_upper: f64,
}

/// Grid-bucket index over record coordinates. Aggregates per bucket are
/// monotone (max of lowers, min of uppers), so they never need recomputation.
struct GridIndex {
    edge: f64,
    buckets: HashMap<BucketKey, Bucket>,
}

impl GridIndex {
    fn new(edge: f64) -> Self {
        GridIndex { edge: edge.max(f64::MIN_POSITIVE), buckets: HashMap::new() }
    }

    fn key_cells(&self, coords: &[f64]) -> Vec<i64> {
        coords.iter().map(|&x| (x / self.edge).floor() as i64).collect()
    }

    fn insert(&mut self, key: BucketKey, idx: usize, lower: f64, upper: f64) {
        let b = self.buckets.entry(key).or_insert(Bucket {
            indices: Vec::new(),
            max_lower: f64::NEG_INFINITY,
            min_upper: f64::INFINITY,
        });
        b.indices.push(idx);
        b.max_lower = b.max_lower.max(lower);
        b.min_upper = b.min_upper.min(upper);
    }

    fn update_aggregates(&mut self, key: &BucketKey, lower: f64, upper: f64) {
        if let Some(b) = self.buckets.get_mut(key) {
            b.max_lower = b.max_lower.max(lower);
            b.min_upper = b.min_upper.min(upper);
        }
    }

    /// Lower bound on the Euclidean distance from `coords` to the bucket box.
    fn box_distance(&self, coords: &[f64], cells: &[i64]) -> f64 {
        let mut sq = 0.0;
        for (i, &c) in cells.iter().enumerate() {
            let lo = c as f64 * self.edge;
            let hi = lo + self.edge;
            let x = coords[i];
            let d = if x < lo {
                lo - x
            } else if x > hi {
                x - hi
            } else {
                0.0
            };
            sq += d * d;
        }
        sq.sqrt()
    }
}

/// The envelope store.
pub struct BoundStore {
    records: Vec<SampleRecord>,
    config: StoreConfig,
    /// Minimum over all region constants, used for certified index pruning.
    min_constant: f64,
    /// Maximum over all region constants; the action-max objective is
    /// Lipschitz with this constant.
    max_constant: f64,
    pair_index: GridIndex,
    state_index: GridIndex,
    version: u64,
}

impl BoundStore {
    pub fn new(config: StoreConfig) -> Self {
        let (mut min_c, mut max_c) = (config.pair_lipschitz, config.pair_lipschitz);
        if let Some(p) = &config.partition {
            for (_, c) in &p.constants {
                min_c = min_c.min(*c);
                max_c = max_c.max(*c);
            }
        }
        let edge = config.bucket_edge;
        BoundStore {
            records: Vec::new(),
            config,
            min_constant: min_c,
            max_constant: max_c,
            pair_index: GridIndex::new(edge),
            state_index: GridIndex::new(edge),
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    /// Monotone counter bumped on every accepted update; lets read-side
    /// caches detect changes.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn pair_lipschitz(&self) -> f64 {
        self.config.pair_lipschitz
    }

    pub fn max_constant(&self) -> f64 {
        self.max_constant
    }

    pub fn partition(&self) -> Option<&Partition> {
        self.config.partition.as_ref()
    }

    fn region_of(&self, s: &StatePoint) -> Option<u32> {
        self.config.partition.as_ref().map(|p| (p.region_of)(s))
    }

    fn constant_of(&self, region: Option<u32>) -> f64 {
        match (&self.config.partition, region) {
            (Some(p), Some(r)) => p.constant_for(r, self.config.pair_lipschitz),
            _ => self.config.pair_lipschitz,
        }
    }

    fn pair_key(&self, s: &StatePoint, a: &ActionPoint) -> BucketKey {
        let mut coords = Vec::with_capacity(s.coords.len() + a.coords.len());
        coords.extend_from_slice(&s.coords);
        coords.extend_from_slice(&a.coords);
        (self.pair_index.key_cells(&coords), s.tag, a.tag)
    }

    fn state_key(&self, s: &StatePoint) -> BucketKey {
        (self.state_index.key_cells(&s.coords), s.tag, None)
    }

    /// Distance from record `r` to the query, under the metric of the
    /// record's scope.
    fn record_distance(r: &SampleRecord, s: &StatePoint, a: &ActionPoint) -> f64 {
        let ds = euclid(&r.state.coords, &s.coords) + tag_term(r.state.tag, s.tag);
        match r.scope {
            RecordScope::State => ds,
            RecordScope::Pair => {
                ds + euclid(&r.action.coords, &a.coords) + tag_term(r.action.tag, a.tag)
            }
        }
    }

    /// Lipschitz lower envelope at a pair: max over eligible records of
    /// `lower - C * d`, floored at 0; 0 for an empty store.
    pub fn lower_at(&self, s: &StatePoint, a: &ActionPoint) -> f64 {
        self.query(s, a, Direction::Under)
    }

    /// Dual upper envelope, capped at 1; 1 for an empty store.
    pub fn upper_at(&self, s: &StatePoint, a: &ActionPoint) -> f64 {
        self.query(s, a, Direction::Over)
    }

    fn query(&self, s: &StatePoint, a: &ActionPoint, dir: Direction) -> f64 {
        let region = self.region_of(s);
        let mut best = match dir {
            Direction::Under => 0.0,
            Direction::Over => 1.0,
        };
        // State-scoped records: state metric only.
        best = self.sweep(&self.state_index, s, a, region, dir, best, true);
        // Pair-scoped records.
        best = self.sweep(&self.pair_index, s, a, region, dir, best, false);
        best
    }

    fn sweep(
        &self,
        index: &GridIndex,
        s: &StatePoint,
        a: &ActionPoint,
        region: Option<u32>,
        dir: Direction,
        mut best: f64,
        state_scope: bool,
    ) -> f64 {
        let coords: Vec<f64> = if state_scope {
            s.coords.clone()
        } else {
            s.coords.iter().chain(a.coords.iter()).cloned().collect()
        };
        for (key, bucket) in &index.buckets {
            // Tag mismatches contribute a fixed discrete distance.
            let mut tag_d = tag_term(key.1, s.tag);
            if !state_scope {
                tag_d += tag_term(key.2, a.tag);
            }
            let dmin = index.box_distance(&coords, &key.0) + tag_d;
            let useful = match dir {
                Direction::Under => bucket.max_lower - self.min_constant * dmin > best,
                Direction::Over => bucket.min_upper + self.min_constant * dmin < best,
            };
            if !useful {
                continue;
            }
            for &i in &bucket.indices {
                let r = &self.records[i];
                if region.is_some() && r.region != region {
                    continue;
                }
                let c = self.constant_of(r.region);
                let d = Self::record_distance(r, s, a);
                match dir {
                    Direction::Under => best = best.max(r.lower - c * d),
                    Direction::Over => best = best.min(r.upper + c * d),
                }
            }
        }
        best
    }

    /// Reference implementation of `lower_at` without the spatial index.
    pub fn lower_at_unindexed(&self, s: &StatePoint, a: &ActionPoint) -> f64 {
        self.query_linear(s, a, Direction::Under)
    }

    /// Reference implementation of `upper_at` without the spatial index.
    pub fn upper_at_unindexed(&self, s: &StatePoint, a: &ActionPoint) -> f64 {
        self.query_linear(s, a, Direction::Over)
    }

    fn query_linear(&self, s: &StatePoint, a: &ActionPoint, dir: Direction) -> f64 {
        let region = self.region_of(s);
        let mut best: f64 = match dir {
            Direction::Under => 0.0,
            Direction::Over => 1.0,
        };
        for r in &self.records {
            if region.is_some() && r.region != region {
                continue;
            }
            let c = self.constant_of(r.region);
            let d = Self::record_distance(r, s, a);
            match dir {
                Direction::Under => best = best.max(r.lower - c * d),
                Direction::Over => best = best.min(r.upper + c * d),
            }
        }
        best
    }

    /// Merges new bounds for a pair into the store: an existing record within
    /// the dedupe radius absorbs them via max/min, otherwise a fresh record
    /// is inserted. A merged lower exceeding the merged upper signals an
    /// unsound configuration and is rejected with a diagnostic.
    pub fn record_update(
        &mut self,
        s: &StatePoint,
        a: &ActionPoint,
        new_lower: f64,
        new_upper: f64,
        step: u64,
    ) -> Result<MergeOutcome, StoreError> {
        self.merge(RecordScope::Pair, s, a.clone(), new_lower, new_upper, step)
    }

    /// Target rule: every action of `s` has value 1.
    pub fn record_target(&mut self, s: &StatePoint, step: u64) -> Result<MergeOutcome, StoreError> {
        self.merge(RecordScope::State, s, ActionPoint::label(0), 1.0, 1.0, step)
    }

    /// Sink rule: every action of `s` has value 0.
    pub fn record_sink(&mut self, s: &StatePoint, step: u64) -> Result<MergeOutcome, StoreError> {
        self.merge(RecordScope::State, s, ActionPoint::label(0), 0.0, 0.0, step)
    }

    fn merge(
        &mut self,
        scope: RecordScope,
        s: &StatePoint,
        a: ActionPoint,
        new_lower: f64,
        new_upper: f64,
        step: u64,
    ) -> Result<MergeOutcome, StoreError> {
        for v in [new_lower, new_upper] {
            if !(0.0..=1.0).contains(&v) {
                return Err(StoreError::BoundOutOfRange(v));
            }
        }
        let region = self.region_of(s);
        let record_index;
        if let Some(i) = self.find_mergeable(scope, s, &a, region) {
            let merged_lower = self.records[i].lower.max(new_lower);
            let merged_upper = self.records[i].upper.min(new_upper);
            if merged_lower > merged_upper + 1e-12 {
                return Err(StoreError::BoundCrossing {
                    state: s.coords.clone(),
                    action: a.coords.clone(),
                    lower: merged_lower,
                    upper: merged_upper,
                });
            }
            let r = &mut self.records[i];
            r.lower = merged_lower;
            r.upper = merged_upper.max(merged_lower);
            r.step = step;
            let key = match scope {
                RecordScope::Pair => self.pair_key(s, &a),
                RecordScope::State => self.state_key(s),
            };
            let index = match scope {
                RecordScope::Pair => &mut self.pair_index,
                RecordScope::State => &mut self.state_index,
            };
            index.update_aggregates(&key, merged_lower, merged_upper);
            record_index = i;
        } else {
            if new_lower > new_upper + 1e-12 {
                return Err(StoreError::BoundCrossing {
                    state: s.coords.clone(),
                    action: a.coords.clone(),
                    lower: new_lower,
                    upper: new_upper,
                });
            }
            let idx = self.records.len();
            let rec = SampleRecord {
                scope,
                state: s.clone(),
                action: a,
                lower: new_lower,
                upper: new_upper.max(new_lower),
                region,
                step,
            };
            let key = match scope {
                RecordScope::Pair => self.pair_key(&rec.state, &rec.action),
                RecordScope::State => self.state_key(&rec.state),
            };
            let index = match scope {
                RecordScope::Pair => &mut self.pair_index,
                RecordScope::State => &mut self.state_index,
            };
            index.insert(key, idx, rec.lower, rec.upper);
            self.records.push(rec);
            record_index = idx;
        }
        self.version += 1;
        let r = &self.records[record_index];
        Ok(MergeOutcome { record_index, lower: r.lower, upper: r.upper })
    }

    /// Restores a record verbatim (snapshot loading); subject to the same
    /// merge semantics.
    pub fn restore_record(&mut self, rec: &SampleRecord) -> Result<MergeOutcome, StoreError> {
        self.merge(rec.scope, &rec.state, rec.action.clone(), rec.lower, rec.upper, rec.step)
    }

    fn find_mergeable(
        &self,
        scope: RecordScope,
        s: &StatePoint,
        a: &ActionPoint,
        region: Option<u32>,
    ) -> Option<usize> {
        let radius = self.config.dedupe_radius;
        let index = match scope {
            RecordScope::Pair => &self.pair_index,
            RecordScope::State => &self.state_index,
        };
        let coords: Vec<f64> = match scope {
            RecordScope::Pair => s.coords.iter().chain(a.coords.iter()).cloned().collect(),
            RecordScope::State => s.coords.clone(),
        };
        if coords.is_empty() {
            // Tag-only points: the single bucket per tag pair.
            let key: BucketKey =
                (Vec::new(), s.tag, if scope == RecordScope::Pair { a.tag } else { None });
            return self.scan_bucket(index, &key, scope, s, a, region, radius);
        }
        // Enumerate buckets overlapping the dedupe ball.
        let lo: Vec<i64> =
            coords.iter().map(|&x| ((x - radius) / index.edge).floor() as i64).collect();
        let hi: Vec<i64> =
            coords.iter().map(|&x| ((x + radius) / index.edge).floor() as i64).collect();
        let mut cell = lo.clone();
        loop {
            let key: BucketKey = (
                cell.clone(),
                s.tag,
                if scope == RecordScope::Pair { a.tag } else { None },
            );
            if let Some(found) = self.scan_bucket(index, &key, scope, s, a, region, radius) {
                return Some(found);
            }
            let mut d = 0;
            loop {
                if d == cell.len() {
                    return None;
                }
                cell[d] += 1;
                if cell[d] <= hi[d] {
                    break;
                }
                cell[d] = lo[d];
                d += 1;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_bucket(
        &self,
        index: &GridIndex,
        key: &BucketKey,
        scope: RecordScope,
        s: &StatePoint,
        a: &ActionPoint,
        region: Option<u32>,
        radius: f64,
    ) -> Option<usize> {
        let bucket = index.buckets.get(key)?;
        bucket
            .indices
            .iter()
            .copied()
            .find(|&i| {
                let r = &self.records[i];
                r.scope == scope
                    && r.region == region
                    && Self::record_distance(r, s, a) <= radius
            })
    }

    /// Certified state-level lower bound: under-approximates
    /// `max_a lower_at(s, a)` within `precision`.
    pub fn lower_state(
        &self,
        s: &StatePoint,
        actions: &ActionSet,
        precision: f64,
        budget: usize,
    ) -> Result<f64, ApproxError> {
        let mut req = ApproxRequest::new(Direction::Under, precision, self.max_constant);
        req.budget = budget;
        approx_max(actions, |a| Ok(self.lower_at(s, a)), &req)
    }

    /// Certified state-level upper bound: over-approximates
    /// `max_a upper_at(s, a)` within `precision`.
    pub fn upper_state(
        &self,
        s: &StatePoint,
        actions: &ActionSet,
        precision: f64,
        budget: usize,
    ) -> Result<f64, ApproxError> {
        let mut req = ApproxRequest::new(Direction::Over, precision, self.max_constant);
        req.budget = budget;
        approx_max(actions, |a| Ok(self.upper_at(s, a)), &req)
    }

    /// Actions whose upper envelope is within `tolerance` of the best one.
    /// Exact for finite action sets (ties included); for box sets, the
    /// tolerance-optimal points of a tolerance-spaced net, which
    /// over-approximates the optimal set up to the net resolution.
    pub fn greedy_actions(
        &self,
        s: &StatePoint,
        actions: &ActionSet,
        tolerance: f64,
    ) -> Vec<ActionPoint> {
        let candidates = match actions {
            ActionSet::Finite(v) => v.clone(),
            ActionSet::Box(_) => {
                let h = tolerance / (2.0 * self.max_constant.max(1e-12));
                actions.dense_net(h)
            }
        };
        let scored: Vec<(ActionPoint, f64)> =
            candidates.into_iter().map(|a| (a.clone(), self.upper_at(s, &a))).collect();
        let best = scored.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        scored
            .into_iter()
            .filter(|(_, v)| *v >= best - tolerance)
            .map(|(a, _)| a)
            .collect()
    }
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[inline]
fn tag_term(a: Option<i64>, b: Option<i64>) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn store(c: f64) -> BoundStore {
        BoundStore::new(StoreConfig::new(c).with_bucket_edge(0.25))
    }

    fn s1(x: f64) -> StatePoint {
        StatePoint::new(vec![x])
    }

    fn a0() -> ActionPoint {
        ActionPoint::label(0)
    }

    #[test]
    fn empty_store_conventions() {
        let st = store(1.0);
        assert_eq!(st.lower_at(&s1(0.3), &a0()), 0.0);
        assert_eq!(st.upper_at(&s1(0.3), &a0()), 1.0);
    }

    #[test]
    fn lower_envelope_matches_two_point_extrapolation() {
        // Records at x = 0.4 (L 0.3) and x = 0.8 (L 0.4) with constant 1 on a
        // state-only model: the envelope passes through (0.55, 0.15) and
        // (0.65, 0.25).
        let mut st = store(1.0);
        st.record_update(&s1(0.4), &a0(), 0.3, 1.0, 1).unwrap();
        st.record_update(&s1(0.8), &a0(), 0.4, 1.0, 2).unwrap();
        assert!((st.lower_at(&s1(0.55), &a0()) - 0.15).abs() < 1e-12);
        assert!((st.lower_at(&s1(0.65), &a0()) - 0.25).abs() < 1e-12);
        // A stored value may lie below the envelope built from its neighbours.
        st.record_update(&s1(0.65), &a0(), 0.1, 1.0, 3).unwrap();
        assert!((st.lower_at(&s1(0.65), &a0()) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn upper_envelope_formula_and_cap() {
        let mut st = store(1.0);
        st.record_update(&s1(0.5), &a0(), 0.0, 0.5, 1).unwrap();
        let q = st.upper_at(&s1(0.7), &a0());
        assert!((q - 0.7).abs() < 1e-12, "got {q}");
        let far = st.upper_at(&s1(-0.4), &a0());
        assert_eq!(far, 1.0);
    }

    #[test]
    fn merge_keeps_monotone_bounds() {
        let mut st = store(1.0);
        st.record_update(&s1(0.5), &a0(), 0.4, 0.9, 1).unwrap();
        assert_eq!(st.len(), 1);
        // Weaker values do not regress the record.
        st.record_update(&s1(0.5), &a0(), 0.2, 0.95, 2).unwrap();
        assert_eq!(st.len(), 1);
        assert!((st.lower_at(&s1(0.5), &a0()) - 0.4).abs() < 1e-12);
        assert!((st.upper_at(&s1(0.5), &a0()) - 0.9).abs() < 1e-12);
        // Two updates within the dedupe radius merge.
        st.record_update(&s1(0.5 + 1e-12), &a0(), 0.5, 0.8, 3).unwrap();
        assert_eq!(st.len(), 1);
    }

    #[test]
    fn crossing_is_reported() {
        let mut st = store(1.0);
        st.record_update(&s1(0.5), &a0(), 0.1, 0.3, 1).unwrap();
        let err = st.record_update(&s1(0.5), &a0(), 0.8, 1.0, 2);
        assert!(matches!(err, Err(StoreError::BoundCrossing { .. })));
    }

    #[test]
    fn out_of_range_bounds_rejected() {
        let mut st = store(1.0);
        assert!(matches!(
            st.record_update(&s1(0.5), &a0(), -0.1, 0.5, 1),
            Err(StoreError::BoundOutOfRange(_))
        ));
        assert!(matches!(
            st.record_update(&s1(0.5), &a0(), 0.1, 1.5, 1),
            Err(StoreError::BoundOutOfRange(_))
        ));
    }

    #[test]
    fn state_scope_dominates_all_actions() {
        let mut st = store(1.0);
        st.record_target(&s1(0.9), 1).unwrap();
        for tag in 0..4 {
            let a = ActionPoint::label(tag);
            assert!((st.lower_at(&s1(0.9), &a) - 1.0).abs() < 1e-12);
            assert!((st.lower_at(&s1(0.7), &a) - 0.8).abs() < 1e-12);
        }
        st.record_sink(&s1(-0.9), 2).unwrap();
        assert_eq!(st.upper_at(&s1(-0.9), &a0()), 0.0);
        assert!((st.upper_at(&s1(-0.7), &a0()) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn monotone_under_replayed_updates() {
        let mut st = store(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probes: Vec<(StatePoint, ActionPoint)> = (0..100)
            .map(|_| (s1(rng.gen_range(-1.0..1.0)), ActionPoint::label(rng.gen_range(0..3))))
            .collect();
        let mut lowers: Vec<f64> = probes.iter().map(|(s, a)| st.lower_at(s, a)).collect();
        let mut uppers: Vec<f64> = probes.iter().map(|(s, a)| st.upper_at(s, a)).collect();
        for step in 0..300 {
            let s = s1(rng.gen_range(-1.0..1.0));
            let a = ActionPoint::label(rng.gen_range(0..3));
            let l: f64 = rng.gen();
            let u: f64 = rng.gen_range(l..=1.0);
            // Crossings from random values are irrelevant here.
            let _ = st.record_update(&s, &a, l, u, step);
            for (i, (ps, pa)) in probes.iter().enumerate() {
                let nl = st.lower_at(ps, pa);
                let nu = st.upper_at(ps, pa);
                assert!(nl >= lowers[i] - 1e-12, "lower regressed");
                assert!(nu <= uppers[i] + 1e-12, "upper regressed");
                lowers[i] = nl;
                uppers[i] = nu;
            }
        }
    }

    #[test]
    fn index_matches_linear_scan() {
        let mut st = BoundStore::new(StoreConfig::new(1.5).with_bucket_edge(0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for step in 0..500 {
            let s = StatePoint::new(vec![rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)]);
            let a = ActionPoint::new(vec![rng.gen_range(0.0..1.0)]);
            let l: f64 = rng.gen_range(0.0..0.9);
            let u: f64 = rng.gen_range(l..=1.0);
            let _ = st.record_update(&s, &a, l, u, step);
            if rng.gen_bool(0.05) {
                let _ = st.record_target(&s, step);
            }
        }
        for _ in 0..10_000 {
            let s = StatePoint::new(vec![rng.gen_range(-1.2..1.2), rng.gen_range(-0.2..2.2)]);
            let a = ActionPoint::new(vec![rng.gen_range(-0.2..1.2)]);
            let li = st.lower_at(&s, &a);
            let ll = st.lower_at_unindexed(&s, &a);
            assert!((li - ll).abs() < 1e-12, "lower {li} vs {ll}");
            let ui = st.upper_at(&s, &a);
            let ul = st.upper_at_unindexed(&s, &a);
            assert!((ui - ul).abs() < 1e-12, "upper {ui} vs {ul}");
        }
    }

    #[test]
    fn partition_isolates_regions() {
        let partition = Partition {
            region_of: Arc::new(|s: &StatePoint| if s.coords[0] < 0.0 { 0 } else { 1 }),
            margin: Arc::new(|s: &StatePoint| s.coords[0].abs()),
            constants: vec![(0, 0.5), (1, 2.0)],
        };
        let mut st =
            BoundStore::new(StoreConfig::new(2.0).with_partition(partition).with_bucket_edge(0.2));
        let probe = s1(0.5);
        let before_l = st.lower_at(&probe, &a0());
        let before_u = st.upper_at(&probe, &a0());
        // Updates in region 0 never change answers in region 1.
        st.record_update(&s1(-0.1), &a0(), 0.9, 1.0, 1).unwrap();
        st.record_sink(&s1(-0.2), 2).unwrap();
        assert_eq!(st.lower_at(&probe, &a0()), before_l);
        assert_eq!(st.upper_at(&probe, &a0()), before_u);
        // Region-1 records use the local constant 2.0.
        st.record_update(&s1(0.4), &a0(), 0.8, 1.0, 3).unwrap();
        assert!((st.lower_at(&probe, &a0()) - (0.8 - 2.0 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn state_max_tent_function() {
        // Box actions [0, 1], one record at a = 0.5 with L = 0.6, constant 1:
        // the action maximum is 0.6; at precision 0.05 the certified value
        // lies in [0.55, 0.6].
        let mut st = store(1.0);
        let s = s1(0.0);
        st.record_update(&s, &ActionPoint::new(vec![0.5]), 0.6, 1.0, 1).unwrap();
        let acts = ActionSet::Box(crate::space::BoxBounds::new(vec![0.0], vec![1.0]).unwrap());
        let v = st.lower_state(&s, &acts, 0.05, 1 << 20).unwrap();
        assert!((0.55..=0.6).contains(&v), "got {v}");
        let u = st.upper_state(&s, &acts, 0.05, 1 << 20).unwrap();
        assert!(u >= 1.0, "upper max must over-approximate, got {u}");
    }

    #[test]
    fn state_max_on_empty_store() {
        let st = store(1.0);
        let acts = ActionSet::Finite(vec![a0(), ActionPoint::label(1)]);
        assert_eq!(st.lower_state(&s1(0.0), &acts, 0.1, 1000).unwrap(), 0.0);
        assert_eq!(st.upper_state(&s1(0.0), &acts, 0.1, 1000).unwrap(), 1.0);
    }

    #[test]
    fn greedy_actions_tolerance_argmax() {
        let mut st = store(1.0);
        let s = s1(0.0);
        st.record_update(&s, &ActionPoint::label(0), 0.0, 0.9, 1).unwrap();
        st.record_update(&s, &ActionPoint::label(1), 0.0, 0.85, 2).unwrap();
        st.record_update(&s, &ActionPoint::label(2), 0.0, 0.2, 3).unwrap();
        let acts = ActionSet::Finite(vec![
            ActionPoint::label(0),
            ActionPoint::label(1),
            ActionPoint::label(2),
        ]);
        let g = st.greedy_actions(&s, &acts, 0.1);
        let tags: Vec<i64> = g.iter().map(|a| a.tag.unwrap()).collect();
        assert!(tags.contains(&0) && tags.contains(&1) && !tags.contains(&2));
        // With an untouched store all actions tie.
        let st2 = store(1.0);
        assert_eq!(st2.greedy_actions(&s, &acts, 0.01).len(), 3);
    }

    proptest::proptest! {
        // Query results stay clamped on random stores.
        #[test]
        fn envelope_clamped(
            recs in proptest::collection::vec(
                (-1.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..40),
            probes in proptest::collection::vec(-1.5f64..1.5, 1..20),
        ) {
            let mut st = store(1.0);
            for (i, (x, l, u)) in recs.iter().enumerate() {
                let (lo, hi) = if l <= u { (*l, *u) } else { (*u, *l) };
                let _ = st.record_update(&s1(*x), &a0(), lo, hi, i as u64);
            }
            for x in probes {
                let l = st.lower_at(&s1(x), &a0());
                let u = st.upper_at(&s1(x), &a0());
                proptest::prop_assert!((0.0..=1.0).contains(&l));
                proptest::prop_assert!((0.0..=1.0).contains(&u));
            }
        }
    }
}
