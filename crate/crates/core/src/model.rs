//! The metric-space MDP abstraction consumed by every other module.
//!
//! A model bundles the state space (a union of tagged boxes), the per-state
//! action sets, the transition kernel, target and sink predicates, and the
//! declared Lipschitz constants of the value function. All evaluation
//! operations are pure; only `sample_successor` touches a caller-owned rng.

use std::sync::Arc;

use rand::Rng;

use crate::error::ModelError;
use crate::space::{ActionPoint, BoxBounds, StatePoint};

pub type StatePred = Arc<dyn Fn(&StatePoint) -> bool + Send + Sync>;
pub type MarginFn = Arc<dyn Fn(&StatePoint) -> f64 + Send + Sync>;
pub type ActionMap = Arc<dyn Fn(&StatePoint) -> ActionSet + Send + Sync>;
pub type KernelMap = Arc<dyn Fn(&StatePoint, &ActionPoint) -> Kernel + Send + Sync>;
pub type RegionMap = Arc<dyn Fn(&StatePoint) -> u32 + Send + Sync>;

/// The set of actions available in a state: an explicit finite list, or a
/// compact coordinate box with a dense-sampling routine.
#[derive(Clone)]
pub enum ActionSet {
    Finite(Vec<ActionPoint>),
    Box(BoxBounds),
}

impl ActionSet {
    pub fn is_empty(&self) -> bool {
        match self {
            ActionSet::Finite(v) => v.is_empty(),
            ActionSet::Box(_) => false,
        }
    }

    pub fn contains(&self, a: &ActionPoint) -> bool {
        match self {
            ActionSet::Finite(v) => v.iter().any(|b| {
                b.tag == a.tag
                    && b.coords.len() == a.coords.len()
                    && b.coords.iter().zip(&a.coords).all(|(x, y)| (x - y).abs() <= 1e-12)
            }),
            ActionSet::Box(b) => a.tag.is_none() && b.contains(&a.coords, 1e-12),
        }
    }

    /// Any member, used where a canonical representative is needed.
    pub fn representative(&self) -> Option<ActionPoint> {
        match self {
            ActionSet::Finite(v) => v.first().cloned(),
            ActionSet::Box(b) => Some(ActionPoint::new(b.center())),
        }
    }

    /// A finite h-net: every action of the set is within `h` of some returned
    /// point. Finite sets are returned as-is regardless of `h`.
    pub fn dense_net(&self, h: f64) -> Vec<ActionPoint> {
        match self {
            ActionSet::Finite(v) => v.clone(),
            ActionSet::Box(b) => b.net(h).iter().map(ActionPoint::new).collect(),
        }
    }

    /// Diameter of the set in the action metric (upper bound for boxes).
    pub fn diameter(&self) -> f64 {
        match self {
            ActionSet::Finite(v) => {
                if v.iter().any(|a| a.tag != v[0].tag) {
                    1.0 // distinct tags are at discrete distance 1
                } else {
                    0.0
                }
            }
            ActionSet::Box(b) => b.diagonal(),
        }
    }
}

/// A transition kernel instance for one state-action pair.
///
/// Restricted to discrete tables, uniform boxes, and finite mixtures of
/// those; these support both sampling and certified integration.
#[derive(Debug, Clone)]
pub enum Kernel {
    /// Finite support: list of (successor, probability).
    Discrete(Vec<(StatePoint, f64)>),
    /// Uniform distribution on a coordinate box, with a fixed tag.
    UniformBox { bounds: BoxBounds, tag: Option<i64> },
    /// Finite convex combination of kernels.
    Mixture(Vec<(f64, Kernel)>),
}

impl Kernel {
    pub fn dirac(s: StatePoint) -> Self {
        Kernel::Discrete(vec![(s, 1.0)])
    }

    /// Checks probability normalization and box validity.
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Kernel::Discrete(rows) => {
                if rows.is_empty() {
                    return Err(ModelError::InvalidKernel("empty discrete kernel".into()));
                }
                let mut total = 0.0;
                for (_, p) in rows {
                    if *p < -1e-15 {
                        return Err(ModelError::InvalidKernel(format!(
                            "negative probability {p}"
                        )));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(ModelError::InvalidKernel(format!(
                        "discrete probabilities sum to {total}, expected 1"
                    )));
                }
                Ok(())
            }
            Kernel::UniformBox { bounds, .. } => {
                if bounds.dim() == 0 {
                    return Err(ModelError::InvalidKernel("zero-dimensional box".into()));
                }
                Ok(())
            }
            Kernel::Mixture(parts) => {
                let mut total = 0.0;
                for (w, k) in parts {
                    if *w < -1e-15 {
                        return Err(ModelError::InvalidKernel(format!("negative weight {w}")));
                    }
                    total += w;
                    k.validate()?;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(ModelError::InvalidKernel(format!(
                        "mixture weights sum to {total}, expected 1"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Draws one successor; independent across calls given the rng stream.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> StatePoint {
        match self {
            Kernel::Discrete(rows) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (s, p) in rows {
                    acc += p;
                    if u < acc {
                        return s.clone();
                    }
                }
                rows.last().expect("non-empty kernel").0.clone()
            }
            Kernel::UniformBox { bounds, tag } => {
                let coords = bounds
                    .low
                    .iter()
                    .zip(&bounds.high)
                    .map(|(&l, &h)| if h > l { rng.gen_range(l..=h) } else { l })
                    .collect();
                StatePoint { coords, tag: *tag }
            }
            Kernel::Mixture(parts) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (w, k) in parts {
                    acc += w;
                    if u < acc {
                        return k.sample(rng);
                    }
                }
                parts.last().expect("non-empty mixture").1.sample(rng)
            }
        }
    }
}

/// A component of the state space: one discrete tag with its coordinate box.
/// Purely continuous models have a single untagged region.
#[derive(Debug, Clone)]
pub struct TagRegion {
    pub tag: Option<i64>,
    pub bounds: BoxBounds,
}

/// Optional partitioning of the state space into regions with local Lipschitz
/// constants. Extrapolation and integration never cross region boundaries;
/// `margin` must return a lower bound on the distance from a state to the
/// nearest region boundary (0 is always sound but disables cell-level
/// certification near boundaries).
#[derive(Clone)]
pub struct Partition {
    pub region_of: RegionMap,
    pub margin: MarginFn,
    /// Per-region pair-metric Lipschitz constants; regions not listed fall
    /// back to the model's global constant.
    pub constants: Vec<(u32, f64)>,
}

impl Partition {
    pub fn constant_for(&self, region: u32, global: f64) -> f64 {
        self.constants
            .iter()
            .find(|(r, _)| *r == region)
            .map(|(_, c)| *c)
            .unwrap_or(global)
    }
}

/// Metric-space MDP: state space, action map, kernel map, target and sink
/// predicates, and declared value Lipschitz constants.
#[derive(Clone)]
pub struct MdpModel {
    pub state_space: Vec<TagRegion>,
    pub actions: ActionMap,
    pub kernel: KernelMap,
    pub target: StatePred,
    pub sink: StatePred,
    /// Lower bound on the distance from a state to the target boundary
    /// (used for exact treatment of integration cells fully inside the
    /// target); defaults to 0 everywhere.
    pub target_margin: Option<MarginFn>,
    pub sink_margin: Option<MarginFn>,
    pub lipschitz_state: f64,
    pub lipschitz_pair: f64,
    pub partition: Option<Partition>,
    pub initial_state: StatePoint,
    /// A state inside the sink set, if one is known (needed by the discount
    /// transform).
    pub sink_witness: Option<StatePoint>,
    /// When set, declares that every state of the model offers exactly this
    /// finite action list; enables cached state-value evaluation in the
    /// solver.
    pub shared_actions: Option<Vec<ActionPoint>>,
    /// Identifies the model for snapshot compatibility checks.
    pub fingerprint: String,
}

impl MdpModel {
    pub fn dim(&self) -> usize {
        self.state_space[0].bounds.dim()
    }

    /// The coordinate box of the untagged (continuous) component if present,
    /// else of the first region.
    pub fn primary_box(&self) -> &BoxBounds {
        self.state_space
            .iter()
            .find(|r| r.tag.is_none())
            .map(|r| &r.bounds)
            .unwrap_or(&self.state_space[0].bounds)
    }

    pub fn region_bounds(&self, tag: Option<i64>) -> Option<&BoxBounds> {
        self.state_space.iter().find(|r| r.tag == tag).map(|r| &r.bounds)
    }

    pub fn state_valid(&self, s: &StatePoint) -> bool {
        self.region_bounds(s.tag)
            .map(|b| b.contains(&s.coords, 1e-9))
            .unwrap_or(false)
    }

    pub fn is_target(&self, s: &StatePoint) -> bool {
        (self.target)(s)
    }

    pub fn is_sink(&self, s: &StatePoint) -> bool {
        (self.sink)(s)
    }

    pub fn action_set(&self, s: &StatePoint) -> ActionSet {
        (self.actions)(s)
    }

    pub fn kernel_at(&self, s: &StatePoint, a: &ActionPoint) -> Kernel {
        (self.kernel)(s, a)
    }

    pub fn region_of(&self, s: &StatePoint) -> Option<u32> {
        self.partition.as_ref().map(|p| (p.region_of)(s))
    }

    /// Effective pair Lipschitz constant for records in `region`.
    pub fn pair_constant(&self, region: Option<u32>) -> f64 {
        match (&self.partition, region) {
            (Some(p), Some(r)) => p.constant_for(r, self.lipschitz_pair),
            _ => self.lipschitz_pair,
        }
    }

    /// Smallest pair constant over all regions, used for conservative index
    /// pruning.
    pub fn min_pair_constant(&self) -> f64 {
        match &self.partition {
            Some(p) => p
                .constants
                .iter()
                .map(|(_, c)| *c)
                .fold(self.lipschitz_pair, f64::min),
            None => self.lipschitz_pair,
        }
    }

    /// Draws a successor of (s, a) from the transition kernel.
    pub fn sample_successor<R: Rng>(
        &self,
        s: &StatePoint,
        a: &ActionPoint,
        rng: &mut R,
    ) -> Result<StatePoint, ModelError> {
        if !self.action_set(s).contains(a) {
            return Err(ModelError::ActionNotAvailable);
        }
        Ok(self.kernel_at(s, a).sample(rng))
    }

    /// Basic structural validation: non-empty action sets, valid kernels, and
    /// disjoint target/sink predicates on a deterministic probe grid.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.state_space.is_empty() {
            return Err(ModelError::InvalidParameter("empty state space".into()));
        }
        let d = self.dim();
        for r in &self.state_space {
            if r.bounds.dim() != d {
                return Err(ModelError::DimensionMismatch { expected: d, got: r.bounds.dim() });
            }
        }
        if self.lipschitz_state < 0.0 || self.lipschitz_pair < 0.0 {
            return Err(ModelError::InvalidParameter(
                "Lipschitz constants must be non-negative".into(),
            ));
        }
        if !self.state_valid(&self.initial_state) {
            return Err(ModelError::InvalidParameter(
                "initial state outside the declared state space".into(),
            ));
        }
        for region in &self.state_space {
            for coords in region.bounds.net(region.bounds.diagonal().max(1e-3) / 4.0).iter() {
                let s = StatePoint { coords, tag: region.tag };
                if self.is_target(&s) && self.is_sink(&s) {
                    return Err(ModelError::PredicateOverlap(s.coords));
                }
                let acts = self.action_set(&s);
                if acts.is_empty() {
                    return Err(ModelError::InvalidParameter(format!(
                        "empty action set at {:?}",
                        s.coords
                    )));
                }
                if let Some(a) = acts.representative() {
                    self.kernel_at(&s, &a).validate()?;
                }
            }
        }
        Ok(())
    }
}

/// Tag used for a synthesized absorbing sink when the discount transform is
/// applied to a model without a known sink state.
pub const SYNTHETIC_SINK_TAG: i64 = -7777;

/// Reduces discounted reachability with factor `gamma` to plain reachability:
/// every non-target transition keeps its kernel with weight `gamma` and moves
/// to an absorbing sink with weight `1 - gamma`. The result satisfies the
/// absorption requirement by construction. `gamma = 1` returns the model
/// unchanged.
pub fn discount_transform(model: &MdpModel, gamma: f64) -> Result<MdpModel, ModelError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ModelError::InvalidParameter(format!(
            "discount factor must be in (0, 1], got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(model.clone());
    }

    let mut out = model.clone();
    let sink_rep = match &model.sink_witness {
        Some(w) => w.clone(),
        None => {
            // Synthesize a tagged absorbing point and extend the sink predicate.
            let rep = StatePoint {
                coords: model.primary_box().center(),
                tag: Some(SYNTHETIC_SINK_TAG),
            };
            out.state_space.push(TagRegion {
                tag: Some(SYNTHETIC_SINK_TAG),
                bounds: BoxBounds::point(&rep.coords),
            });
            let old_sink = model.sink.clone();
            out.sink = Arc::new(move |s: &StatePoint| {
                s.tag == Some(SYNTHETIC_SINK_TAG) || old_sink(s)
            });
            let old_actions = model.actions.clone();
            out.actions = Arc::new(move |s: &StatePoint| {
                if s.tag == Some(SYNTHETIC_SINK_TAG) {
                    ActionSet::Finite(vec![ActionPoint::label(0)])
                } else {
                    old_actions(s)
                }
            });
            // Cross-tag distances are exactly 1 and values span [0, 1], so the
            // pair constant must be at least 1 once the tagged point exists.
            out.lipschitz_state = model.lipschitz_state.max(1.0);
            out.lipschitz_pair = model.lipschitz_pair.max(1.0);
            rep
        }
    };
    out.sink_witness = Some(sink_rep.clone());

    let old_kernel = model.kernel.clone();
    let old_target = model.target.clone();
    let synthesized = model.sink_witness.is_none();
    out.kernel = Arc::new(move |s: &StatePoint, a: &ActionPoint| {
        if synthesized && s.tag == Some(SYNTHETIC_SINK_TAG) {
            return Kernel::dirac(s.clone());
        }
        if old_target(s) {
            return old_kernel(s, a);
        }
        Kernel::Mixture(vec![
            (gamma, old_kernel(s, a)),
            (1.0 - gamma, Kernel::dirac(sink_rep.clone())),
        ])
    });
    out.fingerprint = format!("{}+discount({gamma})", model.fingerprint);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_chain() -> MdpModel {
        // Single action; state 0 moves to {target 0.8, sink 0.2}.
        let target = StatePoint::tagged(vec![0.0], 1);
        let sink = StatePoint::tagged(vec![0.0], 2);
        let t = target.clone();
        let k = sink.clone();
        MdpModel {
            state_space: vec![
                TagRegion { tag: None, bounds: BoxBounds::new(vec![0.0], vec![1.0]).unwrap() },
                TagRegion { tag: Some(1), bounds: BoxBounds::point(&[0.0]) },
                TagRegion { tag: Some(2), bounds: BoxBounds::point(&[0.0]) },
            ],
            actions: Arc::new(|_| ActionSet::Finite(vec![ActionPoint::label(0)])),
            kernel: Arc::new(move |s, _| {
                if s.tag.is_some() {
                    Kernel::dirac(s.clone())
                } else {
                    Kernel::Discrete(vec![(t.clone(), 0.8), (k.clone(), 0.2)])
                }
            }),
            target: Arc::new(|s| s.tag == Some(1)),
            sink: Arc::new(|s| s.tag == Some(2)),
            target_margin: None,
            sink_margin: None,
            lipschitz_state: 1.0,
            lipschitz_pair: 1.0,
            partition: None,
            initial_state: StatePoint::new(vec![0.5]),
            sink_witness: Some(sink),
            shared_actions: Some(vec![ActionPoint::label(0)]),
            fingerprint: "test-chain".into(),
        }
    }

    #[test]
    fn sampling_respects_support_and_seed() {
        let m = unit_chain();
        let s = StatePoint::new(vec![0.5]);
        let a = ActionPoint::label(0);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = m.sample_successor(&s, &a, &mut r1).unwrap();
            let y = m.sample_successor(&s, &a, &mut r2).unwrap();
            assert_eq!(x, y);
            assert!(x.tag == Some(1) || x.tag == Some(2));
        }
    }

    #[test]
    fn seeded_frequency_matches_law_of_large_numbers() {
        let m = unit_chain();
        let s = StatePoint::new(vec![0.5]);
        let a = ActionPoint::label(0);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let n = 100_000;
        let mut hits = 0u64;
        for _ in 0..n {
            if m.sample_successor(&s, &a, &mut rng).unwrap().tag == Some(1) {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn uniform_box_sampling_stays_in_support() {
        let k = Kernel::UniformBox {
            bounds: BoxBounds::new(vec![0.2], vec![0.4]).unwrap(),
            tag: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = k.sample(&mut rng);
            assert!(s.coords[0] >= 0.2 && s.coords[0] <= 0.4);
        }
    }

    #[test]
    fn dirac_kernel_is_deterministic() {
        let p = StatePoint::new(vec![0.3]);
        let k = Kernel::dirac(p.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(k.sample(&mut rng), p);
        }
    }

    #[test]
    fn discount_identity_at_gamma_one() {
        let m = unit_chain();
        let t = discount_transform(&m, 1.0).unwrap();
        let s = StatePoint::new(vec![0.5]);
        let a = ActionPoint::label(0);
        match (m.kernel_at(&s, &a), t.kernel_at(&s, &a)) {
            (Kernel::Discrete(x), Kernel::Discrete(y)) => assert_eq!(x.len(), y.len()),
            _ => panic!("kernel kind changed"),
        }
    }

    #[test]
    fn discount_mixes_with_sink() {
        let m = unit_chain();
        let t = discount_transform(&m, 0.9).unwrap();
        let s = StatePoint::new(vec![0.5]);
        let a = ActionPoint::label(0);
        match t.kernel_at(&s, &a) {
            Kernel::Mixture(parts) => {
                assert_eq!(parts.len(), 2);
                assert!((parts[0].0 - 0.9).abs() < 1e-15);
                assert!((parts[1].0 - 0.1).abs() < 1e-15);
                match &parts[1].1 {
                    Kernel::Discrete(rows) => assert!(t.is_sink(&rows[0].0)),
                    _ => panic!("expected dirac at sink"),
                }
            }
            _ => panic!("expected mixture"),
        }
    }

    #[test]
    fn discount_rejects_bad_gamma() {
        let m = unit_chain();
        assert!(discount_transform(&m, 0.0).is_err());
        assert!(discount_transform(&m, 1.5).is_err());
    }

    #[test]
    fn validate_accepts_chain() {
        unit_chain().validate().unwrap();
    }

    #[test]
    fn kernel_validation_catches_bad_rows() {
        let bad = Kernel::Discrete(vec![(StatePoint::new(vec![0.0]), 0.7)]);
        assert!(bad.validate().is_err());
        let neg = Kernel::Discrete(vec![
            (StatePoint::new(vec![0.0]), 1.2),
            (StatePoint::new(vec![1.0]), -0.2),
        ]);
        assert!(neg.validate().is_err());
    }
}
