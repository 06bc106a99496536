//! The solvers: value iteration for converging lower bounds (a semi-decision
//! procedure for threshold queries) and bounded real-time dynamic programming
//! for converging two-sided bounds, plus the step-bounded and reach-avoid
//! variants.
//!
//! Both solvers run the same loop skeleton: a sampler picks the next
//! state-action pair; target and sink states trigger the exact rules
//! (lower 1 / upper 0 for every action); any other pair is updated with a
//! certified approximation of the expected envelope value over its
//! transition, at a precision that tightens over time. The bounds at the
//! initial state are probed periodically to decide termination and to emit
//! the anytime trace.

mod value_cache;

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::approx::{approx_expectation, ApproxRequest, Direction, Integrand};
use crate::error::{ApproxError, ModelError, SolverError, StoreError};
use crate::model::{ActionSet, MarginFn, MdpModel, Partition, StatePred};
use crate::sampler::{Guidance, Sampler, SamplerSpec};
use crate::space::{ActionPoint, StatePoint};
use crate::store::{BoundStore, StoreConfig};
use value_cache::ValueCache;

/// What the solver is asked to establish.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Semi-decision: answer yes once the certified lower bound at the
    /// initial state exceeds the threshold.
    ViLower { xi: f64 },
    /// Anytime two-sided bounds, terminating when the gap drops below
    /// epsilon.
    Brtdp { epsilon: f64 },
}

#[derive(Clone)]
pub struct SolverConfig {
    pub mode: Mode,
    pub sampler: SamplerSpec,
    pub seed: u64,
    /// Hard cap on update steps.
    pub max_steps: u64,
    /// Optional wall-clock cap, checked at probe cadence.
    pub max_wall: Option<Duration>,
    /// Loop-head probe cadence in steps.
    pub probe_every: u64,
    /// Trace emission cadence in steps.
    pub trace_every: u64,
    /// Floor of the precision schedule max(1/t, floor); defaults to
    /// epsilon/8 (bounds mode) or (1-xi)/8 (threshold mode).
    pub precision_floor: Option<f64>,
    /// Evaluation budget per approximation call.
    pub eval_budget: usize,
    /// Fraction of each update's error budget reserved for integrand
    /// evaluation.
    pub eval_split: f64,
    /// Abort with a diagnostic after this many consecutive probes without
    /// gap improvement (absorption violations typically show up as exactly
    /// this stagnation).
    pub stagnation_window: Option<u64>,
    /// Guidance tolerance as a fraction of the current gap, floored at 1e-3.
    pub guidance_fraction: f64,
    /// Use the painted node cache for integrand evaluation on models that
    /// declare shared actions.
    pub use_value_cache: bool,
    /// Node cap for the value cache.
    pub cache_max_nodes: usize,
}

impl SolverConfig {
    pub fn brtdp(epsilon: f64) -> Self {
        Self::with_mode(Mode::Brtdp { epsilon })
    }

    pub fn vi_lower(xi: f64) -> Self {
        Self::with_mode(Mode::ViLower { xi })
    }

    fn with_mode(mode: Mode) -> Self {
        SolverConfig {
            mode,
            sampler: SamplerSpec::mixture(0.5),
            seed: 0,
            max_steps: 10_000_000,
            max_wall: None,
            probe_every: 32,
            trace_every: 32,
            precision_floor: None,
            eval_budget: 1_000_000,
            eval_split: 0.5,
            stagnation_window: None,
            guidance_fraction: 0.05,
            use_value_cache: true,
            cache_max_nodes: 1 << 22,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sampler(mut self, sampler: SamplerSpec) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn with_max_steps(mut self, max_steps: u64) -> Self {
        self.max_steps = max_steps;
        self
    }

    fn validate(&self) -> Result<(), SolverError> {
        match self.mode {
            Mode::ViLower { xi } => {
                if !(0.0..1.0).contains(&xi) {
                    return Err(SolverError::InvalidConfig(format!(
                        "threshold must lie in [0, 1), got {xi}"
                    )));
                }
            }
            Mode::Brtdp { epsilon } => {
                if !(epsilon > 0.0) {
                    return Err(SolverError::InvalidConfig(format!(
                        "precision must be positive, got {epsilon}"
                    )));
                }
            }
        }
        if self.probe_every == 0 || self.trace_every == 0 {
            return Err(SolverError::InvalidConfig("cadences must be positive".into()));
        }
        Ok(())
    }

    fn floor(&self) -> f64 {
        if let Some(f) = self.precision_floor {
            return f.max(1e-12);
        }
        match self.mode {
            Mode::Brtdp { epsilon } => epsilon / 8.0,
            Mode::ViLower { xi } => ((1.0 - xi) / 8.0).max(1e-6),
        }
    }

    fn precision(&self, t: u64) -> f64 {
        (1.0 / t as f64).max(self.floor())
    }
}

/// Verdict of a solver run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    /// Threshold-mode success: the certified lower bound exceeds xi.
    Yes { lower: f64 },
    /// Bounds-mode success: certified bracket with gap below epsilon.
    Bounds { lower: f64, upper: f64 },
    /// The step or wall budget ran out; the bracket is still sound.
    BudgetExhausted { lower: f64, upper: f64 },
}

impl Outcome {
    pub fn bracket(&self) -> (f64, f64) {
        match *self {
            Outcome::Yes { lower } => (lower, 1.0),
            Outcome::Bounds { lower, upper } | Outcome::BudgetExhausted { lower, upper } => {
                (lower, upper)
            }
        }
    }

    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self, Outcome::BudgetExhausted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    TargetHit,
    SinkHit,
    Backprop,
}

impl TraceEvent {
    pub fn name(&self) -> &'static str {
        match self {
            TraceEvent::TargetHit => "target-hit",
            TraceEvent::SinkHit => "sink-hit",
            TraceEvent::Backprop => "backprop",
        }
    }
}

/// One anytime trace row: the step's sampled pair and the latest certified
/// probe of the initial state, with the probe's own precision recorded.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: u64,
    pub event: TraceEvent,
    pub state: StatePoint,
    pub action: ActionPoint,
    pub lower_s0: f64,
    pub upper_s0: f64,
    pub probe_precision: f64,
    pub store_size: usize,
}

pub struct SolverResult {
    pub outcome: Outcome,
    pub steps: u64,
    pub wall: Duration,
    pub trace: Vec<TraceRow>,
    pub store: BoundStore,
}

/// Certified bounds on the value of `s` from the current store:
/// under-approximated lower and over-approximated upper state values, both
/// clamped to [0, 1].
pub fn probe_bounds(
    store: &BoundStore,
    model: &MdpModel,
    s: &StatePoint,
    precision: f64,
    budget: usize,
) -> Result<(f64, f64), ApproxError> {
    let actions = model.action_set(s);
    let l = store.lower_state(s, &actions, precision, budget)?.clamp(0.0, 1.0);
    let u = store.upper_state(s, &actions, precision, budget)?.clamp(0.0, 1.0);
    Ok((l, u))
}

/// Threshold-query solver: converging lower bounds only. Answers yes once
/// the certified lower bound at the initial state exceeds xi; never answers
/// on the negative side (budget exhaustion returns the best bound found).
pub fn solve_vi_lower(model: &MdpModel, config: &SolverConfig) -> Result<SolverResult, SolverError> {
    let xi = match config.mode {
        Mode::ViLower { xi } => xi,
        Mode::Brtdp { .. } => {
            return Err(SolverError::InvalidConfig(
                "solve_vi_lower requires threshold mode".into(),
            ))
        }
    };
    Engine::new(model, config, false, None)?.run(LoopKind::Threshold { xi })
}

/// Two-sided anytime solver; terminates once the certified gap at the
/// initial state is below epsilon.
pub fn solve_brtdp(model: &MdpModel, config: &SolverConfig) -> Result<SolverResult, SolverError> {
    solve_brtdp_warm(model, config, None)
}

/// Like `solve_brtdp`, but starts from a previously saved store (a-priori
/// knowledge); the store must stem from the same model and constants.
pub fn solve_brtdp_warm(
    model: &MdpModel,
    config: &SolverConfig,
    warm: Option<BoundStore>,
) -> Result<SolverResult, SolverError> {
    let epsilon = match config.mode {
        Mode::Brtdp { epsilon } => epsilon,
        Mode::ViLower { .. } => {
            return Err(SolverError::InvalidConfig("solve_brtdp requires bounds mode".into()))
        }
    };
    Engine::new(model, config, true, warm)?.run(LoopKind::Bounds { epsilon })
}

/// Reach-avoid: treat the avoid region as an additional sink and carve the
/// state space so that extrapolation and integration never cross the avoid
/// or target boundaries, then run the bounds solver.
pub fn solve_reach_avoid(
    model: &MdpModel,
    avoid: &AvoidRegion,
    config: &SolverConfig,
) -> Result<SolverResult, SolverError> {
    let transformed = reach_avoid_model(model, avoid)?;
    solve_brtdp(&transformed, config)
}

/// A decidable region to avoid, with a lower bound on the distance to its
/// boundary (0 is always sound but disables cell certification nearby).
#[derive(Clone)]
pub struct AvoidRegion {
    pub contains: StatePred,
    pub margin: MarginFn,
}

impl AvoidRegion {
    /// Euclidean ball.
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        let c2 = center.clone();
        AvoidRegion {
            contains: Arc::new(move |s: &StatePoint| {
                s.tag.is_none() && dist(&s.coords, &center) <= radius
            }),
            margin: Arc::new(move |s: &StatePoint| (dist(&s.coords, &c2) - radius).abs()),
        }
    }

    /// Complement of an axis-aligned box: everything outside it is avoided.
    pub fn outside_box(low: Vec<f64>, high: Vec<f64>) -> Self {
        let (l2, h2) = (low.clone(), high.clone());
        AvoidRegion {
            contains: Arc::new(move |s: &StatePoint| {
                s.tag.is_some()
                    || s.coords.iter().enumerate().any(|(i, &x)| x < low[i] || x > high[i])
            }),
            margin: Arc::new(move |s: &StatePoint| {
                // Distance to the box surface (inside or outside).
                s.coords
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (x - l2[i]).abs().min((x - h2[i]).abs()))
                    .fold(f64::INFINITY, f64::min)
            }),
        }
    }
}

/// The sink-merged, partition-carved model used by `solve_reach_avoid`.
pub fn reach_avoid_model(model: &MdpModel, avoid: &AvoidRegion) -> Result<MdpModel, SolverError> {
    // Avoid must not intersect the target.
    for region in &model.state_space {
        let probe = region.bounds.net(region.bounds.diagonal().max(1e-3) / 8.0);
        for coords in probe.iter() {
            let s = StatePoint { coords, tag: region.tag };
            if model.is_target(&s) && (avoid.contains)(&s) {
                return Err(SolverError::Model(ModelError::PredicateOverlap(s.coords)));
            }
        }
    }
    let mut out = model.clone();
    let old_sink = model.sink.clone();
    let avoid_pred = avoid.contains.clone();
    out.sink = Arc::new(move |s: &StatePoint| old_sink(s) || avoid_pred(s));

    // Carve regions: 1 = avoid, 2 = target, 3 + base elsewhere. The value is
    // constant inside avoid (0) and target (1), so their local constants are
    // 0; continuity across the remaining region keeps the global constant.
    let base = model.partition.clone();
    let avoid_pred = avoid.contains.clone();
    let target_pred = model.target.clone();
    let base_regions = base.clone();
    let region_of = Arc::new(move |s: &StatePoint| {
        if avoid_pred(s) {
            1
        } else if target_pred(s) {
            2
        } else {
            3 + base_regions.as_ref().map(|p| (p.region_of)(s)).unwrap_or(0)
        }
    });
    let avoid_margin = avoid.margin.clone();
    let target_margin = model.target_margin.clone();
    let base_margin = base.as_ref().map(|p| p.margin.clone());
    let margin = Arc::new(move |s: &StatePoint| {
        let mut m = avoid_margin(s);
        if let Some(tm) = &target_margin {
            m = m.min(tm(s));
        }
        if let Some(bm) = &base_margin {
            m = m.min(bm(s));
        }
        m
    });
    let mut constants = vec![(1u32, 0.0), (2u32, 0.0)];
    if let Some(p) = &base {
        constants.extend(p.constants.iter().map(|(r, c)| (3 + r, *c)));
    }
    out.partition = Some(Partition { region_of, margin, constants });
    out.fingerprint = format!("{}+reach-avoid", model.fingerprint);
    if (out.sink)(&out.initial_state) && out.sink_witness.is_none() {
        out.sink_witness = Some(out.initial_state.clone());
    }
    Ok(out)
}

enum LoopKind {
    Threshold { xi: f64 },
    Bounds { epsilon: f64 },
}

/// Integrand evaluating the state-level bound envelopes, with exact values
/// at decidable target/sink states and certified whole-cell shortcuts.
struct BoundEval<'a> {
    model: &'a MdpModel,
    store: &'a BoundStore,
    cache: Option<&'a ValueCache>,
    budget: usize,
    exact_eval: bool,
}

impl BoundEval<'_> {
    fn envelope_state(
        &self,
        s: &StatePoint,
        dir: Direction,
        precision: f64,
    ) -> Result<f64, ApproxError> {
        let actions = self.model.action_set(s);
        match (&actions, dir) {
            (ActionSet::Finite(list), Direction::Under) => {
                if list.is_empty() {
                    return Err(ApproxError::EmptySet);
                }
                Ok(list.iter().map(|a| self.store.lower_at(s, a)).fold(0.0, f64::max))
            }
            (ActionSet::Finite(list), Direction::Over) => {
                if list.is_empty() {
                    return Err(ApproxError::EmptySet);
                }
                Ok(list.iter().map(|a| self.store.upper_at(s, a)).fold(0.0, f64::max))
            }
            (_, Direction::Under) => {
                self.store.lower_state(s, &actions, precision.max(1e-12), self.budget)
            }
            (_, Direction::Over) => {
                self.store.upper_state(s, &actions, precision.max(1e-12), self.budget)
            }
        }
    }
}

impl Integrand for BoundEval<'_> {
    fn eval(&self, s: &StatePoint, dir: Direction, precision: f64) -> Result<f64, ApproxError> {
        if self.model.is_target(s) {
            return Ok(1.0);
        }
        if self.model.is_sink(s) {
            return Ok(0.0);
        }
        if let Some(cache) = self.cache {
            if cache.constant() * cache.covering_radius() <= precision {
                let hit = match dir {
                    Direction::Under => cache.lower_state(s, self.model),
                    Direction::Over => cache.upper_state(s, self.model),
                };
                if let Some(v) = hit {
                    return Ok(v);
                }
            }
        }
        self.envelope_state(s, dir, precision)
    }

    fn lipschitz(&self) -> f64 {
        self.store.max_constant()
    }

    fn exact(&self) -> bool {
        self.exact_eval && self.cache.is_none()
    }

    fn cell_bounds(&self, center: &StatePoint, radius: f64) -> Option<(f64, f64)> {
        if self.model.is_target(center) {
            if let Some(m) = &self.model.target_margin {
                if m(center) >= radius {
                    return Some((1.0, 1.0));
                }
            }
        } else if self.model.is_sink(center) {
            if let Some(m) = &self.model.sink_margin {
                if m(center) >= radius {
                    return Some((0.0, 0.0));
                }
            }
        }
        if let Some(p) = &self.model.partition {
            if (p.margin)(center) < radius {
                // The cell may cross a region boundary where the envelope is
                // discontinuous; only the trivial bounds are certified.
                return Some((0.0, 1.0));
            }
        }
        None
    }
}

/// Guidance view over the store with an optional cached fast path.
struct EngineGuidance<'a> {
    store: &'a BoundStore,
    cache: Option<&'a ValueCache>,
    tolerance: f64,
}

impl Guidance for EngineGuidance<'_> {
    fn candidate_actions(&self, model: &MdpModel, s: &StatePoint) -> Vec<ActionPoint> {
        if let Some(cache) = self.cache {
            if let Some(scored) = cache.action_uppers(s) {
                let best =
                    scored.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
                let picked: Vec<ActionPoint> = scored
                    .into_iter()
                    .filter(|(_, v)| *v >= best - self.tolerance)
                    .map(|(a, _)| a)
                    .collect();
                if !picked.is_empty() {
                    return picked;
                }
            }
        }
        self.store.greedy_actions(s, &model.action_set(s), self.tolerance)
    }
}

struct Engine<'a> {
    model: &'a MdpModel,
    config: &'a SolverConfig,
    upper_enabled: bool,
    store: BoundStore,
    cache: Option<ValueCache>,
    sampler: Sampler,
    trace: Vec<TraceRow>,
    exact_eval: bool,
}

impl<'a> Engine<'a> {
    fn new(
        model: &'a MdpModel,
        config: &'a SolverConfig,
        upper_enabled: bool,
        warm: Option<BoundStore>,
    ) -> Result<Self, SolverError> {
        config.validate()?;
        let store = match warm {
            Some(s) => s,
            None => BoundStore::new(store_config_for(model)),
        };
        let mut cache = if config.use_value_cache {
            // Sized for the finest evaluation error the schedule will request.
            let target = config.floor() * config.eval_split;
            ValueCache::build(model, target, config.cache_max_nodes)
        } else {
            None
        };
        if let Some(c) = &mut cache {
            for rec in store.records() {
                c.paint(rec, model);
            }
        }
        let exact_eval = model.shared_actions.is_some();
        Ok(Engine {
            model,
            config,
            upper_enabled,
            store,
            cache,
            sampler: Sampler::new(&config.sampler, config.seed),
            trace: Vec::new(),
            exact_eval,
        })
    }

    fn probe(&self, t: u64) -> Result<(f64, f64, f64), SolverError> {
        let precision = self.config.precision(t);
        let (l, mut u) = probe_bounds(
            &self.store,
            self.model,
            &self.model.initial_state,
            precision,
            self.config.eval_budget,
        )?;
        if !self.upper_enabled {
            u = 1.0;
        }
        if l > u + 1e-12 {
            return Err(SolverError::Store(StoreError::BoundCrossing {
                state: self.model.initial_state.coords.clone(),
                action: Vec::new(),
                lower: l,
                upper: u,
            }));
        }
        Ok((l, u, precision))
    }

    fn run(mut self, kind: LoopKind) -> Result<SolverResult, SolverError> {
        let started = Instant::now();
        let mut t: u64 = 1;
        let mut last = (0.0f64, 1.0f64, self.config.precision(1));
        let mut guidance_tolerance = 1.0f64;
        let mut best_gap = f64::INFINITY;
        let mut stagnant_probes: u64 = 0;

        loop {
            if t == 1 || t % self.config.probe_every == 0 {
                last = self.probe(t)?;
                let (l, u, _) = last;
                match kind {
                    LoopKind::Threshold { xi } => {
                        if l > xi {
                            return Ok(self.finish(Outcome::Yes { lower: l }, t, started));
                        }
                    }
                    LoopKind::Bounds { epsilon } => {
                        if u - l < epsilon {
                            return Ok(self.finish(
                                Outcome::Bounds { lower: l, upper: u },
                                t,
                                started,
                            ));
                        }
                    }
                }
                let gap = u - l;
                if gap < best_gap - 1e-12 {
                    best_gap = gap;
                    stagnant_probes = 0;
                } else {
                    stagnant_probes += 1;
                    if let Some(window) = self.config.stagnation_window {
                        if stagnant_probes >= window {
                            return Err(SolverError::Stagnation { gap, window });
                        }
                    }
                }
                guidance_tolerance =
                    (self.config.guidance_fraction * gap).max(1e-3);
                if let Some(cap) = self.config.max_wall {
                    if started.elapsed() > cap {
                        return Ok(self.finish(
                            Outcome::BudgetExhausted { lower: l, upper: u },
                            t,
                            started,
                        ));
                    }
                }
            }
            if t > self.config.max_steps {
                let (l, u, _) = last;
                return Ok(self.finish(Outcome::BudgetExhausted { lower: l, upper: u }, t, started));
            }

            let (s, a) = {
                let guide = EngineGuidance {
                    store: &self.store,
                    cache: self.cache.as_ref(),
                    tolerance: guidance_tolerance,
                };
                self.sampler.next_pair(self.model, &guide)?
            };
            let event = self.update(&s, &a, t)?;
            if t % self.config.trace_every == 0 {
                self.trace.push(TraceRow {
                    step: t,
                    event,
                    state: s,
                    action: a,
                    lower_s0: last.0,
                    upper_s0: last.1,
                    probe_precision: last.2,
                    store_size: self.store.len(),
                });
            }
            t += 1;
        }
    }

    /// One update step; returns the kind of rule applied.
    fn update(&mut self, s: &StatePoint, a: &ActionPoint, t: u64) -> Result<TraceEvent, SolverError> {
        if self.model.is_target(s) {
            let out = self.store.record_target(s, t)?;
            self.paint(out.record_index);
            return Ok(TraceEvent::TargetHit);
        }
        if self.upper_enabled && self.model.is_sink(s) {
            let out = self.store.record_sink(s, t)?;
            self.paint(out.record_index);
            return Ok(TraceEvent::SinkHit);
        }
        let precision = self.config.precision(t);
        let kernel = self.model.kernel_at(s, a);
        let (new_lower, new_upper) = {
            let eval = BoundEval {
                model: self.model,
                store: &self.store,
                cache: self.cache.as_ref(),
                budget: self.config.eval_budget,
                exact_eval: self.exact_eval,
            };
            let mut req = ApproxRequest::new(Direction::Under, precision, eval.lipschitz());
            req.budget = self.config.eval_budget;
            req.eval_split = self.config.eval_split;
            let lo = approx_expectation(&kernel, &eval, &req)?.clamp(0.0, 1.0);
            let hi = if self.upper_enabled {
                req.direction = Direction::Over;
                approx_expectation(&kernel, &eval, &req)?.clamp(0.0, 1.0)
            } else {
                1.0
            };
            (lo, hi)
        };
        let out = self.store.record_update(s, a, new_lower, new_upper, t)?;
        self.paint(out.record_index);
        Ok(TraceEvent::Backprop)
    }

    fn paint(&mut self, record_index: usize) {
        if let Some(cache) = &mut self.cache {
            cache.paint(&self.store.records()[record_index].clone(), self.model);
        }
    }

    fn finish(mut self, outcome: Outcome, t: u64, started: Instant) -> SolverResult {
        let (l, u) = outcome.bracket();
        let terminal_event = self
            .trace
            .last()
            .map(|r| r.event)
            .unwrap_or(TraceEvent::Backprop);
        self.trace.push(TraceRow {
            step: t,
            event: terminal_event,
            state: self.model.initial_state.clone(),
            action: ActionPoint::label(-1),
            lower_s0: l,
            upper_s0: if self.upper_enabled { u } else { 1.0 },
            probe_precision: self.config.precision(t),
            store_size: self.store.len(),
        });
        SolverResult {
            outcome,
            steps: t,
            wall: started.elapsed(),
            trace: self.trace,
            store: self.store,
        }
    }
}

/// Store configuration adapted to a model's scale and partition.
pub fn store_config_for(model: &MdpModel) -> StoreConfig {
    let mut scale = model
        .state_space
        .iter()
        .map(|r| r.bounds.diagonal())
        .fold(0.0f64, f64::max);
    if let Some(acts) = &model.shared_actions {
        if acts.iter().any(|a| !a.coords.is_empty()) {
            scale += 1.0;
        }
    }
    let mut cfg = StoreConfig::new(model.lipschitz_pair)
        .with_bucket_edge((scale / 16.0).max(1e-6));
    if let Some(p) = &model.partition {
        cfg = cfg.with_partition(p.clone());
    }
    cfg
}

/// Step-bounded reachability: certified bounds on the probability of
/// reaching the target within `horizon` steps. Bounds are indexed by the
/// remaining step count; extrapolation never crosses step indices, and no
/// sink set is needed since the horizon itself guarantees termination.
pub fn solve_step_bounded(
    model: &MdpModel,
    horizon: usize,
    config: &SolverConfig,
) -> Result<SolverResult, SolverError> {
    let epsilon = match config.mode {
        Mode::Brtdp { epsilon } => epsilon,
        Mode::ViLower { .. } => {
            return Err(SolverError::InvalidConfig(
                "step-bounded solving requires bounds mode".into(),
            ))
        }
    };
    config.validate()?;
    let started = Instant::now();
    let s0 = &model.initial_state;

    // Level 0 is the exact target indicator; no store needed.
    if horizon == 0 {
        let v = if model.is_target(s0) { 1.0 } else { 0.0 };
        return Ok(SolverResult {
            outcome: Outcome::Bounds { lower: v, upper: v },
            steps: 0,
            wall: started.elapsed(),
            trace: Vec::new(),
            store: BoundStore::new(store_config_for(model)),
        });
    }

    let mut stores: Vec<BoundStore> =
        (0..=horizon).map(|_| BoundStore::new(store_config_for(model))).collect();
    let mut sampler = Sampler::new(&config.sampler, config.seed);
    let mut trace = Vec::new();
    let mut t: u64 = 1;
    let mut last = (0.0f64, 1.0f64, config.precision(1));

    loop {
        if t == 1 || t % config.probe_every == 0 {
            let precision = config.precision(t);
            let (l, u) = if model.is_target(s0) {
                (1.0, 1.0)
            } else {
                probe_bounds(&stores[horizon], model, s0, precision, config.eval_budget)?
            };
            last = (l, u, precision);
            if u - l < epsilon {
                return Ok(SolverResult {
                    outcome: Outcome::Bounds { lower: l, upper: u },
                    steps: t,
                    wall: started.elapsed(),
                    trace,
                    store: stores.swap_remove(horizon),
                });
            }
        }
        if t > config.max_steps {
            let (l, u, _) = last;
            return Ok(SolverResult {
                outcome: Outcome::BudgetExhausted { lower: l, upper: u },
                steps: t,
                wall: started.elapsed(),
                trace,
                store: stores.swap_remove(horizon),
            });
        }

        let (s, a) = {
            let guide = EngineGuidance {
                store: &stores[horizon],
                cache: None,
                tolerance: (config.guidance_fraction * (last.1 - last.0)).max(1e-3),
            };
            sampler.next_pair(model, &guide)?
        };
        let event;
        if model.is_target(&s) {
            for store in stores.iter_mut().skip(1) {
                store.record_target(&s, t)?;
            }
            event = TraceEvent::TargetHit;
        } else if model.is_sink(&s) {
            // Not required for termination, but sound and tightening.
            for store in stores.iter_mut().skip(1) {
                store.record_sink(&s, t)?;
            }
            event = TraceEvent::SinkHit;
        } else {
            let precision = config.precision(t);
            let kernel = model.kernel_at(&s, &a);
            // Back up through all levels, lowest first, so information moves
            // up the horizon within a single visit.
            for i in 1..=horizon {
                let (lo, hi) = {
                    let eval = LevelEval {
                        model,
                        below: if i == 1 { None } else { Some(&stores[i - 1]) },
                        budget: config.eval_budget,
                    };
                    let mut req =
                        ApproxRequest::new(Direction::Under, precision, eval.lipschitz());
                    req.budget = config.eval_budget;
                    req.eval_split = config.eval_split;
                    let lo = approx_expectation(&kernel, &eval, &req)?.clamp(0.0, 1.0);
                    req.direction = Direction::Over;
                    let hi = approx_expectation(&kernel, &eval, &req)?.clamp(0.0, 1.0);
                    (lo, hi)
                };
                stores[i].record_update(&s, &a, lo, hi, t)?;
            }
            event = TraceEvent::Backprop;
        }
        if t % config.trace_every == 0 {
            trace.push(TraceRow {
                step: t,
                event,
                state: s,
                action: a,
                lower_s0: last.0,
                upper_s0: last.1,
                probe_precision: last.2,
                store_size: stores[horizon].len(),
            });
        }
        t += 1;
    }
}

/// Integrand for one step level: level 0 is the exact target indicator,
/// higher levels read the envelope of the store one level below.
struct LevelEval<'a> {
    model: &'a MdpModel,
    below: Option<&'a BoundStore>,
    budget: usize,
}

impl Integrand for LevelEval<'_> {
    fn eval(&self, s: &StatePoint, dir: Direction, precision: f64) -> Result<f64, ApproxError> {
        if self.model.is_target(s) {
            return Ok(1.0);
        }
        match self.below {
            None => Ok(0.0),
            Some(store) => {
                if self.model.is_sink(s) {
                    return Ok(0.0);
                }
                let actions = self.model.action_set(s);
                match (&actions, dir) {
                    (ActionSet::Finite(list), Direction::Under) => {
                        Ok(list.iter().map(|a| store.lower_at(s, a)).fold(0.0, f64::max))
                    }
                    (ActionSet::Finite(list), Direction::Over) => {
                        Ok(list.iter().map(|a| store.upper_at(s, a)).fold(0.0, f64::max))
                    }
                    (_, Direction::Under) => {
                        store.lower_state(s, &actions, precision.max(1e-12), self.budget)
                    }
                    (_, Direction::Over) => {
                        store.upper_state(s, &actions, precision.max(1e-12), self.budget)
                    }
                }
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        match self.below {
            None => self.model.lipschitz_pair,
            Some(store) => store.max_constant(),
        }
    }

    fn exact(&self) -> bool {
        self.model.shared_actions.is_some()
    }

    fn cell_bounds(&self, center: &StatePoint, radius: f64) -> Option<(f64, f64)> {
        if self.below.is_none() {
            // Exact target indicator: constant over cells certified clear of
            // the boundary, trivial bounds otherwise (it is discontinuous).
            if let Some(m) = &self.model.target_margin {
                if m(center) >= radius {
                    return Some(if self.model.is_target(center) {
                        (1.0, 1.0)
                    } else {
                        (0.0, 0.0)
                    });
                }
            }
            return Some((0.0, 1.0));
        }
        if self.model.is_target(center) {
            if let Some(m) = &self.model.target_margin {
                if m(center) >= radius {
                    return Some((1.0, 1.0));
                }
            }
        } else if self.model.is_sink(center) {
            if let Some(m) = &self.model.sink_margin {
                if m(center) >= radius {
                    return Some((0.0, 0.0));
                }
            }
        }
        if let Some(p) = &self.model.partition {
            if (p.margin)(center) < radius {
                return Some((0.0, 1.0));
            }
        }
        None
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
