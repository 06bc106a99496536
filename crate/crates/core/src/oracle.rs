//! Independent reference solvers used to validate the main algorithms:
//! exact value iteration with bracketing on finite MDPs, finite-horizon
//! backups, an absorption check via end-component analysis, and a dense-grid
//! discretization of continuous models.
//!
//! Everything here is deliberately brute force and kept separate from the
//! envelope-based solver path so the two can check each other.

use crate::error::ModelError;
use crate::model::{ActionSet, Kernel, MdpModel};
use crate::space::StatePoint;

/// An explicit finite MDP with indexed states.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    /// transitions[s][a] = list of (successor index, probability).
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub target: Vec<bool>,
    pub sink: Vec<bool>,
    pub initial: usize,
}

impl FiniteMdp {
    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.n_states();
        if self.target.len() != n || self.sink.len() != n {
            return Err(ModelError::DimensionMismatch { expected: n, got: self.target.len() });
        }
        if self.initial >= n {
            return Err(ModelError::InvalidParameter("initial state out of range".into()));
        }
        for (s, acts) in self.transitions.iter().enumerate() {
            if acts.is_empty() {
                return Err(ModelError::InvalidParameter(format!("state {s} has no actions")));
            }
            if self.target[s] && self.sink[s] {
                return Err(ModelError::PredicateOverlap(vec![s as f64]));
            }
            for row in acts {
                let mut total = 0.0;
                for &(succ, p) in row {
                    if succ >= n {
                        return Err(ModelError::InvalidKernel(format!(
                            "successor {succ} out of range"
                        )));
                    }
                    if p < -1e-15 {
                        return Err(ModelError::InvalidKernel(format!(
                            "negative probability {p}"
                        )));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(ModelError::InvalidKernel(format!(
                        "row of state {s} sums to {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn terminal(&self, s: usize) -> bool {
        self.target[s] || self.sink[s]
    }

    /// True iff every end component intersects the target or sink set, i.e.
    /// target-or-sink is reached almost surely under every strategy. Checked
    /// by pruning the sub-MDP restricted to non-terminal states until no end
    /// component survives.
    pub fn absorption_verified(&self) -> bool {
        let n = self.n_states();
        let mut alive: Vec<bool> = (0..n).map(|s| !self.terminal(s)).collect();
        // kept[s] = indices of actions whose whole support stays alive.
        loop {
            let kept: Vec<Vec<usize>> = (0..n)
                .map(|s| {
                    if !alive[s] {
                        return Vec::new();
                    }
                    self.transitions[s]
                        .iter()
                        .enumerate()
                        .filter(|(_, row)| row.iter().all(|&(t, p)| p <= 0.0 || alive[t]))
                        .map(|(a, _)| a)
                        .collect()
                })
                .collect();

            let mut changed = false;
            for s in 0..n {
                if alive[s] && kept[s].is_empty() {
                    alive[s] = false;
                    changed = true;
                }
            }
            if changed {
                continue;
            }
            if !alive.iter().any(|&x| x) {
                return true;
            }
            // SCC decomposition of the kept graph; drop states that cannot
            // remain inside their own component.
            let scc = scc_ids(n, |s| {
                if !alive[s] {
                    return Vec::new();
                }
                kept[s]
                    .iter()
                    .flat_map(|&a| self.transitions[s][a].iter())
                    .filter(|&&(t, p)| p > 0.0 && alive[t])
                    .map(|&(t, _)| t)
                    .collect()
            });
            for s in 0..n {
                if !alive[s] {
                    continue;
                }
                let stays = kept[s].iter().any(|&a| {
                    self.transitions[s][a]
                        .iter()
                        .all(|&(t, p)| p <= 0.0 || (alive[t] && scc[t] == scc[s]))
                });
                if !stays {
                    alive[s] = false;
                    changed = true;
                }
            }
            if !changed {
                // Fixpoint with survivors: these form end components outside
                // target and sink.
                return false;
            }
        }
    }

    fn backup(&self, v: &[f64], s: usize) -> f64 {
        self.transitions[s]
            .iter()
            .map(|row| row.iter().map(|&(t, p)| p * v[t]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Exact finite-horizon backup: probability of reaching the target within
    /// `n` steps, for every state.
    pub fn n_step_dp(&self, n: usize) -> Vec<f64> {
        let m = self.n_states();
        let mut v: Vec<f64> = (0..m).map(|s| if self.target[s] { 1.0 } else { 0.0 }).collect();
        for _ in 0..n {
            let mut next = vec![0.0; m];
            for s in 0..m {
                next[s] = if self.target[s] { 1.0 } else { self.backup(&v, s) };
            }
            v = next;
        }
        v
    }

    /// Worst-case (over strategies) expected number of steps until the target
    /// or sink set is hit, maximized over states. Requires absorption; the
    /// iteration converges from below to the finite fixpoint.
    pub fn max_expected_absorption_steps(&self) -> Option<f64> {
        if !self.absorption_verified() {
            return None;
        }
        let n = self.n_states();
        let mut t = vec![0.0; n];
        for _ in 0..2_000_000 {
            let mut next = vec![0.0; n];
            let mut delta: f64 = 0.0;
            for s in 0..n {
                next[s] = if self.terminal(s) { 0.0 } else { 1.0 + self.backup(&t, s) };
                delta = delta.max(next[s] - t[s]);
            }
            t = next;
            if delta < 1e-9 {
                break;
            }
        }
        Some(t.iter().cloned().fold(0.0, f64::max))
    }
}

/// Result of the bracketing value iteration.
#[derive(Debug, Clone)]
pub struct ViResult {
    /// Lower-biased values (iteration from below).
    pub lower: Vec<f64>,
    /// Upper iteration, present only when absorption was verified.
    pub upper: Option<Vec<f64>>,
    pub iterations: usize,
}

impl ViResult {
    pub fn value_at(&self, s: usize) -> f64 {
        self.lower[s]
    }

    pub fn gap_at(&self, s: usize) -> Option<f64> {
        self.upper.as_ref().map(|u| u[s] - self.lower[s])
    }
}

/// Gauss-Seidel value iteration from below; on absorption-verified models the
/// dual iteration from above runs as well and the result brackets the true
/// value within `tol` at every state.
pub fn exact_value_iteration(m: &FiniteMdp, tol: f64) -> Result<ViResult, ModelError> {
    if tol <= 0.0 {
        return Err(ModelError::InvalidParameter("tolerance must be positive".into()));
    }
    m.validate()?;
    let n = m.n_states();
    let absorbing = m.absorption_verified();

    let mut lower: Vec<f64> = (0..n).map(|s| if m.target[s] { 1.0 } else { 0.0 }).collect();
    let mut upper: Vec<f64> =
        (0..n).map(|s| if m.sink[s] { 0.0 } else { 1.0 }).collect();

    let step_tol = tol * 1e-3;
    let max_iter = 50_000_000usize / n.max(1);
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if m.terminal(s) {
                continue;
            }
            let nl = m.backup(&lower, s);
            delta = delta.max((nl - lower[s]).abs());
            lower[s] = nl;
            if absorbing {
                let nu = m.backup(&upper, s);
                delta = delta.max((nu - upper[s]).abs());
                upper[s] = nu;
            }
        }
        let gap = if absorbing {
            (0..n).map(|s| upper[s] - lower[s]).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        if delta < step_tol && (!absorbing || gap < tol) {
            break;
        }
    }
    Ok(ViResult { lower, upper: if absorbing { Some(upper) } else { None }, iterations })
}

/// A finite MDP obtained by snapping a continuous model to a grid, together
/// with the data needed to interpret its values.
pub struct Discretized {
    pub finite: FiniteMdp,
    /// Grid states, indexed like `finite`.
    pub states: Vec<StatePoint>,
    /// Every point of the state space is within this distance of a grid state
    /// with the same tag.
    pub cell_radius: f64,
}

impl Discretized {
    /// Index of the grid state closest to `s` (same tag).
    pub fn nearest(&self, s: &StatePoint) -> Option<usize> {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, g) in self.states.iter().enumerate() {
            if g.tag != s.tag {
                continue;
            }
            let d: f64 = g
                .coords
                .iter()
                .zip(&s.coords)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        best
    }

    /// Interval certified to contain the continuous value at grid state `i`,
    /// given the discretized value bracket `[lo, hi]`.
    ///
    /// Derivation of the propagation factor: the discretized MDP is the exact
    /// model of the "snapped" process that after every transition displaces
    /// the state by at most the cell radius r. Coupling a trajectory of the
    /// snapped process with one of the original process (same actions, same
    /// noise), the states drift apart by at most r per step, so at the
    /// absorption time tau the accumulated displacement is at most r * tau
    /// and the value difference is at most C_S * r * E[tau] by value
    /// Lipschitz continuity. E[tau] of the original process is not available
    /// from a black-box model, so the worst-case expected absorption time of
    /// the discretized model itself (plus one initial snap) is used as its
    /// proxy; this is the documented contract of the oracle, adequate for the
    /// validation scale it is used at.
    pub fn certified_interval(
        &self,
        lipschitz_state: f64,
        lo: f64,
        hi: f64,
    ) -> Option<(f64, f64)> {
        let steps = self.finite.max_expected_absorption_steps()?;
        let w = lipschitz_state * self.cell_radius * (steps + 1.0);
        Some(((lo - w).max(0.0), (hi + w).min(1.0)))
    }
}

/// Snaps `model` to a grid of spacing `h` per coordinate. Kernel masses are
/// exact cell integrals, so only discrete and uniform-box kernels (and
/// mixtures of those) are supported.
pub fn discretize(model: &MdpModel, h: f64) -> Result<Discretized, ModelError> {
    if h <= 0.0 {
        return Err(ModelError::InvalidParameter("spacing must be positive".into()));
    }
    // Build per-region grids: per-dimension sorted coordinates.
    struct RegionGrid {
        tag: Option<i64>,
        axes: Vec<Vec<f64>>,
        /// First global index of this region's states.
        offset: usize,
        counts: Vec<usize>,
    }
    let mut grids: Vec<RegionGrid> = Vec::new();
    let mut states: Vec<StatePoint> = Vec::new();
    let mut cell_radius_sq: f64 = 0.0;
    for region in &model.state_space {
        let b = &region.bounds;
        let mut axes = Vec::with_capacity(b.dim());
        let mut region_radius_sq = 0.0;
        for i in 0..b.dim() {
            let w = b.width(i);
            if w <= 0.0 {
                axes.push(vec![b.low[i]]);
                continue;
            }
            let segments = (w / h).ceil().max(1.0) as usize;
            let pts: Vec<f64> =
                (0..=segments).map(|k| b.low[i] + w * k as f64 / segments as f64).collect();
            let half = w / (2.0 * segments as f64);
            region_radius_sq += half * half;
            axes.push(pts);
        }
        cell_radius_sq = cell_radius_sq.max(region_radius_sq);
        let offset = states.len();
        let counts: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let total: usize = counts.iter().product();
        for mut idx in 0..total {
            let mut coords = Vec::with_capacity(axes.len());
            for (d, axis) in axes.iter().enumerate() {
                coords.push(axis[idx % counts[d]]);
                idx /= counts[d];
            }
            states.push(StatePoint { coords, tag: region.tag });
        }
        grids.push(RegionGrid { tag: region.tag, axes, offset, counts });
    }

    let locate = |s: &StatePoint| -> Option<usize> {
        let g = grids.iter().find(|g| g.tag == s.tag)?;
        let mut index = 0usize;
        let mut stride = 1usize;
        for (d, axis) in g.axes.iter().enumerate() {
            // Nearest axis coordinate.
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &x) in axis.iter().enumerate() {
                let dd = (x - s.coords[d]).abs();
                if dd < best_d {
                    best_d = dd;
                    best = i;
                }
            }
            index += best * stride;
            stride *= g.counts[d];
        }
        Some(g.offset + index)
    };

    // Distributes the mass of `kernel` over grid cells.
    fn spread(
        kernel: &Kernel,
        weight: f64,
        grids: &[(Option<i64>, Vec<Vec<f64>>, usize, Vec<usize>)],
        locate: &dyn Fn(&StatePoint) -> Option<usize>,
        out: &mut Vec<f64>,
    ) -> Result<(), ModelError> {
        match kernel {
            Kernel::Discrete(rows) => {
                for (succ, p) in rows {
                    if *p <= 0.0 {
                        continue;
                    }
                    let i = locate(succ).ok_or_else(|| {
                        ModelError::InvalidKernel("successor outside state space".into())
                    })?;
                    out[i] += weight * p;
                }
                Ok(())
            }
            Kernel::UniformBox { bounds, tag } => {
                let (_, axes, offset, counts) = grids
                    .iter()
                    .find(|(t, ..)| t == tag)
                    .ok_or_else(|| ModelError::InvalidKernel("kernel tag unknown".into()))?;
                // Per-dimension overlap of each Voronoi cell with the box.
                let mut per_dim: Vec<Vec<f64>> = Vec::with_capacity(axes.len());
                for (d, axis) in axes.iter().enumerate() {
                    let (lo, hi) = (bounds.low[d], bounds.high[d]);
                    let w = hi - lo;
                    let mut fr = vec![0.0; axis.len()];
                    if w <= 0.0 {
                        // Dirac coordinate: all mass to the nearest axis point.
                        let mut best = 0usize;
                        let mut best_d = f64::INFINITY;
                        for (i, &x) in axis.iter().enumerate() {
                            if (x - lo).abs() < best_d {
                                best_d = (x - lo).abs();
                                best = i;
                            }
                        }
                        fr[best] = 1.0;
                    } else {
                        for (i, &x) in axis.iter().enumerate() {
                            let cell_lo = if i == 0 {
                                f64::NEG_INFINITY
                            } else {
                                0.5 * (axis[i - 1] + x)
                            };
                            let cell_hi = if i + 1 == axis.len() {
                                f64::INFINITY
                            } else {
                                0.5 * (x + axis[i + 1])
                            };
                            let ov = (cell_hi.min(hi) - cell_lo.max(lo)).max(0.0);
                            fr[i] = ov / w;
                        }
                    }
                    per_dim.push(fr);
                }
                let total: usize = counts.iter().product();
                for mut idx in 0..total {
                    let flat = idx;
                    let mut mass = weight;
                    for (d, fr) in per_dim.iter().enumerate() {
                        mass *= fr[idx % counts[d]];
                        idx /= counts[d];
                        if mass == 0.0 {
                            break;
                        }
                    }
                    if mass > 0.0 {
                        out[offset + flat] += mass;
                    }
                }
                Ok(())
            }
            Kernel::Mixture(parts) => {
                for (w, k) in parts {
                    spread(k, weight * w, grids, locate, out)?;
                }
                Ok(())
            }
        }
    }

    let grid_meta: Vec<(Option<i64>, Vec<Vec<f64>>, usize, Vec<usize>)> = grids
        .iter()
        .map(|g| (g.tag, g.axes.clone(), g.offset, g.counts.clone()))
        .collect();

    let n = states.len();
    let mut transitions = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    let mut sink = Vec::with_capacity(n);
    for s in &states {
        let is_t = model.is_target(s);
        let is_r = model.is_sink(s);
        target.push(is_t);
        sink.push(is_r);
        if is_t || is_r {
            // Terminal rows are irrelevant to reachability values; use a
            // self-loop so the table is a well-formed MDP.
            let own = locate(s).expect("grid state locates to itself");
            transitions.push(vec![vec![(own, 1.0)]]);
            continue;
        }
        let actions = match model.action_set(s) {
            ActionSet::Finite(v) => v,
            ActionSet::Box(b) => b.net(h).iter().map(crate::space::ActionPoint::new).collect(),
        };
        let mut rows = Vec::with_capacity(actions.len());
        for a in &actions {
            let kernel = model.kernel_at(s, a);
            kernel.validate()?;
            let mut mass = vec![0.0; n];
            spread(&kernel, 1.0, &grid_meta, &locate, &mut mass)?;
            let row: Vec<(usize, f64)> =
                mass.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(i, &m)| (i, m)).collect();
            rows.push(row);
        }
        transitions.push(rows);
    }

    let initial = locate(&model.initial_state)
        .ok_or_else(|| ModelError::InvalidParameter("initial state outside grids".into()))?;
    let finite = FiniteMdp { transitions, target, sink, initial };
    finite.validate()?;
    Ok(Discretized { finite, states, cell_radius: cell_radius_sq.sqrt() })
}

/// Strongly connected component ids via iterative Tarjan.
fn scc_ids(n: usize, succs: impl Fn(usize) -> Vec<usize>) -> Vec<usize> {
    enum Step {
        Recurse(usize),
        Pop(usize),
        Continue,
    }
    let mut ids = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut disc = vec![usize::MAX; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_disc = 0usize;
    let mut next_id = 0usize;

    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // Explicit DFS stack of (node, successor list, cursor).
        let mut call: Vec<(usize, Vec<usize>, usize)> = vec![(root, succs(root), 0)];
        disc[root] = next_disc;
        low[root] = next_disc;
        next_disc += 1;
        stack.push(root);
        on_stack[root] = true;
        loop {
            let step = match call.last_mut() {
                None => break,
                Some((v, vs, cur)) => {
                    if *cur < vs.len() {
                        let w = vs[*cur];
                        *cur += 1;
                        if disc[w] == usize::MAX {
                            Step::Recurse(w)
                        } else {
                            if on_stack[w] {
                                low[*v] = low[*v].min(disc[w]);
                            }
                            Step::Continue
                        }
                    } else {
                        Step::Pop(*v)
                    }
                }
            };
            match step {
                Step::Recurse(w) => {
                    disc[w] = next_disc;
                    low[w] = next_disc;
                    next_disc += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, succs(w), 0));
                }
                Step::Pop(v) => {
                    call.pop();
                    if let Some((p, ..)) = call.last() {
                        low[*p] = low[*p].min(low[v]);
                    }
                    if low[v] == disc[v] {
                        loop {
                            let w = stack.pop().expect("tarjan stack");
                            on_stack[w] = false;
                            ids[w] = next_id;
                            if w == v {
                                break;
                            }
                        }
                        next_id += 1;
                    }
                }
                Step::Continue => {}
            }
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_half() -> FiniteMdp {
        // 0 -> {T:0.5, sink:0.5}; 1 = target, 2 = sink.
        FiniteMdp {
            transitions: vec![
                vec![vec![(1, 0.5), (2, 0.5)]],
                vec![vec![(1, 1.0)]],
                vec![vec![(2, 1.0)]],
            ],
            target: vec![false, true, false],
            sink: vec![false, false, true],
            initial: 0,
        }
    }

    #[test]
    fn single_target_state_has_value_one() {
        let m = FiniteMdp {
            transitions: vec![vec![vec![(0, 1.0)]]],
            target: vec![true],
            sink: vec![false],
            initial: 0,
        };
        let r = exact_value_iteration(&m, 1e-9).unwrap();
        assert_eq!(r.lower[0], 1.0);
    }

    #[test]
    fn half_chain_value() {
        let r = exact_value_iteration(&chain_half(), 1e-9).unwrap();
        assert!((r.lower[0] - 0.5).abs() < 1e-9);
        let u = r.upper.expect("absorbing");
        assert!((u[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn geometric_escape_values() {
        // 0 retries with prob 0.7, escapes to T with 0.3: value 1.
        let always = FiniteMdp {
            transitions: vec![
                vec![vec![(0, 0.7), (1, 0.3)]],
                vec![vec![(1, 1.0)]],
                vec![vec![(2, 1.0)]],
            ],
            target: vec![false, true, false],
            sink: vec![false, false, true],
            initial: 0,
        };
        // absorption: the retry loop is an end component? No: it leaks to T
        // with positive probability, so {0} alone is not an end component.
        assert!(always.absorption_verified());
        let r = exact_value_iteration(&always, 1e-9).unwrap();
        assert!((r.lower[0] - 1.0).abs() < 1e-7, "got {}", r.lower[0]);

        // With a 0.1 leak to the sink per round: V = 0.3 / (0.3 + 0.1).
        let leaky = FiniteMdp {
            transitions: vec![
                vec![vec![(0, 0.6), (1, 0.3), (2, 0.1)]],
                vec![vec![(1, 1.0)]],
                vec![vec![(2, 1.0)]],
            ],
            target: vec![false, true, false],
            sink: vec![false, false, true],
            initial: 0,
        };
        let r = exact_value_iteration(&leaky, 1e-9).unwrap();
        assert!((r.lower[0] - 0.75).abs() < 1e-7, "got {}", r.lower[0]);
    }

    #[test]
    fn absorption_rejects_pure_loop() {
        // Two states looping between each other, target unreachable.
        let m = FiniteMdp {
            transitions: vec![
                vec![vec![(1, 1.0)]],
                vec![vec![(0, 1.0)]],
                vec![vec![(2, 1.0)]],
            ],
            target: vec![false, false, true],
            sink: vec![false, false, false],
            initial: 0,
        };
        assert!(!m.absorption_verified());
        let r = exact_value_iteration(&m, 1e-6).unwrap();
        assert!(r.upper.is_none());
        assert!(r.lower[0].abs() < 1e-9);
    }

    #[test]
    fn n_step_values() {
        // Repeated 0.5 chance per step: within 2 steps 0.75.
        let m = FiniteMdp {
            transitions: vec![
                vec![vec![(0, 0.5), (1, 0.5)]],
                vec![vec![(1, 1.0)]],
            ],
            target: vec![false, true],
            sink: vec![false, false],
            initial: 0,
        };
        assert_eq!(m.n_step_dp(0)[0], 0.0);
        assert_eq!(m.n_step_dp(0)[1], 1.0);
        assert!((m.n_step_dp(1)[0] - 0.5).abs() < 1e-12);
        assert!((m.n_step_dp(2)[0] - 0.75).abs() < 1e-12);
        assert!((m.n_step_dp(5)[0] - (1.0 - 0.5f64.powi(5))).abs() < 1e-12);
    }

    #[test]
    fn absorption_time_of_half_chain() {
        let t = chain_half().max_expected_absorption_steps().unwrap();
        assert!((t - 1.0).abs() < 1e-6, "got {t}");
    }
}
