//! Certified under/over-approximation of action maxima and successor
//! expectations via deterministic dense nets with Lipschitz remainders.
//!
//! Both oracles return one-sided bounds: an under-approximation `v` satisfies
//! `truth - precision <= v <= truth`, an over-approximation the mirror image.
//! Nets are deterministic, never randomized, so identical requests yield
//! identical results.

use crate::error::ApproxError;
use crate::model::{ActionSet, Kernel};
use crate::space::{ActionPoint, StatePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Under,
    Over,
}

/// Parameters of one approximation request.
#[derive(Debug, Clone, Copy)]
pub struct ApproxRequest {
    pub direction: Direction,
    /// Guaranteed one-sided error bound of the result.
    pub precision: f64,
    /// Lipschitz constant of the objective / integrand in the relevant metric.
    pub lipschitz_bound: f64,
    /// Hard cap on function evaluations for this call.
    pub budget: usize,
    /// Fraction of the error budget reserved for integrand evaluation error
    /// (the rest pays for the quadrature remainder). Ignored for integrands
    /// that evaluate exactly.
    pub eval_split: f64,
    /// Round per-dimension counts up to powers of two so that nets refine by
    /// nesting; halving the precision then never loosens the result.
    pub nested: bool,
}

impl ApproxRequest {
    pub fn new(direction: Direction, precision: f64, lipschitz_bound: f64) -> Self {
        ApproxRequest {
            direction,
            precision,
            lipschitz_bound,
            budget: 1_000_000,
            eval_split: 0.5,
            nested: false,
        }
    }

    fn check(&self) -> Result<(), ApproxError> {
        if !(self.precision > 0.0) {
            return Err(ApproxError::InvalidRequest(format!(
                "precision must be positive, got {}",
                self.precision
            )));
        }
        if self.lipschitz_bound < 0.0 {
            return Err(ApproxError::InvalidRequest("negative Lipschitz bound".into()));
        }
        if !(self.eval_split > 0.0 && self.eval_split < 1.0) {
            return Err(ApproxError::InvalidRequest("eval_split must be in (0, 1)".into()));
        }
        Ok(())
    }
}

fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Approximates `max_{a in actions} f(a)` to the requested precision.
///
/// Finite sets are enumerated exactly regardless of the precision. For box
/// sets, `f` is evaluated on a net with covering radius `precision / L_f`;
/// the net maximum under-approximates, and adding `L_f * radius` yields the
/// over-approximation.
pub fn approx_max<F>(
    actions: &ActionSet,
    mut f: F,
    req: &ApproxRequest,
) -> Result<f64, ApproxError>
where
    F: FnMut(&ActionPoint) -> Result<f64, ApproxError>,
{
    req.check()?;
    match actions {
        ActionSet::Finite(list) => {
            if list.is_empty() {
                return Err(ApproxError::EmptySet);
            }
            let mut best = f64::NEG_INFINITY;
            for a in list {
                best = best.max(f(a)?);
            }
            Ok(best)
        }
        ActionSet::Box(b) => {
            let lf = req.lipschitz_bound;
            if lf == 0.0 {
                // Constant objective: one evaluation suffices.
                return f(&ActionPoint::new(b.center()));
            }
            let mut net = b.net(req.precision / lf);
            if req.nested {
                for pts in net.points_per_dim.iter_mut() {
                    if pts.len() > 1 {
                        let segments = next_pow2(pts.len() - 1);
                        let (lo, hi) = (pts[0], *pts.last().unwrap());
                        *pts = (0..=segments)
                            .map(|k| lo + (hi - lo) * k as f64 / segments as f64)
                            .collect();
                    }
                }
                net.covering_radius = net
                    .points_per_dim
                    .iter()
                    .filter(|p| p.len() > 1)
                    .map(|p| {
                        let half = (p[1] - p[0]) / 2.0;
                        half * half
                    })
                    .sum::<f64>()
                    .sqrt();
            }
            if net.len() > req.budget {
                let d = b.dim().max(1);
                let shrink = (net.len() as f64 / req.budget as f64).powf(1.0 / d as f64);
                return Err(ApproxError::BudgetExceeded {
                    achieved: lf * net.covering_radius * shrink,
                });
            }
            let mut best = f64::NEG_INFINITY;
            for coords in net.iter() {
                best = best.max(f(&ActionPoint::new(coords))?);
            }
            if best == f64::NEG_INFINITY {
                return Err(ApproxError::EmptySet);
            }
            Ok(match req.direction {
                Direction::Under => best,
                Direction::Over => best + lf * net.covering_radius,
            })
        }
    }
}

/// A function of states that the expectation oracle can integrate: pointwise
/// one-sided evaluation plus optional exact bounds over whole cells.
pub trait Integrand {
    /// One-sided evaluation at a point: for `Under`, returns a value in
    /// `[g(s) - precision, g(s)]`; for `Over`, in `[g(s), g(s) + precision]`.
    fn eval(
        &self,
        s: &StatePoint,
        direction: Direction,
        precision: f64,
    ) -> Result<f64, ApproxError>;

    /// Lipschitz bound of the function in the state metric.
    fn lipschitz(&self) -> f64;

    /// Whether `eval` is exact (ignores `precision`).
    fn exact(&self) -> bool {
        false
    }

    /// Exact range bounds valid over the whole ball of `radius` around
    /// `center`, when determinable (e.g. the ball lies inside the target
    /// set). Returning `None` falls back to the Lipschitz midpoint rule.
    fn cell_bounds(&self, _center: &StatePoint, _radius: f64) -> Option<(f64, f64)> {
        None
    }
}

/// An exactly evaluable integrand built from a closure.
pub struct ExactFn<F: Fn(&StatePoint) -> f64> {
    pub f: F,
    pub lipschitz: f64,
}

impl<F: Fn(&StatePoint) -> f64> Integrand for ExactFn<F> {
    fn eval(&self, s: &StatePoint, _d: Direction, _p: f64) -> Result<f64, ApproxError> {
        Ok((self.f)(s))
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn exact(&self) -> bool {
        true
    }
}

/// Approximates the expectation of `g` under the transition kernel to the
/// requested one-sided precision.
///
/// Discrete kernels are summed exactly (the only error source is the
/// integrand's own evaluation error). Uniform boxes are partitioned into
/// cells small enough that the midpoint value plus/minus the Lipschitz
/// remainder meets the budget; each cell's contribution is floored at 0
/// (under) or capped at 1 (over) since values are probabilities. Mixtures
/// combine component results convexly.
pub fn approx_expectation(
    kernel: &Kernel,
    g: &dyn Integrand,
    req: &ApproxRequest,
) -> Result<f64, ApproxError> {
    req.check()?;
    let mut evals_left = req.budget;
    expectation_rec(kernel, g, req, &mut evals_left)
}

fn expectation_rec(
    kernel: &Kernel,
    g: &dyn Integrand,
    req: &ApproxRequest,
    evals_left: &mut usize,
) -> Result<f64, ApproxError> {
    match kernel {
        Kernel::Discrete(rows) => {
            let mut total = 0.0;
            for (s, p) in rows {
                if *p <= 0.0 {
                    continue;
                }
                if *evals_left == 0 {
                    return Err(ApproxError::BudgetExceeded { achieved: f64::INFINITY });
                }
                *evals_left -= 1;
                total += p * g.eval(s, req.direction, req.precision)?;
            }
            Ok(total)
        }
        Kernel::UniformBox { bounds, tag } => {
            let lg = g.lipschitz();
            let eval_err = if g.exact() { 0.0 } else { req.precision * req.eval_split };
            // One-sided error of the midpoint rule with remainder subtraction
            // is at most 2 * L * r + eval_err; choose r accordingly.
            let quad_budget = req.precision - eval_err;
            let dims: Vec<usize> = (0..bounds.dim()).filter(|&i| bounds.width(i) > 0.0).collect();
            if dims.is_empty() || lg == 0.0 {
                // Degenerate box or constant integrand: single midpoint cell.
                if *evals_left == 0 {
                    return Err(ApproxError::BudgetExceeded { achieved: f64::INFINITY });
                }
                *evals_left -= 1;
                let c = StatePoint { coords: bounds.center(), tag: *tag };
                let radius = if lg == 0.0 { 0.0 } else { 0.5 * bounds.diagonal() };
                return cell_value(g, &c, radius, lg, eval_err, req).map(|v| v);
            }
            let d = dims.len() as f64;
            // Per-dimension cell edge h with sqrt(sum (h_i/2)^2) <= r where
            // 2 * L * r = quad_budget.
            let r_max = quad_budget / (2.0 * lg);
            let edge = 2.0 * r_max / d.sqrt();
            let mut counts = vec![1usize; bounds.dim()];
            let mut total_cells = 1usize;
            for &i in &dims {
                let mut c = (bounds.width(i) / edge).ceil().max(1.0) as usize;
                if req.nested {
                    c = next_pow2(c);
                }
                counts[i] = c;
                total_cells = total_cells.saturating_mul(c);
            }
            if total_cells > *evals_left {
                let shrink = (total_cells as f64 / (*evals_left).max(1) as f64).powf(1.0 / d);
                return Err(ApproxError::BudgetExceeded {
                    achieved: 2.0 * lg * r_max * shrink + eval_err,
                });
            }
            *evals_left -= total_cells;
            // Actual cell radius given the chosen counts.
            let radius = dims
                .iter()
                .map(|&i| {
                    let half = bounds.width(i) / (2.0 * counts[i] as f64);
                    half * half
                })
                .sum::<f64>()
                .sqrt();
            let cell_mass = 1.0 / total_cells as f64;
            let mut idx = vec![0usize; bounds.dim()];
            let mut total = 0.0;
            loop {
                let coords: Vec<f64> = (0..bounds.dim())
                    .map(|i| {
                        if counts[i] == 1 && bounds.width(i) <= 0.0 {
                            bounds.low[i]
                        } else {
                            bounds.low[i]
                                + bounds.width(i) * (idx[i] as f64 + 0.5) / counts[i] as f64
                        }
                    })
                    .collect();
                let center = StatePoint { coords, tag: *tag };
                total += cell_mass * cell_value(g, &center, radius, lg, eval_err, req)?;
                // Advance the multi-index.
                let mut i = 0;
                loop {
                    if i == idx.len() {
                        return Ok(total);
                    }
                    idx[i] += 1;
                    if idx[i] < counts[i] {
                        break;
                    }
                    idx[i] = 0;
                    i += 1;
                }
            }
        }
        Kernel::Mixture(parts) => {
            let mut total = 0.0;
            for (w, k) in parts {
                if *w <= 0.0 {
                    continue;
                }
                total += w * expectation_rec(k, g, req, evals_left)?;
            }
            Ok(total)
        }
    }
}

/// Certified contribution of one cell, per unit of mass.
fn cell_value(
    g: &dyn Integrand,
    center: &StatePoint,
    radius: f64,
    lipschitz: f64,
    eval_err: f64,
    req: &ApproxRequest,
) -> Result<f64, ApproxError> {
    if let Some((lo, hi)) = g.cell_bounds(center, radius) {
        return Ok(match req.direction {
            Direction::Under => lo,
            Direction::Over => hi,
        });
    }
    let v = g.eval(center, req.direction, eval_err)?;
    Ok(match req.direction {
        Direction::Under => (v - lipschitz * radius).max(0.0),
        Direction::Over => (v + lipschitz * radius).min(1.0),
    })
}
