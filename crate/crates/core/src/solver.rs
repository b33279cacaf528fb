//! Log-barrier interior-point method for smooth concave maximization under
//! smooth convex inequality constraints, plus the real lifting of complex
//! beamformers.
//!
//! The barrier subproblem `minimize t * (-f(x)) - sum_i log(-g_i(x))` is
//! centered by damped Newton steps. The line search rejects any trial point
//! that leaves the strict interior of the constraints or the objective's
//! domain, so every iterate is strictly feasible.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::physics::BeamformingSet;
use crate::{CVector, Complex};

/// A twice-differentiable real function of a real vector.
pub trait SmoothFunction: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Adds `scale * hessian(x)` to `hess`.
    fn accumulate_hessian(&self, x: &DVector<f64>, scale: f64, hess: &mut DMatrix<f64>);
    /// Whether `x` lies in the open set where the function is smooth.
    fn in_domain(&self, _x: &DVector<f64>) -> bool {
        true
    }
}

/// `maximize objective(x)` subject to `g_i(x) <= 0`.
pub struct ConvexProgram {
    /// Concave.
    pub objective: Box<dyn SmoothFunction>,
    /// Convex.
    pub constraints: Vec<Box<dyn SmoothFunction>>,
    pub dim: usize,
}

impl ConvexProgram {
    pub fn constraint_values(&self, x: &DVector<f64>) -> Vec<f64> {
        self.constraints.iter().map(|g| g.value(x)).collect()
    }

    pub fn is_strictly_feasible(&self, x: &DVector<f64>) -> bool {
        self.constraints.iter().all(|g| g.value(x) < 0.0) && self.objective.in_domain(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub barrier_t0: f64,
    pub barrier_mu: f64,
    /// Centering stops once half the squared Newton decrement drops below this.
    pub newton_tol: f64,
    /// Newton steps per centering.
    pub max_newton: usize,
    /// Outer loop stops once `m / t` drops below this.
    pub feas_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { barrier_t0: 1.0, barrier_mu: 10.0, newton_tol: 1e-8, max_newton: 50, feas_tol: 1e-8 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.barrier_mu > 1.0
            && self.barrier_t0 > 0.0
            && self.newton_tol > 0.0
            && self.feas_tol > 0.0
            && self.max_newton > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("bad solver options {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierOutcome {
    pub x: DVector<f64>,
    /// Final barrier weight.
    pub t: f64,
    /// Objective after each centering, starting with `f(x0)`.
    pub objective_trace: Vec<f64>,
    pub newton_steps: usize,
}

const ARMIJO: f64 = 0.01;
const BACKTRACK: f64 = 0.5;
/// Shortest step tried before the line search gives up.
const MIN_STEP: f64 = 1e-10;

struct Barrier<'a> {
    program: &'a ConvexProgram,
    t: f64,
}

impl Barrier<'_> {
    /// Barrier value, `None` outside the strict interior.
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        if !self.program.objective.in_domain(x) {
            return None;
        }
        let mut v = -self.t * self.program.objective.value(x);
        for g in &self.program.constraints {
            let gi = g.value(x);
            if !(gi < 0.0) {
                return None;
            }
            v -= (-gi).ln();
        }
        v.is_finite().then_some(v)
    }

    fn newton_system(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.len();
        let f = &self.program.objective;
        let mut grad = f.gradient(x) * -self.t;
        let mut hess = DMatrix::zeros(n, n);
        f.accumulate_hessian(x, -self.t, &mut hess);
        for g in &self.program.constraints {
            let slack = -g.value(x);
            let dg = g.gradient(x);
            grad.axpy(1.0 / slack, &dg, 1.0);
            g.accumulate_hessian(x, 1.0 / slack, &mut hess);
            hess.ger(1.0 / (slack * slack), &dg, &dg, 1.0);
        }
        (grad, hess)
    }
}

/// Solves `hess * step = -grad`, regularizing the diagonal when the
/// factorization fails.
fn newton_step(grad: &DVector<f64>, mut hess: DMatrix<f64>) -> Result<DVector<f64>> {
    let n = grad.len();
    let diag_scale = (0..n).map(|i| hess[(i, i)].abs()).fold(1.0, f64::max);
    let mut shift = 1e-10 * diag_scale;
    for _ in 0..12 {
        if let Some(chol) = hess.clone().cholesky() {
            return Ok(-chol.solve(grad));
        }
        for i in 0..n {
            hess[(i, i)] += shift;
        }
        shift *= 100.0;
    }
    Err(Error::LineSearchStall(0.0))
}

/// Maximizes `program.objective` from the strictly feasible `x0`.
pub fn barrier_solve(program: &ConvexProgram, x0: &DVector<f64>, opts: &SolverOptions) -> Result<BarrierOutcome> {
    opts.validate()?;
    if x0.len() != program.dim {
        return Err(Error::Dimension(format!("start has length {}, program {}", x0.len(), program.dim)));
    }
    let worst = program.constraint_values(x0).into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !(worst < 0.0) || !program.objective.in_domain(x0) {
        return Err(Error::NotStrictlyFeasible(worst));
    }

    let m = program.constraints.len();
    let mut x = x0.clone();
    let mut t = opts.barrier_t0;
    let mut objective_trace = vec![program.objective.value(&x)];
    let mut newton_steps = 0;
    loop {
        let centering = center(program, &mut x, t, opts)?;
        newton_steps += centering.steps;
        objective_trace.push(program.objective.value(&x));
        if m == 0 || (m as f64) / t < opts.feas_tol {
            break;
        }
        if let Some(decrement) = centering.stalled {
            if newton_steps == 0 {
                return Err(Error::LineSearchStall(decrement));
            }
            // no descent left in floating point: a larger t cannot help either
            if centering.steps == 0 {
                break;
            }
        }
        t *= opts.barrier_mu;
    }
    Ok(BarrierOutcome { x, t, objective_trace, newton_steps })
}

struct Centering {
    steps: usize,
    /// Newton decrement at which the line search found no decrease.
    stalled: Option<f64>,
}

/// Damped Newton on the barrier at weight `t`. Stops at the decrement
/// tolerance, at `max_newton`, or when no step of length `>= MIN_STEP`
/// decreases the barrier (rounding floor of an ill-conditioned Hessian).
fn center(program: &ConvexProgram, x: &mut DVector<f64>, t: f64, opts: &SolverOptions) -> Result<Centering> {
    let barrier = Barrier { program, t };
    let mut phi = barrier.value(x).ok_or(Error::NotStrictlyFeasible(0.0))?;
    for steps in 0..opts.max_newton {
        let (grad, hess) = barrier.newton_system(x);
        let step = newton_step(&grad, hess)?;
        let slope = grad.dot(&step);
        let decrement = -slope;
        if decrement / 2.0 <= opts.newton_tol || !decrement.is_finite() {
            return Ok(Centering { steps, stalled: None });
        }
        let mut s = 1.0;
        loop {
            let trial = &*x + &step * s;
            if let Some(v) = barrier.value(&trial) {
                if v <= phi + ARMIJO * s * slope {
                    *x = trial;
                    phi = v;
                    break;
                }
            }
            s *= BACKTRACK;
            if s < MIN_STEP {
                return Ok(Centering { steps, stalled: Some(decrement) });
            }
        }
    }
    Ok(Centering { steps: opts.max_newton, stalled: None })
}

/// `||grad f - sum_i lambda_i grad g_i||` with `lambda_i = 1 / (-t g_i)`.
pub fn kkt_residual(program: &ConvexProgram, x: &DVector<f64>, t: f64) -> f64 {
    let mut r = program.objective.gradient(x);
    for g in &program.constraints {
        let lambda = 1.0 / (-t * g.value(x));
        r.axpy(-lambda, &g.gradient(x), 1.0);
    }
    r.norm()
}

/// Central-difference gradient, for checking analytic derivatives.
pub fn finite_difference_gradient(f: &dyn SmoothFunction, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut out = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let up = f.value(&xp);
        xp[i] = xi - h;
        let down = f.value(&xp);
        xp[i] = xi;
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Central-difference Hessian built from analytic gradients.
pub fn finite_difference_hessian(f: &dyn SmoothFunction, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        let xi = x[i];
        xp[i] = xi + h;
        let up = f.gradient(&xp);
        xp[i] = xi - h;
        let down = f.gradient(&xp);
        xp[i] = xi;
        out.set_column(i, &((up - down) / (2.0 * h)));
    }
    out
}

/// Packs the beams as `[Re w_0, ..., Re w_{K-1}, Im w_0, ..., Im w_{K-1}]`.
pub fn lift(beams: &BeamformingSet) -> DVector<f64> {
    let k = beams.num_users();
    let m = beams.num_antennas();
    let mut x = DVector::zeros(2 * m * k);
    for (u, w) in beams.w.iter().enumerate() {
        for (i, z) in w.iter().enumerate() {
            x[u * m + i] = z.re;
            x[m * k + u * m + i] = z.im;
        }
    }
    x
}

pub fn unlift(x: &DVector<f64>, k: usize, m: usize) -> Result<BeamformingSet> {
    if x.len() != 2 * m * k {
        return Err(Error::Dimension(format!("vector of length {} cannot hold {k} x {m} beams", x.len())));
    }
    let w = (0..k)
        .map(|u| CVector::from_fn(m, |i, _| Complex::new(x[u * m + i], x[m * k + u * m + i])))
        .collect();
    Ok(BeamformingSet { w })
}
