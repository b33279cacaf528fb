//! Beamforming subproblem for a fixed time switch.
//!
//! The energy efficiency `R(W) / E(W)` (with `R` the D2D rate and `E` the
//! slot energy, both divided by `1 - tau`) is replaced by the concave surrogate
//!
//! ```text
//! f_qq(W) = 2 y sqrt(log2(1 + c S(W))) - y^2 E(W)
//! S(W)    = w_h sum_k [2 Re(conj(z_k) h_Dt^H w_k) - |z_k|^2 Den(W)]
//! ```
//!
//! where `c = tau_bar eta |h_dd|^2`, `Den` is the interference-plus-noise at
//! the D2D receiver and `w_h` is the harvesting share (1 for NOMA, `1/K` for
//! OMA). Every QoS constraint `|h_t^H w_k|^2 / alpha_tk(W) >= gamma` becomes
//! `gamma - 2 Re(conj(nu) h_t^H w_k) + |nu|^2 alpha_tk(W) <= 0`. With the
//! auxiliaries `y, z, nu` fixed, the surrogate problem is convex; at their
//! closed-form updates it touches the original problem.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::physics::{BeamformingSet, LinkModel, OmaBudget, QosLink, Scheme};
use crate::solver::{barrier_solve, lift, unlift, ConvexProgram, SmoothFunction, SolverOptions};
use crate::{CVector, Complex};

type CMatrix = DMatrix<Complex>;

/// `c0 + sum_k [Re(c_k^H w_k) + w_k^H Q_k w_k]` with Hermitian `Q_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserQuadratic {
    pub c0: f64,
    pub linear: Vec<CVector>,
    pub quad: Vec<CMatrix>,
}

impl UserQuadratic {
    pub fn zero(k: usize, m: usize) -> Self {
        Self { c0: 0.0, linear: vec![CVector::zeros(m); k], quad: vec![CMatrix::zeros(m, m); k] }
    }

    fn k(&self) -> usize {
        self.linear.len()
    }

    fn m(&self) -> usize {
        self.linear.first().map_or(0, |c| c.len())
    }

    /// `Q_user += weight * h h^H`.
    pub fn add_outer(&mut self, user: usize, weight: f64, h: &CVector) {
        self.quad[user].gerc(Complex::from(weight), h, h, Complex::from(1.0));
    }

    /// `Q_k += weight * h h^H` for every user.
    pub fn add_outer_all(&mut self, weight: f64, h: &CVector) {
        for user in 0..self.k() {
            self.add_outer(user, weight, h);
        }
    }

    pub fn add_identity(&mut self, user: usize, weight: f64) {
        for i in 0..self.m() {
            self.quad[user][(i, i)] += Complex::from(weight);
        }
    }

    pub fn eval(&self, w: &[CVector]) -> f64 {
        let mut v = self.c0;
        for ((c, q), wk) in self.linear.iter().zip(&self.quad).zip(w) {
            v += c.dotc(wk).re + wk.dotc(&(q * wk)).re;
        }
        v
    }

    /// Lifted gradient: `c_k + 2 Q_k w_k`, real parts then imaginary parts.
    pub fn lifted_gradient(&self, w: &[CVector]) -> DVector<f64> {
        let (k, m) = (self.k(), self.m());
        let mut g = DVector::zeros(2 * m * k);
        for (u, ((c, q), wk)) in self.linear.iter().zip(&self.quad).zip(w).enumerate() {
            let gk = c + q * wk * Complex::from(2.0);
            for i in 0..m {
                g[u * m + i] = gk[i].re;
                g[m * k + u * m + i] = gk[i].im;
            }
        }
        g
    }

    /// Adds `scale * 2 [[Re Q, -Im Q], [Im Q, Re Q]]` per user block.
    pub fn add_lifted_hessian(&self, scale: f64, hess: &mut DMatrix<f64>) {
        let (k, m) = (self.k(), self.m());
        let s = 2.0 * scale;
        for (u, q) in self.quad.iter().enumerate() {
            let re = u * m;
            let im = m * k + u * m;
            for j in 0..m {
                for i in 0..m {
                    let z = q[(i, j)];
                    hess[(re + i, re + j)] += s * z.re;
                    hess[(im + i, im + j)] += s * z.re;
                    hess[(re + i, im + j)] -= s * z.im;
                    hess[(im + i, re + j)] += s * z.im;
                }
            }
        }
    }
}

fn beams_of(x: &DVector<f64>, k: usize, m: usize) -> Vec<CVector> {
    unlift(x, k, m).expect("program dimension is 2MK").w
}

impl SmoothFunction for UserQuadratic {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.eval(&beams_of(x, self.k(), self.m()))
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.lifted_gradient(&beams_of(x, self.k(), self.m()))
    }
    fn accumulate_hessian(&self, _x: &DVector<f64>, scale: f64, hess: &mut DMatrix<f64>) {
        self.add_lifted_hessian(scale, hess);
    }
}

/// Auxiliary variables of the quadratic transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryVars {
    pub y: f64,
    pub z: Vec<Complex>,
    /// Cross links (`observer > decoded`).
    pub nu: Vec<(QosLink, Complex)>,
    /// Own links.
    pub mu: Vec<Complex>,
    /// Energy efficiency of the beams the auxiliaries were fitted to.
    pub ee: f64,
}

/// Interference plus noise at the D2D receiver, including estimation leakage.
fn d2d_denominator(model: &LinkModel<'_>, beams: &BeamformingSet, tau_bar: f64) -> f64 {
    model.dr_interference(beams)
        + tau_bar * model.params.eta * model.d2d_error_gain() * model.harvested_power(beams)
        + model.params.sigma2
}

/// Closed-form optimal auxiliaries for the beams `beams`.
pub fn update_auxiliaries(model: &LinkModel<'_>, beams: &BeamformingSet, tau_bar: f64) -> AuxiliaryVars {
    let den = d2d_denominator(model, beams, tau_bar);
    let z = beams.w.iter().map(|w| model.channels.bs_dt.dotc(w) / den).collect();
    let rate = model.d2d_sinr(beams, tau_bar).ln_1p() / std::f64::consts::LN_2;
    let energy = energy(model, beams, tau_bar);
    let y = rate.sqrt() / energy;

    let p_r = model.harvested_power(beams);
    let p_t = model.params.eta * tau_bar * p_r;
    let ratio = |link: QosLink| {
        let t = model.link_terms(beams, link);
        let alpha = p_t * t.d2d_gain + t.bs_interference + model.params.sigma2;
        model.channels.users[link.observer].dotc(&beams.w[link.decoded]) / alpha
    };
    let mut nu = Vec::new();
    let mut mu = vec![Complex::new(0.0, 0.0); model.k()];
    for link in model.qos_links() {
        if link.observer == link.decoded {
            mu[link.observer] = ratio(link);
        } else {
            nu.push((link, ratio(link)));
        }
    }
    AuxiliaryVars { y, z, nu, mu, ee: rate / energy }
}

/// `E(W) = tau_bar eta P_r + (1 + tau_bar) P_c`.
fn energy(model: &LinkModel<'_>, beams: &BeamformingSet, tau_bar: f64) -> f64 {
    tau_bar * model.params.eta * model.harvested_power(beams) + (1.0 + tau_bar) * model.params.p_c
}

/// The surrogate objective as a function of the lifted beams.
pub struct TransformedObjective {
    /// `S(W)`.
    pub s: UserQuadratic,
    /// `E(W)`.
    pub e: UserQuadratic,
    pub y: f64,
    /// `tau_bar eta |h_dd|^2`.
    pub c: f64,
    /// Multiplies the whole objective (keeps values near 1 for the solver).
    pub scale: f64,
}

impl TransformedObjective {
    pub fn new(model: &LinkModel<'_>, aux: &AuxiliaryVars, tau_bar: f64) -> Self {
        let (k, m) = (model.k(), model.m());
        let params = model.params;
        let ch = model.channels;
        let share = model.share();

        // Den(W) = share (|h_Dr^H w|^2 + tau_bar eta |eps_dd|^2 |h_Dt^H w|^2) + sigma^2
        let z_power: f64 = aux.z.iter().map(|z| z.norm_sqr()).sum();
        let mut s = UserQuadratic::zero(k, m);
        s.c0 = -share * z_power * params.sigma2;
        s.add_outer_all(-share * z_power * share, &ch.bs_dr);
        let leak = tau_bar * params.eta * model.d2d_error_gain();
        if leak > 0.0 {
            s.add_outer_all(-share * z_power * share * leak, &ch.bs_dt);
        }
        for (user, z) in aux.z.iter().enumerate() {
            s.linear[user] = &ch.bs_dt * (z * 2.0 * share);
        }

        let mut e = UserQuadratic::zero(k, m);
        e.c0 = (1.0 + tau_bar) * params.p_c;
        e.add_outer_all(tau_bar * params.eta * share, &ch.bs_dt);

        Self {
            s,
            e,
            y: aux.y,
            c: tau_bar * params.eta * ch.d2d.norm_sqr(),
            scale: 1.0,
        }
    }

    pub fn eval(&self, w: &[CVector]) -> f64 {
        let s = self.s.eval(w).max(0.0);
        let ell = (self.c * s).ln_1p() / std::f64::consts::LN_2;
        self.scale * (2.0 * self.y * ell.sqrt() - self.y * self.y * self.e.eval(w))
    }

    /// `(phi', phi'')` of `phi(S) = sqrt(log2(1 + c S))`.
    fn phi_derivatives(&self, s: f64) -> (f64, f64) {
        let ln2 = std::f64::consts::LN_2;
        let ell = (self.c * s).ln_1p() / ln2;
        let d1 = self.c / ((1.0 + self.c * s) * ln2);
        let d2 = -self.c * self.c / ((1.0 + self.c * s).powi(2) * ln2);
        let root = ell.sqrt();
        (d1 / (2.0 * root), d2 / (2.0 * root) - d1 * d1 / (4.0 * ell * root))
    }
}

impl SmoothFunction for TransformedObjective {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.eval(&beams_of(x, self.s.k(), self.s.m()))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = beams_of(x, self.s.k(), self.s.m());
        let (d1, _) = self.phi_derivatives(self.s.eval(&w));
        let mut g = self.s.lifted_gradient(&w) * (2.0 * self.y * d1);
        g.axpy(-self.y * self.y, &self.e.lifted_gradient(&w), 1.0);
        g * self.scale
    }

    fn accumulate_hessian(&self, x: &DVector<f64>, scale: f64, hess: &mut DMatrix<f64>) {
        let w = beams_of(x, self.s.k(), self.s.m());
        let (d1, d2) = self.phi_derivatives(self.s.eval(&w));
        let scale = scale * self.scale;
        let ds = self.s.lifted_gradient(&w);
        self.s.add_lifted_hessian(scale * 2.0 * self.y * d1, hess);
        hess.ger(scale * 2.0 * self.y * d2, &ds, &ds, 1.0);
        self.e.add_lifted_hessian(-scale * self.y * self.y, hess);
    }

    fn in_domain(&self, x: &DVector<f64>) -> bool {
        self.c > 0.0 && self.s.value(x) > 0.0
    }
}

/// Surrogate objective value (unscaled).
pub fn transformed_objective(model: &LinkModel<'_>, beams: &BeamformingSet, aux: &AuxiliaryVars, tau_bar: f64) -> f64 {
    TransformedObjective::new(model, aux, tau_bar).eval(&beams.w)
}

/// `gamma - 2 Re(conj(nu) h_t^H w_k) + |nu|^2 alpha_tk(W)`.
pub fn qos_surrogate(model: &LinkModel<'_>, link: QosLink, nu: Complex, tau_bar: f64) -> UserQuadratic {
    let (k, m) = (model.k(), model.m());
    let params = model.params;
    let h = &model.channels.users[link.observer];
    let weight = nu.norm_sqr();
    let mut g = UserQuadratic::zero(k, m);
    g.c0 = model.gamma() + weight * params.sigma2;
    g.linear[link.decoded] = h * (nu * -2.0);
    // D2D interference: eta tau_bar share |h_dt|^2 |h_Dt^H w_j|^2 for every j
    let d2d = params.eta * tau_bar * model.share() * model.channels.dt_users[link.observer].norm_sqr();
    if d2d > 0.0 {
        g.add_outer_all(weight * d2d, &model.channels.bs_dt);
    }
    for j in model.sic_interferers(link) {
        g.add_outer(j, weight, h);
    }
    if let Some(err) = model.csi_error {
        for j in model.error_leakers(link.observer) {
            g.add_outer(j, weight, &err.users[j]);
        }
    }
    g
}

/// Power budget constraints: one shared constraint, or one per OMA sub-slot.
pub fn power_constraints(model: &LinkModel<'_>) -> Vec<UserQuadratic> {
    let (k, m) = (model.k(), model.m());
    let p_max = model.params.p_max;
    match (model.scheme, model.oma_budget) {
        (Scheme::Oma, OmaBudget::PerSlot) => (0..k)
            .map(|user| {
                let mut g = UserQuadratic::zero(k, m);
                g.c0 = -p_max;
                g.add_identity(user, 1.0);
                g
            })
            .collect(),
        _ => {
            let mut g = UserQuadratic::zero(k, m);
            g.c0 = -p_max;
            for user in 0..k {
                g.add_identity(user, 1.0);
            }
            vec![g]
        }
    }
}

/// Convex program in the lifted beams for fixed auxiliaries: cross-link
/// constraints, own-link constraints, then the power budget. QoS constraints
/// are omitted when the SINR threshold is zero.
pub fn build_subproblem(model: &LinkModel<'_>, aux: &AuxiliaryVars, tau_bar: f64) -> ConvexProgram {
    let mut objective = TransformedObjective::new(model, aux, tau_bar);
    if aux.ee > 0.0 {
        objective.scale = 1.0 / aux.ee;
    }
    let mut constraints: Vec<Box<dyn SmoothFunction>> = Vec::new();
    if model.gamma() > 0.0 {
        for &(link, nu) in &aux.nu {
            constraints.push(Box::new(qos_surrogate(model, link, nu, tau_bar)));
        }
        for (user, &mu) in aux.mu.iter().enumerate() {
            let link = QosLink { observer: user, decoded: user };
            constraints.push(Box::new(qos_surrogate(model, link, mu, tau_bar)));
        }
    }
    for g in power_constraints(model) {
        constraints.push(Box::new(g));
    }
    ConvexProgram { objective: Box::new(objective), constraints, dim: 2 * model.m() * model.k() }
}

/// One auxiliary update followed by one surrogate solve, warm-started at `beams`.
pub fn beam_step(
    model: &LinkModel<'_>,
    beams: &BeamformingSet,
    tau_bar: f64,
    opts: &SolverOptions,
) -> Result<BeamformingSet> {
    let aux = update_auxiliaries(model, beams, tau_bar);
    let program = build_subproblem(model, &aux, tau_bar);
    let out = barrier_solve(&program, &lift(beams), opts)?;
    unlift(&out.x, model.k(), model.m())
}

#[derive(Debug, Clone)]
pub struct BeamRounds {
    pub beams: BeamformingSet,
    /// Energy efficiency before the first round and after each round.
    pub trace: Vec<f64>,
}

pub const BEAM_TOL: f64 = 1e-6;
pub const BEAM_MAX_ROUNDS: usize = 50;

/// Repeats [`beam_step`] until the energy efficiency improves by less than
/// `tol` (relative) or `max_rounds` is reached.
pub fn solve_beams(
    model: &LinkModel<'_>,
    tau_bar: f64,
    init: &BeamformingSet,
    opts: &SolverOptions,
    tol: f64,
    max_rounds: usize,
) -> Result<BeamRounds> {
    let ee = |w: &BeamformingSet| update_auxiliaries(model, w, tau_bar).ee;
    let mut beams = init.clone();
    let mut trace = vec![ee(&beams)];
    for _ in 0..max_rounds {
        let next = beam_step(model, &beams, tau_bar, opts)?;
        let value = ee(&next);
        let last = *trace.last().unwrap();
        beams = next;
        trace.push(value);
        if (value - last).abs() <= tol * last.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(BeamRounds { beams, trace })
}
