//! Time-switching subproblem for fixed beams.
//!
//! With `u = tau / (1 - tau)` the energy efficiency becomes
//!
//! ```text
//! EE(u) = log2(1 + A u / (1 + a_err u)) / (B u + C)
//! ```
//!
//! and every reduced QoS constraint is affine in `u`: `u D + E <= 0`. The
//! numerator is concave and the denominator affine, so Dinkelbach's method with
//! a closed-form inner maximizer finds the global optimum on the feasible
//! interval. `a_err` is the estimation-error leakage of the D2D link and is zero
//! under perfect CSI.

use std::f64::consts::LN_2;

use crate::channel::ChannelSet;
use crate::error::{Error, Result};
use crate::physics::{BeamformingSet, LinkModel, QosLink, SystemParams};

/// One reduced QoS constraint `u * slope + constant <= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauConstraint {
    pub link: QosLink,
    /// `eta P_r |h_dt|^2` of the observer (`D_t`, or `F_k` on own links).
    pub slope: f64,
    /// Interference plus noise minus `signal / gamma` (`E_{k,t}`, or `G_k`).
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauCoefficients {
    /// `eta P_r |h_dd|^2 / (P_i + sigma^2)`.
    pub a: f64,
    /// `eta P_r + P_c`.
    pub b: f64,
    /// `P_c`.
    pub c: f64,
    /// `eta P_r |eps_dd|^2 / (P_i + sigma^2)`; zero under perfect CSI.
    pub a_err: f64,
    /// Own-link constraints first, then cross links, observer-major.
    pub constraints: Vec<TauConstraint>,
}

impl TauCoefficients {
    /// Unconstrained coefficients for perfect CSI.
    pub fn unconstrained(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c, a_err: 0.0, constraints: Vec::new() }
    }

    /// `log2(1 + A u / (1 + a_err u))`.
    pub fn numerator(&self, u: f64) -> f64 {
        (self.a * u / (1.0 + self.a_err * u)).ln_1p() / LN_2
    }

    pub fn denominator(&self, u: f64) -> f64 {
        self.b * u + self.c
    }

    /// Energy efficiency at `u`.
    pub fn ratio(&self, u: f64) -> f64 {
        self.numerator(u) / self.denominator(u)
    }

    /// `D_t` for observer `t` (zero if `t` has no constraint).
    pub fn d(&self, t: usize) -> f64 {
        self.constraints.iter().find(|c| c.link.observer == t).map_or(0.0, |c| c.slope)
    }

    /// `E_{k,t}`: constant of the constraint where `t` decodes `k`.
    pub fn e(&self, k: usize, t: usize) -> Option<f64> {
        self.constraints
            .iter()
            .find(|c| c.link.observer == t && c.link.decoded == k)
            .map(|c| c.constant)
    }
}

/// Coefficients for an arbitrary link model (scheme, CSI errors). A zero SINR
/// threshold leaves the problem unconstrained.
pub fn tau_coefficients(model: &LinkModel<'_>, beams: &BeamformingSet) -> TauCoefficients {
    let params = model.params;
    let p_r = model.harvested_power(beams);
    let denom = model.dr_interference(beams) + params.sigma2;
    let gamma = model.gamma();

    let mut links = model.qos_links();
    links.sort_by_key(|l| (l.observer != l.decoded, l.observer, l.decoded));
    let constraints = if gamma > 0.0 {
        links
            .into_iter()
            .map(|link| {
                let t = model.link_terms(beams, link);
                TauConstraint {
                    link,
                    slope: params.eta * p_r * t.d2d_gain,
                    constant: t.bs_interference + params.sigma2 - t.signal / gamma,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    TauCoefficients {
        a: params.eta * p_r * model.channels.d2d.norm_sqr() / denom,
        b: params.eta * p_r + params.p_c,
        c: params.p_c,
        a_err: params.eta * p_r * model.d2d_error_gain() / denom,
        constraints,
    }
}

/// NOMA, perfect CSI. Rejects `R_min = 0`, whose constraints divide by zero;
/// use [`tau_coefficients`] for the unconstrained case.
pub fn compute_tau_coefficients(
    beams: &BeamformingSet,
    channels: &ChannelSet,
    params: &SystemParams,
) -> Result<TauCoefficients> {
    if params.gamma_min() <= 0.0 {
        return Err(Error::InvalidParams("QoS coefficients need R_min > 0".into()));
    }
    beams.check_dims(channels.num_users(), channels.num_antennas())?;
    Ok(tau_coefficients(&LinkModel::new(channels, params), beams))
}

/// Largest `u` satisfying every constraint; `+inf` if none binds.
pub fn tau_feasible_interval(coeffs: &TauCoefficients) -> Result<f64> {
    let mut upper = f64::INFINITY;
    for c in &coeffs.constraints {
        if c.slope > 0.0 {
            let bound = -c.constant / c.slope;
            if bound < 0.0 {
                return Err(Error::Infeasible(format!(
                    "user {} cannot decode user {} at any tau",
                    c.link.observer, c.link.decoded
                )));
            }
            upper = upper.min(bound);
        } else if c.constant > 0.0 {
            return Err(Error::Infeasible(format!(
                "user {} cannot decode user {} even without D2D interference",
                c.link.observer, c.link.decoded
            )));
        }
    }
    Ok(upper)
}

/// Maximizer of `numerator(u) - q * denominator(u)` on `[0, upper]`.
///
/// The stationary point solves `(1 + (A + a_err) u)(1 + a_err u) = A / (q B ln 2)`;
/// with `a_err = 0` it is `1 / (q B ln 2) - 1 / A`. For `q = 0` the objective
/// is nondecreasing and the upper end (possibly infinite) is returned.
pub fn dinkelbach_inner(coeffs: &TauCoefficients, q: f64, upper: f64) -> f64 {
    let (a, c) = (coeffs.a, coeffs.a_err);
    if a <= 0.0 {
        return 0.0;
    }
    if q <= 0.0 {
        return upper;
    }
    let r = a / (q * coeffs.b * LN_2);
    if r <= 1.0 {
        return 0.0;
    }
    let u = if c == 0.0 {
        1.0 / (q * coeffs.b * LN_2) - 1.0 / a
    } else {
        let lin = a + 2.0 * c;
        2.0 * (r - 1.0) / (lin + (lin * lin + 4.0 * (a + c) * c * (r - 1.0)).sqrt())
    };
    u.clamp(0.0, upper)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DinkelbachOutcome {
    /// Optimal `u = tau / (1 - tau)`.
    pub tau_bar: f64,
    /// Optimal energy efficiency, `ratio(tau_bar)`.
    pub q: f64,
    /// `F(q)` at termination.
    pub f_value: f64,
    /// Ratio estimate after each update, starting from 0.
    pub q_trace: Vec<f64>,
}

impl DinkelbachOutcome {
    pub fn tau(&self) -> f64 {
        self.tau_bar / (1.0 + self.tau_bar)
    }
}

pub const DINKELBACH_TOL: f64 = 1e-8;
pub const DINKELBACH_MAX_ITER: usize = 100;

/// Dinkelbach iterations on `[0, upper]` starting from `q = 0`. An infinite
/// `upper` with `q = 0` is seeded at `u = 1`.
pub fn dinkelbach_on(coeffs: &TauCoefficients, upper: f64, tol: f64) -> Result<DinkelbachOutcome> {
    if !(upper >= 0.0) {
        return Err(Error::Infeasible(format!("empty tau interval [0, {upper}]")));
    }
    let mut q = 0.0;
    let mut q_trace = vec![q];
    for _ in 0..DINKELBACH_MAX_ITER {
        let mut u = dinkelbach_inner(coeffs, q, upper);
        if u.is_infinite() {
            u = 1.0;
        }
        let f = coeffs.numerator(u) - q * coeffs.denominator(u);
        if f.abs() < tol {
            return Ok(DinkelbachOutcome { tau_bar: u, q: coeffs.ratio(u), f_value: f, q_trace });
        }
        q = coeffs.ratio(u);
        q_trace.push(q);
    }
    Err(Error::NonConvergence(DINKELBACH_MAX_ITER))
}

/// Optimal `u` and energy efficiency for the coefficients' feasible interval.
pub fn dinkelbach_solve(coeffs: &TauCoefficients, tol: f64) -> Result<DinkelbachOutcome> {
    let upper = tau_feasible_interval(coeffs)?;
    dinkelbach_on(coeffs, upper, tol)
}
