//! Joint beamforming and time-switching optimizers.
//!
//! [`alternating_optimize`] alternates one surrogate beam solve with an exact
//! Dinkelbach update of `tau`. [`exhaustive_tau_optimize`] fixes `tau` on a
//! grid and runs the beam loop to convergence at each point. Both accept any
//! [`LinkModel`], so the OMA baseline and the imperfect-CSI variant reuse them.

use serde::{Deserialize, Serialize};

use crate::beam::{beam_step, solve_beams, BEAM_MAX_ROUNDS, BEAM_TOL};
use crate::channel::ChannelSet;
use crate::error::{Error, Result};
use crate::physics::{BeamformingSet, LinkModel, OmaBudget, RatesReport, Scheme, SystemParams, TimeSwitch};
use crate::solver::SolverOptions;
use crate::tau::{dinkelbach_solve, tau_coefficients, DINKELBACH_TOL};
use crate::{CVector, Complex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(rename = "alt")]
    Alternating,
    Exhaustive,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Alternating => "alt",
            Algorithm::Exhaustive => "exhaustive",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alt" | "alternating" => Ok(Algorithm::Alternating),
            "exhaustive" | "exh" => Ok(Algorithm::Exhaustive),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub beams: BeamformingSet,
    pub tau: TimeSwitch,
    pub ee: f64,
    pub rates: RatesReport,
    /// Energy efficiency at the start and after every outer iteration (ALT),
    /// or the best value at each grid point (exhaustive).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub scheme: Scheme,
    pub algorithm: Algorithm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltOptions {
    /// Relative change of the energy efficiency that ends the loop.
    pub tol: f64,
    pub max_outer: usize,
    pub solver: SolverOptions,
}

impl Default for AltOptions {
    fn default() -> Self {
        Self { tol: 1e-5, max_outer: 30, solver: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExhaustiveOptions {
    /// Grid step over `tau`.
    pub xi: f64,
    /// Relative tolerance of the beam loop at each grid point.
    pub tol: f64,
    pub max_rounds: usize,
    pub solver: SolverOptions,
}

impl Default for ExhaustiveOptions {
    fn default() -> Self {
        Self { xi: 0.1, tol: BEAM_TOL, max_rounds: BEAM_MAX_ROUNDS, solver: SolverOptions::default() }
    }
}

/// Safety factor on the SINR threshold used when sizing the initial powers.
const INIT_MARGIN: f64 = 1.1;
const INIT_TAU: f64 = 0.5;
const INIT_HALVINGS: usize = 30;
/// Fraction of the budget the initial beams use, so the power constraint is strict.
const INIT_POWER_FILL: f64 = 1.0 - 1e-9;

/// MRT beams that meet every reduced QoS constraint with a 10% margin at `tau`.
///
/// Powers come from a backward pass over the SIC order (strongest user first)
/// against worst-case interference: the whole budget on the MRT direction that
/// feeds the D2D transmitter most, and likewise for the CSI error leakage. The
/// resulting powers are scaled up uniformly to fill the budget, which only
/// raises every SINR.
pub fn feasible_beams_at(model: &LinkModel<'_>, tau: f64) -> Result<BeamformingSet> {
    let ts = TimeSwitch::new(tau)?;
    if ts.tau() >= 1.0 {
        return Err(Error::InvalidTau(tau));
    }
    let (k, params) = (model.k(), model.params);
    let ch = model.channels;
    let dirs: Vec<CVector> = ch
        .users
        .iter()
        .map(|h| {
            let n = h.norm();
            if n > 0.0 { h / Complex::from(n) } else { h.clone() }
        })
        .collect();
    let gamma = model.gamma() * INIT_MARGIN;

    // largest value of sum_j p_j x_j over budget-feasible powers
    let budget_bound = |x: &mut dyn Iterator<Item = f64>| match (model.scheme, model.oma_budget) {
        (Scheme::Oma, OmaBudget::PerSlot) => params.p_max * x.sum::<f64>(),
        _ => params.p_max * x.fold(0.0, f64::max),
    };
    let p_r_bound = model.share() * budget_bound(&mut dirs.iter().map(|d| ch.bs_dt.dotc(d).norm_sqr()));
    let err_bound = |t: usize| match model.csi_error {
        Some(e) => budget_bound(&mut model.error_leakers(t).map(|j| e.users[j].dotc(&dirs[j]).norm_sqr())),
        None => 0.0,
    };
    let noise = |t: usize| {
        ts.tau_bar() * params.eta * p_r_bound * ch.dt_users[t].norm_sqr() + err_bound(t) + params.sigma2
    };

    let mut powers = vec![0.0; k];
    for user in (0..k).rev() {
        let mut need: f64 = 0.0;
        for link in model.qos_links().into_iter().filter(|l| l.decoded == user) {
            let h = &ch.users[link.observer];
            let g = h.dotc(&dirs[user]).norm_sqr();
            let interference: f64 =
                model.sic_interferers(link).map(|j| powers[j] * h.dotc(&dirs[j]).norm_sqr()).sum();
            let req = gamma * (interference + noise(link.observer));
            if req > 0.0 {
                need = need.max(if g > 0.0 { req / g } else { f64::INFINITY });
            }
        }
        powers[user] = need;
    }

    let budget_use = match (model.scheme, model.oma_budget) {
        (Scheme::Oma, OmaBudget::PerSlot) => powers.iter().cloned().fold(0.0, f64::max),
        _ => powers.iter().sum(),
    };
    if !(budget_use <= params.p_max * INIT_POWER_FILL) {
        return Err(Error::Infeasible(format!("QoS needs {budget_use:.3e} W of {:.3e} W at tau = {tau}", params.p_max)));
    }
    let scale = if budget_use > 0.0 {
        params.p_max * INIT_POWER_FILL / budget_use
    } else {
        // no QoS requirement: split the budget evenly
        for p in &mut powers {
            *p = 1.0;
        }
        params.p_max * INIT_POWER_FILL / budget_use_of(model, &powers)
    };
    let beams = BeamformingSet {
        w: dirs.iter().zip(&powers).map(|(d, p)| d * Complex::from((p * scale).sqrt())).collect(),
    };
    let strict = model.qos_margins(&beams, ts).iter().all(|(_, m)| *m > 0.0 || model.gamma() == 0.0);
    if !strict {
        return Err(Error::Infeasible(format!("initial beams miss QoS at tau = {tau}")));
    }
    Ok(beams)
}

fn budget_use_of(model: &LinkModel<'_>, powers: &[f64]) -> f64 {
    match (model.scheme, model.oma_budget) {
        (Scheme::Oma, OmaBudget::PerSlot) => powers.iter().cloned().fold(0.0, f64::max),
        _ => powers.iter().sum(),
    }
}

/// Feasible `(W0, tau0)`: `tau0 = 0.5`, halved until the QoS sizing fits the
/// budget, with `tau0 = 0` as the last resort.
pub fn feasible_initialization(model: &LinkModel<'_>) -> Result<(BeamformingSet, TimeSwitch)> {
    let mut tau = INIT_TAU;
    for _ in 0..INIT_HALVINGS {
        if let Ok(w) = feasible_beams_at(model, tau) {
            return Ok((w, TimeSwitch::new(tau)?));
        }
        tau /= 2.0;
    }
    let w = feasible_beams_at(model, 0.0)
        .map_err(|_| Error::Infeasible("no initial beams meet QoS even without harvesting".into()))?;
    Ok((w, TimeSwitch::new(0.0)?))
}

/// Largest `u <= target` (shrinking geometrically) at which every QoS margin
/// is strictly positive; falls back to `fallback`.
fn strictly_feasible_tau_bar(model: &LinkModel<'_>, beams: &BeamformingSet, target: f64, fallback: f64) -> f64 {
    let gamma = model.gamma();
    if gamma == 0.0 {
        return target;
    }
    let ok = |u: f64| {
        TimeSwitch::from_tau_bar(u)
            .map(|ts| model.qos_margins(beams, ts).iter().all(|(_, m)| *m > 1e-9 * gamma))
            .unwrap_or(false)
    };
    let mut delta = 1e-12;
    while delta < 1e-3 {
        let u = target * (1.0 - delta);
        if ok(u) {
            return u;
        }
        delta *= 2.0;
    }
    fallback
}

/// Alternates a surrogate beam solve with a Dinkelbach `tau` update until the
/// energy efficiency changes by less than `opts.tol` (relative). Returns the
/// best iterate.
pub fn alternating_optimize(model: &LinkModel<'_>, opts: &AltOptions) -> Result<Solution> {
    let (mut beams, ts0) = feasible_initialization(model)?;
    let mut tau_bar = ts0.tau_bar();
    let ee_at = |w: &BeamformingSet, u: f64| model.energy_efficiency(w, TimeSwitch::from_tau_bar(u).unwrap());

    let mut ee = ee_at(&beams, tau_bar);
    let mut trace = vec![ee];
    let mut best = (beams.clone(), tau_bar, ee);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_outer {
        iterations += 1;
        if tau_bar > 0.0 {
            match beam_step(model, &beams, tau_bar, &opts.solver) {
                Ok(next) => beams = next,
                Err(Error::LineSearchStall(_)) | Err(Error::NotStrictlyFeasible(_)) => break,
                Err(e) => return Err(e),
            }
        }
        let coeffs = tau_coefficients(model, &beams);
        let candidate = match dinkelbach_solve(&coeffs, DINKELBACH_TOL) {
            Ok(out) => strictly_feasible_tau_bar(model, &beams, out.tau_bar, tau_bar),
            Err(_) => tau_bar,
        };
        // keep the previous switch if backing off lost more than it gained
        if ee_at(&beams, candidate) >= ee_at(&beams, tau_bar) {
            tau_bar = candidate;
        }

        let next = ee_at(&beams, tau_bar);
        trace.push(next);
        if next > best.2 {
            best = (beams.clone(), tau_bar, next);
        }
        let change = (next - ee).abs();
        ee = next;
        if change <= opts.tol * ee.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let (beams, tau_bar, ee) = best;
    let tau = TimeSwitch::from_tau_bar(tau_bar)?;
    Ok(Solution {
        rates: model.rates(&beams, tau),
        beams,
        tau,
        ee,
        trace,
        iterations,
        converged,
        scheme: model.scheme,
        algorithm: Algorithm::Alternating,
    })
}

/// `{0.001, 0.001 + xi, ...}` up to 0.999, rounded to 1e-9.
pub fn tau_grid(xi: f64) -> Result<Vec<f64>> {
    if !(xi > 0.0) {
        return Err(Error::InvalidParams(format!("grid step must be positive, got {xi}")));
    }
    let mut grid = Vec::new();
    for i in 0.. {
        let tau = ((0.001 + i as f64 * xi) * 1e9).round() / 1e9;
        if tau > 0.999 {
            break;
        }
        grid.push(tau);
    }
    Ok(grid)
}

/// Runs the beam loop to convergence at every grid `tau` and keeps the best.
pub fn exhaustive_tau_optimize(model: &LinkModel<'_>, opts: &ExhaustiveOptions) -> Result<Solution> {
    let mut best: Option<(BeamformingSet, f64, f64)> = None;
    let mut trace = Vec::new();
    let mut evaluated = 0;
    for tau in tau_grid(opts.xi)? {
        let Ok(init) = feasible_beams_at(model, tau) else { continue };
        let tau_bar = TimeSwitch::new(tau)?.tau_bar();
        let (beams, ee) = match solve_beams(model, tau_bar, &init, &opts.solver, opts.tol, opts.max_rounds) {
            Ok(out) => {
                let ee = *out.trace.last().unwrap();
                (out.beams, ee)
            }
            Err(Error::LineSearchStall(_)) | Err(Error::NotStrictlyFeasible(_)) => {
                let ee = model.energy_efficiency(&init, TimeSwitch::new(tau)?);
                (init, ee)
            }
            Err(e) => return Err(e),
        };
        evaluated += 1;
        trace.push(ee);
        if best.as_ref().is_none_or(|b| ee > b.2) {
            best = Some((beams, tau, ee));
        }
    }
    let (beams, tau, ee) = best.ok_or_else(|| Error::Infeasible("every grid tau is infeasible".into()))?;
    let tau = TimeSwitch::new(tau)?;
    Ok(Solution {
        rates: model.rates(&beams, tau),
        beams,
        tau,
        ee,
        trace,
        iterations: evaluated,
        converged: true,
        scheme: model.scheme,
        algorithm: Algorithm::Exhaustive,
    })
}

/// The alternating optimizer on the TDMA model.
pub fn oma_baseline_optimize(
    channels: &ChannelSet,
    params: &SystemParams,
    budget: OmaBudget,
    opts: &AltOptions,
) -> Result<Solution> {
    let model = LinkModel::new(channels, params).with_scheme(Scheme::Oma).with_oma_budget(budget);
    alternating_optimize(&model, opts)
}

/// Runs `algorithm` on `model`.
pub fn optimize(model: &LinkModel<'_>, algorithm: Algorithm, alt: &AltOptions, exh: &ExhaustiveOptions) -> Result<Solution> {
    match algorithm {
        Algorithm::Alternating => alternating_optimize(model, alt),
        Algorithm::Exhaustive => exhaustive_tau_optimize(model, exh),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channels, generate_topology, trial_rng};

    fn instance(seed: u64, k: usize, m: usize) -> (ChannelSet, SystemParams) {
        let params = SystemParams { k, m, ..SystemParams::default() };
        let mut rng = trial_rng(seed, 0);
        let topo = generate_topology(&params, &mut rng);
        (draw_channels(&topo, &params, &mut rng), params)
    }

    fn check_solution(model: &LinkModel<'_>, sol: &Solution) {
        assert!(model.qos_feasible(&sol.beams, sol.tau).0);
        assert!(sol.beams.total_power() <= model.params.p_max * (1.0 + 1e-8));
        assert!((model.energy_efficiency(&sol.beams, sol.tau) - sol.ee).abs() <= 1e-12 * sol.ee);
    }

    #[test]
    fn grid_examples() {
        let g = tau_grid(0.1).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.001);
        assert_eq!(g[9], 0.901);
        assert_eq!(tau_grid(0.5).unwrap(), vec![0.001, 0.501]);
        assert!(tau_grid(0.5).unwrap().iter().all(|t| g.contains(t)));
        assert!(tau_grid(0.0).is_err());
    }

    #[test]
    fn init_single_user_accepts_half() {
        let (ch, params) = instance(3, 1, 4);
        let model = LinkModel::new(&ch, &params);
        let (w, ts) = feasible_initialization(&model).unwrap();
        assert_eq!(ts.tau(), 0.5);
        assert!(model.qos_feasible(&w, ts).0);
        assert!((w.total_power() / params.p_max - 1.0).abs() < 1e-8);
    }

    #[test]
    fn init_is_feasible_with_margin() {
        for seed in 0..50 {
            let (ch, params) = instance(seed, 4, 10);
            for scheme in [Scheme::Noma, Scheme::Oma] {
                let model = LinkModel::new(&ch, &params).with_scheme(scheme);
                let (w, ts) = feasible_initialization(&model).unwrap();
                for (_, m) in model.qos_margins(&w, ts) {
                    assert!(m >= 0.1 * model.gamma() * (1.0 - 1e-9));
                }
                assert!(w.total_power() < params.p_max);
            }
        }
    }

    #[test]
    fn colinear_weak_channels_are_infeasible() {
        let h = CVector::from_vec(vec![Complex::new(1e-6, 0.0), Complex::new(0.0, 1e-6)]);
        let ch = ChannelSet {
            users: vec![h.clone() * Complex::from(0.9), h.clone()],
            bs_dt: h.clone(),
            bs_dr: h.clone(),
            d2d: Complex::new(1.0, 0.0),
            dt_users: vec![Complex::new(0.01, 0.0); 2],
            order: vec![0, 1],
        };
        let params = SystemParams { k: 2, m: 2, r_min: 3.0, ..SystemParams::default() };
        let model = LinkModel::new(&ch, &params);
        assert!(matches!(feasible_initialization(&model), Err(Error::Infeasible(_))));
        // oracle: every power split along the common direction at tau = 0
        let n = 400;
        let ts = TimeSwitch::new(0.0).unwrap();
        let dir = &h / Complex::from(h.norm());
        for i in 0..=n {
            for j in 0..=(n - i) {
                let p = [params.p_max * i as f64 / n as f64, params.p_max * j as f64 / n as f64];
                let w = BeamformingSet { w: p.iter().map(|&pk| &dir * Complex::from(pk.sqrt())).collect() };
                assert!(!model.qos_feasible(&w, ts).0);
            }
        }
    }

    #[test]
    fn alternating_ascends_and_stays_feasible() {
        for seed in 0..3 {
            let (ch, params) = instance(seed, 3, 4);
            let model = LinkModel::new(&ch, &params);
            let sol = alternating_optimize(&model, &AltOptions::default()).unwrap();
            check_solution(&model, &sol);
            for pair in sol.trace.windows(2) {
                assert!(pair[1] >= pair[0] * (1.0 - 1e-8), "{:?}", sol.trace);
            }
            assert!(sol.ee >= sol.trace[0]);
        }
    }

    /// EE over (power, tau) for one user and one antenna: MRT is optimal, so
    /// the beam reduces to its power.
    fn scalar_ee(p: f64, tau: f64, ch: &ChannelSet, params: &SystemParams) -> f64 {
        let model = LinkModel::new(ch, params);
        let w = BeamformingSet { w: vec![CVector::from_element(1, Complex::new(p.sqrt(), 0.0))] };
        let ts = TimeSwitch::new(tau).unwrap();
        if model.qos_feasible(&w, ts).0 { model.energy_efficiency(&w, ts) } else { 0.0 }
    }

    #[test]
    fn single_antenna_matches_grid_oracle() {
        for seed in 0..3 {
            let (ch, params) = instance(seed, 1, 1);
            let sol = alternating_optimize(&LinkModel::new(&ch, &params), &AltOptions::default()).unwrap();
            // 200 x 200 grid over (power, tau), then refined around the best cell
            let (mut p_lo, mut p_hi, mut t_lo, mut t_hi) = (0.0, params.p_max, 0.0, 0.999);
            let mut best = 0.0;
            for _ in 0..6 {
                let mut arg = (0.0, 0.0);
                for i in 0..=200 {
                    for j in 0..=200 {
                        let p = p_lo + (p_hi - p_lo) * i as f64 / 200.0;
                        let t = t_lo + (t_hi - t_lo) * j as f64 / 200.0;
                        let v = scalar_ee(p, t, &ch, &params);
                        if v > best {
                            best = v;
                            arg = (p, t);
                        }
                    }
                }
                let (dp, dt) = ((p_hi - p_lo) / 20.0, (t_hi - t_lo) / 20.0);
                p_lo = (arg.0 - dp).max(0.0);
                p_hi = (arg.0 + dp).min(params.p_max);
                t_lo = (arg.1 - dt).max(0.0);
                t_hi = (arg.1 + dt).min(0.999);
            }
            assert!((sol.ee - best).abs() <= 0.01 * best, "seed {seed}: {} vs {best}", sol.ee);
        }
    }

    #[test]
    fn exhaustive_finer_grid_dominates() {
        let (ch, params) = instance(1, 2, 3);
        let model = LinkModel::new(&ch, &params);
        let fine = exhaustive_tau_optimize(&model, &ExhaustiveOptions::default()).unwrap();
        let coarse = exhaustive_tau_optimize(&model, &ExhaustiveOptions { xi: 0.5, ..Default::default() }).unwrap();
        check_solution(&model, &fine);
        assert!(fine.ee >= coarse.ee);
        assert_eq!(fine.trace.len(), 10);
        assert!(tau_grid(0.1).unwrap().contains(&fine.tau.tau()));
    }

    #[test]
    fn oma_coincides_with_noma_for_one_user() {
        let (ch, params) = instance(4, 1, 3);
        let noma = alternating_optimize(&LinkModel::new(&ch, &params), &AltOptions::default()).unwrap();
        for budget in [OmaBudget::Shared, OmaBudget::PerSlot] {
            let oma = oma_baseline_optimize(&ch, &params, budget, &AltOptions::default()).unwrap();
            assert!((oma.ee - noma.ee).abs() < 1e-9 * noma.ee, "{} vs {}", oma.ee, noma.ee);
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::Alternating, Algorithm::Exhaustive] {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("nope".parse::<Algorithm>().is_err());
    }
}
