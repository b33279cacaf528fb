//! Rates, harvested power, energy consumption and QoS feasibility.
//!
//! All logarithms are base 2, slot length is 1 s and every transmitted symbol
//! has unit power, so rates are bits/s/Hz and energy efficiency is
//! (bits/Hz)/joule.
//!
//! A slot has two stages. During the first `tau` seconds the BS serves the
//! downlink users while the D2D transmitter harvests `P_r`. During the
//! remaining `1 - tau` seconds the D2D transmitter spends the harvested energy
//! at power `P_t = eta * tau_bar * P_r`, interfering with the downlink users.
//!
//! [`LinkModel`] evaluates every quantity for one channel realization and is
//! shared by the optimizers, the experiment harness and the RL environment.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSet, CsiErrorRealization};
use crate::error::{Error, Result};
use crate::CVector;

/// Converts dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Scalar scenario constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Number of downlink users `K`.
    pub k: usize,
    /// Number of BS antennas `M`.
    pub m: usize,
    /// BS power budget, watts.
    pub p_max: f64,
    /// Noise power, watts.
    pub sigma2: f64,
    /// RF-to-DC conversion efficiency.
    pub eta: f64,
    /// D2D circuit power, watts.
    pub p_c: f64,
    /// Minimum downlink rate, bits/s/Hz.
    pub r_min: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            k: 4,
            m: 10,
            p_max: dbm_to_watts(20.0),
            sigma2: dbm_to_watts(-94.0),
            eta: 0.1,
            p_c: 1e-3,
            r_min: 0.1,
        }
    }
}

impl SystemParams {
    /// SINR threshold equivalent to `r_min`: `2^r_min - 1`.
    pub fn gamma_min(&self) -> f64 {
        self.r_min.exp2() - 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if self.k == 0 || self.m == 0 {
            return bad("K and M must be at least 1");
        }
        if !(self.p_max > 0.0) {
            return bad("P_max must be positive");
        }
        if !(self.sigma2 > 0.0) {
            return bad("noise power must be positive");
        }
        if !(self.p_c > 0.0) {
            return bad("circuit power must be positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.r_min >= 0.0) || !self.r_min.is_finite() {
            return bad("R_min must be nonnegative");
        }
        Ok(())
    }
}

/// Multiple-access scheme shared by the downlink users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Superposition coding with SIC.
    Noma,
    /// Equal-share TDMA: user `k` owns sub-slot `k` of both stages.
    Oma,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Noma => "noma",
            Scheme::Oma => "oma",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noma" => Ok(Scheme::Noma),
            "oma" => Ok(Scheme::Oma),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}

/// How the BS power budget applies to the OMA sub-slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmaBudget {
    /// `sum_k |w_k|^2 <= P_max`: the NOMA budget split across sub-slots.
    #[default]
    Shared,
    /// `|w_k|^2 <= P_max` for each sub-slot separately.
    PerSlot,
}

/// One beamforming vector per downlink user.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingSet {
    pub w: Vec<CVector>,
}

impl BeamformingSet {
    pub fn zeros(k: usize, m: usize) -> Self {
        Self { w: vec![CVector::zeros(m); k] }
    }

    pub fn num_users(&self) -> usize {
        self.w.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.w.first().map_or(0, |w| w.len())
    }

    pub fn total_power(&self) -> f64 {
        self.w.iter().map(|w| w.norm_squared()).sum()
    }

    pub fn user_powers(&self) -> Vec<f64> {
        self.w.iter().map(|w| w.norm_squared()).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { w: self.w.iter().map(|w| w * crate::Complex::from(factor)).collect() }
    }

    pub fn within_budget(&self, params: &SystemParams) -> bool {
        self.total_power() <= params.p_max * (1.0 + 1e-8)
    }

    pub fn check_dims(&self, k: usize, m: usize) -> Result<()> {
        if self.w.len() != k || self.w.iter().any(|w| w.len() != m) {
            return Err(Error::Dimension(format!(
                "expected {k} beams of length {m}, got {} beams",
                self.w.len()
            )));
        }
        Ok(())
    }
}

/// Harvesting fraction of the unit slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSwitch {
    tau: f64,
}

impl TimeSwitch {
    /// Accepts `tau` in `[0, 1]`. `tau = 1` means no transmission phase.
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidTau(tau));
        }
        Ok(Self { tau })
    }

    pub fn from_tau_bar(tau_bar: f64) -> Result<Self> {
        if !(tau_bar >= 0.0) {
            return Err(Error::InvalidTau(tau_bar));
        }
        if tau_bar.is_infinite() {
            return Ok(Self { tau: 1.0 });
        }
        Ok(Self { tau: tau_bar / (1.0 + tau_bar) })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `tau / (1 - tau)`; infinite at `tau = 1`.
    pub fn tau_bar(&self) -> f64 {
        if self.tau >= 1.0 {
            f64::INFINITY
        } else {
            self.tau / (1.0 - self.tau)
        }
    }
}

/// Rate of observer `t` decoding user `k` over a whole slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossRate {
    pub observer: usize,
    pub decoded: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatesReport {
    /// Whole-slot rate of each user decoding its own signal.
    pub own: Vec<f64>,
    /// Whole-slot SIC rates for `decoded < observer`, ordered by observer then decoded.
    pub cross: Vec<CrossRate>,
    /// D2D rate.
    pub d2d_rate: f64,
    /// Power harvested at the D2D transmitter.
    pub harvested_power: f64,
    /// D2D transmit power.
    pub d2d_power: f64,
    /// D2D energy per slot.
    pub energy: f64,
    /// `d2d_rate / energy`.
    pub ee: f64,
}

/// A reduced QoS constraint: `observer` must decode `decoded`'s stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QosLink {
    pub observer: usize,
    pub decoded: usize,
}

/// Per-link quantities, split by how they depend on the time switch.
#[derive(Debug, Clone, Copy)]
pub struct LinkTerms {
    /// `|h_t^H w_k|^2`.
    pub signal: f64,
    /// BS-side interference during stage 2 (SIC residue plus CSI error terms).
    pub bs_interference: f64,
    /// SIC residue only (what stage 1 sees).
    pub sic_interference: f64,
    /// `|h_dt|^2` from the D2D transmitter to the observer.
    pub d2d_gain: f64,
}

fn gain(h: &CVector, w: &CVector) -> f64 {
    h.dotc(w).norm_sqr()
}

/// `sum_k |h^H w_k|^2`.
pub fn harvested_power(beams: &BeamformingSet, h_dt: &CVector) -> f64 {
    beams.w.iter().map(|w| gain(h_dt, w)).sum()
}

/// `eta * tau * P_r / (1 - tau)`.
pub fn d2d_transmit_power(ts: TimeSwitch, eta: f64, harvested: f64) -> Result<f64> {
    if ts.tau() >= 1.0 {
        return Err(Error::InvalidTau(ts.tau()));
    }
    Ok(eta * ts.tau_bar() * harvested)
}

/// Physics of one channel realization under a given scheme.
#[derive(Debug, Clone, Copy)]
pub struct LinkModel<'a> {
    pub channels: &'a ChannelSet,
    pub params: &'a SystemParams,
    pub scheme: Scheme,
    pub oma_budget: OmaBudget,
    /// Estimation error treated as extra interference (imperfect CSI).
    pub csi_error: Option<&'a CsiErrorRealization>,
}

impl<'a> LinkModel<'a> {
    pub fn new(channels: &'a ChannelSet, params: &'a SystemParams) -> Self {
        Self { channels, params, scheme: Scheme::Noma, oma_budget: OmaBudget::default(), csi_error: None }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_oma_budget(mut self, budget: OmaBudget) -> Self {
        self.oma_budget = budget;
        self
    }

    pub fn with_csi_error(mut self, error: Option<&'a CsiErrorRealization>) -> Self {
        self.csi_error = error;
        self
    }

    pub fn k(&self) -> usize {
        self.channels.num_users()
    }

    pub fn m(&self) -> usize {
        self.channels.num_antennas()
    }

    /// Fraction of the slot each user's stream is on air (rate prefactor).
    pub fn share(&self) -> f64 {
        match self.scheme {
            Scheme::Noma => 1.0,
            Scheme::Oma => 1.0 / self.k() as f64,
        }
    }

    /// SINR threshold the reduced stage-2 constraints compare against.
    pub fn gamma(&self) -> f64 {
        match self.scheme {
            Scheme::Noma => self.params.gamma_min(),
            Scheme::Oma => (self.params.r_min * self.k() as f64).exp2() - 1.0,
        }
    }

    pub fn qos_links(&self) -> Vec<QosLink> {
        let k = self.k();
        match self.scheme {
            Scheme::Noma => (0..k)
                .flat_map(|t| (0..=t).map(move |d| QosLink { observer: t, decoded: d }))
                .collect(),
            Scheme::Oma => (0..k).map(|t| QosLink { observer: t, decoded: t }).collect(),
        }
    }

    /// Users whose streams remain as interference when `link.observer`
    /// decodes `link.decoded`.
    pub fn sic_interferers(&self, link: QosLink) -> std::ops::Range<usize> {
        match self.scheme {
            Scheme::Noma => link.decoded + 1..self.k(),
            Scheme::Oma => 0..0,
        }
    }

    /// Users whose CSI error leaks into `observer`'s stage-2 reception.
    pub fn error_leakers(&self, observer: usize) -> std::ops::Range<usize> {
        match (self.csi_error, self.scheme) {
            (None, _) => 0..0,
            (Some(_), Scheme::Noma) => 0..self.k(),
            (Some(_), Scheme::Oma) => observer..observer + 1,
        }
    }

    pub fn harvested_power(&self, beams: &BeamformingSet) -> f64 {
        self.share() * harvested_power(beams, &self.channels.bs_dt)
    }

    /// BS interference power at the D2D receiver.
    pub fn dr_interference(&self, beams: &BeamformingSet) -> f64 {
        self.share() * harvested_power(beams, &self.channels.bs_dr)
    }

    pub fn d2d_error_gain(&self) -> f64 {
        self.csi_error.map_or(0.0, |e| e.d2d.norm_sqr())
    }

    pub fn link_terms(&self, beams: &BeamformingSet, link: QosLink) -> LinkTerms {
        let h = &self.channels.users[link.observer];
        let signal = gain(h, &beams.w[link.decoded]);
        let sic: f64 = self.sic_interferers(link).map(|j| gain(h, &beams.w[j])).sum();
        let err: f64 = match self.csi_error {
            Some(e) => self.error_leakers(link.observer).map(|j| gain(&e.users[j], &beams.w[j])).sum(),
            None => 0.0,
        };
        LinkTerms {
            signal,
            bs_interference: sic + err,
            sic_interference: sic,
            d2d_gain: self.channels.dt_users[link.observer].norm_sqr(),
        }
    }

    /// Stage-2 SINR of `link` given `tau_bar` (D2D interference `eta tau_bar P_r |h_dt|^2`).
    pub fn stage2_sinr(&self, beams: &BeamformingSet, tau_bar: f64, link: QosLink) -> f64 {
        let terms = self.link_terms(beams, link);
        let p_t = self.params.eta * tau_bar * self.harvested_power(beams);
        terms.signal / (p_t * terms.d2d_gain + terms.bs_interference + self.params.sigma2)
    }

    /// Per-link reduced constraint margins `SINR - gamma`.
    pub fn qos_margins(&self, beams: &BeamformingSet, ts: TimeSwitch) -> Vec<(QosLink, f64)> {
        let gamma = self.gamma();
        let tau_bar = ts.tau_bar();
        self.qos_links()
            .into_iter()
            .map(|link| {
                let margin = if tau_bar.is_infinite() {
                    // no second stage: only the first-stage SINR matters
                    let t = self.link_terms(beams, link);
                    t.signal / (t.sic_interference + self.params.sigma2) - gamma
                } else {
                    self.stage2_sinr(beams, tau_bar, link) - gamma
                };
                (link, margin)
            })
            .collect()
    }

    /// `(feasible, margins)`; feasible iff every margin is at least `-1e-9`.
    pub fn qos_feasible(&self, beams: &BeamformingSet, ts: TimeSwitch) -> (bool, Vec<f64>) {
        let margins: Vec<f64> = self.qos_margins(beams, ts).into_iter().map(|(_, m)| m).collect();
        (margins.iter().all(|&m| m >= -1e-9), margins)
    }

    /// D2D receiver SINR for `tau_bar`.
    pub fn d2d_sinr(&self, beams: &BeamformingSet, tau_bar: f64) -> f64 {
        let p_t = self.params.eta * tau_bar * self.harvested_power(beams);
        p_t * self.channels.d2d.norm_sqr()
            / (self.dr_interference(beams) + p_t * self.d2d_error_gain() + self.params.sigma2)
    }

    /// `R_D / E_c` without building the full report.
    pub fn energy_efficiency(&self, beams: &BeamformingSet, ts: TimeSwitch) -> f64 {
        let tau = ts.tau();
        if tau >= 1.0 {
            return 0.0;
        }
        let energy = self.params.eta * tau * self.harvested_power(beams) + self.params.p_c;
        (1.0 - tau) * self.d2d_sinr(beams, ts.tau_bar()).ln_1p() / std::f64::consts::LN_2 / energy
    }

    pub fn rates(&self, beams: &BeamformingSet, ts: TimeSwitch) -> RatesReport {
        let tau = ts.tau();
        let sigma2 = self.params.sigma2;
        let share = self.share();
        let harvested = self.harvested_power(beams);
        let second_stage = tau < 1.0;
        let d2d_power = if second_stage { self.params.eta * ts.tau_bar() * harvested } else { 0.0 };

        let slot_rate = |link: QosLink| {
            let t = self.link_terms(beams, link);
            let first = tau * (t.signal / (t.sic_interference + sigma2)).log2_1p();
            let second = if second_stage {
                let sinr = t.signal / (d2d_power * t.d2d_gain + t.bs_interference + sigma2);
                (1.0 - tau) * sinr.log2_1p()
            } else {
                0.0
            };
            share * (first + second)
        };

        let k = self.k();
        let own = (0..k).map(|t| slot_rate(QosLink { observer: t, decoded: t })).collect();
        let cross = self
            .qos_links()
            .into_iter()
            .filter(|l| l.decoded < l.observer)
            .map(|l| CrossRate { observer: l.observer, decoded: l.decoded, rate: slot_rate(l) })
            .collect();

        let d2d_rate =
            if second_stage { (1.0 - tau) * self.d2d_sinr(beams, ts.tau_bar()).log2_1p() } else { 0.0 };
        let energy = self.params.eta * tau * harvested + self.params.p_c;
        RatesReport {
            own,
            cross,
            d2d_rate,
            harvested_power: harvested,
            d2d_power,
            energy,
            ee: d2d_rate / energy,
        }
    }
}

trait Log2OnePlus {
    fn log2_1p(self) -> f64;
}

impl Log2OnePlus for f64 {
    fn log2_1p(self) -> f64 {
        self.ln_1p() / std::f64::consts::LN_2
    }
}

/// NOMA rates under perfect CSI.
pub fn stage_rates(
    beams: &BeamformingSet,
    ts: TimeSwitch,
    channels: &ChannelSet,
    params: &SystemParams,
) -> RatesReport {
    LinkModel::new(channels, params).rates(beams, ts)
}

/// Reduced (stage-2) NOMA QoS check under perfect CSI.
pub fn qos_feasible(
    beams: &BeamformingSet,
    ts: TimeSwitch,
    channels: &ChannelSet,
    params: &SystemParams,
) -> (bool, Vec<f64>) {
    LinkModel::new(channels, params).qos_feasible(beams, ts)
}

/// NOMA rates on estimated channels with the estimation error as interference.
pub fn imperfect_rates(
    beams: &BeamformingSet,
    ts: TimeSwitch,
    estimated: &ChannelSet,
    realization: &CsiErrorRealization,
    params: &SystemParams,
) -> RatesReport {
    LinkModel::new(estimated, params).with_csi_error(Some(realization)).rates(beams, ts)
}
