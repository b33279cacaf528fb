//! Reinforcement-learning environment over line-delimited JSON.
//!
//! Requests, one JSON object per line:
//!
//! ```text
//! {"cmd":"reset","seed":7}     -> {"state":[...],"k":4,"m":10}
//! {"cmd":"step","action":[...]} -> {"state":[...],"reward":r,"feasible":b,"ee":e,"rates":{...},"done":b}
//! {"cmd":"close"}               -> {"closed":true}, then the loop ends
//! ```
//!
//! A line that cannot be served gets `{"error":"...","fatal":false}` and the
//! loop carries on. Rewards come from the same [`LinkModel`] the optimizers
//! use, so a policy's reward is directly comparable with their EE.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::experiments::{trial_seed, CsiMode, TrialChannels};
use crate::physics::{BeamformingSet, LinkModel, OmaBudget, RatesReport, Scheme, SystemParams, TimeSwitch};
use crate::solver::unlift;
use crate::CVector;

/// Bounds on the time-switching ratio produced from a raw action.
pub const TAU_CLIP: (f64, f64) = (1e-3, 1.0 - 1e-3);

pub fn state_len(k: usize) -> usize {
    4 * k + 3 + k * (k - 1) / 2
}

pub fn action_len(k: usize, m: usize) -> usize {
    1 + 2 * m * k
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps a raw action `[tau_raw, Re w_1.., Re w_K.., Im w_1.., Im w_K..]` to beams
/// rescaled onto the full power budget and a clipped sigmoid time switch.
pub fn normalize_action(raw: &[f64], params: &SystemParams) -> Result<(BeamformingSet, TimeSwitch)> {
    let (k, m) = (params.k, params.m);
    if raw.len() != action_len(k, m) {
        return Err(Error::Dimension(format!("action has {} entries, expected {}", raw.len(), action_len(k, m))));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParams("action contains a non-finite entry".into()));
    }
    let tau = sigmoid(raw[0]).clamp(TAU_CLIP.0, TAU_CLIP.1);
    let beams = unlift(&nalgebra::DVector::from_column_slice(&raw[1..]), k, m)?;
    let p_o = beams.total_power();
    if p_o == 0.0 {
        return Err(Error::AllZeroBeams);
    }
    Ok((beams.scaled((params.p_max / p_o).sqrt()), TimeSwitch::new(tau)?))
}

/// `R_D / E_c` when every reduced QoS constraint holds, zero otherwise.
pub fn compute_reward(model: &LinkModel<'_>, beams: &BeamformingSet, ts: TimeSwitch) -> f64 {
    if model.qos_feasible(beams, ts).0 {
        model.energy_efficiency(beams, ts)
    } else {
        0.0
    }
}

/// Whether channels persist across episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// One realization, drawn from the server seed, for the whole session.
    #[default]
    Fixed,
    /// A fresh realization at every reset.
    Redraw,
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(ChannelMode::Fixed),
            "redraw" => Ok(ChannelMode::Redraw),
            other => Err(Error::Config(format!("unknown channel mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub params: SystemParams,
    pub mode: ChannelMode,
    pub seed: u64,
    /// CSI error variance. Nonzero puts the estimate in the state and the
    /// error realization into the reward, as in the imperfect-CSI optimizer.
    pub sigma_eps2: f64,
    /// Steps per episode; `done` is reported on the last one. `None` leaves
    /// episode boundaries to the agent and `done` stays false.
    pub episode_len: Option<usize>,
}

impl EnvConfig {
    pub fn new(params: SystemParams) -> Self {
        Self { params, mode: ChannelMode::Fixed, seed: 0, sigma_eps2: 0.0, episode_len: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResetReply {
    pub state: Vec<f64>,
    pub k: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReply {
    pub state: Vec<f64>,
    pub reward: f64,
    pub feasible: bool,
    pub ee: f64,
    pub rates: RatesReport,
    pub done: bool,
}

pub struct Environment {
    config: EnvConfig,
    channels: Option<TrialChannels>,
    /// Beams and rates of the previous step in the current episode.
    last: Option<(BeamformingSet, RatesReport)>,
    steps: usize,
    episodes: u64,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.params.validate()?;
        if !(config.sigma_eps2 >= 0.0) || config.episode_len == Some(0) {
            return Err(Error::Config("sigma_eps2 must be nonnegative and episode_len positive".into()));
        }
        let channels = (config.mode == ChannelMode::Fixed).then(|| draw(&config, config.seed));
        Ok(Self { config, channels, last: None, steps: 0, episodes: 0 })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Starts an episode. In redraw mode the channels come from `seed`, or
    /// from the next per-episode seed when none is given; fixed mode ignores it.
    pub fn reset(&mut self, seed: Option<u64>) -> ResetReply {
        if self.config.mode == ChannelMode::Redraw {
            let seed = seed.unwrap_or_else(|| trial_seed(self.config.seed, self.episodes as usize));
            self.channels = Some(draw(&self.config, seed));
        }
        self.episodes += 1;
        self.last = None;
        self.steps = 0;
        ResetReply { state: self.state(), k: self.config.params.k, m: self.config.params.m }
    }

    fn channels(&self) -> Result<&TrialChannels> {
        self.channels.as_ref().ok_or_else(|| Error::Config("no episode in progress; send reset first".into()))
    }

    fn model(&self) -> Result<LinkModel<'_>> {
        Ok(self.channels()?.model(&self.config.params, Scheme::Noma, OmaBudget::Shared))
    }

    /// Applies one action. An all-zero beam action is a legal step that earns
    /// zero reward.
    pub fn step(&mut self, action: &[f64]) -> Result<StepReply> {
        let model = self.model()?;
        if self.episode_over() {
            return Err(Error::Config("episode is over; send reset".into()));
        }
        let params = &self.config.params;
        let (beams, ts, forced_zero) = match normalize_action(action, params) {
            Ok((w, ts)) => (w, ts, false),
            Err(Error::AllZeroBeams) => {
                let tau = sigmoid(action[0]).clamp(TAU_CLIP.0, TAU_CLIP.1);
                (BeamformingSet::zeros(params.k, params.m), TimeSwitch::new(tau)?, true)
            }
            Err(e) => return Err(e),
        };
        let rates = model.rates(&beams, ts);
        let feasible = !forced_zero && model.qos_feasible(&beams, ts).0;
        let reward = if feasible { compute_reward(&model, &beams, ts) } else { 0.0 };
        let ee = model.energy_efficiency(&beams, ts);
        self.last = Some((beams, rates.clone()));
        self.steps += 1;
        Ok(StepReply { state: self.state(), reward, feasible, ee, rates, done: self.episode_over() })
    }

    fn episode_over(&self) -> bool {
        self.config.episode_len.is_some_and(|len| self.steps >= len)
    }

    /// Channel gains, then the previous step's rates and beam powers (zeros
    /// right after a reset). Empty before the first reset in redraw mode.
    pub fn state(&self) -> Vec<f64> {
        let Some(tc) = &self.channels else { return Vec::new() };
        let ch = tc.estimate.as_ref().map_or(&tc.truth, |(est, _)| est);
        let k = self.config.params.k;
        let mut s = Vec::with_capacity(state_len(k));
        s.extend(ch.users.iter().map(CVector::norm_squared));
        s.push(ch.bs_dt.norm_squared());
        s.push(ch.bs_dr.norm_squared());
        s.push(ch.d2d.norm_sqr());
        s.extend(ch.dt_users.iter().map(|h| h.norm_sqr()));
        match &self.last {
            Some((beams, rates)) => {
                s.extend(&rates.own);
                s.extend(rates.cross.iter().map(|c| c.rate));
                s.extend(beams.user_powers());
            }
            None => s.resize(state_len(k), 0.0),
        }
        debug_assert_eq!(s.len(), state_len(k));
        s
    }

    /// Serves one request line. Returns the reply and whether to stop.
    pub fn handle_line(&mut self, line: &str) -> (String, bool) {
        let reply = match serde_json::from_str::<Request>(line) {
            Err(e) => Err(Error::Json(e)),
            Ok(Request::Close) => return (json!({ "closed": true }).to_string(), true),
            Ok(Request::Reset { seed }) => serde_json::to_string(&self.reset(seed)).map_err(Error::from),
            Ok(Request::Step { action }) => {
                self.step(&action).and_then(|r| serde_json::to_string(&r).map_err(Error::from))
            }
        };
        let text = reply.unwrap_or_else(|e| json!({ "error": e.to_string(), "fatal": false }).to_string());
        (text, false)
    }
}

fn draw(config: &EnvConfig, seed: u64) -> TrialChannels {
    let csi = if config.sigma_eps2 > 0.0 { CsiMode::Imperfect } else { CsiMode::Perfect };
    TrialChannels::draw(seed, &config.params, csi, config.sigma_eps2)
}

#[derive(Debug, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase", deny_unknown_fields)]
enum Request {
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
    Step {
        action: Vec<f64>,
    },
    Close,
}

/// Request loop. Ends on `close` or end of input; blank lines are skipped.
pub fn serve<R: BufRead, W: Write>(env: &mut Environment, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, stop) = env.handle_line(&line);
        writeln!(output, "{reply}")?;
        output.flush()?;
        if stop {
            break;
        }
    }
    Ok(())
}
