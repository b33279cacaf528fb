//! Network topology, Rayleigh/path-loss channel draws and CSI error realizations.
//!
//! Every link coefficient is a unit-variance circularly-symmetric complex
//! Gaussian divided by `sqrt(d^alpha)`. Users are re-indexed after each draw so
//! that `|h_0|^2 <= |h_1|^2 <= ...`, which is the successive interference
//! cancellation (SIC) decoding order assumed by every rate formula.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::physics::SystemParams;
use crate::{CVector, Complex};

/// 2-D position in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Path-loss exponents per link class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossExponents {
    /// Base station to downlink users.
    pub bs_users: f64,
    /// D2D transmitter to D2D receiver.
    pub d2d: f64,
    /// Base station to either D2D device.
    pub bs_d2d: f64,
    /// D2D transmitter to downlink users.
    pub dt_users: f64,
}

impl Default for PathLossExponents {
    fn default() -> Self {
        Self { bs_users: 2.5, d2d: 2.0, bs_d2d: 3.0, dt_users: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub bs_position: Point,
    pub dt_position: Point,
    pub dr_position: Point,
    pub user_positions: Vec<Point>,
    pub exponents: PathLossExponents,
}

/// Side length bounds of the square the downlink users are dropped in.
pub const USER_BOX: (f64, f64) = (3.0, 8.0);

/// Places the BS at the origin, the D2D pair at (0, 9) / (0, 10), and draws
/// `K` users uniformly in `[3, 8] x [3, 8]`.
pub fn generate_topology<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> Topology {
    let user_positions = (0..params.k)
        .map(|_| {
            Point::new(
                rng.random_range(USER_BOX.0..=USER_BOX.1),
                rng.random_range(USER_BOX.0..=USER_BOX.1),
            )
        })
        .collect();
    Topology {
        bs_position: Point::new(0.0, 0.0),
        dt_position: Point::new(0.0, 9.0),
        dr_position: Point::new(0.0, 10.0),
        user_positions,
        exponents: PathLossExponents::default(),
    }
}

/// Every channel coefficient of the network, users in SIC order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// BS to downlink user `k`, sorted by squared norm (weakest first).
    pub users: Vec<CVector>,
    /// BS to the D2D transmitter.
    pub bs_dt: CVector,
    /// BS to the D2D receiver.
    pub bs_dr: CVector,
    /// D2D transmitter to D2D receiver.
    pub d2d: Complex,
    /// D2D transmitter to downlink user `k` (same order as `users`).
    pub dt_users: Vec<Complex>,
    /// Index each sorted user had in the topology.
    pub order: Vec<usize>,
}

impl ChannelSet {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.bs_dt.len()
    }

    pub fn user_gain(&self, k: usize) -> f64 {
        self.users[k].norm_squared()
    }

    pub fn is_sic_sorted(&self) -> bool {
        self.users
            .windows(2)
            .all(|w| w[0].norm_squared() <= w[1].norm_squared())
    }

    /// Stable re-sort of the users by squared channel norm. Idempotent.
    pub fn sort_for_sic(&mut self) {
        let perm = self.sic_permutation();
        self.apply_permutation(&perm);
    }

    fn sic_permutation(&self) -> Vec<usize> {
        let gains: Vec<f64> = self.users.iter().map(|h| h.norm_squared()).collect();
        let mut perm: Vec<usize> = (0..gains.len()).collect();
        perm.sort_by(|&a, &b| gains[a].total_cmp(&gains[b]));
        perm
    }

    fn apply_permutation(&mut self, perm: &[usize]) {
        self.users = perm.iter().map(|&i| self.users[i].clone()).collect();
        self.dt_users = perm.iter().map(|&i| self.dt_users[i]).collect();
        self.order = perm.iter().map(|&i| self.order[i]).collect();
    }
}

/// One unit-variance circularly-symmetric complex Gaussian sample.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn complex_normal_vector<R: Rng + ?Sized>(m: usize, rng: &mut R) -> CVector {
    CVector::from_fn(m, |_, _| complex_normal(rng))
}

/// Amplitude attenuation `1 / sqrt(d^alpha)`.
pub fn path_gain(distance: f64, exponent: f64) -> f64 {
    distance.powf(-exponent / 2.0)
}

/// Draws a Rayleigh channel set over `topology`. Draw order is fixed
/// (users, BS-Dt, BS-Dr, Dt-Dr, Dt-users) so a seed reproduces the set.
pub fn draw_channels<R: Rng + ?Sized>(
    topology: &Topology,
    params: &SystemParams,
    rng: &mut R,
) -> ChannelSet {
    let m = params.m;
    let ex = &topology.exponents;
    let bs = topology.bs_position;

    let users = topology
        .user_positions
        .iter()
        .map(|p| complex_normal_vector(m, rng) * Complex::from(path_gain(bs.distance(p), ex.bs_users)))
        .collect();
    let bs_dt = complex_normal_vector(m, rng)
        * Complex::from(path_gain(bs.distance(&topology.dt_position), ex.bs_d2d));
    let bs_dr = complex_normal_vector(m, rng)
        * Complex::from(path_gain(bs.distance(&topology.dr_position), ex.bs_d2d));
    let d2d = complex_normal(rng)
        * path_gain(topology.dt_position.distance(&topology.dr_position), ex.d2d);
    let dt_users = topology
        .user_positions
        .iter()
        .map(|p| complex_normal(rng) * path_gain(topology.dt_position.distance(p), ex.dt_users))
        .collect();

    let mut set = ChannelSet {
        users,
        bs_dt,
        bs_dr,
        d2d,
        dt_users,
        order: (0..topology.user_positions.len()).collect(),
    };
    set.sort_for_sic();
    set
}

/// Channel estimation error realization for the downlink and D2D links.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiErrorRealization {
    /// Error on each (sorted) BS-to-user channel.
    pub users: Vec<CVector>,
    /// Error on the D2D link.
    pub d2d: Complex,
    /// Per-entry error variance.
    pub variance: f64,
}

impl CsiErrorRealization {
    pub fn zero(k: usize, m: usize) -> Self {
        Self { users: vec![CVector::zeros(m); k], d2d: Complex::new(0.0, 0.0), variance: 0.0 }
    }
}

/// Adds estimation error to the downlink and D2D channels.
///
/// Unit-variance errors are drawn first and then scaled by `sqrt(variance)`,
/// so one random stream gives proportional realizations for every variance.
/// Only `users` and `d2d` are perturbed. The estimate is re-sorted for SIC
/// and the realization is permuted along with it.
pub fn apply_csi_error<R: Rng + ?Sized>(
    channels: &ChannelSet,
    variance: f64,
    rng: &mut R,
) -> (ChannelSet, CsiErrorRealization) {
    assert!(variance >= 0.0, "error variance must be nonnegative");
    let m = channels.num_antennas();
    let scale = variance.sqrt();
    let eps_users: Vec<CVector> = channels
        .users
        .iter()
        .map(|_| complex_normal_vector(m, rng) * Complex::from(scale))
        .collect();
    let eps_d2d = complex_normal(rng) * scale;

    let mut estimated = channels.clone();
    for (h, e) in estimated.users.iter_mut().zip(&eps_users) {
        *h += e;
    }
    estimated.d2d += eps_d2d;

    let perm = estimated.sic_permutation();
    estimated.apply_permutation(&perm);
    let realization = CsiErrorRealization {
        users: perm.iter().map(|&i| eps_users[i].clone()).collect(),
        d2d: eps_d2d,
        variance,
    };
    (estimated, realization)
}

/// Deterministic per-trial generator: the master seed keys the ChaCha state
/// and the trial index selects the stream, so trials are independent of
/// execution order.
pub fn trial_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Stream offset separating CSI-error draws from channel draws of the same trial.
pub const CSI_ERROR_STREAM_OFFSET: u64 = 1 << 40;
