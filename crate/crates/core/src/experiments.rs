//! Monte Carlo sweeps over one system parameter, with CSV and gnuplot output.
//!
//! Every trial owns a seed derived from the master seed and the trial index.
//! Channels are regenerated from that seed for each sweep value, so a row
//! depends only on (seed, sweep value, scheme, algorithm) and never on which
//! other values or trials are in the sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::algorithms::{optimize, Algorithm, AltOptions, ExhaustiveOptions, Solution};
use crate::channel::{apply_csi_error, draw_channels, generate_topology, trial_rng, ChannelSet, CsiErrorRealization, CSI_ERROR_STREAM_OFFSET};
use crate::error::{Error, Result};
use crate::physics::{dbm_to_watts, LinkModel, OmaBudget, Scheme, SystemParams};

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepVariable {
    #[serde(rename = "P_max_dbm")]
    PMaxDbm,
    #[serde(rename = "M")]
    M,
    #[serde(rename = "eta")]
    Eta,
    #[serde(rename = "R_min")]
    RMin,
    #[serde(rename = "sigma_eps2")]
    SigmaEps2,
}

impl SweepVariable {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepVariable::PMaxDbm => "P_max_dbm",
            SweepVariable::M => "M",
            SweepVariable::Eta => "eta",
            SweepVariable::RMin => "R_min",
            SweepVariable::SigmaEps2 => "sigma_eps2",
        }
    }
}

impl std::str::FromStr for SweepVariable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P_max_dbm" | "p_max_dbm" => Ok(SweepVariable::PMaxDbm),
            "M" | "m" => Ok(SweepVariable::M),
            "eta" => Ok(SweepVariable::Eta),
            "R_min" | "r_min" => Ok(SweepVariable::RMin),
            "sigma_eps2" => Ok(SweepVariable::SigmaEps2),
            other => Err(Error::Config(format!("unknown sweep variable {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsiMode {
    #[default]
    Perfect,
    Imperfect,
}

impl std::str::FromStr for CsiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "perfect" => Ok(CsiMode::Perfect),
            "imperfect" => Ok(CsiMode::Imperfect),
            other => Err(Error::Config(format!("unknown CSI mode {other:?}"))),
        }
    }
}

/// Sweep definition. Loaded from a flat TOML file; list-valued keys accept
/// either an array or a comma-separated string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sweep: SweepVariable,
    #[serde(deserialize_with = "number_list")]
    pub values: Vec<f64>,
    pub k: usize,
    pub m: usize,
    pub p_max_dbm: f64,
    pub noise_dbm: f64,
    pub eta: f64,
    /// D2D circuit power, watts.
    pub p_c: f64,
    pub r_min: f64,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(deserialize_with = "name_list")]
    pub schemes: Vec<Scheme>,
    #[serde(deserialize_with = "name_list")]
    pub algorithms: Vec<Algorithm>,
    pub csi: CsiMode,
    /// Per-entry CSI error variance when `csi = "imperfect"`.
    pub sigma_eps2: f64,
    /// Grid step of the exhaustive search.
    pub xi: f64,
    pub tol: f64,
    pub max_outer: usize,
    pub oma_budget: OmaBudget,
    /// Record wall-clock time per row. Off by default so tables are reproducible.
    pub wall_time: bool,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let alt = AltOptions::default();
        Self {
            sweep: SweepVariable::PMaxDbm,
            values: vec![20.0],
            k: 4,
            m: 10,
            p_max_dbm: 20.0,
            noise_dbm: -94.0,
            eta: 0.1,
            p_c: 1e-3,
            r_min: 0.1,
            trials: 100,
            master_seed: 0,
            schemes: vec![Scheme::Noma],
            algorithms: vec![Algorithm::Alternating],
            csi: CsiMode::Perfect,
            sigma_eps2: 0.0,
            xi: ExhaustiveOptions::default().xi,
            tol: alt.tol,
            max_outer: alt.max_outer,
            oma_budget: OmaBudget::default(),
            wall_time: false,
            output: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ListOrString<T> {
    List(Vec<T>),
    Joined(String),
}

fn split_joined(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty())
}

fn number_list<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        Int(i64),
        Float(f64),
    }
    match ListOrString::<Num>::deserialize(de)? {
        ListOrString::List(v) => Ok(v
            .into_iter()
            .map(|n| match n {
                Num::Int(i) => i as f64,
                Num::Float(f) => f,
            })
            .collect()),
        ListOrString::Joined(s) => split_joined(&s)
            .map(|t| t.parse::<f64>().map_err(serde::de::Error::custom))
            .collect(),
    }
}

fn name_list<'de, D, T>(de: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: std::str::FromStr<Err = Error>,
{
    let names = match ListOrString::<String>::deserialize(de)? {
        ListOrString::List(v) => v,
        ListOrString::Joined(s) => split_joined(&s).map(str::to_string).collect(),
    };
    names.iter().map(|n| n.parse().map_err(serde::de::Error::custom)).collect()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Parameters with no sweep value applied.
    pub fn base_params(&self) -> SystemParams {
        SystemParams {
            k: self.k,
            m: self.m,
            p_max: dbm_to_watts(self.p_max_dbm),
            sigma2: dbm_to_watts(self.noise_dbm),
            eta: self.eta,
            p_c: self.p_c,
            r_min: self.r_min,
        }
    }

    /// Parameters and CSI error variance with the sweep ignored, for single
    /// instances.
    pub fn single_point(&self) -> Result<(SystemParams, f64)> {
        let params = self.base_params();
        params.validate()?;
        Ok((params, self.sigma_eps2))
    }

    /// Parameters and CSI error variance at one sweep value.
    pub fn point(&self, value: f64) -> Result<(SystemParams, f64)> {
        let mut params = self.base_params();
        let mut variance = self.sigma_eps2;
        match self.sweep {
            SweepVariable::PMaxDbm => params.p_max = dbm_to_watts(value),
            SweepVariable::M => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("M must be a positive integer, got {value}")));
                }
                params.m = value as usize;
            }
            SweepVariable::Eta => params.eta = value,
            SweepVariable::RMin => params.r_min = value,
            SweepVariable::SigmaEps2 => variance = value,
        }
        params.validate()?;
        if !(variance >= 0.0) {
            return Err(Error::Config(format!("CSI error variance must be nonnegative, got {variance}")));
        }
        Ok((params, variance))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.values.is_empty() {
            return Err(Error::Config("sweep value list is empty".into()));
        }
        if self.schemes.is_empty() || self.algorithms.is_empty() {
            return Err(Error::Config("schemes and algorithms must be nonempty".into()));
        }
        if self.sweep == SweepVariable::SigmaEps2 && self.csi == CsiMode::Perfect {
            return Err(Error::Config("sweeping sigma_eps2 requires csi = \"imperfect\"".into()));
        }
        if !(self.xi > 0.0 && self.tol > 0.0) || self.max_outer == 0 {
            return Err(Error::Config("xi, tol and max_outer must be positive".into()));
        }
        for &v in &self.values {
            self.point(v)?;
        }
        Ok(())
    }

    fn alt_options(&self) -> AltOptions {
        AltOptions { tol: self.tol, max_outer: self.max_outer, ..AltOptions::default() }
    }

    fn exhaustive_options(&self) -> ExhaustiveOptions {
        ExhaustiveOptions { xi: self.xi, ..ExhaustiveOptions::default() }
    }
}

/// Seed of trial `trial`: the first output of the master generator's
/// `trial`-th stream.
pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    trial_rng(master_seed, trial as u64).next_u64()
}

/// Channels (true and, under imperfect CSI, estimated) for one trial seed.
#[derive(Debug, Clone)]
pub struct TrialChannels {
    pub truth: ChannelSet,
    pub estimate: Option<(ChannelSet, CsiErrorRealization)>,
}

impl TrialChannels {
    pub fn draw(seed: u64, params: &SystemParams, csi: CsiMode, variance: f64) -> Self {
        let mut rng = trial_rng(seed, 0);
        let topo = generate_topology(params, &mut rng);
        let truth = draw_channels(&topo, params, &mut rng);
        let estimate = match csi {
            CsiMode::Perfect => None,
            CsiMode::Imperfect => Some(apply_csi_error(&truth, variance, &mut trial_rng(seed, CSI_ERROR_STREAM_OFFSET))),
        };
        Self { truth, estimate }
    }

    /// The model the optimizer sees: the true channels, or the estimate with
    /// the error realization as extra interference.
    pub fn model<'a>(&'a self, params: &'a SystemParams, scheme: Scheme, budget: OmaBudget) -> LinkModel<'a> {
        let model = match &self.estimate {
            None => LinkModel::new(&self.truth, params),
            Some((est, err)) => LinkModel::new(est, params).with_csi_error(Some(err)),
        };
        model.with_scheme(scheme).with_oma_budget(budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub trial: usize,
    pub seed: u64,
    pub sweep_name: String,
    pub sweep_value: f64,
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub feasible: bool,
    /// Zero on infeasible rows.
    pub ee: f64,
    pub tau: f64,
    pub iterations: usize,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// Mean and spread of the feasible rows at one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryPoint {
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub sweep_value: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub feasible: usize,
    pub total: usize,
}

impl ResultsTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Per (scheme, algorithm) series in first-appearance order, each sorted
    /// by sweep value. Points with no feasible row have a NaN mean.
    pub fn summarize(&self) -> Vec<Vec<SummaryPoint>> {
        let mut order: Vec<(Scheme, Algorithm)> = Vec::new();
        let mut groups: BTreeMap<(usize, u64), (Vec<f64>, usize)> = BTreeMap::new();
        for row in &self.rows {
            let key = (row.scheme, row.algorithm);
            let series = order.iter().position(|k| *k == key).unwrap_or_else(|| {
                order.push(key);
                order.len() - 1
            });
            let entry = groups.entry((series, ordered_bits(row.sweep_value))).or_default();
            entry.1 += 1;
            if row.feasible {
                entry.0.push(row.ee);
            }
        }
        let mut out: Vec<Vec<SummaryPoint>> = vec![Vec::new(); order.len()];
        for ((series, bits), (ees, total)) in groups {
            let n = ees.len() as f64;
            let mean = ees.iter().sum::<f64>() / n;
            let var = ees.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            out[series].push(SummaryPoint {
                scheme: order[series].0,
                algorithm: order[series].1,
                sweep_value: from_ordered_bits(bits),
                mean,
                std: var.sqrt(),
                feasible: ees.len(),
                total,
            });
        }
        out
    }
}

/// Bit pattern of a finite float whose unsigned order matches the float order.
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn from_ordered_bits(b: u64) -> f64 {
    f64::from_bits(if b >> 63 == 1 { b & !(1 << 63) } else { !b })
}

fn record(
    trial: usize,
    seed: u64,
    config: &ExperimentConfig,
    value: f64,
    scheme: Scheme,
    algorithm: Algorithm,
    outcome: Result<Solution>,
    elapsed_ms: f64,
) -> ResultRow {
    let (feasible, ee, tau, iterations) = match outcome {
        Ok(sol) if sol.ee.is_finite() => (true, sol.ee, sol.tau.tau(), sol.iterations),
        _ => (false, 0.0, 0.0, 0),
    };
    ResultRow {
        trial,
        seed,
        sweep_name: config.sweep.as_str().to_string(),
        sweep_value: value,
        scheme,
        algorithm,
        feasible,
        ee,
        tau,
        iterations,
        wall_ms: config.wall_time.then_some(elapsed_ms),
    }
}

/// All rows of one trial, ordered by (sweep value, scheme, algorithm) as listed
/// in the config.
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<Vec<ResultRow>> {
    let seed = trial_seed(config.master_seed, trial);
    let (alt, exh) = (config.alt_options(), config.exhaustive_options());
    let mut rows = Vec::with_capacity(config.values.len() * config.schemes.len() * config.algorithms.len());
    for &value in &config.values {
        let (params, variance) = config.point(value)?;
        let channels = TrialChannels::draw(seed, &params, config.csi, variance);
        for &scheme in &config.schemes {
            let model = channels.model(&params, scheme, config.oma_budget);
            for &algorithm in &config.algorithms {
                let start = Instant::now();
                let outcome = optimize(&model, algorithm, &alt, &exh);
                let ms = start.elapsed().as_secs_f64() * 1e3;
                rows.push(record(trial, seed, config, value, scheme, algorithm, outcome, ms));
            }
        }
    }
    Ok(rows)
}

/// Runs every trial on the rayon pool. Rows come back ordered by trial, then
/// as in [`run_trial`], whatever the completion order.
pub fn run_sweep(config: &ExperimentConfig) -> Result<ResultsTable> {
    config.validate()?;
    let per_trial: Vec<Vec<ResultRow>> =
        (0..config.trials).into_par_iter().map(|t| run_trial(config, t)).collect::<Result<_>>()?;
    Ok(ResultsTable { rows: per_trial.into_iter().flatten().collect() })
}

pub const CSV_HEADER: &str = "trial,seed,sweep_name,sweep_value,scheme,algorithm,feasible,ee,tau,iterations,wall_ms";

/// Serializes the table. Floats use the shortest representation that parses
/// back to the same value, with `.` as the decimal separator.
pub fn to_csv_string(table: &ResultsTable) -> Result<String> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &table.rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv(table: &ResultsTable, path: &Path) -> Result<()> {
    let text = to_csv_string(table)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<ResultsTable> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<&str> = reader.headers()?.iter().collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header {:?}", header.join(","))));
    }
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(ResultsTable { rows })
}

pub fn read_csv(path: &Path) -> Result<ResultsTable> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Gnuplot script with the summary inlined as data blocks: mean EE with a
/// one-standard-deviation error bar per (scheme, algorithm).
pub fn plot_script(table: &ResultsTable) -> Result<String> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let series = table.summarize();
    let sweep = &table.rows[0].sweep_name;
    let mut s = String::new();
    for (i, points) in series.iter().enumerate() {
        writeln!(s, "$s{i} << EOD").unwrap();
        for p in points.iter().filter(|p| p.feasible > 0) {
            writeln!(s, "{} {} {}", p.sweep_value, p.mean, p.std).unwrap();
        }
        writeln!(s, "EOD").unwrap();
    }
    writeln!(s, "set xlabel '{sweep}'").unwrap();
    writeln!(s, "set ylabel 'energy efficiency (bit/J/Hz)'").unwrap();
    writeln!(s, "set key top left").unwrap();
    writeln!(s, "set grid").unwrap();
    let plots: Vec<String> = series
        .iter()
        .enumerate()
        .map(|(i, points)| {
            let p = &points[0];
            let label = match p.scheme {
                Scheme::Oma => format!("OMA (TDMA) {}", p.algorithm),
                Scheme::Noma => format!("NOMA {}", p.algorithm),
            };
            format!("$s{i} using 1:2:3 with yerrorlines title '{label}'")
        })
        .collect();
    writeln!(s, "plot {}", plots.join(", \\\n     ")).unwrap();
    Ok(s)
}

pub fn emit_plot_script(table: &ResultsTable, path: &Path) -> Result<()> {
    let text = plot_script(table)?;
    std::fs::write(path, text)?;
    Ok(())
}
