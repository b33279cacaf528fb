use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use eed2d::algorithms::{optimize, Algorithm, Solution};
use eed2d::experiments::{emit_plot_script, run_sweep, write_csv, CsiMode, ExperimentConfig, TrialChannels};
use eed2d::rl::{serve, ChannelMode, EnvConfig, Environment};
use eed2d::{Error, Scheme};

/// Energy-efficiency optimizer for a wireless-powered D2D pair in a NOMA downlink.
#[derive(Parser)]
#[command(name = "eed2d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one channel realization and print the full solution as JSON.
    Solve(Common),
    /// Run a Monte Carlo sweep and write a CSV plus a gnuplot script.
    Sweep(Common),
    /// Serve the RL environment on stdin/stdout.
    ServeEnv {
        #[command(flatten)]
        common: Common,
        /// fixed | redraw
        #[arg(long, default_value = "fixed")]
        mode: ChannelMode,
        /// Steps per episode; unbounded when omitted.
        #[arg(long)]
        episode_len: Option<usize>,
    },
    /// Print the optimizer's EE on the channels `serve-env --mode fixed` uses
    /// for the same seed and config.
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// noma | oma
    #[arg(long)]
    scheme: Option<Scheme>,
    /// alt | exhaustive
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// perfect | imperfect
    #[arg(long)]
    csi: Option<CsiMode>,
    /// Per-entry CSI error variance; implies --csi imperfect when positive.
    #[arg(long)]
    sigma_eps: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    /// Record per-row wall-clock time in sweeps.
    #[arg(long)]
    wall_time: bool,
}

impl Common {
    fn config(&self) -> eed2d::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.master_seed = seed;
        }
        if let Some(trials) = self.trials {
            c.trials = trials;
        }
        if let Some(out) = &self.out {
            c.output = Some(out.clone());
        }
        if let Some(scheme) = self.scheme {
            c.schemes = vec![scheme];
        }
        if let Some(algorithm) = self.algorithm {
            c.algorithms = vec![algorithm];
        }
        if let Some(var) = self.sigma_eps {
            c.sigma_eps2 = var;
            if var > 0.0 {
                c.csi = CsiMode::Imperfect;
            }
        }
        if let Some(csi) = self.csi {
            c.csi = csi;
        }
        if let Some(xi) = self.xi {
            c.xi = xi;
        }
        c.wall_time |= self.wall_time;
        c.validate()?;
        Ok(c)
    }
}

enum Outcome {
    Done,
    AllInfeasible,
}

fn solve_one(c: &ExperimentConfig) -> eed2d::Result<(TrialChannels, eed2d::Result<Solution>)> {
    let (params, variance) = c.single_point()?;
    let channels = TrialChannels::draw(c.master_seed, &params, c.csi, variance);
    let model = channels.model(&params, c.schemes[0], c.oma_budget);
    let alt = eed2d::algorithms::AltOptions { tol: c.tol, max_outer: c.max_outer, ..Default::default() };
    let exh = eed2d::algorithms::ExhaustiveOptions { xi: c.xi, ..Default::default() };
    let solution = optimize(&model, c.algorithms[0], &alt, &exh);
    Ok((channels, solution))
}

fn write_or_print(text: &str, out: Option<&Path>) -> eed2d::Result<()> {
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n"))?,
        None => writeln!(io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn run(cli: Cli) -> eed2d::Result<Outcome> {
    match cli.command {
        Command::Solve(common) => {
            let c = common.config()?;
            let (_, solution) = solve_one(&c)?;
            let sol = match solution {
                Err(Error::Infeasible(msg)) => {
                    eprintln!("infeasible: {msg}");
                    return Ok(Outcome::AllInfeasible);
                }
                other => other?,
            };
            let beams: Vec<Vec<[f64; 2]>> =
                sol.beams.w.iter().map(|w| w.iter().map(|z| [z.re, z.im]).collect()).collect();
            let report = json!({
                "seed": c.master_seed,
                "scheme": sol.scheme,
                "algorithm": sol.algorithm,
                "ee": sol.ee,
                "tau": sol.tau.tau(),
                "iterations": sol.iterations,
                "converged": sol.converged,
                "trace": sol.trace,
                "rates": sol.rates,
                "beams": beams,
            });
            write_or_print(&serde_json::to_string_pretty(&report)?, c.output.as_deref())?;
            Ok(Outcome::Done)
        }
        Command::Oracle(common) => {
            let c = common.config()?;
            let (_, solution) = solve_one(&c)?;
            let report = match solution {
                Ok(sol) => json!({ "feasible": true, "ee": sol.ee, "tau": sol.tau.tau(), "iterations": sol.iterations }),
                Err(Error::Infeasible(_)) => json!({ "feasible": false, "ee": 0.0 }),
                Err(e) => return Err(e),
            };
            write_or_print(&report.to_string(), c.output.as_deref())?;
            Ok(if report["feasible"] == json!(true) { Outcome::Done } else { Outcome::AllInfeasible })
        }
        Command::Sweep(common) => {
            let c = common.config()?;
            let table = run_sweep(&c)?;
            let out = c.output.clone().unwrap_or_else(|| PathBuf::from("results.csv"));
            write_csv(&table, &out)?;
            emit_plot_script(&table, &out.with_extension("gp"))?;
            for series in table.summarize() {
                for p in series {
                    eprintln!(
                        "{} {} {}={} mean_ee={} std={} feasible={}/{}",
                        p.scheme, p.algorithm, c.sweep.as_str(), p.sweep_value, p.mean, p.std, p.feasible, p.total
                    );
                }
            }
            Ok(if table.rows.iter().any(|r| r.feasible) { Outcome::Done } else { Outcome::AllInfeasible })
        }
        Command::ServeEnv { common, mode, episode_len } => {
            let c = common.config()?;
            let (params, variance) = c.single_point()?;
            let sigma_eps2 = if c.csi == CsiMode::Imperfect { variance } else { 0.0 };
            let config = EnvConfig { params, mode, seed: c.master_seed, sigma_eps2, episode_len };
            let mut env = Environment::new(config)?;
            serve(&mut env, io::stdin().lock(), BufWriter::new(io::stdout().lock()))?;
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors exit 1; exit 2 is reserved for infeasible instances
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::AllInfeasible) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
