use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hrisloc::estimator::EstimateResult;
use hrisloc::experiment::{
    bound_rows_csv, metric_rows_csv, monte_carlo, rho_sweep_bounds, scatterer_rows_csv, scatterer_study, SweepSpec,
    SweepVariable, TrialSetup,
};
use hrisloc::geometry::{Position, Rotation};
use hrisloc::io::{format_float, save_observations};
use hrisloc::scenario::{watts_to_dbm, RadioConfig, Scenario, ScenarioFile};
use hrisloc::signal::{synthesize, GainModel};

/// Joint user and hybrid-RIS localization: bounds, estimation and sweeps.
#[derive(Debug, Parser)]
#[command(name = "hrisloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario JSON file, or `default` for the built-in reference scenario.
    #[arg(long, global = true, default_value = "default")]
    scenario: String,

    /// BS transmit power in dBm (applied after --override).
    #[arg(long = "pb-dbm", global = true)]
    pb_dbm: Option<f64>,

    /// HRIS power splitting ratio in (0, 1) (applied after --override).
    #[arg(long, global = true)]
    rho: Option<f64>,

    /// Monte Carlo trials, or scatterer realizations.
    #[arg(long, global = true)]
    trials: Option<usize>,

    /// Base seed for schedules, gain phases, noise and placements.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output file; standard output when omitted.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    /// Scenario field override `key=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "K=V")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bounds at the configured power and splitting ratio, as one CSV row.
    Crb,
    /// One synthesized observation through the full estimator.
    Run {
        /// Also write the synthesized observations to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Monte Carlo RMSE and bounds at the configured power.
    Mc,
    /// Bounds over a list of splitting ratios.
    SweepRho {
        /// Comma-separated ratios.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Monte Carlo RMSE and bounds over transmit powers.
    SweepPower {
        /// Comma-separated powers in dBm.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Error quantiles over random scatterer placements.
    Scatterers {
        /// Comma-separated scatterer counts.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Estimation(String),
}

impl From<hrisloc::Error> for Failure {
    fn from(e: hrisloc::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

const DEFAULT_RHOS: [f64; 13] = [1e-6, 0.009, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99, 0.999999];

struct Loaded {
    id: String,
    scenario: Scenario,
    cfg: RadioConfig,
    gain_model: GainModel,
}

fn load(cli: &Cli) -> Result<Loaded, Failure> {
    let (mut file, id) = if cli.scenario == "default" {
        (ScenarioFile::default_file(), "default".to_string())
    } else {
        let path = Path::new(&cli.scenario);
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario").to_string();
        (ScenarioFile::load(path)?, id)
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override '{kv}' is not of the form key=value")))?;
        file.apply_override(k.trim(), v)?;
    }
    if let Some(p) = cli.pb_dbm {
        file.radio.tx_power_dbm = p;
    }
    if let Some(r) = cli.rho {
        file.radio.rho = r;
    }
    let (scenario, cfg, gain_model) = file.to_parts()?;
    Ok(Loaded { id, scenario, cfg, gain_model })
}

fn emit(cli: &Cli, text: &str) -> Result<(), Failure> {
    match &cli.output {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn fmt_point(p: &Position) -> String {
    format!("{},{},{}", format_float(p.x), format_float(p.y), format_float(p.z))
}

fn run_report(l: &Loaded, setup: &TrialSetup, e: &EstimateResult) -> String {
    let t = &setup.params;
    let c = &e.channel;
    let mut out = String::from("quantity,estimate,truth,error\n");
    let mut scalar = |name: &str, est: f64, truth: f64| {
        out.push_str(&format!("{name},{},{},{}\n", format_float(est), format_float(truth), format_float(est - truth)));
    };
    scalar("tau_br_s", c.tau_br, t.tau_br);
    scalar("tau_bu_s", c.tau_bu, t.tau_bu);
    scalar("tau_bru_s", c.tau_bru, t.tau_bru);
    for (name, est, truth) in [
        ("theta_br", c.theta_br, t.theta_br),
        ("theta_bu", c.theta_bu, t.theta_bu),
        ("theta_ru", c.theta_ru, t.theta_ru),
        ("phi_rb", c.phi_rb, t.phi_rb),
    ] {
        scalar(&format!("{name}_az_rad"), est.az, truth.az);
        scalar(&format!("{name}_el_rad"), est.el, truth.el);
    }
    scalar("b_r_s", e.b_r, l.scenario.b_r);
    scalar("b_u_s", e.b_u, l.scenario.b_u);
    for (name, est, truth) in [("p_r_m", e.p_r, l.scenario.p_r), ("p_u_m", e.p_u, l.scenario.p_u)] {
        out.push_str(&format!(
            "{name},\"{}\",\"{}\",{}\n",
            fmt_point(&est),
            fmt_point(&truth),
            format_float((est - truth).norm())
        ));
    }
    let r_err = e.rotation.frobenius_distance(&Rotation::from_angles(l.scenario.rot));
    out.push_str(&format!("rotation_frobenius,,,{}\n", format_float(r_err)));
    out
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let l = load(cli)?;
    let p_dbm = watts_to_dbm(l.cfg.tx_power);
    match &cli.command {
        Command::Crb => {
            let b = rho_sweep_bounds(&l.scenario, &l.cfg, &l.gain_model, &[l.cfg.rho], cli.seed)?;
            emit(cli, &bound_rows_csv(&l.id, &[(p_dbm, l.cfg.rho, b[0])]))
        }
        Command::Run { dump } => {
            let setup = TrialSetup::from_base_seed(&l.scenario, &l.cfg, &l.gain_model, cli.seed)?;
            if let Some(path) = dump {
                let obs = synthesize(&l.scenario, &l.cfg, &setup.sched, &setup.params, cli.seed)?;
                save_observations(path, &obs)?;
            }
            match setup.run(cli.seed) {
                Ok(e) => emit(cli, &run_report(&l, &setup, &e)),
                Err(f) => Err(Failure::Estimation(f.to_string())),
            }
        }
        Command::Mc | Command::SweepPower { .. } => {
            let values = match &cli.command {
                Command::SweepPower { values } => {
                    values.clone().unwrap_or_else(|| (0..8).map(|i| 9.0 + 3.0 * i as f64).collect())
                }
                _ => vec![p_dbm],
            };
            let spec = SweepSpec::new(SweepVariable::PbDbm, values, cli.trials.unwrap_or(100), cli.seed);
            let rows = monte_carlo(&l.scenario, &l.cfg, &l.gain_model, &spec)?;
            emit(cli, &metric_rows_csv(spec.variable, &rows))?;
            if rows.iter().all(|r| r.failures == r.trials) {
                return Err(Failure::Estimation("every trial failed".into()));
            }
            Ok(())
        }
        Command::SweepRho { values } => {
            let rhos = values.clone().unwrap_or_else(|| DEFAULT_RHOS.to_vec());
            let b = rho_sweep_bounds(&l.scenario, &l.cfg, &l.gain_model, &rhos, cli.seed)?;
            let rows: Vec<_> = rhos.iter().zip(b).map(|(r, b)| (p_dbm, *r, b)).collect();
            emit(cli, &bound_rows_csv(&l.id, &rows))
        }
        Command::Scatterers { values } => {
            let n = values.clone().unwrap_or_else(|| vec![0, 2, 4, 8, 16]);
            let rows = scatterer_study(&l.scenario, &l.cfg, &l.gain_model, &n, cli.trials.unwrap_or(20), cli.seed)?;
            emit(cli, &scatterer_rows_csv(&rows))?;
            if rows.iter().all(|r| r.failures == r.realizations) {
                return Err(Failure::Estimation("every realization failed".into()));
            }
            Ok(())
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("HRISLOC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("HRISLOC_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| execute(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Estimation(msg)) => {
            eprintln!("estimation failed: {msg}");
            ExitCode::from(2)
        }
    }
}
