//! Monte Carlo harness, parameter sweeps and their CSV output.
//!
//! Seeds are derived from one base seed with SplitMix64. The schedule, the
//! gain phases and the per-trial noise seeds depend only on the trial index,
//! so every sweep point sees the same random draws and curves differ only
//! through the swept quantity.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{EstimateResult, Estimator, EstimatorOptions, StageFailure};
use crate::fim::{compute_bounds, BoundReport, BOUND_CSV_HEADER};
use crate::geometry::Rotation;
use crate::io::{csv_text, format_float};
use crate::scenario::{dbm_to_watts, place_scatterers, RadioConfig, Scenario};
use crate::signal::{build_schedule, channel_params_from_scenario, synthesize, ChannelParams, CodebookSchedule, GainModel};

/// Names of the twelve per-parameter metrics, shared by bounds and errors.
pub fn metric_names() -> &'static [&'static str] {
    &BOUND_CSV_HEADER[3..]
}

/// SplitMix64 finalizer over `base + stream·φ`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SCHEDULE: u64 = 1;
const STREAM_GAINS: u64 = 2;
const STREAM_NOISE: u64 = 1 << 20;
const STREAM_PLACEMENT: u64 = 1 << 21;
const STREAM_REDRAW: u64 = 1 << 22;

fn noise_seed(base: u64, trial: usize) -> u64 {
    derive_seed(base, STREAM_NOISE + trial as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    PbDbm,
    Rho,
    NScatterers,
}

impl SweepVariable {
    pub fn label(&self) -> &'static str {
        match self {
            SweepVariable::PbDbm => "P_B_dBm",
            SweepVariable::Rho => "rho",
            SweepVariable::NScatterers => "n_scatterers",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
    /// Redraw the reflection profile and gain phases for every trial
    /// instead of holding them fixed across noise realizations.
    pub redraw_per_trial: bool,
}

impl SweepSpec {
    pub fn new(variable: SweepVariable, values: Vec<f64>, trials: usize, base_seed: u64) -> Self {
        Self { variable, values, trials, base_seed, redraw_per_trial: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one value".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("sweep needs at least one trial".into()));
        }
        for &v in &self.values {
            let ok = match self.variable {
                SweepVariable::PbDbm => v.is_finite(),
                SweepVariable::Rho => v > 0.0 && v < 1.0,
                SweepVariable::NScatterers => v >= 0.0 && v.fract() == 0.0 && v < 1e6,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!("invalid {} value {v}", self.variable.label())));
            }
        }
        Ok(())
    }
}

/// Scenario and configuration at one sweep value.
pub fn apply_sweep_value(
    variable: SweepVariable,
    value: f64,
    s: &Scenario,
    cfg: &RadioConfig,
    base_seed: u64,
) -> (Scenario, RadioConfig) {
    let (mut s, mut cfg) = (s.clone(), cfg.clone());
    match variable {
        SweepVariable::PbDbm => cfg.tx_power = dbm_to_watts(value),
        SweepVariable::Rho => cfg.rho = value,
        SweepVariable::NScatterers => {
            let (bu, bru) = split_scatterers(value as usize, derive_seed(base_seed, STREAM_PLACEMENT));
            s.scatterers_bu = bu;
            s.scatterers_bru = bru;
        }
    }
    (s, cfg)
}

/// Places `n` scatterers, half in each box (the extra one in the BS-UE box).
fn split_scatterers(n: usize, seed: u64) -> (Vec<crate::geometry::Position>, Vec<crate::geometry::Position>) {
    place_scatterers(n - n / 2, n / 2, seed)
}

/// Per-trial absolute errors in metric order: delays as distances (m),
/// angle-pair errors (rad), position errors (m), clock errors (s) and the
/// Frobenius rotation error.
pub fn trial_errors(est: &EstimateResult, s: &Scenario, truth: &ChannelParams, c: f64) -> [f64; 12] {
    let ch = &est.channel;
    [
        c * (ch.tau_br - truth.tau_br).abs(),
        c * (ch.tau_bu - truth.tau_bu).abs(),
        c * (ch.tau_bru - truth.tau_bru).abs(),
        ch.theta_br.distance(&truth.theta_br),
        ch.theta_bu.distance(&truth.theta_bu),
        ch.theta_ru.distance(&truth.theta_ru),
        ch.phi_rb.distance(&truth.phi_rb),
        (est.p_r - s.p_r).norm(),
        (est.p_u - s.p_u).norm(),
        (est.b_r - s.b_r).abs(),
        (est.b_u - s.b_u).abs(),
        est.rotation.frobenius_distance(&Rotation::from_angles(s.rot)),
    ]
}

/// Everything a trial needs besides its noise seed.
pub struct TrialSetup {
    pub scenario: Scenario,
    pub cfg: RadioConfig,
    pub sched: CodebookSchedule,
    pub params: ChannelParams,
    estimator: Estimator,
}

impl TrialSetup {
    pub fn new(
        s: &Scenario,
        cfg: &RadioConfig,
        gain_model: &GainModel,
        schedule_seed: u64,
        gain_seed: u64,
    ) -> Result<Self> {
        s.validate()?;
        let sched = build_schedule(cfg, schedule_seed)?;
        let params = channel_params_from_scenario(s, cfg, gain_model, gain_seed)?;
        let estimator = Estimator::new(cfg, &sched, EstimatorOptions::default())?;
        Ok(Self { scenario: s.clone(), cfg: cfg.clone(), sched, params, estimator })
    }

    /// Setup with the fixed schedule and gain draws of `base_seed`.
    pub fn from_base_seed(s: &Scenario, cfg: &RadioConfig, gain_model: &GainModel, base_seed: u64) -> Result<Self> {
        Self::new(
            s,
            cfg,
            gain_model,
            derive_seed(base_seed, STREAM_SCHEDULE),
            derive_seed(base_seed, STREAM_GAINS),
        )
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    /// Synthesizes one observation and runs the pipeline on it.
    pub fn run(&self, noise_seed: u64) -> std::result::Result<EstimateResult, StageFailure> {
        let obs = synthesize(&self.scenario, &self.cfg, &self.sched, &self.params, noise_seed).map_err(|error| {
            StageFailure { stage: crate::estimator::Stage::BsHrisToa, error, partial: Box::default() }
        })?;
        self.estimator.run(&obs, &self.scenario.p_b)
    }

    /// Errors of one trial, or `None` if the pipeline failed.
    pub fn trial(&self, noise_seed: u64) -> Option<[f64; 12]> {
        self.run(noise_seed)
            .ok()
            .map(|e| trial_errors(&e, &self.scenario, &self.params, self.cfg.speed_of_light))
    }

    /// Bounds at the true parameters; NaN entries if the FIM is singular.
    pub fn bounds(&self) -> BoundReport {
        compute_bounds(&self.scenario, &self.cfg, &self.sched, &self.params)
            .unwrap_or_else(|_| BoundReport::from_values(&[f64::NAN; 12]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub value: f64,
    pub rmse: BoundReport,
    pub crb: BoundReport,
    pub trials: usize,
    pub failures: usize,
}

/// Root mean square over the successful trials; NaN if there are none.
pub fn rmse(errors: &[[f64; 12]]) -> [f64; 12] {
    let mut out = [f64::NAN; 12];
    if errors.is_empty() {
        return out;
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = (errors.iter().map(|e| e[i] * e[i]).sum::<f64>() / errors.len() as f64).sqrt();
    }
    out
}

fn collect_trials(results: Vec<Option<[f64; 12]>>) -> (Vec<[f64; 12]>, usize) {
    let failures = results.iter().filter(|r| r.is_none()).count();
    (results.into_iter().flatten().collect(), failures)
}

/// Monte Carlo RMSE and CRB at every sweep value.
pub fn monte_carlo(
    s: &Scenario,
    cfg: &RadioConfig,
    gain_model: &GainModel,
    spec: &SweepSpec,
) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let (s_v, cfg_v) = apply_sweep_value(spec.variable, value, s, cfg, spec.base_seed);
        cfg_v.validate()?;
        let base = TrialSetup::from_base_seed(&s_v, &cfg_v, gain_model, spec.base_seed)?;
        let crb = base.bounds();
        let results: Vec<Option<[f64; 12]>> = if spec.redraw_per_trial {
            (0..spec.trials)
                .into_par_iter()
                .map(|t| {
                    let stream = STREAM_REDRAW + 2 * t as u64;
                    TrialSetup::new(
                        &s_v,
                        &cfg_v,
                        gain_model,
                        derive_seed(spec.base_seed, stream),
                        derive_seed(spec.base_seed, stream + 1),
                    )
                    .ok()
                    .and_then(|setup| setup.trial(noise_seed(spec.base_seed, t)))
                })
                .collect()
        } else {
            (0..spec.trials)
                .into_par_iter()
                .map(|t| base.trial(noise_seed(spec.base_seed, t)))
                .collect()
        };
        let (ok, failures) = collect_trials(results);
        rows.push(MetricRow {
            value,
            rmse: BoundReport::from_values(&rmse(&ok)),
            crb,
            trials: spec.trials,
            failures,
        });
    }
    Ok(rows)
}

/// Bounds only, at every `ρ`, with the schedule and gains of `base_seed`.
pub fn rho_sweep_bounds(
    s: &Scenario,
    cfg: &RadioConfig,
    gain_model: &GainModel,
    rho_values: &[f64],
    base_seed: u64,
) -> Result<Vec<BoundReport>> {
    if let Some(bad) = rho_values.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::InvalidConfig(format!("rho {bad} outside (0, 1)")));
    }
    s.validate()?;
    let sched = build_schedule(cfg, derive_seed(base_seed, STREAM_SCHEDULE))?;
    let params = channel_params_from_scenario(s, cfg, gain_model, derive_seed(base_seed, STREAM_GAINS))?;
    rho_values
        .par_iter()
        .map(|&rho| {
            let mut c = cfg.clone();
            c.rho = rho;
            compute_bounds(s, &c, &sched, &params)
        })
        .collect()
}

/// Linear-interpolation quantile of a sample; NaN for an empty sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Error distribution of one scatterer count.
#[derive(Debug, Clone, PartialEq)]
pub struct ScattererRow {
    pub n_scatterers: usize,
    pub realizations: usize,
    pub failures: usize,
    pub median: BoundReport,
    pub p90: BoundReport,
}

/// Runs the scatterer-unaware pipeline over `realizations` scatterer
/// placements per count. Realization `r` uses the same noise seed for every
/// count, and count 0 reproduces the clean Monte Carlo trials.
pub fn scatterer_study(
    s: &Scenario,
    cfg: &RadioConfig,
    gain_model: &GainModel,
    n_values: &[usize],
    realizations: usize,
    base_seed: u64,
) -> Result<Vec<ScattererRow>> {
    if realizations == 0 {
        return Err(Error::InvalidConfig("need at least one realization".into()));
    }
    let base = TrialSetup::from_base_seed(s, cfg, gain_model, base_seed)?;
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let results: Vec<Option<[f64; 12]>> = (0..realizations)
            .into_par_iter()
            .map(|r| {
                let mut scen = s.clone();
                let (bu, bru) = split_scatterers(n, derive_seed(base_seed, STREAM_PLACEMENT + 1 + r as u64));
                scen.scatterers_bu = bu;
                scen.scatterers_bru = bru;
                let obs = synthesize(&scen, cfg, &base.sched, &base.params, noise_seed(base_seed, r)).ok()?;
                let est = base.estimator().run(&obs, &s.p_b).ok()?;
                Some(trial_errors(&est, s, &base.params, cfg.speed_of_light))
            })
            .collect();
        let (ok, failures) = collect_trials(results);
        let column = |i: usize| ok.iter().map(|e| e[i]).collect::<Vec<f64>>();
        let q = |p: f64| {
            let mut v = [0.0; 12];
            for (i, x) in v.iter_mut().enumerate() {
                *x = quantile(&column(i), p);
            }
            BoundReport::from_values(&v)
        };
        rows.push(ScattererRow { n_scatterers: n, realizations, failures, median: q(0.5), p90: q(0.9) });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV

fn prefixed(prefix: &str) -> impl Iterator<Item = String> + '_ {
    metric_names().iter().map(move |m| format!("{prefix}_{m}"))
}

pub fn metric_csv_header(variable: SweepVariable) -> String {
    let mut cols = vec![variable.label().to_string(), "trials".into(), "failures".into()];
    cols.extend(prefixed("rmse"));
    cols.extend(prefixed("crb"));
    cols.join(",")
}

pub fn metric_rows_csv(variable: SweepVariable, rows: &[MetricRow]) -> String {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            let mut f = vec![format_float(r.value), r.trials.to_string(), r.failures.to_string()];
            f.extend(r.rmse.values().iter().map(|v| format_float(*v)));
            f.extend(r.crb.values().iter().map(|v| format_float(*v)));
            f.join(",")
        })
        .collect();
    csv_text(&metric_csv_header(variable), &lines)
}

/// Bound CSV: one row per `(P_B [dBm], ρ, report)`.
pub fn bound_rows_csv(scenario_id: &str, rows: &[(f64, f64, BoundReport)]) -> String {
    let lines: Vec<String> = rows.iter().map(|(p, rho, b)| b.csv_row(scenario_id, *p, *rho)).collect();
    csv_text(&BoundReport::csv_header(), &lines)
}

pub fn scatterer_csv_header() -> String {
    let mut cols = vec!["n_scatterers".to_string(), "realizations".into(), "failures".into()];
    cols.extend(prefixed("median"));
    cols.extend(prefixed("p90"));
    cols.join(",")
}

pub fn scatterer_rows_csv(rows: &[ScattererRow]) -> String {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            let mut f = vec![r.n_scatterers.to_string(), r.realizations.to_string(), r.failures.to_string()];
            f.extend(r.median.values().iter().map(|v| format_float(*v)));
            f.extend(r.p90.values().iter().map(|v| format_float(*v)));
            f.join(",")
        })
        .collect();
    csv_text(&scatterer_csv_header(), &lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::default_scenario;
    use approx::assert_relative_eq;

    fn small() -> (Scenario, RadioConfig) {
        let (s, mut cfg) = default_scenario();
        cfg.subcarriers = 64;
        cfg.transmissions = 50;
        cfg.ris_rows = 8;
        cfg.ris_cols = 8;
        (s, cfg)
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }

    #[test]
    fn spec_validation() {
        let ok = SweepSpec::new(SweepVariable::Rho, vec![0.5], 1, 0);
        assert!(ok.validate().is_ok());
        for bad in [
            SweepSpec::new(SweepVariable::Rho, vec![], 1, 0),
            SweepSpec::new(SweepVariable::Rho, vec![0.5], 0, 0),
            SweepSpec::new(SweepVariable::Rho, vec![1.0], 1, 0),
            SweepSpec::new(SweepVariable::NScatterers, vec![1.5], 1, 0),
            SweepSpec::new(SweepVariable::PbDbm, vec![f64::NAN], 1, 0),
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
    }

    #[test]
    fn noiseless_single_trial_has_tiny_rmse() {
        let (s, mut cfg) = small();
        cfg.noise_psd = 0.0;
        let spec = SweepSpec::new(SweepVariable::PbDbm, vec![30.0], 1, 3);
        let rows = monte_carlo(&s, &cfg, &GainModel::FreeSpace, &spec).unwrap();
        let r = &rows[0];
        assert_eq!((r.trials, r.failures), (1, 0));
        assert!(r.rmse.peb_r < 1e-6 && r.rmse.peb_u < 1e-6, "{:?}", r.rmse);
        assert!(r.rmse.oeb < 1e-8);
        assert!(r.rmse.ceb_r < 1e-15 && r.rmse.ceb_u < 1e-15);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_ordered() {
        let (s, cfg) = small();
        let spec = SweepSpec::new(SweepVariable::PbDbm, vec![20.0, 30.0], 4, 11);
        let a = metric_rows_csv(spec.variable, &monte_carlo(&s, &cfg, &GainModel::FreeSpace, &spec).unwrap());
        let b = metric_rows_csv(spec.variable, &monte_carlo(&s, &cfg, &GainModel::FreeSpace, &spec).unwrap());
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| {
            metric_rows_csv(spec.variable, &monte_carlo(&s, &cfg, &GainModel::FreeSpace, &spec).unwrap())
        });
        assert_eq!(a, c);
        assert_eq!(a.lines().count(), 3);
    }

    #[test]
    fn redraw_mode_runs_and_differs() {
        let (s, cfg) = small();
        let mut spec = SweepSpec::new(SweepVariable::PbDbm, vec![30.0], 3, 5);
        let fixed = monte_carlo(&s, &cfg, &GainModel::FreeSpace, &spec).unwrap();
        spec.redraw_per_trial = true;
        let redrawn = monte_carlo(&s, &cfg, &GainModel::FreeSpace, &spec).unwrap();
        assert_eq!(redrawn[0].failures, 0);
        assert_ne!(fixed[0].rmse, redrawn[0].rmse);
        assert_eq!(fixed[0].crb, redrawn[0].crb);
    }

    #[test]
    fn rho_sweep_rejects_out_of_range() {
        let (s, cfg) = small();
        assert!(rho_sweep_bounds(&s, &cfg, &GainModel::FreeSpace, &[0.5, 1.0], 0).is_err());
        let rows = rho_sweep_bounds(&s, &cfg, &GainModel::FreeSpace, &[0.2, 0.8], 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_relative_eq!(rows[0].teb_bu, rows[1].teb_bu, max_relative = 1e-9);
        assert!(rows[0].teb_br > rows[1].teb_br);
    }

    #[test]
    fn zero_scatterers_reproduce_clean_trials() {
        let (s, cfg) = small();
        let rows = scatterer_study(&s, &cfg, &GainModel::FreeSpace, &[0], 3, 9).unwrap();
        let setup = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 9).unwrap();
        let peb_u: Vec<f64> = (0..3).map(|t| setup.trial(noise_seed(9, t)).unwrap()[8]).collect();
        assert_eq!(rows[0].median.peb_u, quantile(&peb_u, 0.5));
        assert_eq!(rows[0].failures, 0);
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_relative_eq!(quantile(&[0.0, 10.0], 0.9), 9.0);
        assert!(quantile(&[], 0.5).is_nan());
        assert!(rmse(&[]).iter().all(|v| v.is_nan()));
        assert_relative_eq!(rmse(&[[3.0; 12], [4.0; 12]])[0], 12.5f64.sqrt());
    }

    #[test]
    fn scatterers_are_split_between_boxes() {
        let (bu, bru) = split_scatterers(5, 1);
        assert_eq!((bu.len(), bru.len()), (3, 2));
    }

    #[test]
    fn csv_headers_have_fixed_columns() {
        let h = metric_csv_header(SweepVariable::PbDbm);
        assert_eq!(h.split(',').count(), 3 + 24);
        assert!(h.starts_with("P_B_dBm,trials,failures,rmse_teb_br_m,"));
        assert!(h.ends_with(",crb_oeb"));
        assert_eq!(scatterer_csv_header().split(',').count(), 27);
    }
}
