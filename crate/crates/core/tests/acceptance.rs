//! Acceptance criteria. Prints one PASS/FAIL line per criterion and a
//! summary. Failures are reported, not hidden; the process exits non-zero
//! on any failure only when `HRISLOC_ACCEPTANCE_STRICT=1`.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use hrisloc::estimator::{procrustes, procrustes_objective};
use hrisloc::experiment::{monte_carlo, rho_sweep_bounds, scatterer_study, SweepSpec, SweepVariable, TrialSetup};
use hrisloc::fim::{
    eta_from_state, jacobian_t_at, mean_derivatives, BoundPipeline, KnowledgeCase, StateParams,
    STATE_DIM,
};
use hrisloc::geometry::{kappa, AnglePair, Rotation, RotationAngles};
use hrisloc::scenario::{dbm_to_watts, default_scenario, RadioConfig, Scenario};
use hrisloc::signal::{
    build_schedule, channel_params_from_scenario, geometric_params, mean_observation, ChannelParams, GainModel, C64,
    GEOMETRIC_DIM,
};
use nalgebra::{Matrix3x2, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let mut out = f();
    let el = t0.elapsed();
    out.detail = format!("{} [{:.1} s]", out.detail, el.as_secs_f64());
    if let Some(limit) = limit {
        if el > limit {
            out.pass = false;
            out.detail.push_str(&format!(" exceeds {:.0} s", limit.as_secs_f64()));
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn setup(cfg: &RadioConfig, s: &Scenario, seed: u64) -> (hrisloc::signal::CodebookSchedule, ChannelParams) {
    let sched = build_schedule(cfg, seed).unwrap();
    let p = channel_params_from_scenario(s, cfg, &GainModel::FreeSpace, seed + 1).unwrap();
    (sched, p)
}

fn noiseless_recovery() -> Outcome {
    let (s, mut cfg) = default_scenario();
    cfg.noise_psd = 0.0;
    let t = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 1).unwrap();
    match t.run(0) {
        Ok(e) => {
            let dp_r = (e.p_r - s.p_r).norm();
            let dp_u = (e.p_u - s.p_u).norm();
            let db = (e.b_r - s.b_r).abs().max((e.b_u - s.b_u).abs());
            let dr = e.rotation.frobenius_distance(&Rotation::from_angles(s.rot));
            Outcome {
                pass: dp_r <= 1e-6 && dp_u <= 1e-6 && db <= 1e-15 && dr <= 1e-8,
                detail: format!("|dp_R| {dp_r:.2e} m, |dp_U| {dp_u:.2e} m, clocks {db:.2e} s, R {dr:.2e}"),
            }
        }
        Err(e) => Outcome { pass: false, detail: e.to_string() },
    }
}

/// Reference geometry with perturbed HRIS/UE positions, rotation and clocks.
fn random_scenario(rng: &mut ChaCha8Rng, cfg: &RadioConfig) -> Scenario {
    let (base, _) = default_scenario();
    loop {
        let mut s = base.clone();
        let jitter = |rng: &mut ChaCha8Rng, w: f64| Vector3::from_fn(|_, _| rng.random_range(-w..w));
        s.p_r += jitter(rng, 1.0);
        s.p_u += jitter(rng, 2.0);
        s.rot = RotationAngles::new(
            s.rot.alpha + rng.random_range(-0.3..0.3),
            s.rot.beta + rng.random_range(-0.3..0.3),
            s.rot.gamma + rng.random_range(-0.3..0.3),
        );
        s.b_r = rng.random_range(0.0..50e-9);
        s.b_u = rng.random_range(0.0..50e-9);
        if let Ok(p) = geometric_params(&s, cfg) {
            let off_axis = [p.theta_br, p.theta_bu, p.theta_ru, p.phi_rb]
                .iter()
                .all(|a| a.el.sin() > 0.1);
            if off_axis {
                return s;
            }
        }
    }
}

fn derivative_oracle() -> Outcome {
    let (_, cfg) = default_scenario();
    let c = cfg.speed_of_light;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst_d, mut worst_t) = (0.0f64, 0.0f64);
    for n in 0..20 {
        let s = random_scenario(&mut rng, &cfg);
        let (sched, p) = setup(&cfg, &s, 100 + n);
        let an = mean_derivatives(&cfg, &sched, &p).unwrap();
        let x0 = p.to_vector();
        for (i, (dr, du)) in an.iter().enumerate() {
            let h = match i {
                0..=2 => 1e-12,
                3..=10 => 1e-6,
                _ => 1e-6 * x0[i].abs().max(x0[11..].iter().fold(0.0f64, |m, v| m.max(v.abs()))),
            };
            let (mut xp, mut xm) = (x0, x0);
            xp[i] += h;
            xm[i] -= h;
            let op = mean_observation(&cfg, &sched, &ChannelParams::from_vector(&xp)).unwrap();
            let om = mean_observation(&cfg, &sched, &ChannelParams::from_vector(&xm)).unwrap();
            let inv = C64::new(1.0 / (2.0 * h), 0.0);
            let err = ((op.y_r - om.y_r) * inv - dr).norm().hypot(((op.y_u - om.y_u) * inv - du).norm());
            worst_d = worst_d.max(err / dr.norm().hypot(du.norm()));
        }
        let state = StateParams::from_scenario(&s);
        let t = jacobian_t_at(&state, &s.p_b, c).unwrap();
        let z0 = state.to_vector();
        for j in 0..STATE_DIM {
            let h = if j == 6 || j == 7 { 1e-12 } else { 1e-6 };
            let (mut zp, mut zm) = (z0, z0);
            zp[j] += h;
            zm[j] -= h;
            let ep = eta_from_state(&StateParams::from_vector(&zp), &s.p_b, c);
            let em = eta_from_state(&StateParams::from_vector(&zm), &s.p_b, c);
            for i in 0..GEOMETRIC_DIM {
                let fd = (ep[i] - em[i]) / (2.0 * h);
                worst_t = worst_t.max((fd - t[(i, j)]).abs() / t.row(i).amax());
            }
        }
    }
    Outcome {
        pass: worst_d <= 1e-6 && worst_t <= 1e-6,
        detail: format!("max relative error: mean derivatives {worst_d:.2e}, T entries {worst_t:.2e}"),
    }
}

fn power_law() -> Outcome {
    let (s, mut cfg) = default_scenario();
    let (sched, p) = setup(&cfg, &s, 1);
    let powers: Vec<f64> = (0..8).map(|i| 9.0 + 3.0 * i as f64).collect();
    let reports: Vec<[f64; 12]> = powers
        .iter()
        .map(|&dbm| {
            cfg.tx_power = dbm_to_watts(dbm);
            BoundPipeline::new(&s, &cfg, &sched, &p)
                .and_then(|b| b.report(&s, &cfg, KnowledgeCase::C1.known()))
                .unwrap()
                .values()
        })
        .collect();
    let mut worst = 0.0f64;
    for w in 0..powers.len() - 1 {
        let dx = dbm_to_watts(powers[w + 1]).ln() - dbm_to_watts(powers[w]).ln();
        for m in 0..12 {
            let slope = (reports[w + 1][m].ln() - reports[w][m].ln()) / dx;
            worst = worst.max((slope + 0.5).abs());
        }
    }
    Outcome { pass: worst <= 1e-6, detail: format!("max |slope + 0.5| over 12 bounds, 9..30 dBm: {worst:.2e}") }
}

fn efficiency() -> Outcome {
    let (s, cfg) = default_scenario();
    let spec = SweepSpec::new(SweepVariable::PbDbm, vec![30.0], 200, 2024);
    let row = &monte_carlo(&s, &cfg, &GainModel::FreeSpace, &spec).unwrap()[0];
    let names = ["tau_BR", "tau_BU", "theta_BU", "phi_RB", "p_R", "p_U", "R"];
    let idx = [0, 1, 4, 6, 7, 8, 11];
    let (r, c) = (row.rmse.values(), row.crb.values());
    let ratios: Vec<f64> = idx.iter().map(|&i| r[i] / c[i]).collect();
    let pass = ratios.iter().all(|q| (0.9..=1.5).contains(q));
    let detail = names
        .iter()
        .zip(&ratios)
        .map(|(n, q)| format!("{n} {q:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome { pass, detail: format!("RMSE/CRB: {detail}; failures {}/{}", row.failures, row.trials) }
}

fn rho_shape() -> Outcome {
    let (s, cfg) = default_scenario();
    let mut rhos = vec![1e-6, 0.009];
    rhos.extend((1..10).map(|i| i as f64 / 10.0));
    rhos.extend([0.99, 1.0 - 1e-6]);
    let b = rho_sweep_bounds(&s, &cfg, &GainModel::FreeSpace, &rhos, 1).unwrap();
    let mid = b[rhos.iter().position(|r| *r == 0.5).unwrap()].peb_r;
    let teb_bu_dev = b.iter().map(|x| rel(x.teb_bu, b[0].teb_bu)).fold(0.0, f64::max);
    let decreasing = b.windows(2).all(|w| w[1].teb_br < w[0].teb_br);
    let low = b[1].peb_r / mid;
    let lo_edge = b[0].peb_r / mid;
    let hi_edge = b[b.len() - 1].peb_r / mid;
    let pass = teb_bu_dev <= 1e-9 && decreasing && low < 1.0 && lo_edge >= 100.0 && hi_edge >= 100.0;
    Outcome {
        pass,
        detail: format!(
            "TEB_BU spread {teb_bu_dev:.1e}, TEB_BR decreasing {decreasing}, PEB_R ratios to rho=0.5: \
             0.009 -> {low:.3}, 1e-6 -> {lo_edge:.2}, 1-1e-6 -> {hi_edge:.1}"
        ),
    }
}

fn c1_c3() -> Outcome {
    let (s, cfg) = default_scenario();
    let (sched, p) = setup(&cfg, &s, 1);
    let pipe = BoundPipeline::new(&s, &cfg, &sched, &p).unwrap();
    let c1 = pipe.report(&s, &cfg, KnowledgeCase::C1.known()).unwrap();
    let c3 = pipe.report(&s, &cfg, KnowledgeCase::C3.known()).unwrap();
    let (dr, du) = (rel(c1.peb_r, c3.peb_r), rel(c1.peb_u, c3.peb_u));
    Outcome {
        pass: dr <= 1e-9 && du <= 1e-9,
        detail: format!(
            "PEB_R {:.6e} vs {:.6e} (rel {dr:.2e}), PEB_U {:.6e} vs {:.6e} (rel {du:.2e})",
            c1.peb_r, c3.peb_r, c1.peb_u, c3.peb_u
        ),
    }
}

/// Shifts every UE delay by `shift`, noise included: `Y_U ← diag(d(shift)) Y_U`.
fn clock_invariance() -> Outcome {
    let (s, cfg) = default_scenario();
    let t = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 1).unwrap();
    let obs = hrisloc::signal::synthesize(&s, &cfg, &t.sched, &t.params, 5).unwrap();
    let base = t.estimator().run(&obs, &s.p_b).unwrap();
    let mut worst = 0.0f64;
    let mut identical = true;
    for shift in [1e-6, -1e-6] {
        let mut shifted = obs.clone();
        let d = hrisloc::signal::delay_steering(shift, cfg.subcarriers, cfg.subcarrier_spacing);
        for (k, mut row) in shifted.y_u.row_iter_mut().enumerate() {
            row *= d[k];
        }
        let e = t.estimator().run(&shifted, &s.p_b).unwrap();
        identical &= e.p_r == base.p_r && e.p_u == base.p_u;
        worst = worst.max((e.p_r - base.p_r).amax()).max((e.p_u - base.p_u).amax());
        let db = e.b_u - base.b_u - shift;
        if db.abs() > 1e-12 {
            identical = false;
        }
    }
    Outcome {
        pass: identical,
        detail: format!("max position deviation under b_U +-1 us: {worst:.3e} m (bitwise identical: {identical})"),
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    Rotation::from_matrix_unchecked(UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner())
}

fn procrustes_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut beaten = 0;
    let mut min_margin = f64::INFINITY;
    for _ in 0..100 {
        let r = random_rotation(&mut rng);
        let dir = |rng: &mut ChaCha8Rng| kappa(&AnglePair::new(rng.random_range(-PI..PI), rng.random_range(0.2..2.9)));
        let theta = Matrix3x2::from_columns(&[dir(&mut rng), dir(&mut rng)]);
        let noise = Matrix3x2::from_fn(|_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
        let q = r.matrix() * theta + noise;
        let est = procrustes(&q, &theta).unwrap();
        let f = procrustes_objective(&est, &q, &theta);
        for _ in 0..10_000 {
            let g = procrustes_objective(&random_rotation(&mut rng), &q, &theta);
            min_margin = min_margin.min(g - f);
            if g < f {
                beaten += 1;
            }
        }
    }
    Outcome {
        pass: beaten == 0,
        detail: format!("random rotations beating the estimate: {beaten} of 1e6; smallest margin {min_margin:.3e}"),
    }
}

fn scatterer_robustness() -> Outcome {
    let (s, cfg) = default_scenario();
    let rows = scatterer_study(&s, &cfg, &GainModel::FreeSpace, &[0, 8], 100, 77).unwrap();
    let (clean, dirty) = (&rows[0], &rows[1]);
    let completed = (dirty.realizations - dirty.failures) as f64 / dirty.realizations as f64;
    let ratio = dirty.median.peb_u / clean.median.peb_u;
    Outcome {
        pass: completed >= 0.9 && ratio <= 10.0,
        detail: format!(
            "N_s=8: completed {:.0}%, median p_U error {:.3e} m vs clean {:.3e} m (x{ratio:.2})",
            100.0 * completed,
            dirty.median.peb_u,
            clean.median.peb_u
        ),
    }
}

fn main() {
    let criteria: Vec<(&str, Option<u64>, fn() -> Outcome)> = vec![
        ("noiseless exact recovery", Some(10), noiseless_recovery),
        ("derivative oracle", Some(60), derivative_oracle),
        ("power-law scaling", None, power_law),
        ("efficiency at high SNR", Some(1200), efficiency),
        ("rho-sweep shape", None, rho_shape),
        ("C1/C3 equivalence", None, c1_c3),
        ("clock-bias invariance", None, clock_invariance),
        ("Procrustes optimality", None, procrustes_optimality),
        ("scatterer robustness", None, scatterer_robustness),
    ];
    let mut failed = 0;
    for (name, limit, f) in &criteria {
        let out = timed(limit.map(Duration::from_secs), f);
        if !out.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 && std::env::var("HRISLOC_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
