use hrisloc::error::Error;
use hrisloc::estimator::{run_pipeline, Stage};
use hrisloc::experiment::TrialSetup;
use hrisloc::geometry::Rotation;
use hrisloc::io::{load_observations, save_observations};
use hrisloc::scenario::{default_scenario, RadioConfig, Scenario};
use hrisloc::signal::{delay_steering, synthesize, GainModel};

fn small() -> (Scenario, RadioConfig) {
    let (s, mut cfg) = default_scenario();
    cfg.subcarriers = 64;
    cfg.transmissions = 50;
    cfg.ris_rows = 8;
    cfg.ris_cols = 8;
    (s, cfg)
}

#[test]
fn noiseless_recovery_on_reduced_arrays() {
    let (s, mut cfg) = small();
    cfg.noise_psd = 0.0;
    let t = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 3).unwrap();
    let e = t.run(0).unwrap();
    assert!((e.p_r - s.p_r).norm() < 1e-6);
    assert!((e.p_u - s.p_u).norm() < 1e-6);
    assert!((e.b_u - s.b_u).abs() < 1e-15);
    assert!(e.rotation.frobenius_distance(&Rotation::from_angles(s.rot)) < 1e-8);
}

#[test]
fn dumped_observations_give_identical_estimates() {
    let (s, cfg) = small();
    let t = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 3).unwrap();
    let obs = synthesize(&s, &cfg, &t.sched, &t.params, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.bin");
    save_observations(&path, &obs).unwrap();
    let back = load_observations(&path).unwrap();
    let a = run_pipeline(&obs, &t.sched, &cfg, &s.p_b).unwrap();
    let b = run_pipeline(&back, &t.sched, &cfg, &s.p_b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ue_clock_shift_moves_only_the_ue_clock() {
    let (s, cfg) = small();
    let t = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 3).unwrap();
    let obs = synthesize(&s, &cfg, &t.sched, &t.params, 4).unwrap();
    let base = t.estimator().run(&obs, &s.p_b).unwrap();
    for shift in [1e-6, -1e-6, 3.3e-9] {
        let mut shifted = obs.clone();
        let d = delay_steering(shift, cfg.subcarriers, cfg.subcarrier_spacing);
        for (k, mut row) in shifted.y_u.row_iter_mut().enumerate() {
            row *= d[k];
        }
        let e = t.estimator().run(&shifted, &s.p_b).unwrap();
        // Equal up to where the angle refinement stops (step norm 1e-10).
        assert!((e.p_u - base.p_u).amax() < 1e-7);
        assert!((e.p_r - base.p_r).amax() < 1e-7);
        assert!(e.rotation.frobenius_distance(&base.rotation) < 1e-8);
        let period = 1.0 / cfg.subcarrier_spacing;
        let db = (e.b_u - base.b_u - shift).rem_euclid(period);
        assert!(db.min(period - db) < 1e-15, "{db}");
    }
}

#[test]
fn reflected_path_vanishes_as_rho_approaches_one() {
    let (s, mut cfg) = small();
    let t = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 3).unwrap();
    let reference = t.run(11).unwrap();
    let ref_err = reference.channel.theta_ru.distance(&t.params.theta_ru);
    cfg.rho = 1.0 - 1e-9;
    let t = TrialSetup::from_base_seed(&s, &cfg, &GainModel::FreeSpace, 3).unwrap();
    match t.run(11) {
        Err(f) => {
            assert_eq!(f.stage, Stage::BsHrisUe);
            assert!(matches!(f.error, Error::WeakSignal { .. }));
            assert!(f.partial.bu.is_some());
        }
        Ok(e) => {
            let err = e.channel.theta_ru.distance(&t.params.theta_ru);
            assert!(err > 100.0 * ref_err, "{err} vs {ref_err}");
        }
    }
}
