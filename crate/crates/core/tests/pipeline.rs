//! End-to-end behavior of the simulation, hitting, bound and experiment layers.

use rbm_core::bounds::{self, drift_condition_report, sample_points, select_parameters};
use rbm_core::experiments::{self, CouplingConfig, GeneratorSpec, VerifyConfig};
use rbm_core::hitting::{self, HitTime};
use rbm_core::network_model::{certify, NetworkModel, DEFAULT_N_MAX};
use rbm_core::sim;
use rbm_core::skorokhod::{read_binary, solve_reflected, PathGrid};
use rbm_core::stats::{exponential_cdf, ks_statistic, mean_se};
use rbm_core::Error;

fn tandem(d: usize) -> NetworkModel {
    format!("tandem:d={d},q=0.5").parse::<GeneratorSpec>().unwrap().build().unwrap()
}

fn one_d() -> NetworkModel {
    rbm_core::io::parse_model(r#"{"d": 1, "Q": [[0]], "mu": [-1], "Sigma": [[1]]}"#).unwrap()
}

#[test]
fn verify_passes_on_a_clean_model() {
    let model = tandem(3);
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    let report = experiments::verify(&model, &cert, &VerifyConfig::default()).unwrap();
    for c in &report.checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert!(report.passed);
}

#[test]
fn verify_catches_a_sign_flip_in_routing() {
    let mut model = tandem(3);
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    // routing 0 -> 1 flipped after validation
    model.q[(0, 1)] = -model.q[(0, 1)];
    let config = VerifyConfig { lambda_reps: 20_000, ..VerifyConfig::default() };
    let report = experiments::verify(&model, &cert, &config).unwrap();
    let lambda = report.checks.iter().find(|c| c.name == "lambda_oracle").unwrap();
    assert!(!lambda.passed, "{}", lambda.detail);
    assert!(!report.passed);
}

#[test]
fn same_seed_same_path() {
    let model = tandem(3);
    let a = sim::simulate_rbm(&model, &[1.0, 0.0, 2.0], 5.0, 1e-2, 9).unwrap();
    let b = sim::simulate_rbm(&model, &[1.0, 0.0, 2.0], 5.0, 1e-2, 9).unwrap();
    let c = sim::simulate_rbm(&model, &[1.0, 0.0, 2.0], 5.0, 1e-2, 10).unwrap();
    assert_eq!(a.y, b.y);
    assert_ne!(a.y, c.y);

    let mut bin = Vec::new();
    a.write_binary(&mut bin).unwrap();
    let (d, k, dt, y, l) = read_binary(&bin).unwrap();
    assert_eq!((d, k, dt), (3, a.steps(), 1e-2));
    assert_eq!((y, l), (a.y.clone(), a.l.clone()));
}

#[test]
fn refinement_converges() {
    // One fine driver, aggregated to coarser grids; the coarse solutions
    // approach the finest one as the step shrinks.
    let model = tandem(3);
    let d = 3;
    let fine_dt = 1.25e-3;
    let y0 = [0.5, 0.2, 0.0];
    let mut errs = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..20 {
        let fine = sim::brownian_driver(&model, 4.0, fine_dt, seed).unwrap();
        let reference = solve_reflected(&fine, &y0, &model.r).unwrap();
        for (slot, factor) in [16usize, 8, 4].into_iter().enumerate() {
            let steps = fine.steps() / factor;
            let mut inc = vec![0.0; steps * d];
            for k in 0..steps {
                for s in 0..factor {
                    for i in 0..d {
                        inc[k * d + i] += fine.increment(k * factor + s)[i];
                    }
                }
            }
            let coarse = PathGrid::new(fine_dt * factor as f64, d, inc).unwrap();
            let sol = solve_reflected(&coarse, &y0, &model.r).unwrap();
            let err = (0..=steps)
                .flat_map(|k| {
                    let r = reference.y_at(k * factor);
                    sol.y_at(k).iter().zip(r).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
                })
                .fold(0.0f64, f64::max);
            errs[slot].push(err);
        }
    }
    let means: Vec<f64> = errs.iter().map(|e| mean_se(e).0).collect();
    assert!(means[0] > means[1] && means[1] > means[2], "errors {means:?}");
    assert!(means[2] < 0.1, "errors {means:?}");
}

#[test]
fn stationary_draws_match_one_dimensional_law() {
    let model = one_d();
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    let draws: Vec<f64> = (0..2000)
        .map(|n| sim::sample_stationary_approx(&model, &cert, 1e-3, n, Some(10.0)).unwrap().state[0])
        .collect();
    let (mean, se) = mean_se(&draws);
    assert!((mean - 0.5).abs() < 0.03 + 3.0 * se, "mean {mean} se {se}");
    let ks = ks_statistic(&draws, exponential_cdf(0.5));
    assert!(ks < 0.06, "ks {ks}");

    // the dominating law has the smaller drift, so it sits above
    let upper: Vec<f64> = (0..2000).map(|n| sim::sample_stationary_upper(&model, &cert, n).unwrap()[0]).collect();
    assert!(mean_se(&upper).0 > mean);
}

#[test]
fn dominating_path_needs_positive_margin() {
    let model = tandem(2);
    let mut cert = certify(&model, DEFAULT_N_MAX).unwrap();
    cert.delta1 = 0.0;
    let err = sim::simulate_dominating(&model, &cert, &[1.0, 1.0], 1.0, 1e-2, 1).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn eta_rounds_are_spaced_by_one_time_unit() {
    let model = tandem(2);
    let sol = sim::simulate_rbm(&model, &[0.0, 0.0], 30.0, 1e-2, 3).unwrap();
    let eps = hitting::default_eps_hit(&model, 1e-2);
    let rec = hitting::eta_sequence(&sol, eps).unwrap();
    let times = rec.eta_times();
    assert!(times.len() >= 2);
    for w in times.windows(2) {
        assert!(w[1] > w[0] + 1.0 - 1e-9);
    }
    assert_eq!(hitting::count_n(&rec, 0.0), 0);
    assert_eq!(hitting::count_n(&rec, 30.0), times.len());
    let sens = hitting::count_sensitivity(&sol, eps).unwrap();
    assert!(sens.half <= sens.nominal && sens.nominal <= sens.double);
}

#[test]
fn trials_reach_success_from_a_high_start() {
    let model = tandem(3);
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    let rec = hitting::geometric_trials(&model, &cert, 1, &[6.0, 6.0, 6.0], 1e-2, 5, 200, None).unwrap();
    assert!(!rec.max_rounds_exceeded);
    assert!(rec.success_round.is_some());
    assert_eq!(rec.tau_plus.len(), rec.rounds);
    assert!(rec.tau_plus.iter().all(|t| matches!(t, HitTime::At(v) if *v >= 0.0)));
}

#[test]
fn p0_needs_enough_replications() {
    let model = tandem(2);
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    assert!(hitting::estimate_p0(&model, &cert, 10, 1e-2, 1, None).is_err());
    let est = hitting::estimate_p0(&model, &cert, 2000, 1e-2, 1, None).unwrap();
    let mut csv = Vec::new();
    hitting::write_p0_csv(&mut csv, &[("tandem".into(), est)]).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2);
}

#[test]
fn drift_holds_beyond_the_compact_region() {
    let model = tandem(3);
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    let params = select_parameters(&cert, 3, 0.05).unwrap();
    let lo = 1.0 / params.theta;
    let points = sample_points(3, 1000, lo, 100.0 * lo, 77);
    let rep = drift_condition_report(&model, &cert, params.theta, params.epsilon, &points, lo).unwrap();
    assert!(rep.passed(), "worst {:e} at {:?}", rep.worst_margin, rep.worst_point);
    assert!(bounds::check_drift_conditions(&model, &cert, params.theta, params.epsilon, &points, lo).is_ok());
}

#[test]
fn drift_check_rejects_an_inadmissible_theta() {
    let model = tandem(3);
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    let points = sample_points(3, 200, 1.0, 100.0, 3);
    let err = bounds::check_drift_conditions(&model, &cert, 50.0, 1e-3, &points, 1.0).unwrap_err();
    assert!(matches!(err, Error::ConditionViolated { .. }));
}

#[test]
fn coupling_in_three_dimensions_stays_below_the_bound() {
    let model = tandem(3);
    let cert = certify(&model, DEFAULT_N_MAX).unwrap();
    let config = CouplingConfig {
        horizon: 20.0,
        reps: 60,
        seed: 4,
        y0: Some(vec![5.0; 3]),
        t_burn: Some(30.0),
        batch: 20,
        ..CouplingConfig::default()
    };
    let mut batches = 0;
    let curve = experiments::couple(&model, &cert, &config, |_| {
        batches += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(batches, 3);
    assert_eq!(curve.reps_done, 60);
    let excess = curve.bound_excess().expect("bound defined for d = 3");
    assert!(excess <= 0.0, "excess {excess}");
    assert!(curve.mean.last().unwrap() < curve.mean.first().unwrap());
}
