use mnkit::covmodels::{CovSpec, Covariance};
use mnkit::mnrsa::*;
use mnkit::optim::{grad_check, Objective};
use mnkit::synth::{gen_rsa_synth, rmse_corr, RsaSynthConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn small_problem(t: usize, v: usize, c: usize, seed: u64) -> RsaProblem {
    let b = gen_rsa_synth(&RsaSynthConfig {
        t,
        v,
        c,
        snr: 1.0,
        gp_lengthscale: 0.0,
        n_nuisance: 1,
        seed,
        ..Default::default()
    })
    .unwrap();
    RsaProblem::new(b.y, b.design).unwrap()
}

fn config(p: &RsaProblem, rank: usize) -> RsaConfig {
    RsaConfig {
        residual_rank: rank,
        ..RsaConfig::default_for(p)
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let p = small_problem(30, 8, 3, 1);
    let obj = objective_for(&p, &config(&p, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let theta = obj.initial_params().map(|x| x + 0.5 * (rng.random::<f64>() - 0.5));
        let err = grad_check(&obj, &theta, 1e-4).unwrap();
        assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn objective_matches_dense_vec_normal_density() {
    let p = small_problem(20, 6, 3, 3);
    for spatial in [CovSpec::Diagonal { dim: 6 }, CovSpec::Isotropic { dim: 6 }] {
        let cfg = RsaConfig {
            spatial,
            ..config(&p, 2)
        };
        let obj = objective_for(&p, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let theta = obj.initial_params().map(|x| x + rng.random::<f64>() - 0.5);
            let (row, col) = obj.models_at(&theta).unwrap();
            let cov = col.dense().kronecker(&row.dense());
            let y = DVector::from_column_slice(p.data().as_slice());
            let ch = cov.cholesky().unwrap();
            let ld = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let dense = -0.5 * y.len() as f64 * LN_2PI - 0.5 * ld - 0.5 * y.dot(&ch.solve(&y));
            let (value, _) = obj.evaluate(&theta).unwrap();
            assert!((value + obj.normalizer() - dense).abs() < 1e-8);
        }
    }
}

#[test]
fn single_condition_gives_scalar_u() {
    let p = small_problem(40, 10, 1, 5);
    let r = fit_mnrsa(&p, &config(&p, 2)).unwrap();
    assert_eq!(r.u.shape(), (1, 1));
    assert!(r.u[(0, 0)] >= 0.0);
    if !r.degenerate {
        assert_eq!(r.corr.unwrap(), DMatrix::from_element(1, 1, 1.0));
    }
}

#[test]
fn fit_trace_is_monotone_and_deterministic() {
    let p = small_problem(60, 20, 3, 6);
    let cfg = config(&p, 3);
    let a = fit_mnrsa(&p, &cfg).unwrap();
    for w in a.loglik_trace.windows(2) {
        assert!(w[1].1 >= w[0].1);
    }
    let b = fit_mnrsa(&p, &cfg).unwrap();
    assert_eq!(a.u, b.u);
    let corr = a.corr.unwrap();
    assert!(corr.iter().all(|c| (-1.0..=1.0).contains(c)));
    let ev = a.u.symmetric_eigen().eigenvalues;
    assert!(ev.min() >= -1e-10 * ev.max().abs());
}

#[test]
fn recovers_correlation_at_high_snr() {
    let bundle = gen_rsa_synth(&RsaSynthConfig {
        t: 200,
        v: 200,
        c: 4,
        snr: 2.0,
        gp_lengthscale: 0.0,
        n_nuisance: 2,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let p = RsaProblem::new(bundle.y.clone(), bundle.design.clone()).unwrap();
    let r = fit_mnrsa(&p, &config(&p, 2)).unwrap();
    let (err, deg) = rmse_corr(r.corr.as_ref(), &bundle.corr_true).unwrap();
    assert!(!deg && err < 0.1, "{err}");
}

#[test]
fn short_design_is_an_input_error() {
    let y = DMatrix::from_fn(3, 4, |i, j| (i * j) as f64);
    let x = DMatrix::from_fn(3, 3, |i, j| (i + j) as f64);
    assert!(matches!(RsaProblem::new(y, x), Err(mnkit::Error::Input(_))));
}
