use approx::assert_relative_eq;
use mnkit::covmodels::{make_cov, CovModel, CovSpec, Covariance, FullRank};
use mnkit::matnorm::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn model(spec: CovSpec, rng: &mut ChaCha8Rng) -> CovModel {
    let m = make_cov(&spec).unwrap();
    let p: Vec<f64> = (0..m.n_params()).map(|_| rng.random::<f64>() - 0.5).collect();
    m.with_params(&p).unwrap()
}

fn full_rank_from(dense: &DMatrix<f64>) -> CovModel {
    let p = FullRank::params_for(dense).unwrap();
    make_cov(&CovSpec::FullRank { dim: dense.nrows() })
        .unwrap()
        .with_params(p.as_slice())
        .unwrap()
}

fn gaussian_logpdf(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let ch = cov.clone().cholesky().unwrap();
    let ld = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * x.len() as f64 * LN_2PI - 0.5 * ld - 0.5 * x.dot(&ch.solve(x))
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

#[test]
fn transpose_preserves_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let d = MatnormDist::new(
            rand_matrix(5, 3, &mut rng),
            model(CovSpec::Ar1 { dim: 5 }, &mut rng),
            model(CovSpec::FullRank { dim: 3 }, &mut rng),
        )
        .unwrap();
        let x = rand_matrix(5, 3, &mut rng);
        let a = mn_logpdf(&x, &d).unwrap();
        let b = mn_logpdf(&x.transpose(), &d.transpose()).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }
}

#[test]
fn shared_scale_between_factors_is_unidentified() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = model(CovSpec::FullRank { dim: 4 }, &mut rng);
    let c = model(CovSpec::FullRank { dim: 3 }, &mut rng);
    let x = rand_matrix(4, 3, &mut rng);
    let base = mn_logpdf(&x, &MatnormDist::centered(r.clone(), c.clone())).unwrap();
    let scaled = MatnormDist::centered(full_rank_from(&(r.dense() * 3.0)), full_rank_from(&(c.dense() / 3.0)));
    assert_relative_eq!(base, mn_logpdf(&x, &scaled).unwrap(), epsilon = 1e-9);
}

#[test]
fn marginal_matches_dense_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, k, n) = (6, 2, 3);
    let prior = MatnormDist::new(
        rand_matrix(k, n, &mut rng),
        model(CovSpec::FullRank { dim: k }, &mut rng),
        model(CovSpec::Ar1 { dim: n }, &mut rng),
    )
    .unwrap();
    let xf = rand_matrix(m, k, &mut rng);
    let noise = model(CovSpec::Diagonal { dim: m }, &mut rng);
    let offset = rand_matrix(m, n, &mut rng);
    let marg = mn_marginalize_factor(&prior, &xf, &noise, prior.col_cov(), &offset).unwrap();
    let row = noise.dense() + &xf * prior.row_cov().dense() * xf.transpose();
    let cov = prior.col_cov().dense().kronecker(&row);
    let mean = &xf * prior.mean() + &offset;
    for _ in 0..5 {
        let z = rand_matrix(m, n, &mut rng) * 2.0;
        let dense = gaussian_logpdf(&vec_of(&(&z - &mean)), &cov);
        assert_relative_eq!(mn_logpdf(&z, &marg).unwrap(), dense, epsilon = 1e-9);
    }
}

#[test]
fn conditional_times_marginal_is_joint() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, nx, ny) = (4, 2, 3);
    let a = rand_matrix(nx + ny, nx + ny, &mut rng);
    let joint_col = &a * a.transpose() + DMatrix::identity(nx + ny, nx + ny);
    let row = model(CovSpec::Ar1 { dim: m }, &mut rng);
    let joint = PartitionedMn {
        mean_x: rand_matrix(m, nx, &mut rng),
        mean_y: rand_matrix(m, ny, &mut rng),
        row_cov: row.clone(),
        cov_x: full_rank_from(&joint_col.view((0, 0), (nx, nx)).into_owned()),
        cross: joint_col.view((0, nx), (nx, ny)).into_owned(),
        cov_y: full_rank_from(&joint_col.view((nx, nx), (ny, ny)).into_owned()),
    };
    let x = rand_matrix(m, nx, &mut rng);
    let y = rand_matrix(m, ny, &mut rng);
    let cond = mn_condition(&joint, &y).unwrap();

    let mut xy = DMatrix::zeros(m, nx + ny);
    xy.view_mut((0, 0), (m, nx)).copy_from(&(&x - &joint.mean_x));
    xy.view_mut((0, nx), (m, ny)).copy_from(&(&y - &joint.mean_y));
    let log_joint = gaussian_logpdf(&vec_of(&xy), &joint_col.kronecker(&row.dense()));
    let log_y = mn_logpdf(
        &y,
        &MatnormDist::new(joint.mean_y.clone(), row, joint.cov_y.clone()).unwrap(),
    )
    .unwrap();
    assert_relative_eq!(mn_logpdf(&x, &cond).unwrap() + log_y, log_joint, epsilon = 1e-9);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let row = model(CovSpec::Ar1 { dim: 5 }, &mut rng);
    let col = model(CovSpec::FullRank { dim: 3 }, &mut rng);
    let x = rand_matrix(5, 3, &mut rng) * 2.0;
    let d = MatnormDist::centered(row.clone(), col.clone());
    let g = mn_logpdf_grad(&x, &d).unwrap();
    assert_relative_eq!(g.value, mn_logpdf(&x, &d).unwrap(), epsilon = 1e-12);
    let h = 1e-6;
    let f = |r: &CovModel, c: &CovModel| mn_logpdf(&x, &MatnormDist::centered(r.clone(), c.clone())).unwrap();
    for (i, gi) in g.row.iter().enumerate() {
        let mut p = row.params();
        p[i] += h;
        let up = f(&row.with_params(p.as_slice()).unwrap(), &col);
        p[i] -= 2.0 * h;
        let down = f(&row.with_params(p.as_slice()).unwrap(), &col);
        assert_relative_eq!(*gi, (up - down) / (2.0 * h), epsilon = 1e-6, max_relative = 1e-6);
    }
    for (i, gi) in g.col.iter().enumerate() {
        let mut p = col.params();
        p[i] += h;
        let up = f(&row, &col.with_params(p.as_slice()).unwrap());
        p[i] -= 2.0 * h;
        let down = f(&row, &col.with_params(p.as_slice()).unwrap());
        assert_relative_eq!(*gi, (up - down) / (2.0 * h), epsilon = 1e-6, max_relative = 1e-6);
    }
}

#[test]
fn sample_moments_match_kronecker_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = MatnormDist::new(
        rand_matrix(3, 2, &mut rng),
        model(CovSpec::Ar1 { dim: 3 }, &mut rng),
        model(CovSpec::FullRank { dim: 2 }, &mut rng),
    )
    .unwrap();
    let draws = 40_000;
    let mut mean = DVector::zeros(6);
    let mut second = DMatrix::zeros(6, 6);
    for s in 0..draws {
        let e = vec_of(&(mn_sample(&d, s).unwrap() - d.mean()));
        mean += &e;
        second += &e * e.transpose();
    }
    mean /= draws as f64;
    second /= draws as f64;
    let cov = d.col_cov().dense().kronecker(&d.row_cov().dense());
    let scale = cov.diagonal().max().sqrt();
    assert!(mean.amax() < 5.0 * scale / (draws as f64).sqrt());
    assert!((second - &cov).amax() < 0.05 * cov.amax());
}
