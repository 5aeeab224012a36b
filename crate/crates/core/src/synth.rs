//! Seeded synthetic data for RSA and SRM experiments, and recovery metrics.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::mnrsa::u_to_correlation;

/// Smoothness of design regressors and nuisance/shared timecourses.
const EVENT_KERNEL_WIDTH: f64 = 1.5;
const EVENT_RATE: f64 = 0.1;
const TIMECOURSE_RHO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsaSynthConfig {
    pub t: usize,
    pub v: usize,
    pub c: usize,
    /// Frobenius amplitude ratio of design signal to everything else.
    pub snr: f64,
    pub ar1_rho: f64,
    /// Spatial noise smoothness in voxel units; 0 gives independent voxels.
    pub gp_lengthscale: f64,
    pub n_nuisance: usize,
    /// Condition number of the true condition covariance.
    pub u_condition: f64,
    pub seed: u64,
}

impl Default for RsaSynthConfig {
    fn default() -> Self {
        Self {
            t: 300,
            v: 2500,
            c: 16,
            snr: 0.08,
            ar1_rho: 0.5,
            gp_lengthscale: 3.0,
            n_nuisance: 5,
            u_condition: 10.0,
            seed: 0,
        }
    }
}

impl RsaSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.v == 0 || self.c == 0 {
            return input("rsa synth: dimensions must be positive");
        }
        if self.t <= self.c {
            return input("rsa synth: need t > c");
        }
        if !(self.snr >= 0.0) || !self.snr.is_finite() {
            return input("rsa synth: snr must be finite and non-negative");
        }
        if !(self.ar1_rho.abs() < 1.0) {
            return input("rsa synth: ar1_rho must lie in (-1, 1)");
        }
        if !(self.gp_lengthscale >= 0.0) {
            return input("rsa synth: gp_lengthscale must be non-negative");
        }
        if !(1.0..=20.0).contains(&self.u_condition) {
            return input("rsa synth: u_condition must lie in [1, 20]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RsaBundle {
    /// `t × v`, columns centered.
    pub y: DMatrix<f64>,
    /// `t × c`.
    pub design: DMatrix<f64>,
    /// Row covariance of the scaled signal patterns (spatial scale excluded).
    pub u_true: DMatrix<f64>,
    pub corr_true: DMatrix<f64>,
    /// Per-voxel spatial standard deviations shared by signal and noise.
    pub voxel_scale: Vec<f64>,
    pub realized_snr: f64,
}

/// Generate an RSA dataset: `Y = a·X·W + noise + nuisance`, with
/// `W ~ MN(0, U, diag(s²))`, AR(1) temporal noise, spatially smooth noise
/// scaled by `s`, and `a` chosen so the realized SNR equals `cfg.snr`.
pub fn gen_rsa_synth(cfg: &RsaSynthConfig) -> Result<RsaBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t, v, c) = (cfg.t, cfg.v, cfg.c);
    let design = event_design(t, c, &mut rng);
    let u = random_spd(c, cfg.u_condition, &mut rng);
    let scale: Vec<f64> = (0..v).map(|_| rng.random_range(0.5..1.5)).collect();

    let u_sqrt = u.clone().cholesky().expect("random_spd is PD").l();
    let mut w = &u_sqrt * normal_matrix(c, v, &mut rng);
    scale_columns(&mut w, &scale);

    let mut noise = ar1_rows(t, v, cfg.ar1_rho, &mut rng);
    if cfg.gp_lengthscale > 0.0 {
        noise = smooth_along_rows(&noise, cfg.gp_lengthscale);
    }
    scale_columns(&mut noise, &scale);
    if cfg.n_nuisance > 0 {
        let tc = smooth_timecourses(t, cfg.n_nuisance, &mut rng);
        let mut maps = normal_matrix(cfg.n_nuisance, v, &mut rng);
        scale_columns(&mut maps, &scale);
        noise += tc * maps;
    }

    let signal = &design * &w;
    let sn = signal.norm();
    let a = if sn > 0.0 { cfg.snr * noise.norm() / sn } else { 0.0 };
    let mut y = signal * a + &noise;
    center_columns(&mut y);
    let u_true = u * (a * a);
    let corr_true = u_to_correlation(&u_true)?
        .unwrap_or_else(|| DMatrix::identity(c, c));
    let realized_snr = if sn > 0.0 { a * sn / noise.norm() } else { 0.0 };
    Ok(RsaBundle {
        y,
        design,
        u_true,
        corr_true,
        voxel_scale: scale,
        realized_snr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrmSynthConfig {
    pub n: usize,
    pub v: usize,
    pub t: usize,
    pub k: usize,
    /// Frobenius amplitude ratio of shared signal to noise, averaged over
    /// subjects.
    pub snr: f64,
    pub orthonormal_w: bool,
    /// Temporal correlation of the noise.
    pub ar1_rho: f64,
    pub seed: u64,
}

impl Default for SrmSynthConfig {
    fn default() -> Self {
        Self {
            n: 5,
            v: 50,
            t: 200,
            k: 3,
            snr: 2.0,
            orthonormal_w: false,
            ar1_rho: 0.0,
            seed: 0,
        }
    }
}

impl SrmSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return input("srm synth: need at least two subjects");
        }
        if self.k == 0 || self.k >= self.v.min(self.t) {
            return input("srm synth: need 1 <= k < min(v, t)");
        }
        if !(self.snr >= 0.0) || !self.snr.is_finite() {
            return input("srm synth: snr must be finite and non-negative");
        }
        if !(self.ar1_rho.abs() < 1.0) {
            return input("srm synth: ar1_rho must lie in (-1, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SrmBundle {
    /// Per-subject `v × t` data.
    pub subjects: Vec<DMatrix<f64>>,
    /// Per-subject `v × k` loadings (unscaled).
    pub w_true: Vec<DMatrix<f64>>,
    /// `k × t`, already scaled to the target SNR.
    pub s_true: DMatrix<f64>,
    pub b_true: Vec<Vec<f64>>,
    pub realized_snr: f64,
}

/// Generate `X_j = W_j S + b_j 1ᵀ + E_j` with unit-variance AR(1) noise.
pub fn gen_srm_synth(cfg: &SrmSynthConfig) -> Result<SrmBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (v, t, k) = (cfg.v, cfg.t, cfg.k);
    let s_raw = smooth_timecourses(t, k, &mut rng).transpose();
    let w_true: Vec<DMatrix<f64>> = (0..cfg.n)
        .map(|_| {
            let g = normal_matrix(v, k, &mut rng);
            if cfg.orthonormal_w {
                g.qr().q()
            } else {
                g / (k as f64).sqrt()
            }
        })
        .collect();
    let power: f64 =
        w_true.iter().map(|w| (w * &s_raw).norm_squared()).sum::<f64>() / cfg.n as f64;
    let gain = cfg.snr * ((v * t) as f64 / power).sqrt();
    let s_true = s_raw * gain;

    let mut subjects = Vec::with_capacity(cfg.n);
    let mut b_true = Vec::with_capacity(cfg.n);
    let (mut sig2, mut noise2) = (0.0, 0.0);
    for w in &w_true {
        let b: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let noise = ar1_rows(t, v, cfg.ar1_rho, &mut rng).transpose();
        let signal = w * &s_true;
        sig2 += signal.norm_squared();
        noise2 += noise.norm_squared();
        let mut x = signal + noise;
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row.add_scalar_mut(b[i]);
        }
        subjects.push(x);
        b_true.push(b);
    }
    Ok(SrmBundle {
        subjects,
        w_true,
        s_true,
        b_true,
        realized_snr: (sig2 / noise2).sqrt(),
    })
}

/// RMS of the strict-upper-triangle differences. A `None` estimate is scored
/// as the zero matrix and flagged as degenerate in the second return value.
pub fn rmse_corr(est: Option<&DMatrix<f64>>, truth: &DMatrix<f64>) -> Result<(f64, bool)> {
    let c = truth.nrows();
    if !truth.is_square() {
        return input("rmse_corr: truth is not square");
    }
    if let Some(e) = est {
        if e.shape() != truth.shape() {
            return input("rmse_corr: shape mismatch");
        }
    }
    if c < 2 {
        return Ok((0.0, est.is_none()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for j in 1..c {
        for i in 0..j {
            let e = est.map_or(0.0, |e| e[(i, j)]);
            acc += (e - truth[(i, j)]).powi(2);
            count += 1;
        }
    }
    Ok(((acc / count as f64).sqrt(), est.is_none()))
}

/// Principal angles (degrees, ascending) between the row spaces of `a` and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.ncols() != b.ncols() {
        return input("principal_angles: row lengths differ");
    }
    let qa = row_basis(a)?;
    let qb = row_basis(b)?;
    let sv = (qa.transpose() * qb).svd(false, false).singular_values;
    let mut angles: Vec<f64> = sv
        .iter()
        .map(|s| s.clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(angles)
}

fn row_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    if k == 0 || k > a.ncols() {
        return input("principal_angles: need 1 <= rows <= columns");
    }
    let sv = a.clone().svd(false, false).singular_values;
    if !(sv.min() > 1e-10 * sv.max()) {
        return input("principal_angles: matrix is not full row rank");
    }
    Ok(a.transpose().qr().q())
}

fn normal_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// `t × c` regressors: sparse random events smoothed by a Gaussian kernel.
fn event_design(t: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut events = DMatrix::zeros(t, c);
    for j in 0..c {
        for i in 0..t {
            if rng.random::<f64>() < EVENT_RATE {
                events[(i, j)] = 1.0;
            }
        }
        let forced = rng.random_range(0..t);
        events[(forced, j)] = 1.0;
    }
    smooth_down_columns(&events, EVENT_KERNEL_WIDTH)
}

/// Random SPD matrix with log-uniform eigenvalues spanning `[1, cond]`.
fn random_spd(c: usize, cond: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = normal_matrix(c, c, rng).qr().q();
    let lc = cond.ln();
    let eig: Vec<f64> = (0..c)
        .map(|i| match (i, c) {
            (_, 1) => 1.0,
            (0, _) => 1.0,
            (1, _) => cond,
            _ => (rng.random::<f64>() * lc).exp(),
        })
        .collect();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Columns are independent stationary unit-variance AR(1) series of length `t`.
fn ar1_rows(t: usize, cols: usize, rho: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut m = normal_matrix(t, cols, rng);
    for j in 0..cols {
        for i in 1..t {
            m[(i, j)] = rho * m[(i - 1, j)] + innov * m[(i, j)];
        }
    }
    m
}

/// `t × m` smooth timecourses with unit sample variance.
fn smooth_timecourses(t: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut tc = ar1_rows(t, m, TIMECOURSE_RHO, rng);
    center_columns(&mut tc);
    for mut col in tc.column_iter_mut() {
        let sd = (col.norm_squared() / t as f64).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    tc
}

/// Convolve each row with a Gaussian kernel of width `ell / √2` across its
/// columns, so white input acquires covariance `exp(-d² / (2ell²))` (unit
/// variance away from the edges).
fn smooth_along_rows(m: &DMatrix<f64>, ell: f64) -> DMatrix<f64> {
    let half = (4.0 * ell).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (ell * ell)).exp())
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    let n = m.ncols() as isize;
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        let mut acc = 0.0;
        for (o, k) in (-half..=half).zip(&kernel) {
            let j = c as isize + o;
            if (0..n).contains(&j) {
                acc += k * m[(r, j as usize)];
            }
        }
        acc / norm
    })
}

fn smooth_down_columns(m: &DMatrix<f64>, ell: f64) -> DMatrix<f64> {
    smooth_along_rows(&m.transpose(), ell).transpose()
}

fn scale_columns(m: &mut DMatrix<f64>, s: &[f64]) {
    for (mut col, &sj) in m.column_iter_mut().zip(s) {
        col *= sj;
    }
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let truth = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let (r, deg) = rmse_corr(Some(&DMatrix::identity(2, 2)), &truth).unwrap();
        assert!((r - 0.6).abs() < 1e-15 && !deg);
        assert_eq!(rmse_corr(Some(&truth), &truth).unwrap().0, 0.0);
        let (r, deg) = rmse_corr(None, &truth).unwrap();
        assert!((r - 0.6).abs() < 1e-15 && deg);
    }

    #[test]
    fn principal_angle_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!((principal_angles(&a, &b).unwrap()[0] - 90.0).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = normal_matrix(3, 12, &mut rng);
        let r = normal_matrix(3, 3, &mut rng);
        for ang in principal_angles(&a, &(&r * &a)).unwrap() {
            assert!(ang < 1e-6);
        }
        assert!(principal_angles(&DMatrix::zeros(2, 5), &a.rows(0, 2).into_owned()).is_err());
    }

    #[test]
    fn rsa_generator_properties() {
        let cfg = RsaSynthConfig {
            t: 100,
            v: 1000,
            c: 4,
            snr: 0.5,
            seed: 9,
            ..Default::default()
        };
        let a = gen_rsa_synth(&cfg).unwrap();
        let b = gen_rsa_synth(&cfg).unwrap();
        assert_eq!(a.y, b.y);
        assert!((a.realized_snr - 0.5).abs() < 1e-12);
        for col in a.y.column_iter() {
            assert!(col.mean().abs() < 1e-10);
        }
        let ev = a.u_true.clone().symmetric_eigen().eigenvalues;
        assert!(ev.max() / ev.min() <= 10.0 + 1e-8);
        let zero = gen_rsa_synth(&RsaSynthConfig { snr: 0.0, ..cfg }).unwrap();
        assert_eq!(zero.realized_snr, 0.0);
        assert!(zero.u_true.amax() == 0.0);
    }

    #[test]
    fn srm_generator_properties() {
        let cfg = SrmSynthConfig {
            orthonormal_w: true,
            seed: 4,
            ..Default::default()
        };
        let b = gen_srm_synth(&cfg).unwrap();
        for w in &b.w_true {
            let g = w.transpose() * w;
            assert!((g - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        }
        assert!((b.realized_snr - 2.0).abs() < 0.2);
        assert_eq!(gen_srm_synth(&cfg).unwrap().subjects, b.subjects);
    }
}
