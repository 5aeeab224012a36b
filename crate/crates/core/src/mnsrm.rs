//! Shared response model with marginalized subject loadings (MN-SRM and its
//! identity-covariance special case DP-SRM), fit by ECM.
//!
//! Subjects `X_j` (`v × t`) are row-stacked into `X` (`nv × t`) with
//!
//! ```text
//! X = W S + b 1ᵀ + E,   W ~ MN(0, Ω, I_k),   E ~ MN(0, Ω, Σ_t),
//! Ω = diag(τ_1⁻², …, τ_n⁻²) ⊗ Σ_v,   τ_1 = 1,
//! ```
//!
//! so that `X | S ~ MN(b 1ᵀ, Ω, Σ_t + SᵀS)`. The E-step computes the
//! Gaussian posterior of `W`; the CM sweep updates `S → b → Σ_t → Σ_v → τ`,
//! each maximizing the expected complete-data log-likelihood with the rest
//! held fixed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covmodels::{make_cov, CovModel, CovSpec, Covariance, FullRank, LowRankPlus};
use crate::error::{input, Error, Result};
use crate::linalg::{cholesky, frob_dot, row_dots, symmetrize};
use crate::matnorm::{mn_logpdf, MatnormDist};
use crate::optim::{maximize, FnObjective, OptimSettings};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-subject `v × t` matrices sharing dimensions.
#[derive(Debug, Clone)]
pub struct SrmDataset {
    subjects: Vec<DMatrix<f64>>,
}

impl SrmDataset {
    pub fn new(subjects: Vec<DMatrix<f64>>) -> Result<Self> {
        if subjects.len() < 2 {
            return input("srm: need at least two subjects");
        }
        let shape = subjects[0].shape();
        if shape.0 == 0 || shape.1 < 2 {
            return input("srm: subjects need at least one voxel and two timepoints");
        }
        for (j, s) in subjects.iter().enumerate() {
            if s.shape() != shape {
                return input(format!(
                    "srm: subject {j} is {:?}, subject 0 is {shape:?}",
                    s.shape()
                ));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return input(format!("srm: subject {j} has non-finite values"));
            }
            for (i, row) in s.row_iter().enumerate() {
                let first = row[0];
                if row.iter().all(|&x| x == first) {
                    return input(format!("srm: subject {j} voxel {i} is constant"));
                }
            }
        }
        Ok(Self { subjects })
    }

    pub fn subjects(&self) -> &[DMatrix<f64>] {
        &self.subjects
    }
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }
    pub fn voxels(&self) -> usize {
        self.subjects[0].nrows()
    }
    pub fn timepoints(&self) -> usize {
        self.subjects[0].ncols()
    }

    /// Row-stacked `nv × t` data.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (v, t) = (self.voxels(), self.timepoints());
        let mut x = DMatrix::zeros(self.n_subjects() * v, t);
        for (j, s) in self.subjects.iter().enumerate() {
            x.rows_mut(j * v, v).copy_from(s);
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrmVariant {
    Dp,
    Mn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrmConfig {
    pub k: usize,
    pub variant: SrmVariant,
    pub spatial: CovSpec,
    pub temporal: CovSpec,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Recorded for provenance; the SVD warm start is deterministic.
    pub seed: u64,
    /// Place an `MN(0, I, Σ_t)` prior on `S`, so the sweep maximizes the
    /// marginal likelihood plus the log prior instead.
    #[serde(default)]
    pub s_prior: bool,
}

impl SrmConfig {
    /// Identity spatial and temporal noise.
    pub fn dp(k: usize, v: usize, t: usize) -> Self {
        Self {
            k,
            variant: SrmVariant::Dp,
            spatial: CovSpec::Identity { dim: v },
            temporal: CovSpec::Identity { dim: t },
            max_iters: 200,
            rel_tol: 1e-6,
            seed: 0,
            s_prior: false,
        }
    }

    /// Diagonal spatial and AR(1) temporal noise.
    pub fn mn(k: usize, v: usize, t: usize) -> Self {
        Self {
            variant: SrmVariant::Mn,
            spatial: CovSpec::Diagonal { dim: v },
            temporal: CovSpec::Ar1 { dim: t },
            ..Self::dp(k, v, t)
        }
    }

    pub fn for_variant(variant: SrmVariant, k: usize, v: usize, t: usize) -> Self {
        match variant {
            SrmVariant::Dp => Self::dp(k, v, t),
            SrmVariant::Mn => Self::mn(k, v, t),
        }
    }

    fn validate(&self, data: &SrmDataset) -> Result<()> {
        let (v, t) = (data.voxels(), data.timepoints());
        if self.k == 0 || self.k >= v.min(t) {
            return input(format!("srm: need 1 <= k < min(v, t) = {}", v.min(t)));
        }
        if self.max_iters == 0 || !(self.rel_tol > 0.0) {
            return input("srm: max_iters and rel_tol must be positive");
        }
        if self.variant == SrmVariant::Dp
            && (self.spatial.kind() != "identity" || self.temporal.kind() != "identity")
        {
            return input("srm: the dp variant uses identity spatial and temporal covariances");
        }
        for (spec, want, what) in [(&self.spatial, v, "spatial"), (&self.temporal, t, "temporal")] {
            let m = make_cov(spec)?;
            if m.dim() != want {
                return input(format!("srm: {what} covariance dim {} != {want}", m.dim()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SrmModel {
    /// Shared timecourse, `k × t`.
    pub s: DMatrix<f64>,
    /// Stacked per-subject intercepts, length `nv`.
    pub b: DVector<f64>,
    /// Subject precisions `τ_j²`; the first is 1.
    pub tau2: Vec<f64>,
    pub sigma_v: CovModel,
    pub sigma_t: CovModel,
    /// Posterior mean of the stacked loadings, `nv × k`.
    pub w_post_mean: DMatrix<f64>,
    /// Posterior column covariance `Σ_w′`, `k × k`.
    pub w_post_colcov: DMatrix<f64>,
    pub s_prior: bool,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl SrmModel {
    pub fn k(&self) -> usize {
        self.s.nrows()
    }
    pub fn voxels(&self) -> usize {
        self.sigma_v.dim()
    }
    pub fn timepoints(&self) -> usize {
        self.s.ncols()
    }
    pub fn n_subjects(&self) -> usize {
        self.tau2.len()
    }

    /// Intercept of subject `j`.
    pub fn intercept(&self, j: usize) -> DVector<f64> {
        let v = self.voxels();
        self.b.rows(j * v, v).into_owned()
    }

    /// Posterior-mean loadings of subject `j`, `v × k`.
    pub fn loadings(&self, j: usize) -> DMatrix<f64> {
        let v = self.voxels();
        self.w_post_mean.rows(j * v, v).into_owned()
    }

    /// Count of estimated parameters: `S`, `b`, free `τ`, and the noise
    /// covariances. Loadings are integrated out and do not count.
    pub fn n_free_params(&self) -> usize {
        self.s.len()
            + self.b.len()
            + (self.tau2.len() - 1)
            + self.sigma_v.n_params()
            + self.sigma_t.n_params()
    }

    fn check(&self, data: &SrmDataset) -> Result<()> {
        if self.voxels() != data.voxels()
            || self.timepoints() != data.timepoints()
            || self.n_subjects() != data.n_subjects()
            || self.b.len() != data.n_subjects() * data.voxels()
            || self.sigma_t.dim() != data.timepoints()
        {
            return input("srm: model dimensions do not match the data");
        }
        if (self.tau2[0] - 1.0).abs() > 0.0 || self.tau2.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Contract("srm: need tau2 > 0 with tau2[0] = 1".into()));
        }
        Ok(())
    }

    /// Row covariance `Ω` of the stacked data.
    pub fn row_cov(&self) -> Result<CovModel> {
        crate::covmodels::BlockScaled::new(self.sigma_v.clone(), &self.tau2)
            .map(|b| CovModel::BlockScaled(Box::new(b)))
    }

    /// Column covariance `Σ_t + SᵀS` of the stacked data.
    pub fn col_cov(&self) -> Result<CovModel> {
        let k = self.k();
        let inner = make_cov(&CovSpec::Identity { dim: k })?;
        let lr = LowRankPlus::new(
            self.sigma_t.clone(),
            self.s.transpose(),
            inner,
            DMatrix::zeros(self.timepoints(), 0),
        )?;
        Ok(CovModel::LowRankPlus(Box::new(lr)))
    }

    fn omega_solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let v = self.voxels();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (j, &tau2) in self.tau2.iter().enumerate() {
            let blk = self.sigma_v.solve(&x.rows(j * v, v).into_owned())? * tau2;
            out.rows_mut(j * v, v).copy_from(&blk);
        }
        Ok(out)
    }

    fn residual(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = x.clone();
        for (mut row, &bi) in r.row_iter_mut().zip(self.b.iter()) {
            row.add_scalar_mut(-bi);
        }
        r
    }
}

/// Posterior moments of `W` and the prior row covariance they were
/// computed under.
#[derive(Debug, Clone)]
pub struct SrmStats {
    /// `W′`, `nv × k`.
    pub w_mean: DMatrix<f64>,
    /// `Σ_w′`, `k × k`.
    pub w_colcov: DMatrix<f64>,
    prior_tau2: Vec<f64>,
    prior_sigma_v: CovModel,
}

/// Posterior of the stacked loadings: `W | X ~ MN(W′, Ω, Σ_w′)`.
pub fn srm_e_step(data: &SrmDataset, model: &SrmModel) -> Result<SrmStats> {
    model.check(data)?;
    let x = data.stacked();
    let (w_mean, w_colcov) = posterior_w(&model.residual(&x), &model.s, &model.sigma_t)?;
    Ok(SrmStats {
        w_mean,
        w_colcov,
        prior_tau2: model.tau2.clone(),
        prior_sigma_v: model.sigma_v.clone(),
    })
}

/// `Σ_w′ = (I + SΣ_t⁻¹Sᵀ)⁻¹` and `W′ = R Σ_t⁻¹ Sᵀ Σ_w′` for centered `R`.
fn posterior_w(
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
    sigma_t: &CovModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = s.nrows();
    let st_inv_s = sigma_t.solve(&s.transpose())?;
    let prec = DMatrix::identity(k, k) + s * &st_inv_s;
    let colcov = symmetrize(&cholesky(&symmetrize(&prec), "srm posterior precision")?.inverse());
    Ok((r * st_inv_s * &colcov, colcov))
}

fn trace_solve(a: &CovModel, b: &CovModel) -> Result<f64> {
    if a.is_diagonal_family() && b.is_diagonal_family() {
        let (da, db) = (cov_diagonal(a), cov_diagonal(b));
        return Ok(db.iter().zip(&da).map(|(x, y)| x / y).sum());
    }
    Ok(a.solve(&b.dense())?.trace())
}

fn cov_diagonal(m: &CovModel) -> Vec<f64> {
    match m {
        CovModel::Identity(_) => vec![1.0; m.dim()],
        CovModel::Isotropic(i) => vec![i.variance(); m.dim()],
        CovModel::Diagonal(d) => d.variances(),
        _ => m.dense().diagonal().as_slice().to_vec(),
    }
}

/// `Tr[Ω⁻¹ Ω′]` between the current and the E-step row covariances.
fn coupling(model: &SrmModel, stats: &SrmStats) -> Result<f64> {
    let base = trace_solve(&model.sigma_v, &stats.prior_sigma_v)?;
    Ok(model
        .tau2
        .iter()
        .zip(&stats.prior_tau2)
        .map(|(t, tp)| t / tp)
        .sum::<f64>()
        * base)
}

/// Scatter for a covariance update: either the full matrix or only its
/// diagonal (stored as a column vector).
enum Scatter {
    Full(DMatrix<f64>),
    Diag(Vec<f64>),
}

/// Maximize `-½[N log|Σ| + Tr[Σ⁻¹ A]]` over the family of `current`.
fn update_cov(current: &CovModel, scatter: Scatter, n: f64) -> Result<CovModel> {
    let diag = |s: &Scatter| match s {
        Scatter::Full(a) => a.diagonal().as_slice().to_vec(),
        Scatter::Diag(d) => d.clone(),
    };
    match current {
        CovModel::Identity(_) => Ok(current.clone()),
        CovModel::Isotropic(_) => {
            let tr: f64 = diag(&scatter).iter().sum();
            current.with_params(&[(tr / (n * current.dim() as f64)).ln()])
        }
        CovModel::Diagonal(_) => {
            let p: Vec<f64> = diag(&scatter).iter().map(|a| (a / n).ln()).collect();
            current.with_params(&p)
        }
        _ => {
            let Scatter::Full(a) = scatter else {
                unreachable!("full scatter is formed for structured families")
            };
            if let CovModel::FullRank(_) = current {
                return current.with_params(FullRank::params_for(&(&a / n))?.as_slice());
            }
            let obj = FnObjective::new(current.n_params(), |theta: &DVector<f64>| {
                let m = current.with_params(theta.as_slice())?;
                let dim = m.dim();
                let sinv = m.solve(&DMatrix::identity(dim, dim))?;
                let sinv_a = &sinv * &a;
                let value = -0.5 * (n * m.logdet()? + sinv_a.trace());
                let g = (&sinv_a * &sinv - &sinv * n) * 0.5;
                Ok((value, m.trace_grad(&symmetrize(&g))))
            });
            let settings = OptimSettings {
                max_iters: 200,
                grad_tol: 1e-8,
                rel_tol: 1e-14,
                memory: 10,
            };
            let res = maximize(&obj, &current.params(), &settings)?;
            current.with_params(&res.params)
        }
    }
}

/// One conditional-maximization sweep `S → b → Σ_t → Σ_v → τ`.
pub fn srm_cm_step(data: &SrmDataset, model: &SrmModel, stats: &SrmStats) -> Result<SrmModel> {
    model.check(data)?;
    let x = data.stacked();
    let (n, v, t) = (data.n_subjects(), data.voxels(), data.timepoints());
    let k = model.k();
    if stats.w_mean.shape() != (n * v, k) || stats.w_colcov.shape() != (k, k) {
        return input("srm: statistics do not match the model");
    }
    let wm = &stats.w_mean;
    let sw = &stats.w_colcov;
    let mut m = model.clone();

    // S
    let tc = coupling(&m, stats)?;
    let om_w = m.omega_solve(wm)?;
    let mut lhs = wm.transpose() * &om_w + sw * tc;
    if m.s_prior {
        lhs += DMatrix::<f64>::identity(k, k);
    }
    let rhs = om_w.transpose() * m.residual(&x);
    m.s = cholesky(&symmetrize(&lhs), "srm S update")?.solve(&rhs);

    // b
    let z = &x - wm * &m.s;
    let u = m.sigma_t.solve(&DMatrix::from_element(t, 1, 1.0))?;
    let denom = u.sum();
    m.b = (&z * &u).column(0) / denom;

    // Σ_t
    let e = m.residual(&x) - wm * &m.s;
    let om_e = m.omega_solve(&e)?;
    let mut a_t = e.transpose() * &om_e + m.s.transpose() * sw * &m.s * tc;
    let mut n_t = (n * v) as f64;
    if m.s_prior {
        a_t += m.s.transpose() * &m.s;
        n_t += k as f64;
    }
    m.sigma_t = update_cov(&m.sigma_t, Scatter::Full(symmetrize(&a_t)), n_t)?;

    // Σ_v
    let p = m.sigma_t.solve(&e.transpose())?; // t × nv
    let st_inv_s = m.sigma_t.solve(&m.s.transpose())?;
    let c_w = (sw * (DMatrix::identity(k, k) + &m.s * st_inv_s)).trace();
    let diag_only = m.sigma_v.is_diagonal_family();
    let prev_v = &stats.prior_sigma_v;
    let block = |j: usize| {
        let ej = e.rows(j * v, v).into_owned();
        let pj = p.columns(j * v, v).transpose();
        let wj = wm.rows(j * v, v).into_owned();
        (ej, pj, wj)
    };
    let ratio: f64 = m.tau2.iter().zip(&stats.prior_tau2).map(|(a, b)| a / b).sum();
    let scatter = if diag_only {
        let mut d = cov_diagonal(prev_v)
            .into_iter()
            .map(|x| x * c_w * ratio)
            .collect::<Vec<_>>();
        for j in 0..n {
            let (ej, pj, wj) = block(j);
            let quad = row_dots(&ej, &pj);
            let ww = row_dots(&wj, &wj);
            for i in 0..v {
                d[i] += m.tau2[j] * (quad[i] + ww[i]);
            }
        }
        Scatter::Diag(d)
    } else {
        let mut a = prev_v.dense() * (c_w * ratio);
        for j in 0..n {
            let (ej, pj, wj) = block(j);
            a += (&ej * pj.transpose() + &wj * wj.transpose()) * m.tau2[j];
        }
        Scatter::Full(symmetrize(&a))
    };
    m.sigma_v = update_cov(&m.sigma_v, scatter, (n * (k + t)) as f64)?;

    // τ
    let tr_prev = trace_solve(&m.sigma_v, prev_v)?;
    for j in 1..n {
        let (ej, pj, wj) = block(j);
        let q = frob_dot(&m.sigma_v.solve(&ej)?, &pj)
            + frob_dot(&m.sigma_v.solve(&wj)?, &wj)
            + c_w * tr_prev / stats.prior_tau2[j];
        m.tau2[j] = (v * (t + k)) as f64 / q;
    }
    Ok(m)
}

/// Expected complete-data log-likelihood of `model` under the posterior in
/// `stats` (plus the log prior of `S` when enabled).
pub fn srm_q_function(data: &SrmDataset, model: &SrmModel, stats: &SrmStats) -> Result<f64> {
    model.check(data)?;
    let x = data.stacked();
    let (n, v, t) = (data.n_subjects(), data.voxels(), data.timepoints());
    let k = model.k();
    let nv = (n * v) as f64;
    let wm = &stats.w_mean;
    let sw = &stats.w_colcov;
    let tc = coupling(model, stats)?;
    let row_ld = v as f64 * model.tau2.iter().map(|t| -t.ln()).sum::<f64>()
        + n as f64 * model.sigma_v.logdet()?;
    let t_ld = model.sigma_t.logdet()?;
    let e = model.residual(&x) - wm * &model.s;
    let st_inv_et = model.sigma_t.solve(&e.transpose())?;
    let st_inv_st = model.sigma_t.solve(&model.s.transpose())?;
    let quad = frob_dot(&model.omega_solve(&e)?, &st_inv_et.transpose())
        + tc * (sw * &model.s * st_inv_st).trace()
        + frob_dot(&model.omega_solve(wm)?, wm)
        + tc * sw.trace();
    let mut q = -0.5 * nv * (t + k) as f64 * LN_2PI
        - 0.5 * (t + k) as f64 * row_ld
        - 0.5 * nv * t_ld
        - 0.5 * quad;
    if model.s_prior {
        q += s_log_prior(model)?;
    }
    Ok(q)
}

fn s_log_prior(model: &SrmModel) -> Result<f64> {
    let (k, t) = model.s.shape();
    let q = frob_dot(&model.s, &model.sigma_t.solve(&model.s.transpose())?.transpose());
    Ok(-0.5 * (k * t) as f64 * LN_2PI - 0.5 * k as f64 * model.sigma_t.logdet()? - 0.5 * q)
}

/// `log MN(X; b1ᵀ, Ω, Σ_t + SᵀS)`.
pub fn srm_marginal_loglik(data: &SrmDataset, model: &SrmModel) -> Result<f64> {
    model.check(data)?;
    let x = data.stacked();
    let mean = &x - model.residual(&x);
    let dist = MatnormDist::new(mean, model.row_cov()?, model.col_cov()?)?;
    mn_logpdf(&x, &dist)
}

/// The quantity each ECM iteration increases: the marginal log-likelihood,
/// plus the log prior of `S` when enabled.
pub fn srm_objective(data: &SrmDataset, model: &SrmModel) -> Result<f64> {
    let ll = srm_marginal_loglik(data, model)?;
    Ok(if model.s_prior {
        ll + s_log_prior(model)?
    } else {
        ll
    })
}

/// Warm start: SVD of the subject-centered stacked data, per-voxel means,
/// unit precisions and default noise covariances.
pub fn srm_initial_model(data: &SrmDataset, cfg: &SrmConfig) -> Result<SrmModel> {
    cfg.validate(data)?;
    let (n, v, t, k) = (data.n_subjects(), data.voxels(), data.timepoints(), cfg.k);
    let x = data.stacked();
    let b = DVector::from_iterator(n * v, x.row_iter().map(|r| r.mean()));
    let mut xc = x;
    for (mut row, &bi) in xc.row_iter_mut().zip(b.iter()) {
        row.add_scalar_mut(-bi);
    }
    let eig = (xc.transpose() * &xc).symmetric_eigen();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let scale = ((n * v) as f64).sqrt();
    let mut s = DMatrix::zeros(k, t);
    for (r, &i) in order.iter().take(k).enumerate() {
        let sv = eig.eigenvalues[i].max(0.0).sqrt() / scale;
        s.row_mut(r).copy_from(&(eig.eigenvectors.column(i).transpose() * sv));
    }
    Ok(SrmModel {
        s,
        b,
        tau2: vec![1.0; n],
        sigma_v: make_cov(&cfg.spatial)?,
        sigma_t: make_cov(&cfg.temporal)?,
        w_post_mean: DMatrix::zeros(n * v, k),
        w_post_colcov: DMatrix::identity(k, k),
        s_prior: cfg.s_prior,
        loglik_trace: Vec::new(),
        iterations: 0,
        converged: false,
    })
}

/// Fit by ECM from the SVD warm start.
pub fn fit_srm_ecm(data: &SrmDataset, cfg: &SrmConfig) -> Result<SrmModel> {
    let init = srm_initial_model(data, cfg)?;
    fit_srm_ecm_from(data, cfg, init)
}

/// Fit by ECM from a caller-provided starting point.
pub fn fit_srm_ecm_from(data: &SrmDataset, cfg: &SrmConfig, init: SrmModel) -> Result<SrmModel> {
    cfg.validate(data)?;
    init.check(data)?;
    let mut model = init;
    model.s_prior = cfg.s_prior;
    let mut prev = srm_objective(data, &model)?;
    if !prev.is_finite() {
        return Err(Error::Fit("srm: log-likelihood not finite at initialization".into()));
    }
    let mut trace = vec![prev];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let stats = srm_e_step(data, &model)?;
        model = srm_cm_step(data, &model, &stats).map_err(|e| match e {
            Error::Conditioning(msg) => Error::Conditioning(format!("{msg} (iteration {it})")),
            other => other,
        })?;
        let ll = srm_objective(data, &model)?;
        if !ll.is_finite() {
            return Err(Error::Fit(format!(
                "srm: log-likelihood not finite at iteration {it}"
            )));
        }
        trace.push(ll);
        let rel = (ll - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = ll;
        if rel < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    let stats = srm_e_step(data, &model)?;
    model.w_post_mean = stats.w_mean;
    model.w_post_colcov = stats.w_colcov;
    model.loglik_trace = trace;
    model.iterations = iterations;
    model.converged = converged;
    Ok(model)
}

/// Loadings for a subject not seen in training, with its intercept taken
/// as its own per-voxel means.
pub fn transform_new_subject(model: &SrmModel, y_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = row_means(y_new);
    transform_with_intercept(model, y_new, &b)
}

/// Posterior-mean loadings of `y` given an explicit intercept `b`.
pub fn transform_with_intercept(
    model: &SrmModel,
    y: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if y.ncols() != model.timepoints() || b.len() != y.nrows() {
        return input(format!(
            "srm transform: got {}×{} data with {} intercepts, model has t = {}",
            y.nrows(),
            y.ncols(),
            b.len(),
            model.timepoints()
        ));
    }
    let mut r = y.clone();
    for (mut row, &bi) in r.row_iter_mut().zip(b.iter()) {
        row.add_scalar_mut(-bi);
    }
    Ok(posterior_w(&r, &model.s, &model.sigma_t)?.0)
}

pub fn row_means(y: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(y.nrows(), y.row_iter().map(|r| r.mean()))
}

/// `Ŷ = W Ŝ + b 1ᵀ`.
pub fn reconstruct(model: &SrmModel, w: &DMatrix<f64>, b: &DVector<f64>) -> Result<DMatrix<f64>> {
    if w.ncols() != model.k() || w.nrows() != b.len() {
        return input("srm reconstruct: loadings and intercept dimensions disagree");
    }
    let mut y = w * &model.s;
    for (mut row, &bi) in y.row_iter_mut().zip(b.iter()) {
        row.add_scalar_mut(bi);
    }
    Ok(y)
}

/// `‖Y − Ŷ‖ / ‖Y − rowmeans(Y)‖`; predicting the row means scores 1.
pub fn reconstruction_error(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return input("srm reconstruction error: shape mismatch");
    }
    let mut centered = y.clone();
    for mut row in centered.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    Ok((y - y_hat).norm() / centered.norm())
}
