//! MN-RSA: representational similarity by marginal likelihood.
//!
//! Responses `Y = X β + ε` with `β ~ MN(0, U, Σ_v)` and
//! `ε ~ MN(0, Σ_t + L Lᵀ, Σ_v)` marginalize to
//! `Y ~ MN(0, Σ_t + X U Xᵀ + L Lᵀ, Σ_v)`. All covariance parameters are
//! fitted jointly by maximizing that density. [`naive_rsa`] is the
//! least-squares baseline.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covmodels::{make_cov, CovModel, CovSpec, Covariance};
use crate::error::{input, Error, Result};
use crate::matnorm::{mn_logpdf_grad, MatnormDist};
use crate::optim::{maximize, Objective, OptimSettings};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal entries of `U` below this fraction of the mean sample variance
/// mark the fit as degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-10;

/// Centered data and design for one RSA fit.
#[derive(Debug, Clone)]
pub struct RsaProblem {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
}

impl RsaProblem {
    /// `y` is `t × v` (timepoints × voxels), `x` is `t × c`. Columns of both
    /// are centered here, which stands in for an intercept regressor.
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let (t, v) = y.shape();
        let c = x.ncols();
        if x.nrows() != t {
            return input(format!("rsa: design has {} rows, data has {t}", x.nrows()));
        }
        if c == 0 || v == 0 {
            return input("rsa: need at least one condition and one voxel");
        }
        if t <= c {
            return input(format!("rsa: need more timepoints ({t}) than conditions ({c})"));
        }
        if y.iter().chain(x.iter()).any(|a| !a.is_finite()) {
            return input("rsa: data or design contains non-finite values");
        }
        Ok(Self {
            y: center_columns(y),
            x: center_columns(x),
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn timepoints(&self) -> usize {
        self.y.nrows()
    }
    pub fn voxels(&self) -> usize {
        self.y.ncols()
    }
    pub fn conditions(&self) -> usize {
        self.x.ncols()
    }

    /// Per-voxel sample variances of the centered data.
    pub fn voxel_variances(&self) -> Vec<f64> {
        let t = self.timepoints() as f64;
        self.y
            .column_iter()
            .map(|c| c.norm_squared() / (t - 1.0).max(1.0))
            .collect()
    }

    pub fn mean_sample_variance(&self) -> f64 {
        let v = self.voxel_variances();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn center_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RsaConfig {
    /// Spatial covariance over voxels.
    pub spatial: CovSpec,
    /// Temporal noise covariance over timepoints.
    pub temporal_base: CovSpec,
    /// Columns of the learned low-rank temporal nuisance term.
    pub residual_rank: usize,
    pub optim: OptimSettings,
    /// Seed for the initial nuisance loadings.
    pub seed: u64,
}

impl RsaConfig {
    /// Diagonal spatial, AR(1) temporal, residual rank 15.
    pub fn default_for(p: &RsaProblem) -> Self {
        Self {
            spatial: CovSpec::Diagonal { dim: p.voxels() },
            temporal_base: CovSpec::Ar1 {
                dim: p.timepoints(),
            },
            residual_rank: 15,
            optim: OptimSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RsaResult {
    /// Condition covariance `U`, expressed with the spatial scale folded in
    /// (`U · mean diag Σ_v`) so it is in data units.
    pub u: DMatrix<f64>,
    /// Correlation derived from `U`; `None` when undefined.
    pub corr: Option<DMatrix<f64>>,
    pub spatial: CovModel,
    /// Full row covariance `Σ_t + X U Xᵀ + L Lᵀ` at the optimum.
    pub temporal: CovModel,
    /// `(iteration, log-likelihood)` including the full normalizer.
    pub loglik_trace: Vec<(usize, f64)>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_seconds: f64,
    pub degenerate: bool,
    /// `tr(U) / mean sample variance`.
    pub trace_ratio: f64,
}

/// Log-likelihood (constant dropped) over the joint unconstrained vector
/// `[row covariance params, spatial params]`.
pub struct RsaObjective<'a> {
    y: &'a DMatrix<f64>,
    row: CovModel,
    col: CovModel,
}

impl<'a> RsaObjective<'a> {
    pub fn new(problem: &'a RsaProblem, row: CovModel, col: CovModel) -> Self {
        Self {
            y: &problem.y,
            row,
            col,
        }
    }

    pub fn initial_params(&self) -> DVector<f64> {
        let mut v = self.row.params().as_slice().to_vec();
        v.extend_from_slice(self.col.params().as_slice());
        DVector::from_vec(v)
    }

    pub fn models_at(&self, theta: &DVector<f64>) -> Result<(CovModel, CovModel)> {
        let nr = self.row.n_params();
        Ok((
            self.row.with_params(&theta.as_slice()[..nr])?,
            self.col.with_params(&theta.as_slice()[nr..])?,
        ))
    }

    /// Constant dropped from the optimized objective.
    pub fn normalizer(&self) -> f64 {
        -0.5 * self.y.len() as f64 * LN_2PI
    }
}

impl Objective for RsaObjective<'_> {
    fn n_dims(&self) -> usize {
        self.row.n_params() + self.col.n_params()
    }
    fn evaluate(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (row, col) = self.models_at(theta)?;
        let dist = MatnormDist::centered(row, col);
        let g = mn_logpdf_grad(self.y, &dist)?;
        let mut grad = g.row.as_slice().to_vec();
        grad.extend_from_slice(g.col.as_slice());
        Ok((g.value - self.normalizer(), DVector::from_vec(grad)))
    }
}

fn build_models(p: &RsaProblem, cfg: &RsaConfig, seed: u64) -> Result<(CovModel, CovModel)> {
    let row_spec = CovSpec::lowrank_plus(
        cfg.temporal_base.clone(),
        &p.x,
        None,
        cfg.residual_rank,
        seed,
    );
    let row = make_cov(&row_spec)?;
    if row.dim() != p.timepoints() {
        return input(format!(
            "rsa: temporal covariance dim {} does not match {} timepoints",
            row.dim(),
            p.timepoints()
        ));
    }
    let col = make_cov(&cfg.spatial)?;
    if col.dim() != p.voxels() {
        return input(format!(
            "rsa: spatial covariance dim {} does not match {} voxels",
            col.dim(),
            p.voxels()
        ));
    }
    // Data-scale start for the spatial variances.
    let col = match &col {
        CovModel::Diagonal(_) => {
            let lv: Vec<f64> = p
                .voxel_variances()
                .iter()
                .map(|v| v.max(1e-12).ln())
                .collect();
            col.with_params(&lv)?
        }
        CovModel::Isotropic(_) => col.with_params(&[p.mean_sample_variance().max(1e-12).ln()])?,
        _ => col,
    };
    Ok((row, col))
}

/// Fit MN-RSA by joint gradient ascent on the marginal likelihood.
pub fn fit_mnrsa(p: &RsaProblem, cfg: &RsaConfig) -> Result<RsaResult> {
    if p.timepoints() <= p.conditions() {
        return input("rsa: need more timepoints than conditions");
    }
    let start = Instant::now();
    let mut attempt = None;
    for redraw in 0..=3u64 {
        let (row, col) = build_models(p, cfg, cfg.seed.wrapping_add(redraw))?;
        let obj = RsaObjective::new(p, row, col);
        let init = obj.initial_params();
        if matches!(obj.evaluate(&init), Ok((v, _)) if v.is_finite()) {
            attempt = Some((obj, init));
            break;
        }
    }
    let (obj, init) = attempt.ok_or_else(|| {
        Error::Fit("rsa: objective not finite at initialization after 3 re-draws".into())
    })?;
    let res = maximize(&obj, &init, &cfg.optim)?;
    let (row, col) = obj.models_at(&DVector::from_column_slice(&res.params))?;

    let CovModel::LowRankPlus(lr) = &row else {
        unreachable!("row covariance is lowrank_plus")
    };
    let spatial_scale = mean_diagonal(&col);
    let u = lr.inner().dense() * spatial_scale;
    let u = (&u + u.transpose()) * 0.5;
    let mean_var = p.mean_sample_variance();
    let degenerate = u.diagonal().iter().any(|&d| d < DEGENERACY_RATIO * mean_var);
    let corr = if degenerate {
        None
    } else {
        u_to_correlation(&u)?
    };
    let trace_ratio = u.trace() / mean_var;
    let offset = obj.normalizer();
    Ok(RsaResult {
        u,
        corr,
        spatial: col,
        temporal: row,
        loglik_trace: res.trace.iter().map(|&(i, v)| (i, v + offset)).collect(),
        iterations: res.iterations,
        converged: res.converged,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        degenerate,
        trace_ratio,
    })
}

fn mean_diagonal(m: &CovModel) -> f64 {
    let n = m.dim();
    match m {
        CovModel::Identity(_) => 1.0,
        CovModel::Isotropic(i) => i.variance(),
        CovModel::Diagonal(d) => d.variances().iter().sum::<f64>() / n as f64,
        _ => m.dense().trace() / n as f64,
    }
}

/// Least-squares RSA: row correlation of `β̂ = (XᵀX)⁻¹XᵀY`.
pub fn naive_rsa(p: &RsaProblem) -> Result<DMatrix<f64>> {
    let beta = ols_betas(p)?;
    Ok(row_correlation(&beta))
}

/// Per-voxel least-squares coefficients, `c × v`.
pub fn ols_betas(p: &RsaProblem) -> Result<DMatrix<f64>> {
    let x = &p.x;
    let sv = x.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 1e-10 * smax) {
        return input(format!(
            "rsa: design is rank deficient (singular values {smin:.3e} / {smax:.3e})"
        ));
    }
    let xtx = x.transpose() * x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Input("rsa: XᵀX is not positive definite".into()))?;
    Ok(chol.solve(&(x.transpose() * &p.y)))
}

/// Pearson correlation between the rows of `b`.
pub fn row_correlation(b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut centered = b.clone();
    for mut r in centered.row_iter_mut() {
        let m = r.mean();
        r.add_scalar_mut(-m);
    }
    let cov = &centered * centered.transpose();
    let sd: Vec<f64> = cov.diagonal().iter().map(|d| d.sqrt()).collect();
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (sd[i] * sd[j])
        }
    })
}

/// `D^{-1/2} U D^{-1/2}` with `D = diag(U)`; `None` if any diagonal entry is
/// below 1e-12.
pub fn u_to_correlation(u: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if !u.is_square() {
        return input("u_to_correlation: matrix is not square");
    }
    if (u - u.transpose()).amax() > 1e-10 {
        return input("u_to_correlation: matrix is not symmetric");
    }
    if u.diagonal().iter().any(|&d| !(d >= 1e-12)) {
        return Ok(None);
    }
    let s: Vec<f64> = u.diagonal().iter().map(|d| 1.0 / d.sqrt()).collect();
    let c = u.nrows();
    Ok(Some(DMatrix::from_fn(c, c, |i, j| {
        if i == j {
            1.0
        } else {
            (u[(i, j)] * s[i] * s[j]).clamp(-1.0, 1.0)
        }
    })))
}

/// The objective `fit_mnrsa` would optimize, at its initial point.
pub fn objective_for<'a>(p: &'a RsaProblem, cfg: &RsaConfig) -> Result<RsaObjective<'a>> {
    let (row, col) = build_models(p, cfg, cfg.seed)?;
    Ok(RsaObjective::new(p, row, col))
}
