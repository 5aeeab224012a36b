//! Matrix-normal distribution `MN(M, R, C)`: the Gaussian over `m × n`
//! matrices with `vec(X) ~ N(vec(M), C ⊗ R)`.
//!
//! Everything here is matrix-free with respect to the covariances: only
//! `solve`, `logdet` and `sqrt_apply` are called.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covmodels::{CovModel, Covariance, FullRank, LowRankPlus};
use crate::error::{input, Error, Result};
use crate::linalg::{frob_dot, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct MatnormDist {
    mean: DMatrix<f64>,
    row_cov: CovModel,
    col_cov: CovModel,
}

impl MatnormDist {
    pub fn new(mean: DMatrix<f64>, row_cov: CovModel, col_cov: CovModel) -> Result<Self> {
        if mean.nrows() != row_cov.dim() || mean.ncols() != col_cov.dim() {
            return input(format!(
                "matnorm: mean is {}x{}, covariances are {} and {}",
                mean.nrows(),
                mean.ncols(),
                row_cov.dim(),
                col_cov.dim()
            ));
        }
        Ok(Self {
            mean,
            row_cov,
            col_cov,
        })
    }

    /// Zero-mean distribution.
    pub fn centered(row_cov: CovModel, col_cov: CovModel) -> Self {
        let mean = DMatrix::zeros(row_cov.dim(), col_cov.dim());
        Self {
            mean,
            row_cov,
            col_cov,
        }
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }
    pub fn row_cov(&self) -> &CovModel {
        &self.row_cov
    }
    pub fn col_cov(&self) -> &CovModel {
        &self.col_cov
    }
    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    /// `MN(M, R, C)` as `MN(Mᵀ, C, R)`.
    pub fn transpose(&self) -> Self {
        Self {
            mean: self.mean.transpose(),
            row_cov: self.col_cov.clone(),
            col_cov: self.row_cov.clone(),
        }
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != self.mean.shape() {
            return input(format!(
                "matnorm: observation is {:?}, distribution is {:?}",
                x.shape(),
                self.mean.shape()
            ));
        }
        Ok(())
    }
}

/// Log-density of `X` under `MN(M, R, C)`:
/// `-(mn/2) log 2π - (m/2) log|C| - (n/2) log|R| - ½ Tr[C⁻¹ (X-M)ᵀ R⁻¹ (X-M)]`.
pub fn mn_logpdf(x: &DMatrix<f64>, d: &MatnormDist) -> Result<f64> {
    d.check(x)?;
    let (m, n) = d.shape();
    let e = x - &d.mean;
    let a = d.row_cov.solve(&e)?;
    let b = d.col_cov.solve(&e.transpose())?;
    let quad = frob_dot(&a, &b.transpose());
    Ok(-0.5 * (m * n) as f64 * LN_2PI
        - 0.5 * m as f64 * d.col_cov.logdet()?
        - 0.5 * n as f64 * d.row_cov.logdet()?
        - 0.5 * quad)
}

/// Log-density and its gradient with respect to the unconstrained
/// parameters of the row and column covariances (mean held fixed).
#[derive(Debug, Clone)]
pub struct MnLogpdfGrad {
    pub value: f64,
    pub row: DVector<f64>,
    pub col: DVector<f64>,
}

pub fn mn_logpdf_grad(x: &DMatrix<f64>, d: &MatnormDist) -> Result<MnLogpdfGrad> {
    d.check(x)?;
    let (m, n) = d.shape();
    let e = x - &d.mean;
    // A = R⁻¹E, D = C⁻¹ Eᵀ R⁻¹ = C⁻¹ Aᵀ, B = C⁻¹ Eᵀ.
    let a = d.row_cov.solve(&e)?;
    let dm = d.col_cov.solve(&a.transpose())?;
    let quad = frob_dot(&e, &dm.transpose());
    let value = -0.5 * (m * n) as f64 * LN_2PI
        - 0.5 * m as f64 * d.col_cov.logdet()?
        - 0.5 * n as f64 * d.row_cov.logdet()?
        - 0.5 * quad;

    // ∂/∂θ_R = Tr[G_R ∂R], G_R = ½(-n R⁻¹ + R⁻¹EC⁻¹EᵀR⁻¹) = -n/2 R⁻¹ + A (½ Dᵀ)ᵀ
    let half_dt = dm.transpose() * 0.5;
    let row = d.row_cov.trace_grad_lowrank(-0.5 * n as f64, &a, &half_dt)?;
    // ∂/∂θ_C with G_C = -m/2 C⁻¹ + B (½ D)ᵀ
    let col = if d.col_cov.n_params() > 0 {
        let b = d.col_cov.solve(&e.transpose())?;
        d.col_cov.trace_grad_lowrank(-0.5 * m as f64, &b, &(dm * 0.5))?
    } else {
        DVector::zeros(0)
    };
    Ok(MnLogpdfGrad { value, row, col })
}

/// Draw `M + A Z Bᵀ` with `A Aᵀ = R`, `B Bᵀ = C`, `Z` i.i.d. standard normal.
pub fn mn_sample(d: &MatnormDist, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mn_sample_with(d, &mut rng)
}

pub(crate) fn mn_sample_with(d: &MatnormDist, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let (m, n) = d.shape();
    let z = standard_normal_matrix(m, n, rng);
    let az = d.row_cov.sqrt_apply(&z)?;
    let azb = d.col_cov.sqrt_apply(&az.transpose())?.transpose();
    Ok(&d.mean + azb)
}

pub(crate) fn standard_normal_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

/// Marginalize the latent factor `Y` out of
/// `Z | Y ~ MN(X Y + offset, Σ_Z, Σ_k)`, `Y ~ MN(B, Σ_Y, Σ_k)`, giving
/// `Z ~ MN(X B + offset, Σ_Z + X Σ_Y Xᵀ, Σ_k)`.
///
/// The identity needs the prior and the conditional to share their column
/// covariance; passing different ones is a contract error. The returned row
/// covariance is a `lowrank_plus` model, so it stays matrix-free. For the
/// row-side mirror, apply this to transposed distributions.
pub fn mn_marginalize_factor(
    prior: &MatnormDist,
    x_factor: &DMatrix<f64>,
    noise_rowcov: &CovModel,
    noise_colcov: &CovModel,
    offset: &DMatrix<f64>,
) -> Result<MatnormDist> {
    if prior.col_cov != *noise_colcov {
        return Err(Error::Contract(
            "marginalization requires the factor prior and the conditional to share \
             their column covariance"
                .into(),
        ));
    }
    let (k, n) = prior.shape();
    if x_factor.ncols() != k
        || x_factor.nrows() != noise_rowcov.dim()
        || offset.shape() != (x_factor.nrows(), n)
    {
        return input("mn_marginalize_factor: inconsistent dimensions");
    }
    let row = LowRankPlus::new(
        noise_rowcov.clone(),
        x_factor.clone(),
        prior.row_cov.clone(),
        DMatrix::zeros(x_factor.nrows(), 0),
    )?;
    MatnormDist::new(
        x_factor * &prior.mean + offset,
        CovModel::LowRankPlus(Box::new(row)),
        noise_colcov.clone(),
    )
}

/// Column-partitioned matrix normal over `[X | Y]` with a shared row
/// covariance and column covariance `[[Σ_j, Σ_jk], [Σ_kj, Σ_k]]`.
#[derive(Debug, Clone)]
pub struct PartitionedMn {
    pub mean_x: DMatrix<f64>,
    pub mean_y: DMatrix<f64>,
    pub row_cov: CovModel,
    pub cov_x: CovModel,
    /// `Σ_jk`, `n_x × n_y`.
    pub cross: DMatrix<f64>,
    pub cov_y: CovModel,
}

/// Distribution of `X` given `Y`:
/// `MN(A + (Y - B) Σ_k⁻¹ Σ_kj, Σ_i, Σ_j - Σ_jk Σ_k⁻¹ Σ_kj)`.
pub fn mn_condition(joint: &PartitionedMn, observed: &DMatrix<f64>) -> Result<MatnormDist> {
    let m = joint.row_cov.dim();
    let (nx, ny) = (joint.cov_x.dim(), joint.cov_y.dim());
    if joint.mean_x.shape() != (m, nx)
        || joint.mean_y.shape() != (m, ny)
        || joint.cross.shape() != (nx, ny)
        || observed.shape() != (m, ny)
    {
        return input("mn_condition: inconsistent dimensions");
    }
    let resid = observed - &joint.mean_y;
    // (Y - B) Σ_k⁻¹ Σ_kj
    let shift = joint.cov_y.solve(&resid.transpose())?.transpose() * joint.cross.transpose();
    let schur = joint.cov_x.dense()
        - &joint.cross * joint.cov_y.solve(&joint.cross.transpose())?;
    let schur = symmetrize(&schur);
    let params = FullRank::params_for(&schur).map_err(|_| {
        Error::Conditioning("mn_condition: Schur complement is not positive definite".into())
    })?;
    let col = crate::covmodels::make_cov(&crate::covmodels::CovSpec::FullRank { dim: nx })?
        .with_params(params.as_slice())?;
    MatnormDist::new(&joint.mean_x + shift, joint.row_cov.clone(), col)
}
