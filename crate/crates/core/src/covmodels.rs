//! Structured covariance models.
//!
//! Every family exposes `Σ⁻¹X` and `log|Σ|` without materializing `Σ`, an
//! unconstrained parameter vector, and derivatives of `Σ` along each
//! parameter. All parametrizations map every real vector to a positive
//! definite matrix, so optimizers can work unconstrained.
//!
//! | kind           | parameters                                   |
//! |----------------|----------------------------------------------|
//! | `identity`     | none                                         |
//! | `isotropic`    | `a`, `Σ = e^a I`                             |
//! | `diagonal`     | `a_i`, `Σ = diag(e^{a_i})`                   |
//! | `full_rank`    | log-Cholesky, row-major lower triangle       |
//! | `ar1`          | `(a, z)`, `σ² = e^a`, `ρ = tanh z`           |
//! | `sq_exp`       | `(log ℓ, a)`                                 |
//! | `lowrank_plus` | base, inner (`U`), then `L` column-major     |
//! | `kron`         | factor parameters concatenated in order      |
//! | `block_scaled` | `log τ_j²` for `j ≥ 1`, then base parameters |

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::kron::{
    kron_logdet, kron_matvec_slice, kron_tri_solve, kron_tri_solve_masked,
    kron_tri_solve_masked_transpose, KronMask, TriFactorList,
};
use crate::linalg::{
    chol_logdet, cholesky, eye, frob_dot, row_dots, symmetrize, toeplitz_band_sums,
};

/// Relative diagonal jitter carried by the squared-exponential family.
pub const SQ_EXP_JITTER: f64 = 1e-6;

/// Scale of the random initialization of `lowrank_plus` loadings.
pub const LOADING_INIT_SCALE: f64 = 0.01;

/// Declarative description of a covariance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovSpec {
    Identity {
        dim: usize,
    },
    Isotropic {
        dim: usize,
    },
    Diagonal {
        dim: usize,
    },
    FullRank {
        dim: usize,
    },
    Ar1 {
        dim: usize,
    },
    SqExp {
        dim: usize,
    },
    LowrankPlus {
        base: Box<CovSpec>,
        /// Fixed `t × c` factor, stored as rows.
        design: Vec<Vec<f64>>,
        /// Covariance of the fixed factor's coefficients; defaults to
        /// `full_rank` of the design's column count.
        #[serde(default)]
        inner: Option<Box<CovSpec>>,
        /// Number of columns of the learned loading matrix.
        rank: usize,
        #[serde(default)]
        seed: u64,
    },
    Kron {
        factors: Vec<CovSpec>,
        #[serde(default)]
        mask: Option<Vec<bool>>,
    },
    BlockScaled {
        blocks: usize,
        base: Box<CovSpec>,
    },
}

impl CovSpec {
    /// `lowrank_plus` spec from an in-memory design matrix.
    pub fn lowrank_plus(
        base: CovSpec,
        design: &DMatrix<f64>,
        inner: Option<CovSpec>,
        rank: usize,
        seed: u64,
    ) -> Self {
        CovSpec::LowrankPlus {
            base: Box::new(base),
            design: matrix_to_rows(design),
            inner: inner.map(Box::new),
            rank,
            seed,
        }
    }

    /// Spec for a simple family named by its kind tag.
    pub fn simple(kind: &str, dim: usize) -> Result<Self> {
        Ok(match kind {
            "identity" => CovSpec::Identity { dim },
            "isotropic" => CovSpec::Isotropic { dim },
            "diagonal" => CovSpec::Diagonal { dim },
            "full_rank" => CovSpec::FullRank { dim },
            "ar1" => CovSpec::Ar1 { dim },
            "sq_exp" => CovSpec::SqExp { dim },
            other => return input(format!("unknown or non-simple covariance kind '{other}'")),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CovSpec::Identity { .. } => "identity",
            CovSpec::Isotropic { .. } => "isotropic",
            CovSpec::Diagonal { .. } => "diagonal",
            CovSpec::FullRank { .. } => "full_rank",
            CovSpec::Ar1 { .. } => "ar1",
            CovSpec::SqExp { .. } => "sq_exp",
            CovSpec::LowrankPlus { .. } => "lowrank_plus",
            CovSpec::Kron { .. } => "kron",
            CovSpec::BlockScaled { .. } => "block_scaled",
        }
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return input("matrix rows have unequal lengths");
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Build a covariance model at its default parameters.
pub fn make_cov(spec: &CovSpec) -> Result<CovModel> {
    let nonzero = |dim: usize, kind: &str| {
        if dim == 0 {
            input(format!("{kind}: dimension must be positive"))
        } else {
            Ok(())
        }
    };
    Ok(match spec {
        CovSpec::Identity { dim } => {
            nonzero(*dim, "identity")?;
            CovModel::Identity(Identity { dim: *dim })
        }
        CovSpec::Isotropic { dim } => {
            nonzero(*dim, "isotropic")?;
            CovModel::Isotropic(Isotropic {
                dim: *dim,
                log_var: 0.0,
            })
        }
        CovSpec::Diagonal { dim } => {
            nonzero(*dim, "diagonal")?;
            CovModel::Diagonal(Diagonal {
                log_var: vec![0.0; *dim],
            })
        }
        CovSpec::FullRank { dim } => {
            nonzero(*dim, "full_rank")?;
            CovModel::FullRank(FullRank::new(*dim, &vec![0.0; dim * (dim + 1) / 2]))
        }
        CovSpec::Ar1 { dim } => {
            nonzero(*dim, "ar1")?;
            CovModel::Ar1(Ar1 {
                dim: *dim,
                log_var: 0.0,
                z: 0.0,
            })
        }
        CovSpec::SqExp { dim } => {
            nonzero(*dim, "sq_exp")?;
            CovModel::SqExp(SqExp::new(*dim, 0.0, 0.0)?)
        }
        CovSpec::LowrankPlus {
            base,
            design,
            inner,
            rank,
            seed,
        } => {
            let base = make_cov(base)?;
            let design = rows_to_matrix(design)?;
            if design.nrows() != base.dim() {
                return input(format!(
                    "lowrank_plus: design has {} rows, base dim is {}",
                    design.nrows(),
                    base.dim()
                ));
            }
            if design.ncols() == 0 {
                return input("lowrank_plus: design must have at least one column");
            }
            let inner = match inner {
                Some(s) => make_cov(s)?,
                None => make_cov(&CovSpec::FullRank {
                    dim: design.ncols(),
                })?,
            };
            if inner.dim() != design.ncols() {
                return input(format!(
                    "lowrank_plus: inner dim {} does not match design columns {}",
                    inner.dim(),
                    design.ncols()
                ));
            }
            let loadings = random_loadings(base.dim(), *rank, *seed);
            CovModel::LowRankPlus(Box::new(LowRankPlus::new(base, design, inner, loadings)?))
        }
        CovSpec::Kron { factors, mask } => {
            if factors.is_empty() {
                return input("kron: at least one factor is required");
            }
            let factors = factors.iter().map(make_cov).collect::<Result<Vec<_>>>()?;
            let mask = mask.clone().map(KronMask::new).transpose()?;
            CovModel::Kron(KronCov::new(factors, mask)?)
        }
        CovSpec::BlockScaled { blocks, base } => {
            if *blocks == 0 {
                return input("block_scaled: at least one block is required");
            }
            let base = make_cov(base)?;
            CovModel::BlockScaled(Box::new(BlockScaled {
                log_prec: vec![0.0; *blocks],
                base,
            }))
        }
    })
}

/// `t × r` matrix with i.i.d. `N(0, LOADING_INIT_SCALE²)` entries.
pub fn random_loadings(t: usize, r: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(t, r, |_, _| {
        LOADING_INIT_SCALE * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    })
}

/// Behavior shared by all covariance families.
pub trait Covariance {
    fn dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn params(&self) -> DVector<f64>;
    /// `Σ⁻¹ X`.
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    /// `log|Σ|`.
    fn logdet(&self) -> Result<f64>;
    /// `Σ X`.
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `A Z` for a fixed square root `A Aᵀ = Σ`.
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    /// `(∂Σ/∂θ_k) X`.
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    /// `Tr[G ∂Σ/∂θ_k]` for every `k`, with `G` symmetric.
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64>;

    /// `Tr[G ∂Σ/∂θ_k]` for `G = α Σ⁻¹ + P Qᵀ`. Families with cheap structure
    /// avoid forming `G`.
    fn trace_grad_lowrank(
        &self,
        alpha: f64,
        p: &DMatrix<f64>,
        q: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let mut g = p * q.transpose();
        if alpha != 0.0 {
            g += self.solve(&eye(self.dim()))? * alpha;
        }
        Ok(self.trace_grad(&symmetrize(&g)))
    }

    fn dense(&self) -> DMatrix<f64> {
        self.matmul(&eye(self.dim()))
    }
}

fn check_rows(x: &DMatrix<f64>, dim: usize, what: &str) -> Result<()> {
    if x.nrows() != dim {
        return input(format!(
            "{what}: operand has {} rows, covariance dim is {dim}",
            x.nrows()
        ));
    }
    Ok(())
}

fn check_index(k: usize, n: usize) -> Result<()> {
    if k >= n {
        return input(format!("parameter index {k} out of range ({n} parameters)"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    dim: usize,
}

impl Covariance for Identity {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_params(&self) -> usize {
        0
    }
    fn params(&self) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim, "identity solve")?;
        Ok(x.clone())
    }
    fn logdet(&self) -> Result<f64> {
        Ok(0.0)
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.clone()
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(z.clone())
    }
    fn dsigma_apply(&self, k: usize, _x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, 0)?;
        unreachable!()
    }
    fn trace_grad(&self, _g: &DMatrix<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn trace_grad_lowrank(&self, _: f64, _: &DMatrix<f64>, _: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Isotropic {
    dim: usize,
    log_var: f64,
}

impl Isotropic {
    pub fn variance(&self) -> f64 {
        self.log_var.exp()
    }
}

impl Covariance for Isotropic {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_params(&self) -> usize {
        1
    }
    fn params(&self) -> DVector<f64> {
        DVector::from_element(1, self.log_var)
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim, "isotropic solve")?;
        Ok(x / self.variance())
    }
    fn logdet(&self) -> Result<f64> {
        Ok(self.dim as f64 * self.log_var)
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.variance()
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(z * self.variance().sqrt())
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, 1)?;
        Ok(x * self.variance())
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_element(1, self.variance() * g.trace())
    }
    fn trace_grad_lowrank(&self, alpha: f64, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
        let quad = frob_dot(p, q);
        Ok(DVector::from_element(
            1,
            alpha * self.dim as f64 + self.variance() * quad,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagonal {
    log_var: Vec<f64>,
}

impl Diagonal {
    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|a| a.exp()).collect()
    }

    /// Diagonal model with the given variances.
    pub fn from_variances(var: &[f64]) -> Result<Self> {
        if var.is_empty() || var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return input("diagonal: variances must be positive and finite");
        }
        Ok(Self {
            log_var: var.iter().map(|v| v.ln()).collect(),
        })
    }
}

impl Covariance for Diagonal {
    fn dim(&self) -> usize {
        self.log_var.len()
    }
    fn n_params(&self) -> usize {
        self.log_var.len()
    }
    fn params(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.log_var)
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim(), "diagonal solve")?;
        let inv: Vec<f64> = self.log_var.iter().map(|a| (-a).exp()).collect();
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * inv[i]))
    }
    fn logdet(&self) -> Result<f64> {
        Ok(self.log_var.iter().sum())
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.variances();
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * s[i])
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let s: Vec<f64> = self.log_var.iter().map(|a| (0.5 * a).exp()).collect();
        Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * s[i]))
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, self.n_params())?;
        check_rows(x, self.dim(), "diagonal dsigma")?;
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let s = self.log_var[k].exp();
        out.row_mut(k).copy_from(&(x.row(k) * s));
        Ok(out)
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.log_var[i].exp() * g[(i, i)])
    }
    fn trace_grad_lowrank(&self, alpha: f64, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
        let d = row_dots(p, q);
        Ok(DVector::from_fn(self.dim(), |i, _| {
            alpha + self.log_var[i].exp() * d[i]
        }))
    }
}

/// Dense covariance `Σ = L Lᵀ` with log-Cholesky parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FullRank {
    theta: Vec<f64>,
    chol: DMatrix<f64>,
}

impl FullRank {
    fn new(dim: usize, theta: &[f64]) -> Self {
        let mut chol = DMatrix::zeros(dim, dim);
        let mut it = theta.iter();
        for i in 0..dim {
            for j in 0..=i {
                let v = *it.next().expect("full_rank: short parameter vector");
                chol[(i, j)] = if i == j { v.exp() } else { v };
            }
        }
        Self {
            theta: theta.to_vec(),
            chol,
        }
    }

    /// Lower Cholesky factor of `Σ`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Log-Cholesky parameters of a given positive definite matrix.
    pub fn params_for(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
        let l = cholesky(sigma, "full_rank params_for")?.unpack();
        let d = l.nrows();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
            }
        }
        Ok(DVector::from_vec(out))
    }

    fn index_pair(&self, k: usize) -> (usize, usize) {
        // k = i(i+1)/2 + j
        let mut i = 0;
        while (i + 1) * (i + 2) / 2 <= k {
            i += 1;
        }
        (i, k - i * (i + 1) / 2)
    }
}

impl Covariance for FullRank {
    fn dim(&self) -> usize {
        self.chol.nrows()
    }
    fn n_params(&self) -> usize {
        self.theta.len()
    }
    fn params(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim(), "full_rank solve")?;
        let z = self
            .chol
            .solve_lower_triangular(x)
            .ok_or_else(|| Error::Conditioning("full_rank: singular Cholesky factor".into()))?;
        self.chol
            .tr_solve_lower_triangular(&z)
            .ok_or_else(|| Error::Conditioning("full_rank: singular Cholesky factor".into()))
    }
    fn logdet(&self) -> Result<f64> {
        Ok(2.0 * (0..self.dim()).map(|i| self.theta[i * (i + 1) / 2 + i]).sum::<f64>())
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.chol * (self.chol.transpose() * x)
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(&self.chol * z)
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, self.n_params())?;
        check_rows(x, self.dim(), "full_rank dsigma")?;
        let (i, j) = self.index_pair(k);
        let s = if i == j { self.chol[(i, i)] } else { 1.0 };
        // dL = s e_i e_jᵀ, dΣ X = dL (Lᵀ X) + L (dLᵀ X)
        let lt_x = self.chol.transpose() * x;
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        out.row_mut(i).copy_from(&(lt_x.row(j) * s));
        let mut dlt_x = DMatrix::zeros(x.nrows(), x.ncols());
        dlt_x.row_mut(j).copy_from(&(x.row(i) * s));
        out += &self.chol * dlt_x;
        Ok(out)
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        let h = (g * &self.chol) * 2.0;
        let d = self.dim();
        let mut out = Vec::with_capacity(self.n_params());
        for i in 0..d {
            for j in 0..=i {
                let s = if i == j { self.chol[(i, i)] } else { 1.0 };
                out.push(h[(i, j)] * s);
            }
        }
        DVector::from_vec(out)
    }
}

/// Stationary AR(1) covariance `Σ_ij = σ² ρ^{|i-j|}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ar1 {
    dim: usize,
    log_var: f64,
    z: f64,
}

impl Ar1 {
    pub fn variance(&self) -> f64 {
        self.log_var.exp()
    }

    pub fn rho(&self) -> f64 {
        self.z.tanh()
    }

    /// Model with the given marginal variance and autocorrelation.
    pub fn from_values(dim: usize, variance: f64, rho: f64) -> Result<Self> {
        if dim == 0 || !(variance > 0.0) || !(rho.abs() < 1.0) {
            return input("ar1: need dim > 0, variance > 0, |rho| < 1");
        }
        Ok(Self {
            dim,
            log_var: variance.ln(),
            z: rho.atanh(),
        })
    }

    /// `T x` with `T_ij = ρ^{|i-j|}`, in O(t) via forward/backward filters.
    fn corr_apply_col(&self, x: &[f64], out: &mut [f64]) {
        let rho = self.rho();
        let n = x.len();
        let mut f = 0.0;
        for i in 0..n {
            f = x[i] + rho * f;
            out[i] = f;
        }
        let mut g = 0.0;
        for i in (0..n).rev() {
            g = x[i] + rho * g;
            out[i] += g - x[i];
        }
    }

    /// `D x` with `D_ij = |i-j| ρ^{|i-j|-1}` (the ρ-derivative of `T`).
    fn dcorr_apply_col(&self, x: &[f64], out: &mut [f64]) {
        let rho = self.rho();
        let n = x.len();
        let (mut f, mut df) = (0.0, 0.0);
        for i in 0..n {
            df = f + rho * df;
            f = x[i] + rho * f;
            out[i] = df;
        }
        let (mut g, mut dg) = (0.0, 0.0);
        for i in (0..n).rev() {
            dg = g + rho * dg;
            g = x[i] + rho * g;
            out[i] += dg;
        }
    }

    fn map_cols(
        &self,
        x: &DMatrix<f64>,
        scale: f64,
        op: impl Fn(&Self, &[f64], &mut [f64]),
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let mut buf = vec![0.0; x.nrows()];
        for j in 0..x.ncols() {
            op(self, x.column(j).as_slice(), &mut buf);
            for (o, b) in out.column_mut(j).iter_mut().zip(&buf) {
                *o = b * scale;
            }
        }
        out
    }
}

impl Covariance for Ar1 {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_params(&self) -> usize {
        2
    }
    fn params(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.log_var, self.z])
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim, "ar1 solve")?;
        let n = self.dim;
        let s2 = self.variance();
        if n == 1 {
            return Ok(x / s2);
        }
        let rho = self.rho();
        let c = 1.0 / (s2 * (1.0 - rho * rho));
        if !c.is_finite() {
            return Err(Error::Conditioning(format!(
                "ar1: 1 - rho² underflowed (rho = {rho})"
            )));
        }
        // Tridiagonal precision: ends 1, interior 1 + ρ², off-diagonal -ρ.
        let mut out = DMatrix::zeros(n, x.ncols());
        for j in 0..x.ncols() {
            let xc = x.column(j);
            for i in 0..n {
                let d = if i == 0 || i == n - 1 { 1.0 } else { 1.0 + rho * rho };
                let mut v = d * xc[i];
                if i > 0 {
                    v -= rho * xc[i - 1];
                }
                if i + 1 < n {
                    v -= rho * xc[i + 1];
                }
                out[(i, j)] = c * v;
            }
        }
        Ok(out)
    }
    fn logdet(&self) -> Result<f64> {
        let rho = self.rho();
        let one_m = 1.0 - rho * rho;
        if self.dim > 1 && !(one_m > 0.0) {
            return Err(Error::Conditioning(format!("ar1: rho = {rho} at boundary")));
        }
        let t = self.dim as f64;
        Ok(t * self.log_var + if self.dim > 1 { (t - 1.0) * one_m.ln() } else { 0.0 })
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.map_cols(x, self.variance(), Self::corr_apply_col)
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let sd = self.variance().sqrt();
        let rho = self.rho();
        let innov = (1.0 - rho * rho).sqrt();
        let mut out = DMatrix::zeros(z.nrows(), z.ncols());
        for j in 0..z.ncols() {
            let mut prev = 0.0;
            for i in 0..z.nrows() {
                let v = if i == 0 {
                    sd * z[(0, j)]
                } else {
                    rho * prev + sd * innov * z[(i, j)]
                };
                out[(i, j)] = v;
                prev = v;
            }
        }
        Ok(out)
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, 2)?;
        check_rows(x, self.dim, "ar1 dsigma")?;
        Ok(if k == 0 {
            self.matmul(x)
        } else {
            let rho = self.rho();
            self.map_cols(x, self.variance() * (1.0 - rho * rho), Self::dcorr_apply_col)
        })
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        let s = toeplitz_band_sums(g);
        let rho = self.rho();
        let s2 = self.variance();
        let mut ga = 0.0;
        let mut gz = 0.0;
        let mut pow = 1.0; // ρ^k
        let mut pow_m1 = 0.0; // ρ^{k-1}
        for (k, sk) in s.iter().enumerate() {
            ga += pow * sk;
            gz += k as f64 * pow_m1 * sk;
            pow_m1 = pow;
            pow *= rho;
        }
        DVector::from_vec(vec![s2 * ga, s2 * (1.0 - rho * rho) * gz])
    }
    fn trace_grad_lowrank(&self, alpha: f64, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
        let t = self.dim as f64;
        let rho = self.rho();
        let sp = self.dsigma_apply(0, p)?;
        let dp = self.dsigma_apply(1, p)?;
        Ok(DVector::from_vec(vec![
            alpha * t + frob_dot(q, &sp),
            alpha * (-2.0 * rho * (t - 1.0)) + frob_dot(q, &dp),
        ]))
    }
}

/// Squared-exponential kernel over unit-spaced indices,
/// `Σ_ij = e^a (exp(-(i-j)²/(2ℓ²)) + jitter δ_ij)`.
#[derive(Debug, Clone)]
pub struct SqExp {
    log_ell: f64,
    log_scale: f64,
    sigma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl PartialEq for SqExp {
    fn eq(&self, other: &Self) -> bool {
        self.log_ell == other.log_ell && self.log_scale == other.log_scale && self.sigma == other.sigma
    }
}

impl SqExp {
    fn new(dim: usize, log_ell: f64, log_scale: f64) -> Result<Self> {
        let sigma = Self::materialize(dim, log_ell, log_scale);
        let chol = cholesky(&sigma, "sq_exp")?;
        Ok(Self {
            log_ell,
            log_scale,
            sigma,
            chol,
        })
    }

    fn materialize(dim: usize, log_ell: f64, log_scale: f64) -> DMatrix<f64> {
        let ell2 = (2.0 * log_ell).exp();
        let s = log_scale.exp();
        DMatrix::from_fn(dim, dim, |i, j| {
            let d = i as f64 - j as f64;
            s * ((-d * d / (2.0 * ell2)).exp() + if i == j { SQ_EXP_JITTER } else { 0.0 })
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_ell.exp()
    }

    /// `∂Σ/∂log ℓ`.
    fn dsigma_ell(&self) -> DMatrix<f64> {
        let ell2 = (2.0 * self.log_ell).exp();
        let s = self.log_scale.exp();
        let n = self.sigma.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            let d2 = (i as f64 - j as f64).powi(2);
            s * (-d2 / (2.0 * ell2)).exp() * d2 / ell2
        })
    }
}

impl Covariance for SqExp {
    fn dim(&self) -> usize {
        self.sigma.nrows()
    }
    fn n_params(&self) -> usize {
        2
    }
    fn params(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.log_ell, self.log_scale])
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim(), "sq_exp solve")?;
        Ok(self.chol.solve(x))
    }
    fn logdet(&self) -> Result<f64> {
        Ok(chol_logdet(&self.chol))
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.sigma * x
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.chol.l() * z)
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, 2)?;
        check_rows(x, self.dim(), "sq_exp dsigma")?;
        Ok(if k == 0 {
            self.dsigma_ell() * x
        } else {
            &self.sigma * x
        })
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            frob_dot(g, &self.dsigma_ell()),
            frob_dot(g, &self.sigma),
        ])
    }
}

/// `Σ = B + F U Fᵀ + L Lᵀ`: a base covariance plus a fixed-factor term with
/// covariance `U` and a learned low-rank term.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPlus {
    base: CovModel,
    design: DMatrix<f64>,
    inner: CovModel,
    loadings: DMatrix<f64>,
    // Cached Woodbury pieces: G = [F·chol(U), L], B⁻¹G and chol(I + Gᵀ B⁻¹ G).
    g: DMatrix<f64>,
    binv_g: DMatrix<f64>,
    capacitance: DMatrix<f64>,
    cap_chol_l: DMatrix<f64>,
}

impl LowRankPlus {
    pub fn new(
        base: CovModel,
        design: DMatrix<f64>,
        inner: CovModel,
        loadings: DMatrix<f64>,
    ) -> Result<Self> {
        let t = base.dim();
        if design.nrows() != t || loadings.nrows() != t || inner.dim() != design.ncols() {
            return input("lowrank_plus: inconsistent dimensions");
        }
        let u_root = inner.sqrt_apply(&eye(inner.dim()))?;
        let c = design.ncols();
        let r = loadings.ncols();
        let mut g = DMatrix::zeros(t, c + r);
        g.columns_mut(0, c).copy_from(&(&design * u_root));
        g.columns_mut(c, r).copy_from(&loadings);
        let binv_g = base.solve(&g)?;
        let capacitance = eye(c + r) + g.transpose() * &binv_g;
        let cap_chol_l = cholesky(&symmetrize(&capacitance), "lowrank_plus capacitance")?.unpack();
        Ok(Self {
            base,
            design,
            inner,
            loadings,
            g,
            binv_g,
            capacitance,
            cap_chol_l,
        })
    }

    pub fn base(&self) -> &CovModel {
        &self.base
    }
    pub fn inner(&self) -> &CovModel {
        &self.inner
    }
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    fn cap_solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self
            .cap_chol_l
            .solve_lower_triangular(x)
            .expect("capacitance factor has positive diagonal");
        self.cap_chol_l
            .tr_solve_lower_triangular(&z)
            .expect("capacitance factor has positive diagonal")
    }

    fn split(&self, k: usize) -> (usize, usize) {
        let nb = self.base.n_params();
        let ni = self.inner.n_params();
        if k < nb {
            (0, k)
        } else if k < nb + ni {
            (1, k - nb)
        } else {
            (2, k - nb - ni)
        }
    }
}

impl Covariance for LowRankPlus {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn n_params(&self) -> usize {
        self.base.n_params() + self.inner.n_params() + self.loadings.len()
    }
    fn params(&self) -> DVector<f64> {
        let mut v = self.base.params().as_slice().to_vec();
        v.extend_from_slice(self.inner.params().as_slice());
        v.extend_from_slice(self.loadings.as_slice());
        DVector::from_vec(v)
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim(), "lowrank_plus solve")?;
        let z = self.base.solve(x)?;
        let corr = self.cap_solve(&(self.g.transpose() * &z));
        Ok(z - &self.binv_g * corr)
    }
    fn logdet(&self) -> Result<f64> {
        let cap = 2.0 * self.cap_chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(self.base.logdet()? + cap)
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.base.matmul(x) + &self.g * (self.g.transpose() * x)
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = cholesky(&symmetrize(&self.dense()), "lowrank_plus sqrt")?;
        Ok(l.l() * z)
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, self.n_params())?;
        check_rows(x, self.dim(), "lowrank_plus dsigma")?;
        match self.split(k) {
            (0, kb) => self.base.dsigma_apply(kb, x),
            (1, ki) => {
                let ft_x = self.design.transpose() * x;
                Ok(&self.design * self.inner.dsigma_apply(ki, &ft_x)?)
            }
            (_, kl) => {
                let t = self.dim();
                let (i, j) = (kl % t, kl / t);
                let lj = self.loadings.column(j);
                // dΣ = e_i l_jᵀ + l_j e_iᵀ
                let mut out = lj * x.row(i);
                let lj_x = lj.transpose() * x;
                for c in 0..x.ncols() {
                    out[(i, c)] += lj_x[(0, c)];
                }
                Ok(out)
            }
        }
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        let gb = self.base.trace_grad(g);
        let ftgf = self.design.transpose() * g * &self.design;
        let gi = self.inner.trace_grad(&ftgf);
        let gl = (g * &self.loadings) * 2.0;
        let mut v = gb.as_slice().to_vec();
        v.extend_from_slice(gi.as_slice());
        v.extend_from_slice(gl.as_slice());
        DVector::from_vec(v)
    }
    fn trace_grad_lowrank(&self, alpha: f64, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
        // Σ⁻¹ = B⁻¹ - (B⁻¹G) K⁻¹ (B⁻¹G)ᵀ, so G_w = α B⁻¹ + P' Q'ᵀ with
        // P' = [P, -α B⁻¹G K⁻¹] and Q' = [Q, B⁻¹G].
        let m = self.binv_g.ncols();
        let t = self.dim();
        let corr = self.binv_g.clone() * self.cap_solve(&eye(m)) * (-alpha);
        let mut p2 = DMatrix::zeros(t, p.ncols() + m);
        p2.columns_mut(0, p.ncols()).copy_from(p);
        p2.columns_mut(p.ncols(), m).copy_from(&corr);
        let mut q2 = DMatrix::zeros(t, q.ncols() + m);
        q2.columns_mut(0, q.ncols()).copy_from(q);
        q2.columns_mut(q.ncols(), m).copy_from(&self.binv_g);
        let gb = self.base.trace_grad_lowrank(alpha, &p2, &q2)?;

        let f = &self.design;
        let sinv_f = self.solve(f)?;
        let ftgf = symmetrize(&((f.transpose() * &sinv_f) * alpha + (f.transpose() * p) * (q.transpose() * f)));
        let gi = self.inner.trace_grad(&ftgf);

        // Tr[G dΣ] = 2 (sym(G) L)_ij for dΣ = e_i l_jᵀ + l_j e_iᵀ.
        let l = &self.loadings;
        let gl = self.solve(l)? * (2.0 * alpha) + p * (q.transpose() * l) + q * (p.transpose() * l);

        let mut v = gb.as_slice().to_vec();
        v.extend_from_slice(gi.as_slice());
        v.extend_from_slice(gl.as_slice());
        Ok(DVector::from_vec(v))
    }
}

/// `Σ = L[K,K] L[K,K]ᵀ` with `L = chol(Σ_0) ⊗ … ⊗ chol(Σ_{n-1})` and `K` the
/// kept index set (all indices when unmasked, giving `Σ = Σ_0 ⊗ … ⊗ Σ_{n-1}`).
#[derive(Debug, Clone, PartialEq)]
pub struct KronCov {
    factors: Vec<CovModel>,
    mask: Option<KronMask>,
    tri: TriFactorList,
}

impl KronCov {
    pub fn new(factors: Vec<CovModel>, mask: Option<KronMask>) -> Result<Self> {
        let chols = factors
            .iter()
            .map(|f| Ok(cholesky(&symmetrize(&f.dense()), "kron factor")?.unpack()))
            .collect::<Result<Vec<_>>>()?;
        let tri = TriFactorList::new(chols)?;
        if let Some(m) = &mask {
            if m.len() != tri.full_dim() {
                return input(format!(
                    "kron: mask length {} does not match product of factor dims {}",
                    m.len(),
                    tri.full_dim()
                ));
            }
        }
        Ok(Self { factors, mask, tri })
    }

    pub fn factors(&self) -> &[CovModel] {
        &self.factors
    }

    pub fn mask(&self) -> Option<&KronMask> {
        self.mask.as_ref()
    }

    fn full_mask(&self) -> KronMask {
        self.mask
            .clone()
            .unwrap_or_else(|| KronMask::all(self.tri.full_dim()).expect("non-empty"))
    }

    /// Apply a (masked) Kronecker product of square factors column-wise.
    fn apply(&self, mats: &[DMatrix<f64>], x: &DMatrix<f64>, transpose: bool) -> DMatrix<f64> {
        let mask = self.full_mask();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for j in 0..x.ncols() {
            let full = mask.embed(x.column(j).as_slice());
            let y = mask.restrict(&kron_matvec_slice(mats, &full, transpose));
            out.column_mut(j).copy_from_slice(&y);
        }
        out
    }

    fn split(&self, k: usize) -> (usize, usize) {
        let mut k = k;
        for (f, m) in self.factors.iter().enumerate() {
            if k < m.n_params() {
                return (f, k);
            }
            k -= m.n_params();
        }
        unreachable!("index checked by caller")
    }

    /// Derivative of factor `f`'s Cholesky factor along its parameter `k`:
    /// `dL = L Φ(L⁻¹ dΣ L⁻ᵀ)`, `Φ` keeping the strict lower part and half
    /// the diagonal.
    fn dchol(&self, f: usize, k: usize) -> Result<DMatrix<f64>> {
        let l = &self.tri.factors()[f];
        let d = l.nrows();
        let dsig = self.factors[f].dsigma_apply(k, &eye(d))?;
        let a = l.solve_lower_triangular(&dsig).expect("positive diagonal");
        let x = l
            .solve_lower_triangular(&a.transpose())
            .expect("positive diagonal")
            .transpose();
        let phi = DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => x[(i, j)],
            std::cmp::Ordering::Equal => 0.5 * x[(i, i)],
            std::cmp::Ordering::Less => 0.0,
        });
        Ok(l * phi)
    }
}

impl Covariance for KronCov {
    fn dim(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.tri.full_dim(), |m| m.kept_count())
    }
    fn n_params(&self) -> usize {
        self.factors.iter().map(|f| f.n_params()).sum()
    }
    fn params(&self) -> DVector<f64> {
        let v: Vec<f64> = self
            .factors
            .iter()
            .flat_map(|f| f.params().as_slice().to_vec())
            .collect();
        DVector::from_vec(v)
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim(), "kron solve")?;
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let all = self.full_mask();
        for j in 0..x.ncols() {
            let y = DVector::from_column_slice(x.column(j).as_slice());
            let z = match &self.mask {
                None => kron_tri_solve(&self.tri, &y)?,
                Some(m) => kron_tri_solve_masked(&self.tri, m, &y)?,
            };
            let w = kron_tri_solve_masked_transpose(&self.tri, &all, z.as_slice());
            out.column_mut(j).copy_from_slice(&w);
        }
        Ok(out)
    }
    fn logdet(&self) -> Result<f64> {
        kron_logdet(&self.tri, self.mask.as_ref())
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let lt_x = self.apply(self.tri.factors(), x, true);
        self.apply(self.tri.factors(), &lt_x, false)
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.apply(self.tri.factors(), z, false))
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, self.n_params())?;
        check_rows(x, self.dim(), "kron dsigma")?;
        let (f, kf) = self.split(k);
        let mut dls = self.tri.factors().to_vec();
        dls[f] = self.dchol(f, kf)?;
        let ls = self.tri.factors();
        let a = self.apply(&dls, &self.apply(ls, x, true), false);
        let b = self.apply(ls, &self.apply(&dls, x, true), false);
        Ok(a + b)
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        // Tr[G dΣ] = Σ_{I,J ∈ K} W_IJ dL_IJ with W = 2 G L[K,K].
        let ls = self.tri.factors();
        let dims = self.tri.dims();
        let nf = dims.len();
        let w = self.apply(ls, &g.transpose(), true).transpose() * 2.0;
        let kept = self.full_mask().kept_indices();
        let multi: Vec<Vec<usize>> = kept
            .iter()
            .map(|&idx| {
                let mut rem = idx;
                let mut mi = vec![0; nf];
                for f in (0..nf).rev() {
                    mi[f] = rem % dims[f];
                    rem /= dims[f];
                }
                mi
            })
            .collect();
        let mut hs: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for (b, mj) in multi.iter().enumerate() {
            for (a, mi) in multi.iter().enumerate() {
                let wv = w[(a, b)];
                if wv == 0.0 {
                    continue;
                }
                let vals: Vec<f64> = (0..nf).map(|f| ls[f][(mi[f], mj[f])]).collect();
                for f in 0..nf {
                    let (i, j) = (mi[f], mj[f]);
                    if j > i {
                        continue;
                    }
                    let others: f64 = (0..nf).filter(|&g| g != f).map(|g| vals[g]).product();
                    hs[f][(i, j)] += wv * others;
                }
            }
        }
        let mut out = Vec::with_capacity(self.n_params());
        for (f, h) in hs.iter().enumerate() {
            let l = &ls[f];
            let d = l.nrows();
            let a = l.transpose() * h;
            let psi_t = DMatrix::from_fn(d, d, |i, j| match j.cmp(&i) {
                std::cmp::Ordering::Greater => a[(j, i)],
                std::cmp::Ordering::Equal => 0.5 * a[(i, i)],
                std::cmp::Ordering::Less => 0.0,
            });
            // G_f = L⁻ᵀ Ψᵀ L⁻¹
            let y = l.tr_solve_lower_triangular(&psi_t).expect("positive diagonal");
            let gf = l
                .tr_solve_lower_triangular(&y.transpose())
                .expect("positive diagonal")
                .transpose();
            out.extend_from_slice(self.factors[f].trace_grad(&symmetrize(&gf)).as_slice());
        }
        DVector::from_vec(out)
    }
}

/// `Σ = ρ ⊗ Σ_v` with `ρ = diag(τ_1⁻², …, τ_n⁻²)` and `τ_1 = 1` fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScaled {
    /// `log τ_j²`; entry 0 is pinned at zero.
    log_prec: Vec<f64>,
    base: CovModel,
}

impl BlockScaled {
    pub fn new(base: CovModel, precisions: &[f64]) -> Result<Self> {
        if precisions.is_empty() || precisions.iter().any(|p| !(*p > 0.0)) {
            return input("block_scaled: precisions must be positive");
        }
        if (precisions[0] - 1.0).abs() > 0.0 {
            return Err(Error::Contract(
                "block_scaled: first precision is anchored at 1".into(),
            ));
        }
        Ok(Self {
            log_prec: precisions.iter().map(|p| p.ln()).collect(),
            base,
        })
    }

    pub fn blocks(&self) -> usize {
        self.log_prec.len()
    }

    pub fn base(&self) -> &CovModel {
        &self.base
    }

    /// `τ_j²` for every block.
    pub fn precisions(&self) -> Vec<f64> {
        self.log_prec.iter().map(|a| a.exp()).collect()
    }

    fn block_map(
        &self,
        x: &DMatrix<f64>,
        f: impl Fn(usize, DMatrix<f64>) -> Result<DMatrix<f64>>,
    ) -> Result<DMatrix<f64>> {
        let v = self.base.dim();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for j in 0..self.blocks() {
            let blk = f(j, x.rows(j * v, v).into_owned())?;
            out.rows_mut(j * v, v).copy_from(&blk);
        }
        Ok(out)
    }
}

impl Covariance for BlockScaled {
    fn dim(&self) -> usize {
        self.blocks() * self.base.dim()
    }
    fn n_params(&self) -> usize {
        self.blocks() - 1 + self.base.n_params()
    }
    fn params(&self) -> DVector<f64> {
        let mut v = self.log_prec[1..].to_vec();
        v.extend_from_slice(self.base.params().as_slice());
        DVector::from_vec(v)
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(x, self.dim(), "block_scaled solve")?;
        let v = self.base.dim();
        let n = self.blocks();
        let m = x.ncols();
        // One base solve over the horizontally stacked blocks.
        let mut wide = DMatrix::zeros(v, n * m);
        for j in 0..n {
            wide.columns_mut(j * m, m).copy_from(&x.rows(j * v, v));
        }
        let sol = self.base.solve(&wide)?;
        let prec = self.precisions();
        let mut out = DMatrix::zeros(x.nrows(), m);
        for (j, pj) in prec.iter().enumerate() {
            out.rows_mut(j * v, v)
                .copy_from(&(sol.columns(j * m, m) * *pj));
        }
        Ok(out)
    }
    fn logdet(&self) -> Result<f64> {
        let v = self.base.dim() as f64;
        Ok(-v * self.log_prec.iter().sum::<f64>() + self.blocks() as f64 * self.base.logdet()?)
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let prec = self.precisions();
        self.block_map(x, |j, b| Ok(self.base.matmul(&b) / prec[j]))
            .expect("infallible")
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let prec = self.precisions();
        self.block_map(z, |j, b| Ok(self.base.sqrt_apply(&b)? / prec[j].sqrt()))
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_index(k, self.n_params())?;
        check_rows(x, self.dim(), "block_scaled dsigma")?;
        let prec = self.precisions();
        let nb = self.blocks() - 1;
        if k < nb {
            let target = k + 1;
            self.block_map(x, |j, b| {
                Ok(if j == target {
                    self.base.matmul(&b) * (-1.0 / prec[j])
                } else {
                    DMatrix::zeros(b.nrows(), b.ncols())
                })
            })
        } else {
            self.block_map(x, |j, b| Ok(self.base.dsigma_apply(k - nb, &b)? / prec[j]))
        }
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        let v = self.base.dim();
        let prec = self.precisions();
        let mut out = Vec::with_capacity(self.n_params());
        let mut acc = DMatrix::zeros(v, v);
        for (j, pj) in prec.iter().enumerate() {
            let gjj = g.view((j * v, j * v), (v, v)).into_owned();
            if j > 0 {
                out.push(-self.base.matmul(&gjj).trace() / pj);
            }
            acc += gjj / *pj;
        }
        out.extend_from_slice(self.base.trace_grad(&acc).as_slice());
        DVector::from_vec(out)
    }
    fn trace_grad_lowrank(&self, alpha: f64, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
        let v = self.base.dim();
        let n = self.blocks();
        let m = p.ncols();
        let prec = self.precisions();
        let mut out = Vec::with_capacity(self.n_params());
        let mut pb = DMatrix::zeros(v, n * m);
        let mut qb = DMatrix::zeros(v, n * m);
        for (j, &scale) in prec.iter().enumerate() {
            let pj = p.rows(j * v, v);
            let qj = q.rows(j * v, v);
            if j > 0 {
                let quad = frob_dot(&qj.into_owned(), &self.base.matmul(&pj.into_owned()));
                out.push(-alpha * v as f64 - quad / scale);
            }
            pb.columns_mut(j * m, m).copy_from(&(pj / scale));
            qb.columns_mut(j * m, m).copy_from(&qj);
        }
        out.extend_from_slice(
            self.base
                .trace_grad_lowrank(alpha * n as f64, &pb, &qb)?
                .as_slice(),
        );
        Ok(DVector::from_vec(out))
    }
}

/// A covariance model of any supported family.
#[derive(Debug, Clone, PartialEq)]
pub enum CovModel {
    Identity(Identity),
    Isotropic(Isotropic),
    Diagonal(Diagonal),
    FullRank(FullRank),
    Ar1(Ar1),
    SqExp(SqExp),
    LowRankPlus(Box<LowRankPlus>),
    Kron(KronCov),
    BlockScaled(Box<BlockScaled>),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            CovModel::Identity($m) => $body,
            CovModel::Isotropic($m) => $body,
            CovModel::Diagonal($m) => $body,
            CovModel::FullRank($m) => $body,
            CovModel::Ar1($m) => $body,
            CovModel::SqExp($m) => $body,
            CovModel::LowRankPlus($m) => $body,
            CovModel::Kron($m) => $body,
            CovModel::BlockScaled($m) => $body,
        }
    };
}

impl Covariance for CovModel {
    fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }
    fn n_params(&self) -> usize {
        dispatch!(self, m => m.n_params())
    }
    fn params(&self) -> DVector<f64> {
        dispatch!(self, m => m.params())
    }
    fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dispatch!(self, m => m.solve(x))
    }
    fn logdet(&self) -> Result<f64> {
        dispatch!(self, m => m.logdet())
    }
    fn matmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        dispatch!(self, m => m.matmul(x))
    }
    fn sqrt_apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dispatch!(self, m => m.sqrt_apply(z))
    }
    fn dsigma_apply(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dispatch!(self, m => m.dsigma_apply(k, x))
    }
    fn trace_grad(&self, g: &DMatrix<f64>) -> DVector<f64> {
        dispatch!(self, m => m.trace_grad(g))
    }
    fn trace_grad_lowrank(&self, alpha: f64, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DVector<f64>> {
        dispatch!(self, m => m.trace_grad_lowrank(alpha, p, q))
    }
    fn dense(&self) -> DMatrix<f64> {
        dispatch!(self, m => m.dense())
    }
}

impl CovModel {
    pub fn kind(&self) -> &'static str {
        match self {
            CovModel::Identity(_) => "identity",
            CovModel::Isotropic(_) => "isotropic",
            CovModel::Diagonal(_) => "diagonal",
            CovModel::FullRank(_) => "full_rank",
            CovModel::Ar1(_) => "ar1",
            CovModel::SqExp(_) => "sq_exp",
            CovModel::LowRankPlus(_) => "lowrank_plus",
            CovModel::Kron(_) => "kron",
            CovModel::BlockScaled(_) => "block_scaled",
        }
    }

    /// New model of the same structure at parameters `v`.
    pub fn with_params(&self, v: &[f64]) -> Result<CovModel> {
        if v.len() != self.n_params() {
            return input(format!(
                "{}: expected {} parameters, got {}",
                self.kind(),
                self.n_params(),
                v.len()
            ));
        }
        Ok(match self {
            CovModel::Identity(m) => CovModel::Identity(m.clone()),
            CovModel::Isotropic(m) => CovModel::Isotropic(Isotropic {
                dim: m.dim,
                log_var: v[0],
            }),
            CovModel::Diagonal(_) => CovModel::Diagonal(Diagonal {
                log_var: v.to_vec(),
            }),
            CovModel::FullRank(m) => CovModel::FullRank(FullRank::new(m.dim(), v)),
            CovModel::Ar1(m) => CovModel::Ar1(Ar1 {
                dim: m.dim,
                log_var: v[0],
                z: v[1],
            }),
            CovModel::SqExp(m) => CovModel::SqExp(SqExp::new(m.dim(), v[0], v[1])?),
            CovModel::LowRankPlus(m) => {
                let nb = m.base.n_params();
                let ni = m.inner.n_params();
                let base = m.base.with_params(&v[..nb])?;
                let inner = m.inner.with_params(&v[nb..nb + ni])?;
                let loadings = DMatrix::from_column_slice(
                    m.loadings.nrows(),
                    m.loadings.ncols(),
                    &v[nb + ni..],
                );
                CovModel::LowRankPlus(Box::new(LowRankPlus::new(
                    base,
                    m.design.clone(),
                    inner,
                    loadings,
                )?))
            }
            CovModel::Kron(m) => {
                let mut off = 0;
                let mut factors = Vec::with_capacity(m.factors.len());
                for f in &m.factors {
                    let n = f.n_params();
                    factors.push(f.with_params(&v[off..off + n])?);
                    off += n;
                }
                CovModel::Kron(KronCov::new(factors, m.mask.clone())?)
            }
            CovModel::BlockScaled(m) => {
                let nb = m.blocks() - 1;
                let mut log_prec = vec![0.0];
                log_prec.extend_from_slice(&v[..nb]);
                CovModel::BlockScaled(Box::new(BlockScaled {
                    log_prec,
                    base: m.base.with_params(&v[nb..])?,
                }))
            }
        })
    }

    /// Whether `Σ` is diagonal for every parameter value.
    pub fn is_diagonal_family(&self) -> bool {
        matches!(
            self,
            CovModel::Identity(_) | CovModel::Isotropic(_) | CovModel::Diagonal(_)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn identity_examples() {
        let m = make_cov(&CovSpec::Identity { dim: 5 }).unwrap();
        assert_eq!(m.n_params(), 0);
        assert_eq!(m.logdet().unwrap(), 0.0);
        let x = DMatrix::from_element(5, 2, 3.0);
        assert_eq!(m.solve(&x).unwrap(), x);
        assert_eq!(m.with_params(&[]).unwrap().params().len(), 0);
        assert!(m.dsigma_apply(0, &x).is_err());
    }

    #[test]
    fn ar1_default_is_identity() {
        let m = make_cov(&CovSpec::Ar1 { dim: 4 }).unwrap();
        assert!((m.dense() - DMatrix::<f64>::identity(4, 4)).amax() < 1e-15);
    }

    #[test]
    fn diagonal_solve_divides() {
        let m = CovModel::Diagonal(Diagonal::from_variances(&[1.0, 4.0]).unwrap());
        let x = m.solve(&DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 0.25]);
    }

    #[test]
    fn isotropic_logdet_and_dsigma() {
        let m = make_cov(&CovSpec::Isotropic { dim: 3 })
            .unwrap()
            .with_params(&[2f64.ln()])
            .unwrap();
        assert!((m.logdet().unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
        let x = DMatrix::from_element(3, 2, 1.5);
        assert!((m.dsigma_apply(0, &x).unwrap() - &x * 2.0).amax() < 1e-12);
    }

    #[test]
    fn diagonal_dsigma_scales_one_row() {
        let m = make_cov(&CovSpec::Diagonal { dim: 3 })
            .unwrap()
            .with_params(&[0.1, 0.2, 0.3])
            .unwrap();
        let x = DMatrix::from_element(3, 2, 1.0);
        let d = m.dsigma_apply(1, &x).unwrap();
        assert_eq!(d.row(0).amax(), 0.0);
        assert_eq!(d.row(2).amax(), 0.0);
        assert!((d[(1, 0)] - 0.2f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn full_rank_zero_params_is_identity() {
        let m = make_cov(&CovSpec::FullRank { dim: 2 }).unwrap();
        assert_eq!(m.params().len(), 3);
        assert!((m.dense() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn full_rank_params_for_round_trips() {
        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let p = FullRank::params_for(&sigma).unwrap();
        let m = make_cov(&CovSpec::FullRank { dim: 2 })
            .unwrap()
            .with_params(p.as_slice())
            .unwrap();
        assert!((m.dense() - sigma).amax() < 1e-12);
    }

    #[test]
    fn ar1_closed_form_logdet_matches_dense() {
        let m = CovModel::Ar1(Ar1::from_values(5, 1.0, 0.5).unwrap());
        let dense = m.dense();
        assert!((dense[(0, 2)] - 0.25).abs() < 1e-15);
        let ld = dense.clone().cholesky().unwrap();
        assert!((m.logdet().unwrap() - chol_logdet(&ld)).abs() < 1e-10);
    }

    #[test]
    fn ar1_random_params_are_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = make_cov(&CovSpec::Ar1 { dim: 7 }).unwrap();
        for _ in 0..50 {
            let v = [rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0];
            let d = m.with_params(&v).unwrap().dense();
            assert!(d.clone().cholesky().is_some());
            assert!((&d - d.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn wrong_param_length_is_rejected() {
        let m = make_cov(&CovSpec::Ar1 { dim: 3 }).unwrap();
        assert!(matches!(m.with_params(&[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn lowrank_rejects_mismatched_design() {
        let spec = CovSpec::LowrankPlus {
            base: Box::new(CovSpec::Ar1 { dim: 4 }),
            design: vec![vec![1.0]; 3],
            inner: None,
            rank: 1,
            seed: 0,
        };
        assert!(make_cov(&spec).is_err());
    }

    #[test]
    fn kron_materializes_as_kronecker_product() {
        let spec = CovSpec::Kron {
            factors: vec![CovSpec::Diagonal { dim: 3 }, CovSpec::Ar1 { dim: 4 }],
            mask: None,
        };
        let m = make_cov(&spec).unwrap().with_params(&[0.1, -0.3, 0.5, 0.2, 0.7]).unwrap();
        assert_eq!(m.dim(), 12);
        let CovModel::Kron(k) = &m else { unreachable!() };
        let expected = k.factors()[0].dense().kronecker(&k.factors()[1].dense());
        assert!((m.dense() - expected).amax() < 1e-12);
    }

    #[test]
    fn block_scaled_anchors_first_block() {
        let base = make_cov(&CovSpec::Diagonal { dim: 2 }).unwrap();
        assert!(BlockScaled::new(base.clone(), &[2.0, 1.0]).is_err());
        let b = BlockScaled::new(base, &[1.0, 4.0, 0.5]).unwrap();
        assert_eq!(b.n_params(), 2 + 2);
        let d = b.dense();
        assert!((d[(2, 2)] - 0.25).abs() < 1e-15);
        assert!((d[(4, 4)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sq_exp_carries_jitter() {
        let m = make_cov(&CovSpec::SqExp { dim: 3 }).unwrap();
        let d = m.dense();
        assert!((d[(0, 0)] - (1.0 + SQ_EXP_JITTER)).abs() < 1e-15);
        assert!((d[(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn lowrank_trace_grad_lowrank_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_matrix(6, 2, &mut rng);
        let spec = CovSpec::lowrank_plus(CovSpec::Ar1 { dim: 6 }, &f, None, 2, 3);
        let m0 = make_cov(&spec).unwrap();
        let p0: Vec<f64> = (0..m0.n_params()).map(|_| rng.random::<f64>() - 0.5).collect();
        let m = m0.with_params(&p0).unwrap();
        let p = rand_matrix(6, 3, &mut rng);
        let q = rand_matrix(6, 3, &mut rng);
        let fast = m.trace_grad_lowrank(-1.7, &p, &q).unwrap();
        let g = symmetrize(&(m.solve(&eye(6)).unwrap() * -1.7 + &p * q.transpose()));
        let slow = m.trace_grad(&g);
        assert!((fast - slow).amax() < 1e-10);
    }
}
