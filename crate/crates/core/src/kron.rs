//! Triangular solves and log-determinants for Kronecker products of
//! lower-triangular factors, `L = L_0 ⊗ L_1 ⊗ … ⊗ L_{n-1}`.
//!
//! The leftmost factor indexes the outermost (slowest-varying) block of the
//! full vector, so the full index of the multi-index `(i_0, …, i_{n-1})` is
//! `((i_0·d_1 + i_1)·d_2 + i_2)…`.
//!
//! Masked variants operate on the principal submatrix `L[K, K]` of the full
//! Kronecker product, where `K` is the set of kept indices. Since a principal
//! submatrix of a lower-triangular matrix is itself lower triangular, the
//! masked solve and log-determinant are exact for any mask.

use nalgebra::{DMatrix, DVector};

use crate::error::{input, Error, Result};

/// Non-empty ordered list of square lower-triangular factors with strictly
/// positive diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct TriFactorList {
    factors: Vec<DMatrix<f64>>,
}

impl TriFactorList {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return input("kron: factor list is empty");
        }
        for (f, l) in factors.iter().enumerate() {
            if !l.is_square() || l.nrows() == 0 {
                return input(format!(
                    "kron: factor {f} is {}x{}, expected non-empty square",
                    l.nrows(),
                    l.ncols()
                ));
            }
            for i in 0..l.nrows() {
                let d = l[(i, i)];
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::SingularFactor(format!(
                        "kron: factor {f} has diagonal entry {d} at {i}"
                    )));
                }
                for j in i + 1..l.ncols() {
                    if l[(i, j)] != 0.0 {
                        return input(format!(
                            "kron: factor {f} is not lower triangular at ({i}, {j})"
                        ));
                    }
                }
            }
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|l| l.nrows()).collect()
    }

    /// Product of the factor dimensions.
    pub fn full_dim(&self) -> usize {
        self.factors.iter().map(|l| l.nrows()).product()
    }

    /// Dense `L_0 ⊗ … ⊗ L_{n-1}`. Intended for tests and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        kron_dense(&self.factors)
    }
}

/// Boolean keep-mask over the full Kronecker index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KronMask {
    keep: Vec<bool>,
    kept_count: usize,
}

impl KronMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        let kept_count = keep.iter().filter(|&&k| k).count();
        if kept_count == 0 {
            return input("kron: mask keeps no entries");
        }
        Ok(Self { keep, kept_count })
    }

    pub fn all(n: usize) -> Result<Self> {
        Self::new(vec![true; n])
    }

    /// Mask formed as the Kronecker product of per-factor masks.
    pub fn from_factor_masks(masks: &[Vec<bool>]) -> Result<Self> {
        let mut keep = vec![true];
        for m in masks {
            keep = keep
                .iter()
                .flat_map(|&a| m.iter().map(move |&b| a && b))
                .collect();
        }
        Self::new(keep)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    /// Indices of the kept entries, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    /// Scatter a kept-length vector into a full-length one with zeros at
    /// masked positions.
    pub fn embed(&self, y: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.keep.len()];
        let mut it = y.iter();
        for (slot, &k) in full.iter_mut().zip(&self.keep) {
            if k {
                *slot = *it.next().expect("embed: short input");
            }
        }
        full
    }

    /// Gather the kept entries of a full-length vector.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        full.iter()
            .zip(&self.keep)
            .filter_map(|(&v, &k)| k.then_some(v))
            .collect()
    }
}

/// Solve `(L_0 ⊗ … ⊗ L_{n-1}) x = y`.
pub fn kron_tri_solve(factors: &TriFactorList, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = factors.full_dim();
    if y.len() != n {
        return input(format!(
            "kron_tri_solve: y has length {}, expected {n}",
            y.len()
        ));
    }
    let mut x = y.as_slice().to_vec();
    solve_rec(factors.factors(), &mut x);
    Ok(DVector::from_vec(x))
}

fn solve_rec(factors: &[DMatrix<f64>], x: &mut [f64]) {
    let l0 = &factors[0];
    if factors.len() == 1 {
        tri_solve_in_place(l0, x, None, false);
        return;
    }
    let rest = &factors[1..];
    let na = l0.nrows();
    let nb = x.len() / na;
    let mut t = vec![0.0; nb];
    for i in 0..na {
        let d = l0[(i, i)];
        for (tk, xk) in t.iter_mut().zip(&x[i * nb..(i + 1) * nb]) {
            *tk = xk / d;
        }
        let block = &mut x[i * nb..(i + 1) * nb];
        block.copy_from_slice(&t);
        solve_rec(rest, block);
        for j in i + 1..na {
            let c = l0[(j, i)];
            if c != 0.0 {
                for (xk, tk) in x[j * nb..(j + 1) * nb].iter_mut().zip(&t) {
                    *xk -= c * tk;
                }
            }
        }
    }
}

/// Solve the masked system `L[K, K] x = y` where `K` is the kept index set.
pub fn kron_tri_solve_masked(
    factors: &TriFactorList,
    mask: &KronMask,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_mask(factors, mask)?;
    if y.len() != mask.kept_count() {
        return input(format!(
            "kron_tri_solve_masked: y has length {}, expected {}",
            y.len(),
            mask.kept_count()
        ));
    }
    let mut full = mask.embed(y.as_slice());
    masked_solve_rec(factors.factors(), mask.keep(), &mut full, false);
    Ok(DVector::from_vec(mask.restrict(&full)))
}

/// Solve the masked transposed system `(L[K, K])ᵀ x = y`.
pub(crate) fn kron_tri_solve_masked_transpose(
    factors: &TriFactorList,
    mask: &KronMask,
    y: &[f64],
) -> Vec<f64> {
    let mut full = mask.embed(y);
    masked_solve_rec(factors.factors(), mask.keep(), &mut full, true);
    mask.restrict(&full)
}

/// Entry `(row, col)` of a factor, or of its transpose.
#[inline]
fn entry(l: &DMatrix<f64>, row: usize, col: usize, transpose: bool) -> f64 {
    if transpose {
        l[(col, row)]
    } else {
        l[(row, col)]
    }
}

/// Forward (or, for the transpose, backward) substitution restricted to the
/// kept indices. Masked positions of `x` are set to zero.
fn tri_solve_in_place(l: &DMatrix<f64>, x: &mut [f64], keep: Option<&[bool]>, transpose: bool) {
    let n = l.nrows();
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let order: Box<dyn Iterator<Item = usize>> = if transpose {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for i in order {
        if !kept(i) {
            x[i] = 0.0;
            continue;
        }
        let mut s = x[i];
        if transpose {
            for j in i + 1..n {
                s -= l[(j, i)] * x[j];
            }
        } else {
            for j in 0..i {
                s -= l[(i, j)] * x[j];
            }
        }
        x[i] = s / l[(i, i)];
    }
}

fn masked_solve_rec(factors: &[DMatrix<f64>], keep: &[bool], x: &mut [f64], transpose: bool) {
    let l0 = &factors[0];
    if factors.len() == 1 {
        tri_solve_in_place(l0, x, Some(keep), transpose);
        return;
    }
    let rest = &factors[1..];
    let na = l0.nrows();
    let nb = x.len() / na;
    let order: Vec<usize> = if transpose {
        (0..na).rev().collect()
    } else {
        (0..na).collect()
    };
    for (pos, &i) in order.iter().enumerate() {
        let bmask = &keep[i * nb..(i + 1) * nb];
        let block = &mut x[i * nb..(i + 1) * nb];
        if !bmask.iter().any(|&k| k) {
            block.fill(0.0);
            continue;
        }
        let d = l0[(i, i)];
        for v in block.iter_mut() {
            *v /= d;
        }
        masked_solve_rec(rest, bmask, block, transpose);
        // t' = (L_1 ⊗ … ⊗ L_{n-1}) · x_i, evaluated with the masked entries
        // of x_i at zero; equals t when nothing is masked.
        let t_prime = kron_matvec_slice(rest, block, transpose);
        for &j in &order[pos + 1..] {
            let c = entry(l0, j, i, transpose);
            if c == 0.0 {
                continue;
            }
            let jm = &keep[j * nb..(j + 1) * nb];
            for ((xk, tk), &k) in x[j * nb..(j + 1) * nb].iter_mut().zip(&t_prime).zip(jm) {
                if k {
                    *xk -= c * tk;
                }
            }
        }
    }
}

/// `(A_0 ⊗ … ⊗ A_{n-1}) · x` for square factors, or the transposed product.
pub(crate) fn kron_matvec_slice(factors: &[DMatrix<f64>], x: &[f64], transpose: bool) -> Vec<f64> {
    let a0 = &factors[0];
    let na = a0.nrows();
    if factors.len() == 1 {
        let mut y = vec![0.0; na];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (0..na).map(|l| entry(a0, i, l, transpose) * x[l]).sum();
        }
        return y;
    }
    let rest = &factors[1..];
    let nb = x.len() / na;
    let z: Vec<Vec<f64>> = (0..na)
        .map(|l| kron_matvec_slice(rest, &x[l * nb..(l + 1) * nb], transpose))
        .collect();
    let mut y = vec![0.0; x.len()];
    for i in 0..na {
        let yi = &mut y[i * nb..(i + 1) * nb];
        for (l, zl) in z.iter().enumerate() {
            let c = entry(a0, i, l, transpose);
            if c != 0.0 {
                for (a, b) in yi.iter_mut().zip(zl) {
                    *a += c * b;
                }
            }
        }
    }
    y
}

/// Log-determinant of `(L L^T)` restricted to the mask, i.e.
/// `2·log|L[K, K]|`. Without a mask this is
/// `2·Σ_i log|L_i|·Π_{j≠i} dim(L_j)`; with a mask each diagonal entry of
/// `L_i` is weighted by the number of kept full indices that sit on it.
pub fn kron_logdet(factors: &TriFactorList, mask: Option<&KronMask>) -> Result<f64> {
    for (f, l) in factors.factors().iter().enumerate() {
        for i in 0..l.nrows() {
            if !(l[(i, i)] > 0.0) {
                return Err(Error::SingularFactor(format!(
                    "kron_logdet: factor {f} diagonal {i} is {}",
                    l[(i, i)]
                )));
            }
        }
    }
    let dims = factors.dims();
    match mask {
        None => {
            let n: usize = dims.iter().product();
            let total = factors
                .factors()
                .iter()
                .zip(&dims)
                .map(|(l, &d)| {
                    let logdet_l: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
                    logdet_l * (n / d) as f64
                })
                .sum::<f64>();
            Ok(2.0 * total)
        }
        Some(mask) => {
            check_mask(factors, mask)?;
            let counts = kept_counts_per_factor(&dims, mask);
            let total = factors
                .factors()
                .iter()
                .zip(&counts)
                .map(|(l, c)| {
                    c.iter()
                        .enumerate()
                        .map(|(a, &n)| n as f64 * l[(a, a)].ln())
                        .sum::<f64>()
                })
                .sum::<f64>();
            Ok(2.0 * total)
        }
    }
}

/// For each factor `f` and each of its indices `a`, the number of kept full
/// indices whose `f`-th multi-index component equals `a`.
pub(crate) fn kept_counts_per_factor(dims: &[usize], mask: &KronMask) -> Vec<Vec<usize>> {
    let mut counts: Vec<Vec<usize>> = dims.iter().map(|&d| vec![0; d]).collect();
    for idx in mask.kept_indices() {
        let mut rem = idx;
        for f in (0..dims.len()).rev() {
            counts[f][rem % dims[f]] += 1;
            rem /= dims[f];
        }
    }
    counts
}

fn check_mask(factors: &TriFactorList, mask: &KronMask) -> Result<()> {
    if mask.len() != factors.full_dim() {
        return input(format!(
            "kron: mask has length {}, expected {}",
            mask.len(),
            factors.full_dim()
        ));
    }
    Ok(())
}

/// Dense Kronecker product of a list of matrices.
pub fn kron_dense(factors: &[DMatrix<f64>]) -> DMatrix<f64> {
    factors
        .iter()
        .skip(1)
        .fold(factors[0].clone(), |acc, f| acc.kronecker(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lower(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0 + rng.random::<f64>()
            } else if i > j {
                rng.random::<f64>() - 0.5
            } else {
                0.0
            }
        })
    }

    fn dense_solve(l: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        l.solve_lower_triangular(y).unwrap()
    }

    fn submatrix(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
    }

    #[test]
    fn identity_factors_return_input() {
        let f = TriFactorList::new(vec![DMatrix::identity(2, 2), DMatrix::identity(3, 3)]).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(kron_tri_solve(&f, &y).unwrap(), y);
    }

    #[test]
    fn scalar_factor_divides() {
        let f = TriFactorList::new(vec![DMatrix::from_element(1, 1, 2.0)]).unwrap();
        let x = kron_tri_solve(&f, &DVector::from_element(1, 6.0)).unwrap();
        assert_eq!(x[0], 3.0);
    }

    #[test]
    fn two_factor_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_lower(3, &mut rng);
        let b = random_lower(4, &mut rng);
        let f = TriFactorList::new(vec![a, b]).unwrap();
        let y = DVector::from_fn(12, |_, _| rng.random::<f64>() - 0.5);
        let x = kron_tri_solve(&f, &y).unwrap();
        let dense = f.to_dense();
        let resid = (&dense * &x - &y).norm() / y.norm();
        assert!(resid < 1e-10, "residual {resid}");
        let x_ref = dense_solve(&dense, &y);
        assert!((x - x_ref).norm() < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(TriFactorList::new(vec![]), Err(Error::Input(_))));
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.0]);
        assert!(matches!(
            TriFactorList::new(vec![z]),
            Err(Error::SingularFactor(_))
        ));
        let f = TriFactorList::new(vec![DMatrix::identity(2, 2)]).unwrap();
        assert!(kron_tri_solve(&f, &DVector::zeros(3)).is_err());
        assert!(KronMask::new(vec![false, false]).is_err());
        let m = KronMask::all(3).unwrap();
        assert!(kron_tri_solve_masked(&f, &m, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn all_true_mask_matches_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = TriFactorList::new(vec![
            random_lower(2, &mut rng),
            random_lower(3, &mut rng),
            random_lower(2, &mut rng),
        ])
        .unwrap();
        let y = DVector::from_fn(12, |_, _| rng.random::<f64>());
        let a = kron_tri_solve(&f, &y).unwrap();
        let b = kron_tri_solve_masked(&f, &KronMask::all(12).unwrap(), &y).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn single_factor_masked_is_submatrix_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random_lower(5, &mut rng);
        let f = TriFactorList::new(vec![l.clone()]).unwrap();
        let mask = KronMask::new(vec![true, true, false, true, true]).unwrap();
        let y = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let x = kron_tri_solve_masked(&f, &mask, &y).unwrap();
        let sub = submatrix(&l, &mask.kept_indices());
        assert!((x - dense_solve(&sub, &y)).amax() < 1e-12);
    }

    #[test]
    fn general_mask_matches_triangular_submatrix() {
        // A mask that is not a Kronecker product of per-factor masks.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = TriFactorList::new(vec![random_lower(3, &mut rng), random_lower(2, &mut rng)])
            .unwrap();
        let mask = KronMask::new(vec![true, false, true, true, false, true]).unwrap();
        let y = DVector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
        let x = kron_tri_solve_masked(&f, &mask, &y).unwrap();
        let sub = submatrix(&f.to_dense(), &mask.kept_indices());
        assert!((x - dense_solve(&sub, &y)).amax() < 1e-10);
    }

    #[test]
    fn masked_transpose_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = TriFactorList::new(vec![random_lower(3, &mut rng), random_lower(3, &mut rng)])
            .unwrap();
        let keep: Vec<bool> = (0..9).map(|i| i % 4 != 1).collect();
        let mask = KronMask::new(keep).unwrap();
        let y: Vec<f64> = (0..mask.kept_count()).map(|i| i as f64 - 2.0).collect();
        let x = kron_tri_solve_masked_transpose(&f, &mask, &y);
        let sub = submatrix(&f.to_dense(), &mask.kept_indices()).transpose();
        let x_ref = sub.solve_upper_triangular(&DVector::from_vec(y)).unwrap();
        assert!((DVector::from_vec(x) - x_ref).amax() < 1e-10);
    }

    #[test]
    fn logdet_examples() {
        let f = TriFactorList::new(vec![DMatrix::identity(3, 3), DMatrix::identity(4, 4)]).unwrap();
        assert_eq!(kron_logdet(&f, None).unwrap(), 0.0);
        let s2 = DMatrix::identity(2, 2) * 2f64.sqrt();
        let f = TriFactorList::new(vec![s2, DMatrix::identity(3, 3)]).unwrap();
        let ld = kron_logdet(&f, None).unwrap();
        assert!((ld - 3.0 * 4f64.ln()).abs() < 1e-12);
        let dense = f.to_dense();
        let dense_ld = (&dense * dense.transpose()).determinant().ln();
        assert!((ld - dense_ld).abs() < 1e-10);
    }

    #[test]
    fn masked_logdet_matches_dense_submatrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = TriFactorList::new(vec![random_lower(3, &mut rng), random_lower(4, &mut rng)])
            .unwrap();
        let mask =
            KronMask::from_factor_masks(&[vec![true, false, true], vec![true, true, false, true]])
                .unwrap();
        assert_eq!(mask.kept_count(), 6);
        let sub = submatrix(&f.to_dense(), &mask.kept_indices());
        let dense_ld = 2.0 * sub.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ld = kron_logdet(&f, Some(&mask)).unwrap();
        assert!((ld - dense_ld).abs() < 1e-10);
    }
}
