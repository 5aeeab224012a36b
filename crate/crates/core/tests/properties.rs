use mnkit::io::{decode_binary, decode_csv, encode_binary, encode_csv};
use mnkit::kron::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn tri(n: usize, vals: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => 0.5 + vals[i * n + j].abs(),
        std::cmp::Ordering::Greater => 0.3 * vals[i * n + j],
        std::cmp::Ordering::Less => 0.0,
    })
}

fn factors_strategy() -> impl Strategy<Value = Vec<DMatrix<f64>>> {
    prop::collection::vec(1usize..=4, 1..=3).prop_flat_map(|dims| {
        let sizes: Vec<usize> = dims.iter().map(|d| d * d).collect();
        sizes
            .iter()
            .map(|&s| prop::collection::vec(-1.0f64..1.0, s))
            .collect::<Vec<_>>()
            .prop_map(move |vals| dims.iter().zip(&vals).map(|(&d, v)| tri(d, v)).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solve_inverts_the_product(factors in factors_strategy(), seed in any::<u64>()) {
        let list = TriFactorList::new(factors.clone()).unwrap();
        let n = list.full_dim();
        let x = DVector::from_fn(n, |i, _| ((seed >> (i % 60)) & 7) as f64 - 3.5);
        let y = kron_dense(&factors) * &x;
        let back = kron_tri_solve(&list, &y).unwrap();
        prop_assert!((back - &x).amax() < 1e-9 * (1.0 + x.amax()));
    }

    #[test]
    fn logdet_is_additive_over_factors(factors in factors_strategy()) {
        let list = TriFactorList::new(factors.clone()).unwrap();
        let n = list.full_dim() as f64;
        let expected: f64 = factors
            .iter()
            .map(|f| {
                let d = f.nrows() as f64;
                2.0 * (n / d) * f.diagonal().iter().map(|x| x.ln()).sum::<f64>()
            })
            .sum();
        prop_assert!((kron_logdet(&list, None).unwrap() - expected).abs() < 1e-10 * (1.0 + expected.abs()));
    }

    #[test]
    fn embed_then_restrict_is_identity(keep in prop::collection::vec(any::<bool>(), 1..40)) {
        prop_assume!(keep.iter().any(|&k| k));
        let mask = KronMask::new(keep).unwrap();
        let y: Vec<f64> = (0..mask.kept_count()).map(|i| i as f64 + 0.5).collect();
        prop_assert_eq!(mask.restrict(&mask.embed(&y)), y);
    }

    #[test]
    fn binary_round_trip_is_bit_exact(
        rows in 1usize..12,
        cols in 1usize..12,
        bits in prop::collection::vec(any::<u64>(), 144),
    ) {
        let m = DMatrix::from_fn(rows, cols, |i, j| f64::from_bits(bits[i * cols + j]));
        let back = decode_binary(&encode_binary(&m)).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn csv_round_trip_is_exact_for_finite_values(
        rows in 1usize..8,
        cols in 1usize..8,
        vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 64),
    ) {
        let m = DMatrix::from_fn(rows, cols, |i, j| vals[i * cols + j]);
        prop_assert_eq!(decode_csv(&encode_csv(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn truncated_binary_is_rejected(rows in 1usize..6, cols in 1usize..6, cut in 0usize..1000) {
        let bytes = encode_binary(&DMatrix::from_element(rows, cols, 1.0));
        let cut = cut % bytes.len();
        prop_assert!(decode_binary(&bytes[..cut]).is_err());
    }
}
