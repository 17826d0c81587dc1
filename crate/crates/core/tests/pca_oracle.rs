//! PCA against nalgebra's symmetric eigendecomposition.

mod common;

use proptest::prelude::*;
use qdistill::reduce::{pca_fit, pca_transform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn subspace_matches_brute_force_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n = rng.random_range(30..80);
        let data = common::correlated_data(n, 8, &mut rng);
        for k in [1, 3, 5] {
            let basis = pca_fit(&data, n, 8, k).unwrap();
            let ours = common::projector_from_basis(basis.basis(), 8, k);
            let oracle = common::covariance_projector(&data, n, 8, k);
            assert!((ours - oracle).abs().max() < 1e-8);
        }
    }
}

#[test]
fn transform_centers_and_projects() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = common::correlated_data(50, 6, &mut rng);
    let basis = pca_fit(&data, 50, 6, 6).unwrap();
    for row in data.chunks(6).take(5) {
        let z = pca_transform(row, &basis).unwrap();
        let back = basis.reconstruct(&z);
        for (a, b) in back.iter().zip(row) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert!((basis.explained_variance_ratio() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn components_are_orthonormal_and_sorted(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = common::correlated_data(40, 6, &mut rng);
        let basis = pca_fit(&data, 40, 6, k).unwrap();
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = basis.component(i).iter().zip(basis.component(j)).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - expect).abs() < 1e-10);
            }
        }
        prop_assert!(basis.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
    }
}
