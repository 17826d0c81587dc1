//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `|a − b| / max(|a|, |b|, 1e-7)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Fourth-order central difference of `f` at 0.
pub fn five_point_derivative(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let (a, b, c, d) = (f(2.0 * h), f(h), f(-h), f(-2.0 * h));
    (-a + 8.0 * b - 8.0 * c + d) / (12.0 * h)
}

/// Projector onto the top-`k` eigenvectors of the population covariance of
/// `n × dim` row-major `data`, from nalgebra's symmetric eigensolver.
pub fn covariance_projector(data: &[f64], n: usize, dim: usize, k: usize) -> DMatrix<f64> {
    let x = DMatrix::from_row_slice(n, dim, data);
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut p = DMatrix::zeros(dim, dim);
    for &j in &order[..k] {
        let v = eig.eigenvectors.column(j);
        p += v * v.transpose();
    }
    p
}

/// Projector `B Bᵀ` for a `dim × k` row-major basis.
pub fn projector_from_basis(basis: &[f64], dim: usize, k: usize) -> DMatrix<f64> {
    let b = DMatrix::from_row_slice(dim, k, basis);
    &b * b.transpose()
}

/// Two-tailed Student-t p-value by numeric integration. With `t = √ν tan θ`
/// the density becomes `Γ((ν+1)/2) / (√π Γ(ν/2)) · cos^{ν−1} θ`, which is
/// smooth on `[0, π/2]` and integrated with composite Simpson.
pub fn t_two_tailed_by_quadrature(t: f64, df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let scale =
        (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / std::f64::consts::PI.sqrt();
    let lo = (t.abs() / df.sqrt()).atan();
    let hi = std::f64::consts::FRAC_PI_2;
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let f = |th: f64| th.cos().max(0.0).powf(df - 1.0);
    let mut sum = f(lo) + f(hi);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    (2.0 * scale * sum * h / 3.0).min(1.0)
}

/// MNIST directory: `QDISTILL_DATA_ROOT` or the bundled subset.
pub fn mnist_root() -> PathBuf {
    std::env::var_os("QDISTILL_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Writes an IDX image/label pair, gzipped when `gz` is set.
pub fn write_idx(
    dir: &std::path::Path,
    prefix: &str,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
    gz: bool,
) {
    use std::io::Write;
    let mut img = vec![0, 0, 8, 3];
    for d in [labels.len(), rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    for (stem, bytes) in [("images-idx3-ubyte", img), ("labels-idx1-ubyte", lab)] {
        let name = format!("{prefix}-{stem}");
        if gz {
            let f = std::fs::File::create(dir.join(format!("{name}.gz"))).unwrap();
            let mut e = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
            e.write_all(&bytes).unwrap();
            e.finish().unwrap();
        } else {
            std::fs::write(dir.join(name), bytes).unwrap();
        }
    }
}

/// A 28×28, ten-class MNIST-layout directory where each class lights up
/// its own patch on a noisy background.
pub fn write_synthetic_mnist(
    dir: &std::path::Path,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |per_class: usize| {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * 10 {
            let class = i % 10;
            let (r0, c0) = (3 + (class / 5) * 12, 2 + (class % 5) * 5);
            for r in 0..28 {
                for c in 0..28 {
                    let lit = (r0..r0 + 8).contains(&r) && (c0..c0 + 4).contains(&c);
                    let base: u8 = if lit { 200 } else { 0 };
                    pixels.push(base.saturating_add(rng.random_range(0..50)));
                }
            }
            labels.push(class as u8);
        }
        (pixels, labels)
    };
    let (p, l) = make(train_per_class);
    write_idx(dir, "train", 28, 28, &p, &l, true);
    let (p, l) = make(test_per_class);
    write_idx(dir, "t10k", 28, 28, &p, &l, false);
}

/// `n × dim` rows from a random linear mix of scaled uniform factors.
pub fn correlated_data(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mix: Vec<f64> = (0..dim * dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let scales: Vec<f64> = (0..dim).map(|j| 3.0 / (1.0 + j as f64)).collect();
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let z: Vec<f64> = scales
            .iter()
            .map(|s| s * rng.random_range(-1.0..1.0))
            .collect();
        for r in 0..dim {
            out.push((0..dim).map(|c| mix[r * dim + c] * z[c]).sum::<f64>() + 0.5);
        }
    }
    out
}
