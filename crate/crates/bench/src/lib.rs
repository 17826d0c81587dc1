//! Deterministic inputs shared by the benchmarks.

use qdistill::qsim::Statevector;

/// Angles spread over `[-π, π)` without an RNG.
pub fn angles(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as f64 * 0.618_033_988_7).fract() * 2.0 - 1.0) * std::f64::consts::PI)
        .collect()
}

/// Normalized real statevector with varied amplitudes.
pub fn state(qubits: usize) -> Statevector {
    let raw: Vec<f64> = (0..1usize << qubits)
        .map(|i| 1.0 + (i as f64 * 0.37).sin())
        .collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    Statevector::from_amplitudes(raw.iter().map(|x| (x / norm).into()).collect())
        .expect("normalized")
}

/// Pseudo-image values in `[0, 1)`.
pub fn pixels(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.754_877_666).fract()).collect()
}
