use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::state::{z_sign, Statevector};
use crate::error::{Error, Result};

/// Shots the reference toolchain takes per measurement by default.
pub const DEFAULT_SHOTS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementResult {
    /// Per-qubit `⟨Z⟩`.
    pub expectations: Vec<f64>,
    pub basis_probs: Vec<f64>,
    /// Zero for exact (analytic) results.
    pub shots_used: usize,
}

impl MeasurementResult {
    fn from_probs(num_qubits: usize, basis_probs: Vec<f64>, shots_used: usize) -> Self {
        let expectations = expectations_from_probs(num_qubits, &basis_probs);
        Self {
            expectations,
            basis_probs,
            shots_used,
        }
    }

    pub fn num_qubits(&self) -> usize {
        self.expectations.len()
    }
}

pub(crate) fn expectations_from_probs(num_qubits: usize, probs: &[f64]) -> Vec<f64> {
    (0..num_qubits)
        .map(|q| {
            probs
                .iter()
                .enumerate()
                .map(|(i, p)| z_sign(num_qubits, q, i) * p)
                .sum::<f64>()
                .clamp(-1.0, 1.0)
        })
        .collect()
}

/// Exact probabilities and Pauli-Z expectations.
pub fn measure_analytic(state: &Statevector) -> MeasurementResult {
    MeasurementResult::from_probs(state.num_qubits(), state.probabilities(), 0)
}

/// Estimates the outcome distribution from `shots` seeded draws.
///
/// `shots == 0` is a contract violation; call [`measure_analytic`] instead.
pub fn measure_shots(state: &Statevector, shots: usize, seed: u64) -> Result<MeasurementResult> {
    if shots == 0 {
        return Err(Error::Config(
            "shot sampling needs at least one shot; use analytic measurement for shots = 0".into(),
        ));
    }
    let probs = state.probabilities();
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    let mut counts = vec![0usize; probs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..shots {
        let u: f64 = rng.random::<f64>() * total;
        // First outcome whose cumulative mass exceeds u; zero-probability
        // outcomes can never be selected.
        let k = cdf.partition_point(|&c| c <= u).min(probs.len() - 1);
        counts[k] += 1;
    }
    let n = shots as f64;
    let empirical = counts.into_iter().map(|c| c as f64 / n).collect();
    Ok(MeasurementResult::from_probs(
        state.num_qubits(),
        empirical,
        shots,
    ))
}
