use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 12;

/// Tolerance on `|‖ψ‖² − 1|` for externally supplied amplitudes.
pub const NORM_TOLERANCE: f64 = 1e-10;

/// Pure state of a `num_qubits` register.
///
/// Qubit 0 is the most significant bit of the basis index, so for two
/// qubits the amplitude at index `0b10` belongs to `|1⟩ ⊗ |0⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    num_qubits: usize,
    amplitudes: Vec<Complex64>,
}

pub(crate) fn check_qubits(num_qubits: usize) -> Result<()> {
    if num_qubits == 0 || num_qubits > MAX_QUBITS {
        return Err(Error::Config(format!(
            "number of qubits must be in 1..={MAX_QUBITS}, got {num_qubits}"
        )));
    }
    Ok(())
}

impl Statevector {
    /// `|0…0⟩`.
    pub fn zero(num_qubits: usize) -> Result<Self> {
        Self::basis(num_qubits, 0)
    }

    /// Computational basis state `|index⟩`.
    pub fn basis(num_qubits: usize, index: usize) -> Result<Self> {
        check_qubits(num_qubits)?;
        let dim = 1usize << num_qubits;
        if index >= dim {
            return Err(Error::Range(format!(
                "basis index {index} out of range for {num_qubits} qubits"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); dim];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(Self {
            num_qubits,
            amplitudes,
        })
    }

    /// Wraps amplitudes that are already normalized.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let dim = amplitudes.len();
        if dim < 2 || !dim.is_power_of_two() {
            return Err(Error::Shape(format!(
                "amplitude vector length {dim} is not a power of two >= 2"
            )));
        }
        let num_qubits = dim.trailing_zeros() as usize;
        check_qubits(num_qubits)?;
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Structural(format!(
                "state norm² is {norm}, expected 1"
            )));
        }
        Ok(Self {
            num_qubits,
            amplitudes,
        })
    }

    /// Real amplitudes, normalized here. Used by the encoders.
    pub(crate) fn from_real_normalized(num_qubits: usize, values: &[f64]) -> Self {
        debug_assert_eq!(values.len(), 1 << num_qubits);
        Self {
            num_qubits,
            amplitudes: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub(crate) fn from_raw(num_qubits: usize, amplitudes: Vec<Complex64>) -> Self {
        debug_assert_eq!(amplitudes.len(), 1 << num_qubits);
        Self {
            num_qubits,
            amplitudes,
        }
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// `|c_i|²` for every basis state.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Bit mask of `qubit` inside a basis index.
    pub fn qubit_mask(&self, qubit: usize) -> usize {
        qubit_mask(self.num_qubits, qubit)
    }
}

#[inline]
pub(crate) fn qubit_mask(num_qubits: usize, qubit: usize) -> usize {
    1usize << (num_qubits - 1 - qubit)
}

/// Pauli-Z eigenvalue of `qubit` in basis state `index`.
#[inline]
pub fn z_sign(num_qubits: usize, qubit: usize, index: usize) -> f64 {
    if index & qubit_mask(num_qubits, qubit) == 0 {
        1.0
    } else {
        -1.0
    }
}
