//! Gradients of a loss that depends on the measured circuit output.
//!
//! Both engines take a *diagonal observable* `h`: the loss is linearized as
//! `Σ_i h_i |ψ_i|²` around the current output. For per-qubit expectation
//! cotangents `g`, `h_i = Σ_q g_q z_q(i)`; for basis-probability cotangents
//! `h` is the cotangent itself.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;

use super::circuit::{apply_op_in_place, check_register, run_circuit, CircuitSpec, GateKind};
use super::state::{qubit_mask, z_sign, Statevector};
use crate::error::{Error, Result};

/// Output of the adjoint engine.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradient {
    pub param_grads: Vec<f64>,
    /// `∂L/∂Re ψ_k + i ∂L/∂Im ψ_k` for every input amplitude.
    pub input_grads: Vec<Complex64>,
}

/// Diagonal observable `Σ_q g_q Z_q`.
pub fn expectation_observable(num_qubits: usize, cotangent: &[f64]) -> Result<Vec<f64>> {
    if cotangent.len() != num_qubits {
        return Err(Error::Shape(format!(
            "expected {num_qubits} expectation cotangents, got {}",
            cotangent.len()
        )));
    }
    Ok((0..1usize << num_qubits)
        .map(|i| {
            cotangent
                .iter()
                .enumerate()
                .map(|(q, g)| g * z_sign(num_qubits, q, i))
                .sum()
        })
        .collect())
}

fn check_observable(spec: &CircuitSpec, observable: &[f64]) -> Result<()> {
    if observable.len() != 1 << spec.num_qubits() {
        return Err(Error::Shape(format!(
            "observable has {} entries, register has {}",
            observable.len(),
            1usize << spec.num_qubits()
        )));
    }
    Ok(())
}

fn observable_value(state: &Statevector, observable: &[f64]) -> f64 {
    state
        .amplitudes()
        .iter()
        .zip(observable)
        .map(|(a, h)| h * a.norm_sqr())
        .sum()
}

/// Shift rule for expectation cotangents: two circuit runs per parameter.
pub fn gradient_parameter_shift(
    spec: &CircuitSpec,
    params: &[f64],
    input: &Statevector,
    cost_cotangent: &[f64],
) -> Result<Vec<f64>> {
    let observable = expectation_observable(spec.num_qubits(), cost_cotangent)?;
    gradient_parameter_shift_diag(spec, params, input, &observable)
}

/// Shift rule `½[f(θ_j + π/2) − f(θ_j − π/2)]` for a diagonal observable.
pub fn gradient_parameter_shift_diag(
    spec: &CircuitSpec,
    params: &[f64],
    input: &Statevector,
    observable: &[f64],
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_register(spec, input)?;
    check_observable(spec, observable)?;
    let mut shifted = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        shifted[j] = params[j] + FRAC_PI_2;
        let plus = observable_value(&run_circuit(spec, &shifted, input)?, observable);
        shifted[j] = params[j] - FRAC_PI_2;
        let minus = observable_value(&run_circuit(spec, &shifted, input)?, observable);
        shifted[j] = params[j];
        grads.push(0.5 * (plus - minus));
    }
    Ok(grads)
}

/// Reverse-mode gradient for expectation cotangents.
pub fn gradient_adjoint(
    spec: &CircuitSpec,
    params: &[f64],
    input: &Statevector,
    cost_cotangent: &[f64],
) -> Result<AdjointGradient> {
    let observable = expectation_observable(spec.num_qubits(), cost_cotangent)?;
    gradient_adjoint_diag(spec, params, input, &observable)
}

/// Reverse-mode gradient: one forward run, then a single backward sweep
/// carrying the state and the co-state `λ = H ψ` through inverse gates.
pub fn gradient_adjoint_diag(
    spec: &CircuitSpec,
    params: &[f64],
    input: &Statevector,
    observable: &[f64],
) -> Result<AdjointGradient> {
    let forward = run_circuit(spec, params, input)?;
    check_observable(spec, observable)?;
    let nq = spec.num_qubits();
    let mut psi = forward.into_amplitudes();
    let mut lambda: Vec<Complex64> = psi.iter().zip(observable).map(|(a, h)| a * h).collect();
    let mut param_grads = vec![0.0; params.len()];
    for op in spec.ops().iter().rev() {
        if let Some(p) = op.param_index {
            // d/dθ exp(-iθσ/2) = (-i/2) σ U, so ∂L/∂θ = 2 Re⟨λ|(-i/2)σ|ψ⟩ = Im⟨λ|σψ⟩.
            param_grads[p] += pauli_overlap(&lambda, &psi, nq, op.target, op.kind).im;
        }
        apply_op_in_place(&mut psi, nq, op, params, -1.0);
        apply_op_in_place(&mut lambda, nq, op, params, -1.0);
    }
    let input_grads = lambda.into_iter().map(|l| 2.0 * l).collect();
    Ok(AdjointGradient {
        param_grads,
        input_grads,
    })
}

/// `⟨λ|σ_axis(qubit)|ψ⟩`.
fn pauli_overlap(
    lambda: &[Complex64],
    psi: &[Complex64],
    nq: usize,
    qubit: usize,
    axis: GateKind,
) -> Complex64 {
    let mask = qubit_mask(nq, qubit);
    let i = Complex64::new(0.0, 1.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..psi.len() {
        let bit_set = k & mask != 0;
        let sigma_psi = match axis {
            GateKind::Rx => psi[k ^ mask],
            GateKind::Ry => {
                if bit_set {
                    i * psi[k ^ mask]
                } else {
                    -i * psi[k ^ mask]
                }
            }
            GateKind::Rz => {
                if bit_set {
                    -psi[k]
                } else {
                    psi[k]
                }
            }
            GateKind::Cnot => unreachable!("CNOT carries no parameter"),
        };
        acc += lambda[k].conj() * sigma_psi;
    }
    acc
}
