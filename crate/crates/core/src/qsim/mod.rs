//! Exact statevector simulation of parameterized circuits.

mod circuit;
mod gradient;
mod measure;
mod state;

pub use circuit::{apply_gate, build_student_circuit, run_circuit, CircuitSpec, GateKind, GateOp};
pub use gradient::{
    expectation_observable, gradient_adjoint, gradient_adjoint_diag, gradient_parameter_shift,
    gradient_parameter_shift_diag, AdjointGradient,
};
pub use measure::{measure_analytic, measure_shots, MeasurementResult, DEFAULT_SHOTS};
pub use state::{z_sign, Statevector, MAX_QUBITS, NORM_TOLERANCE};

pub(crate) use state::check_qubits;
