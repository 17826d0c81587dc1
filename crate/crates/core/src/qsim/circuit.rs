use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::state::{check_qubits, qubit_mask, Statevector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    Rx,
    Ry,
    Rz,
    Cnot,
}

impl GateKind {
    pub fn is_rotation(self) -> bool {
        !matches!(self, GateKind::Cnot)
    }

    fn mnemonic(self) -> &'static str {
        match self {
            GateKind::Rx => "RX",
            GateKind::Ry => "RY",
            GateKind::Rz => "RZ",
            GateKind::Cnot => "CNOT",
        }
    }
}

/// One gate of a circuit. Rotations read their angle from the parameter
/// vector at `param_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateOp {
    pub kind: GateKind,
    pub target: usize,
    pub control: Option<usize>,
    pub param_index: Option<usize>,
}

impl GateOp {
    pub fn rotation(kind: GateKind, target: usize, param_index: usize) -> Self {
        debug_assert!(kind.is_rotation());
        Self {
            kind,
            target,
            control: None,
            param_index: Some(param_index),
        }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        Self {
            kind: GateKind::Cnot,
            target,
            control: Some(control),
            param_index: None,
        }
    }

    pub fn validate(&self, num_qubits: usize, num_params: usize) -> Result<()> {
        if self.target >= num_qubits {
            return Err(Error::Structural(format!(
                "{:?} target qubit {} out of range for {num_qubits} qubits",
                self.kind, self.target
            )));
        }
        match (self.kind, self.control, self.param_index) {
            (GateKind::Cnot, Some(c), None) => {
                if c >= num_qubits {
                    return Err(Error::Structural(format!(
                        "CNOT control qubit {c} out of range for {num_qubits} qubits"
                    )));
                }
                if c == self.target {
                    return Err(Error::Structural(format!(
                        "CNOT control and target are both qubit {c}"
                    )));
                }
            }
            (GateKind::Cnot, _, _) => {
                return Err(Error::Structural(
                    "CNOT needs a control and no parameter".into(),
                ))
            }
            (_, None, Some(p)) => {
                if p >= num_params {
                    return Err(Error::Structural(format!(
                        "parameter index {p} out of range for {num_params} parameters"
                    )));
                }
            }
            (kind, _, _) => {
                return Err(Error::Structural(format!(
                    "{kind:?} needs a parameter index and no control"
                )))
            }
        }
        Ok(())
    }
}

/// Ordered gate list acting on `num_qubits` with `num_params` trainable angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    num_qubits: usize,
    layers: usize,
    ops: Vec<GateOp>,
    num_params: usize,
}

/// Hardware-efficient student ansatz: per layer RX, RY, RZ on every qubit,
/// then a CNOT ring `i → (i+1) mod Q` (omitted for a single qubit).
pub fn build_student_circuit(num_qubits: usize, layers: usize) -> Result<CircuitSpec> {
    check_qubits(num_qubits)?;
    if layers == 0 {
        return Err(Error::Config("circuit needs at least one layer".into()));
    }
    let mut ops = Vec::with_capacity(layers * num_qubits * 4);
    let mut next_param = 0;
    for _ in 0..layers {
        for q in 0..num_qubits {
            for kind in [GateKind::Rx, GateKind::Ry, GateKind::Rz] {
                ops.push(GateOp::rotation(kind, q, next_param));
                next_param += 1;
            }
        }
        if num_qubits > 1 {
            for q in 0..num_qubits {
                ops.push(GateOp::cnot(q, (q + 1) % num_qubits));
            }
        }
    }
    Ok(CircuitSpec {
        num_qubits,
        layers,
        ops,
        num_params: next_param,
    })
}

impl CircuitSpec {
    /// Arbitrary gate list; parameter indices must cover `0..n` exactly.
    pub fn from_ops(num_qubits: usize, layers: usize, ops: Vec<GateOp>) -> Result<Self> {
        check_qubits(num_qubits)?;
        let mut seen: Vec<usize> = ops.iter().filter_map(|op| op.param_index).collect();
        let num_params = seen.len();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != num_params || seen.last().is_some_and(|&m| m + 1 != num_params) {
            return Err(Error::Structural(
                "parameter indices must form the contiguous range 0..num_params".into(),
            ));
        }
        for op in &ops {
            op.validate(num_qubits, num_params)?;
        }
        Ok(Self {
            num_qubits,
            layers,
            ops,
            num_params,
        })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn ops(&self) -> &[GateOp] {
        &self.ops
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Reversed gate list with negated angles; running it after `self`
    /// restores the input.
    pub fn inverse(&self, params: &[f64]) -> Result<(CircuitSpec, Vec<f64>)> {
        self.check_params(params)?;
        let spec = CircuitSpec {
            num_qubits: self.num_qubits,
            layers: self.layers,
            ops: self.ops.iter().rev().copied().collect(),
            num_params: self.num_params,
        };
        Ok((spec, params.iter().map(|p| -p).collect()))
    }

    pub(crate) fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::Structural(format!(
                "circuit has {} parameters, got {}",
                self.num_params,
                params.len()
            )));
        }
        Ok(())
    }

    /// Versioned line format: a header, then one op per line.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        text.parse()
    }
}

const CIRCUIT_HEADER: &str = "qdistill-circuit v1";

impl fmt::Display for CircuitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{CIRCUIT_HEADER}")?;
        writeln!(f, "qubits {}", self.num_qubits)?;
        writeln!(f, "layers {}", self.layers)?;
        writeln!(f, "params {}", self.num_params)?;
        for op in &self.ops {
            match (op.control, op.param_index) {
                (Some(c), _) => writeln!(f, "{} {} {} -", op.kind.mnemonic(), c, op.target)?,
                (None, Some(p)) => writeln!(f, "{} {} - {}", op.kind.mnemonic(), op.target, p)?,
                (None, None) => writeln!(f, "{} {} - -", op.kind.mnemonic(), op.target)?,
            }
        }
        Ok(())
    }
}

impl FromStr for CircuitSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| {
            Error::Structural(format!("circuit text line {}: {msg}", line + 1))
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == CIRCUIT_HEADER => {}
            _ => return Err(bad(0, "missing or unsupported header")),
        }
        let mut header_value = |key: &str| -> Result<usize> {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "truncated header"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(n, &format!("expected `{key}`")));
            }
            parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(n, &format!("bad `{key}` value")))
        };
        let num_qubits = header_value("qubits")?;
        let layers = header_value("layers")?;
        let num_params = header_value("params")?;
        let mut ops = Vec::new();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad(n, "expected `KIND q1 q2|- param|-`"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer field"));
            let op = match fields[0] {
                "CNOT" => GateOp::cnot(num(fields[1])?, num(fields[2])?),
                kind => {
                    let kind = match kind {
                        "RX" => GateKind::Rx,
                        "RY" => GateKind::Ry,
                        "RZ" => GateKind::Rz,
                        other => return Err(bad(n, &format!("unknown gate `{other}`"))),
                    };
                    GateOp::rotation(kind, num(fields[1])?, num(fields[3])?)
                }
            };
            ops.push(op);
        }
        let spec = CircuitSpec::from_ops(num_qubits, layers, ops)?;
        if spec.num_params != num_params {
            return Err(Error::Structural(format!(
                "header declares {num_params} parameters, ops use {}",
                spec.num_params
            )));
        }
        Ok(spec)
    }
}

pub(crate) type Mat2 = [[Complex64; 2]; 2];

/// `exp(-i θ σ / 2)` for the rotation axis of `kind`.
pub(crate) fn rotation_matrix(kind: GateKind, theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    let zero = Complex64::new(0.0, 0.0);
    match kind {
        GateKind::Rx => [
            [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
            [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
        ],
        GateKind::Ry => [
            [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
            [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
        ],
        GateKind::Rz => [[Complex64::new(c, -s), zero], [zero, Complex64::new(c, s)]],
        GateKind::Cnot => unreachable!("CNOT has no rotation matrix"),
    }
}

pub(crate) fn apply_single(amps: &mut [Complex64], num_qubits: usize, qubit: usize, m: &Mat2) {
    let stride = qubit_mask(num_qubits, qubit);
    for block in (0..amps.len()).step_by(2 * stride) {
        for i in block..block + stride {
            let a = amps[i];
            let b = amps[i + stride];
            amps[i] = m[0][0] * a + m[0][1] * b;
            amps[i + stride] = m[1][0] * a + m[1][1] * b;
        }
    }
}

pub(crate) fn apply_cnot(amps: &mut [Complex64], num_qubits: usize, control: usize, target: usize) {
    let cmask = qubit_mask(num_qubits, control);
    let tmask = qubit_mask(num_qubits, target);
    for i in 0..amps.len() {
        if i & cmask != 0 && i & tmask == 0 {
            amps.swap(i, i | tmask);
        }
    }
}

/// Applies an already validated gate in place. `sign = -1.0` applies the inverse.
pub(crate) fn apply_op_in_place(
    amps: &mut [Complex64],
    num_qubits: usize,
    op: &GateOp,
    params: &[f64],
    sign: f64,
) {
    match (op.kind, op.control, op.param_index) {
        (GateKind::Cnot, Some(c), _) => apply_cnot(amps, num_qubits, c, op.target),
        (kind, _, Some(p)) => {
            let m = rotation_matrix(kind, sign * params[p]);
            apply_single(amps, num_qubits, op.target, &m);
        }
        _ => unreachable!("gate validated before application"),
    }
}

pub fn apply_gate(state: &Statevector, gate: &GateOp, params: &[f64]) -> Result<Statevector> {
    gate.validate(state.num_qubits(), params.len())?;
    let mut out = state.clone();
    apply_op_in_place(out.amplitudes_mut(), state.num_qubits(), gate, params, 1.0);
    Ok(out)
}

/// `U(θ)|input⟩` with the ops applied in order.
pub fn run_circuit(spec: &CircuitSpec, params: &[f64], input: &Statevector) -> Result<Statevector> {
    spec.check_params(params)?;
    check_register(spec, input)?;
    let mut out = input.clone();
    for op in &spec.ops {
        apply_op_in_place(out.amplitudes_mut(), spec.num_qubits, op, params, 1.0);
    }
    Ok(out)
}

pub(crate) fn check_register(spec: &CircuitSpec, state: &Statevector) -> Result<()> {
    if state.num_qubits() != spec.num_qubits {
        return Err(Error::Structural(format!(
            "circuit acts on {} qubits, state has {}",
            spec.num_qubits,
            state.num_qubits()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn amp(s: &Statevector, i: usize) -> Complex64 {
        s.amplitudes()[i]
    }

    #[test]
    fn layer_rule_counts() {
        let c = build_student_circuit(4, 2).unwrap();
        assert_eq!(c.num_params(), 24);
        assert_eq!(c.ops().len(), 32);
        let c = build_student_circuit(1, 1).unwrap();
        assert_eq!(c.num_params(), 3);
        assert!(c.ops().iter().all(|op| op.kind.is_rotation()));
        assert_eq!(build_student_circuit(8, 2).unwrap().num_params(), 48);
        assert!(build_student_circuit(13, 1).is_err());
        assert!(build_student_circuit(0, 1).is_err());
        assert!(build_student_circuit(4, 0).is_err());
    }

    #[test]
    fn ring_topology() {
        let c = build_student_circuit(3, 1).unwrap();
        let cnots: Vec<_> = c
            .ops()
            .iter()
            .filter(|op| op.kind == GateKind::Cnot)
            .map(|op| (op.control.unwrap(), op.target))
            .collect();
        assert_eq!(cnots, vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn ry_pi_flips_zero() {
        let s = Statevector::zero(1).unwrap();
        let out = apply_gate(&s, &GateOp::rotation(GateKind::Ry, 0, 0), &[PI]).unwrap();
        assert!(amp(&out, 0).norm() < 1e-15);
        assert!((amp(&out, 1) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rz_keeps_populations() {
        let s = Statevector::zero(1).unwrap();
        for theta in [0.3, 1.7, -2.9] {
            let out = apply_gate(&s, &GateOp::rotation(GateKind::Rz, 0, 0), &[theta]).unwrap();
            assert!((out.probabilities()[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cnot_truth_table() {
        let s = Statevector::basis(2, 0b10).unwrap();
        let out = apply_gate(&s, &GateOp::cnot(0, 1), &[]).unwrap();
        assert_eq!(out, Statevector::basis(2, 0b11).unwrap());
        let s = Statevector::basis(2, 0b01).unwrap();
        let out = apply_gate(&s, &GateOp::cnot(0, 1), &[]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn gate_validation() {
        let s = Statevector::zero(2).unwrap();
        assert!(apply_gate(&s, &GateOp::cnot(1, 1), &[]).is_err());
        assert!(apply_gate(&s, &GateOp::cnot(0, 2), &[]).is_err());
        assert!(apply_gate(&s, &GateOp::rotation(GateKind::Rx, 2, 0), &[0.1]).is_err());
        assert!(apply_gate(&s, &GateOp::rotation(GateKind::Rx, 0, 1), &[0.1]).is_err());
        let malformed = GateOp {
            kind: GateKind::Ry,
            target: 0,
            control: Some(1),
            param_index: Some(0),
        };
        assert!(apply_gate(&s, &malformed, &[0.1]).is_err());
    }

    #[test]
    fn zero_params_leave_only_the_ring() {
        let spec = build_student_circuit(3, 1).unwrap();
        let input = Statevector::basis(3, 0b100).unwrap();
        let out = run_circuit(&spec, &[0.0; 9], &input).unwrap();
        // CNOT(0,1): 100 -> 110, CNOT(1,2): 110 -> 111, CNOT(2,0): 111 -> 011
        assert_eq!(out, Statevector::basis(3, 0b011).unwrap());
    }

    #[test]
    fn param_length_mismatch() {
        let spec = build_student_circuit(2, 1).unwrap();
        let input = Statevector::zero(2).unwrap();
        assert!(matches!(
            run_circuit(&spec, &[0.0; 5], &input),
            Err(Error::Structural(_))
        ));
        let wrong_register = Statevector::zero(3).unwrap();
        assert!(run_circuit(&spec, &[0.0; 6], &wrong_register).is_err());
    }

    #[test]
    fn text_format_round_trip() {
        let spec = build_student_circuit(4, 2).unwrap();
        let text = spec.to_text();
        assert!(text.starts_with("qdistill-circuit v1\n"));
        assert!(text.contains("\nRX 0 - 0\n"));
        assert!(text.contains("\nCNOT 3 0 -\n"));
        assert_eq!(CircuitSpec::from_text(&text).unwrap(), spec);
        assert!(CircuitSpec::from_text("qdistill-circuit v9\n").is_err());
        let truncated = text.replace("params 24", "params 23");
        assert!(CircuitSpec::from_text(&truncated).is_err());
    }

    #[test]
    fn from_ops_requires_contiguous_params() {
        let ops = vec![
            GateOp::rotation(GateKind::Rx, 0, 0),
            GateOp::rotation(GateKind::Ry, 0, 2),
        ];
        assert!(CircuitSpec::from_ops(1, 1, ops).is_err());
    }
}
