//! Classical feature vectors to initial quantum states.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qsim::{check_qubits, Statevector};

/// Norms at or below this cannot be amplitude encoded.
pub const AMPLITUDE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RotationAxis {
    X,
    #[default]
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EncodingKind {
    Amplitude,
    Angle(RotationAxis),
    /// Computational basis ("qubit") encoding of sign-thresholded features.
    Basis,
}

impl EncodingKind {
    /// Number of features the encoder consumes for a `num_qubits` register.
    pub fn input_dim(self, num_qubits: usize) -> usize {
        match self {
            EncodingKind::Amplitude => 1 << num_qubits,
            EncodingKind::Angle(_) | EncodingKind::Basis => num_qubits,
        }
    }

    /// Whether gradients flow from the state back into the features.
    pub fn is_differentiable(self) -> bool {
        !matches!(self, EncodingKind::Basis)
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodingKind::Amplitude => f.write_str("amplitude"),
            EncodingKind::Angle(RotationAxis::Y) => f.write_str("angle"),
            EncodingKind::Angle(axis) => write!(f, "angle-{}", format!("{axis:?}").to_lowercase()),
            EncodingKind::Basis => f.write_str("qubit"),
        }
    }
}

impl FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "amplitude" => EncodingKind::Amplitude,
            "angle" | "angle-y" => EncodingKind::Angle(RotationAxis::Y),
            "angle-x" => EncodingKind::Angle(RotationAxis::X),
            "angle-z" => EncodingKind::Angle(RotationAxis::Z),
            "qubit" | "basis" => EncodingKind::Basis,
            other => {
                return Err(Error::Config(format!(
                    "unknown encoding `{other}` (expected amplitude, angle or qubit)"
                )))
            }
        })
    }
}

impl From<EncodingKind> for String {
    fn from(k: EncodingKind) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for EncodingKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

fn check_features(features: &[f64], expected: usize, what: &str) -> Result<()> {
    if features.len() != expected {
        return Err(Error::Shape(format!(
            "{what} encoding expects {expected} features, got {}",
            features.len()
        )));
    }
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::Shape(format!("feature {i} is not finite")));
    }
    Ok(())
}

/// `|ψ⟩ = Σ x_i |i⟩ / ‖x‖`, signs preserved, no phases.
pub fn encode_amplitude(features: &[f64], num_qubits: usize) -> Result<Statevector> {
    check_qubits(num_qubits)?;
    check_features(features, 1 << num_qubits, "amplitude")?;
    let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= AMPLITUDE_EPSILON {
        return Err(Error::DegenerateInput(format!(
            "feature norm {norm:e} is too small to amplitude encode"
        )));
    }
    let values: Vec<f64> = features.iter().map(|v| v / norm).collect();
    Ok(Statevector::from_real_normalized(num_qubits, &values))
}

fn single_qubit_state(axis: RotationAxis, x: f64) -> [Complex64; 2] {
    let (s, c) = (x / 2.0).sin_cos();
    match axis {
        RotationAxis::X => [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
        RotationAxis::Y => [Complex64::new(c, 0.0), Complex64::new(s, 0.0)],
        RotationAxis::Z => [Complex64::new(c, -s), Complex64::new(0.0, 0.0)],
    }
}

fn single_qubit_derivative(axis: RotationAxis, x: f64) -> [Complex64; 2] {
    let (s, c) = (x / 2.0).sin_cos();
    match axis {
        RotationAxis::X => [Complex64::new(-s / 2.0, 0.0), Complex64::new(0.0, -c / 2.0)],
        RotationAxis::Y => [Complex64::new(-s / 2.0, 0.0), Complex64::new(c / 2.0, 0.0)],
        RotationAxis::Z => [Complex64::new(-s / 2.0, -c / 2.0), Complex64::new(0.0, 0.0)],
    }
}

fn product_state(factors: &[[Complex64; 2]]) -> Vec<Complex64> {
    let nq = factors.len();
    (0..1usize << nq)
        .map(|k| {
            factors
                .iter()
                .enumerate()
                .map(|(q, f)| f[(k >> (nq - 1 - q)) & 1])
                .product()
        })
        .collect()
}

/// `⊗_i R_axis(x_i)|0⟩`, one feature per qubit, angles in radians.
pub fn encode_angle(
    features: &[f64],
    num_qubits: usize,
    axis: RotationAxis,
) -> Result<Statevector> {
    check_qubits(num_qubits)?;
    check_features(features, num_qubits, "angle")?;
    let factors: Vec<_> = features
        .iter()
        .map(|&x| single_qubit_state(axis, x))
        .collect();
    Ok(Statevector::from_raw(num_qubits, product_state(&factors)))
}

pub fn encode_basis(index: usize, num_qubits: usize) -> Result<Statevector> {
    Statevector::basis(num_qubits, index).map_err(|e| match e {
        Error::Range(msg) => Error::Shape(msg),
        other => other,
    })
}

/// Bit `q` is set iff feature `q` is strictly positive.
pub fn encode_basis_from_features(features: &[f64], num_qubits: usize) -> Result<Statevector> {
    check_qubits(num_qubits)?;
    check_features(features, num_qubits, "qubit")?;
    let index = features
        .iter()
        .fold(0usize, |acc, &v| (acc << 1) | usize::from(v > 0.0));
    encode_basis(index, num_qubits)
}

pub fn encode(kind: EncodingKind, features: &[f64], num_qubits: usize) -> Result<Statevector> {
    match kind {
        EncodingKind::Amplitude => encode_amplitude(features, num_qubits),
        EncodingKind::Angle(axis) => encode_angle(features, num_qubits, axis),
        EncodingKind::Basis => encode_basis_from_features(features, num_qubits),
    }
}

/// Pulls a state gradient (`∂L/∂Re ψ + i ∂L/∂Im ψ`) back to the features.
///
/// Basis encoding is piecewise constant, so its pullback is zero.
pub fn encode_pullback(
    kind: EncodingKind,
    features: &[f64],
    num_qubits: usize,
    state_grads: &[Complex64],
) -> Result<Vec<f64>> {
    if state_grads.len() != 1 << num_qubits {
        return Err(Error::Shape(format!(
            "state gradient has {} entries for {num_qubits} qubits",
            state_grads.len()
        )));
    }
    check_features(features, kind.input_dim(num_qubits), "pullback")?;
    match kind {
        EncodingKind::Amplitude => {
            // a = x/‖x‖, ∂a/∂x = (I − a aᵀ)/‖x‖.
            let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= AMPLITUDE_EPSILON {
                return Err(Error::DegenerateInput(
                    "zero-norm features in pullback".into(),
                ));
            }
            let da: Vec<f64> = state_grads.iter().map(|g| g.re).collect();
            let proj: f64 = features.iter().zip(&da).map(|(x, g)| x / norm * g).sum();
            Ok(features
                .iter()
                .zip(&da)
                .map(|(x, g)| (g - x / norm * proj) / norm)
                .collect())
        }
        EncodingKind::Angle(axis) => {
            let factors: Vec<_> = features
                .iter()
                .map(|&x| single_qubit_state(axis, x))
                .collect();
            let mut grads = Vec::with_capacity(num_qubits);
            for q in 0..num_qubits {
                let mut varied = factors.clone();
                varied[q] = single_qubit_derivative(axis, features[q]);
                let dpsi = product_state(&varied);
                grads.push(
                    state_grads
                        .iter()
                        .zip(&dpsi)
                        .map(|(g, d)| (g.conj() * d).re)
                        .sum(),
                );
            }
            Ok(grads)
        }
        EncodingKind::Basis => Ok(vec![0.0; num_qubits]),
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::qsim::measure_analytic;

    fn real_amps(s: &Statevector) -> Vec<f64> {
        s.amplitudes().iter().map(|a| a.re).collect()
    }

    #[test]
    fn amplitude_examples() {
        let s = encode_amplitude(&[3.0, 4.0], 1).unwrap();
        assert_eq!(real_amps(&s), vec![0.6, 0.8]);
        assert!(s.amplitudes().iter().all(|a| a.im == 0.0));
        let s = encode_amplitude(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(s, Statevector::zero(2).unwrap());
        assert!(matches!(
            encode_amplitude(&[0.0, 0.0], 1),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            encode_amplitude(&[1.0; 3], 1),
            Err(Error::Shape(_))
        ));
        assert!(encode_amplitude(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn angle_examples() {
        let s = encode_angle(&[PI], 1, RotationAxis::Y).unwrap();
        assert!((s.probabilities()[1] - 1.0).abs() < 1e-15);
        let s = encode_angle(&[0.0; 4], 4, RotationAxis::Y).unwrap();
        assert_eq!(s, Statevector::zero(4).unwrap());
        let m = measure_analytic(&encode_angle(&[PI / 2.0], 1, RotationAxis::Y).unwrap());
        assert!((m.basis_probs[0] - 0.5).abs() < 1e-15);
        assert!(encode_angle(&[0.0; 3], 4, RotationAxis::Y).is_err());
    }

    #[test]
    fn angle_x_matches_rotation_gate() {
        use crate::qsim::{apply_gate, GateKind, GateOp};
        let x = 0.77;
        let via_gate = apply_gate(
            &Statevector::zero(1).unwrap(),
            &GateOp::rotation(GateKind::Rx, 0, 0),
            &[x],
        )
        .unwrap();
        let encoded = encode_angle(&[x], 1, RotationAxis::X).unwrap();
        for (a, b) in via_gate.amplitudes().iter().zip(encoded.amplitudes()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn basis_examples() {
        let s = encode_basis(5, 3).unwrap();
        assert_eq!(s.amplitudes()[5], Complex64::new(1.0, 0.0));
        assert_eq!(encode_basis(0, 4).unwrap(), Statevector::zero(4).unwrap());
        assert!(matches!(encode_basis(16, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn basis_from_features_thresholds_at_zero() {
        let s = encode_basis_from_features(&[1.2, -0.3, 0.0, 2.0], 4).unwrap();
        assert_eq!(s, encode_basis(0b1001, 4).unwrap());
        let s = encode_basis_from_features(&[-1.0, -2.0, -0.5], 3).unwrap();
        assert_eq!(s, encode_basis(0, 3).unwrap());
        let s = encode_basis_from_features(&[1.0, 2.0, 0.5], 3).unwrap();
        assert_eq!(s, encode_basis(7, 3).unwrap());
    }

    #[test]
    fn kind_strings() {
        assert_eq!(
            "amplitude".parse::<EncodingKind>().unwrap(),
            EncodingKind::Amplitude
        );
        assert_eq!(
            "angle".parse::<EncodingKind>().unwrap(),
            EncodingKind::Angle(RotationAxis::Y)
        );
        assert_eq!(
            "qubit".parse::<EncodingKind>().unwrap(),
            EncodingKind::Basis
        );
        assert!("iqp".parse::<EncodingKind>().is_err());
        for k in [
            EncodingKind::Amplitude,
            EncodingKind::Angle(RotationAxis::Z),
            EncodingKind::Basis,
        ] {
            assert_eq!(k.to_string().parse::<EncodingKind>().unwrap(), k);
        }
        assert_eq!(EncodingKind::Amplitude.input_dim(4), 16);
        assert_eq!(EncodingKind::Basis.input_dim(4), 4);
    }

    fn finite_difference_pullback(
        kind: EncodingKind,
        x: &[f64],
        nq: usize,
        g: &[Complex64],
    ) -> Vec<f64> {
        // L(x) = Re Σ conj(g_k) ψ_k(x) has gradient equal to the pullback of g.
        let loss = |x: &[f64]| -> f64 {
            let s = encode(kind, x, nq).unwrap();
            s.amplitudes()
                .iter()
                .zip(g)
                .map(|(a, g)| (g.conj() * a).re)
                .sum()
        };
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (loss(&p) - loss(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn pullbacks_match_finite_differences() {
        let g: Vec<Complex64> = (0..8)
            .map(|k| Complex64::new((k as f64 * 0.7).sin(), (k as f64 * 1.3).cos()))
            .collect();
        let amp_x: Vec<f64> = (0..8).map(|k| (k as f64 * 0.9).cos() + 0.1).collect();
        let ang_x = [0.3, -1.2, 2.1];
        let cases = [
            (EncodingKind::Amplitude, amp_x.as_slice()),
            (EncodingKind::Angle(RotationAxis::X), &ang_x[..]),
            (EncodingKind::Angle(RotationAxis::Y), &ang_x[..]),
            (EncodingKind::Angle(RotationAxis::Z), &ang_x[..]),
        ];
        for (kind, x) in cases {
            let analytic = encode_pullback(kind, x, 3, &g).unwrap();
            let numeric = finite_difference_pullback(kind, x, 3, &g);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-8, "{kind:?}: {a} vs {n}");
            }
        }
        assert_eq!(
            encode_pullback(EncodingKind::Basis, &ang_x, 3, &g).unwrap(),
            vec![0.0; 3]
        );
    }
}
