//! Response-based distillation losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to at least this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Softmax temperature τ > 0 applied to both teacher and student in the KD term.
    pub temperature: f64,
    /// Weight α ∈ [0, 1] of the KD term; `1 − α` weighs the label cross-entropy.
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            alpha: 0.4,
        }
    }
}

impl DistillConfig {
    pub fn new(temperature: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { temperature, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Plain cross-entropy training.
    pub fn baseline() -> Self {
        Self {
            temperature: 1.0,
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `softmax(z / τ)`, computed with max subtraction.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty logit vector".into()));
    }
    Ok(softmax_unchecked(logits, temperature))
}

fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log p[label]`, with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::Range(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `KL(p ‖ q) = Σ p_i log(p_i / q_i)`; zero-mass terms of `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLoss {
    pub total: f64,
    pub kd: f64,
    pub ce: f64,
    /// `∂total/∂student_logits`.
    pub grad: Vec<f64>,
}

/// `α·KL(σ(t/τ) ‖ σ(s/τ)) + (1−α)·CE(σ(s), y)` for one sample.
///
/// The KD term carries no τ² factor. Without teacher logits the KD term is
/// zero, which is only allowed at α = 0; the result is then bit-identical to
/// passing any teacher with α = 0.
pub fn distill_loss(
    teacher_logits: Option<&[f64]>,
    student_logits: &[f64],
    label: usize,
    cfg: &DistillConfig,
) -> Result<DistillLoss> {
    cfg.validate()?;
    let classes = student_logits.len();
    if label >= classes {
        return Err(Error::Range(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let tau = cfg.temperature;
    let student = softmax_t(student_logits, 1.0)?;
    let ce = cross_entropy(&student, label)?;
    let mut grad: Vec<f64> = student
        .iter()
        .enumerate()
        .map(|(j, r)| (1.0 - cfg.alpha) * (r - if j == label { 1.0 } else { 0.0 }))
        .collect();
    let kd = match teacher_logits {
        Some(teacher) => {
            if teacher.len() != classes {
                return Err(Error::Shape(format!(
                    "teacher has {} logits, student {classes}",
                    teacher.len()
                )));
            }
            let p = softmax_unchecked(teacher, tau);
            let q = softmax_unchecked(student_logits, tau);
            for (g, (qj, pj)) in grad.iter_mut().zip(q.iter().zip(&p)) {
                *g += cfg.alpha * (qj - pj) / tau;
            }
            kl_divergence(&p, &q)
        }
        None if cfg.alpha > 0.0 => {
            return Err(Error::Config(
                "distillation weight alpha > 0 requires teacher logits".into(),
            ))
        }
        None => 0.0,
    };
    Ok(DistillLoss {
        total: cfg.alpha * kd + (1.0 - cfg.alpha) * ce,
        kd,
        ce,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::E;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_t(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax_t(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - E / (E + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-15);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-15);
        let p = softmax_t(&[1.0, -0.5, 0.3], 1e6).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert!(softmax_t(&[1.0], 0.0).is_err());
        assert!(softmax_t(&[1.0], -1.0).is_err());
        let huge = softmax_t(&[1000.0, 0.0], 1.0).unwrap();
        assert!(huge.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        let uniform = vec![0.1; 10];
        assert!((cross_entropy(&uniform, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(Error::Range(_))
        ));
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&[0.5, 0.5], &[0.9, 0.1]) - expected).abs() < 1e-15);
        assert!((expected - 0.5108256237659907).abs() < 1e-12);
    }

    #[test]
    fn alpha_boundaries() {
        let t = [1.0, -0.5, 2.0];
        let s = [0.3, 0.1, -0.4];
        let ce_only =
            distill_loss(Some(&t), &s, 2, &DistillConfig::new(2.0, 0.0).unwrap()).unwrap();
        assert_eq!(ce_only.total, ce_only.ce);
        let kd_only =
            distill_loss(Some(&t), &s, 2, &DistillConfig::new(2.0, 1.0).unwrap()).unwrap();
        assert_eq!(kd_only.total, kd_only.kd);
        let same = distill_loss(Some(&s), &s, 0, &DistillConfig::default()).unwrap();
        assert_eq!(same.kd, 0.0);
        assert_eq!(same.total, 0.6 * same.ce);
    }

    #[test]
    fn no_teacher_matches_alpha_zero_bitwise() {
        let t = [4.0, -2.0, 0.7, 1.5];
        let s = [0.3, -1.1, 0.9, 0.2];
        let cfg = DistillConfig {
            temperature: 2.0,
            alpha: 0.0,
        };
        let with = distill_loss(Some(&t), &s, 1, &cfg).unwrap();
        let without = distill_loss(None, &s, 1, &cfg).unwrap();
        assert_eq!(with.total.to_bits(), without.total.to_bits());
        for (a, b) in with.grad.iter().zip(&without.grad) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(distill_loss(None, &s, 1, &DistillConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::new(0.0, 0.5).is_err());
        assert!(DistillConfig::new(2.0, 1.5).is_err());
        assert!(DistillConfig::new(2.0, -0.1).is_err());
        assert_eq!(
            DistillConfig::default(),
            DistillConfig::new(2.0, 0.4).unwrap()
        );
    }

    fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-6.0f64..6.0, n)
    }

    proptest! {
        #[test]
        fn kd_nonnegative_and_total_is_convex_combination(
            t in logits(5), s in logits(5), label in 0usize..5,
            tau in 0.5f64..6.0, alpha in 0.0f64..=1.0,
        ) {
            let l = distill_loss(Some(&t), &s, label, &DistillConfig { temperature: tau, alpha }).unwrap();
            prop_assert!(l.kd >= -1e-15);
            let lo = l.kd.min(l.ce) - 1e-12;
            let hi = l.kd.max(l.ce) + 1e-12;
            prop_assert!(l.total >= lo && l.total <= hi);
        }

        #[test]
        fn softmax_shift_invariance(z in logits(6), c in -50.0f64..50.0, tau in 0.3f64..5.0) {
            let a = softmax_t(&z, tau).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax_t(&shifted, tau).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gradient_matches_finite_differences(
            t in logits(4), s in logits(4), label in 0usize..4,
            tau in 0.5f64..5.0, alpha in 0.0f64..=1.0,
        ) {
            let cfg = DistillConfig { temperature: tau, alpha };
            let analytic = distill_loss(Some(&t), &s, label, &cfg).unwrap().grad;
            let h = 1e-6;
            for j in 0..4 {
                let mut p = s.clone();
                p[j] += h;
                let mut m = s.clone();
                m[j] -= h;
                let fp = distill_loss(Some(&t), &p, label, &cfg).unwrap().total;
                let fm = distill_loss(Some(&t), &m, label, &cfg).unwrap().total;
                let numeric = (fp - fm) / (2.0 * h);
                prop_assert!((numeric - analytic[j]).abs() < 1e-6, "j={} {} vs {}", j, numeric, analytic[j]);
            }
        }
    }
}
