//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stdout
//! (uncaptured) and then asserts the same verdict.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use qdistill::cnn::{build_alexnet_teacher, build_lenet_teacher, NetworkSpec, Shape3};
use qdistill::distill::{distill_loss, DistillConfig};
use qdistill::encode::{EncodingKind, RotationAxis};
use qdistill::experiment::{
    ablate_encodings, ablate_reducers, run_experiment_on, ExperimentConfig, PreparedData,
};
use qdistill::qsim::{
    build_student_circuit, gradient_adjoint, gradient_parameter_shift, measure_analytic,
    measure_shots, run_circuit, CircuitSpec, Statevector,
};
use qdistill::reduce::{pca_fit, Reducer, ReducerKind};
use qdistill::stats::{paired_t_test, ExperimentReport};
use qdistill::train::{GradientEngine, Readout, StudentModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADIENT_AGREEMENT: f64 = 1e-6;
const GRADIENT_RUNTIME: Duration = Duration::from_secs(60);
const END_TO_END_RELATIVE: f64 = 1e-4;
const LENET_PARAMS: usize = 44_426;
const ALEXNET_PARAMS: usize = 94_672_074;
const TEACHER_MIN_ACCURACY: f64 = 0.95;
const MIN_GAIN_POINTS: f64 = 1.0;
const MAX_P: f64 = 0.05;
const DISTILL_RUNTIME: Duration = Duration::from_secs(30 * 60);
const ENCODING_GAP_POINTS: f64 = 3.0;
const SHOT_TRIALS: usize = 1000;
const SHOTS: usize = 1024;
const SHOT_BAND: f64 = 0.047;
const SHOT_MIN_FRACTION: f64 = 0.99;
const LOSS_IDENTITY: f64 = 1e-12;
const PROJECTOR_AGREEMENT: f64 = 1e-8;
const P_VALUE_AGREEMENT: f64 = 1e-6;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} [{id:>2}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{name}: {detail}");
}

fn random_state(n: usize, rng: &mut ChaCha8Rng) -> Statevector {
    let raw: Vec<Complex64> = (0..1 << n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let norm = raw.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    Statevector::from_amplitudes(raw.into_iter().map(|a| a / norm).collect()).unwrap()
}

fn weighted(spec: &CircuitSpec, params: &[f64], input: &Statevector, w: &[f64]) -> f64 {
    let out = run_circuit(spec, params, input).unwrap();
    measure_analytic(&out)
        .expectations
        .iter()
        .zip(w)
        .map(|(e, w)| e * w)
        .sum()
}

#[test]
fn gradient_tri_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let spec = build_student_circuit(4, 2).unwrap();
        let params: Vec<f64> = (0..spec.num_params())
            .map(|_| rng.random_range(-3.2..3.2))
            .collect();
        let input = random_state(4, &mut rng);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let adjoint = gradient_adjoint(&spec, &params, &input, &w)
            .unwrap()
            .param_grads;
        let shift = gradient_parameter_shift(&spec, &params, &input, &w).unwrap();
        for j in 0..params.len() {
            let mut p = params.clone();
            p[j] += h;
            let up = weighted(&spec, &p, &input, &w);
            p[j] -= 2.0 * h;
            let fd = (up - weighted(&spec, &p, &input, &w)) / (2.0 * h);
            worst = worst
                .max((adjoint[j] - shift[j]).abs())
                .max((adjoint[j] - fd).abs())
                .max((shift[j] - fd).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient tri-equivalence",
        worst < GRADIENT_AGREEMENT && elapsed < GRADIENT_RUNTIME,
        &format!("max disagreement {worst:.2e} (< {GRADIENT_AGREEMENT:e}) over 50 circuits in {elapsed:.2?}"),
    );
}

#[test]
fn end_to_end_hybrid_gradient() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = Shape3::new(1, 28, 28);
    let reducer = Reducer::new(ReducerKind::FullyConnected, input, 16, 32).unwrap();
    let circuit = build_student_circuit(4, 2).unwrap();
    let model = StudentModel::new(
        reducer,
        EncodingKind::Amplitude,
        circuit,
        Readout::LinearHead,
        10,
        7,
    )
    .unwrap();
    let cfg = DistillConfig::new(2.0, 0.4).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let image: Vec<f64> = (0..input.len())
            .map(|_| rng.random_range(-0.5..2.5))
            .collect();
        let teacher: Vec<f64> = (0..10).map(|_| rng.random_range(-4.0..4.0)).collect();
        let label = rng.random_range(0..10);
        let g = model
            .backward(&image, label, Some(&teacher), &cfg, GradientEngine::Adjoint)
            .unwrap();
        let mut probe = model.clone();
        let mut buf = model.params().to_vec();
        for j in 0..buf.len() {
            let centre = buf[j];
            let fd = common::five_point_derivative(
                |d| {
                    buf[j] = centre + d;
                    probe.set_params(buf.clone()).unwrap();
                    distill_loss(Some(&teacher), &probe.forward(&image).unwrap(), label, &cfg)
                        .unwrap()
                        .total
                },
                1e-3,
            );
            buf[j] = centre;
            worst = worst.max(common::relative_error(g.flat[j], fd));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "end-to-end hybrid gradient",
        worst < END_TO_END_RELATIVE && elapsed < GRADIENT_RUNTIME,
        &format!(
            "max relative error {worst:.2e} (< {END_TO_END_RELATIVE:e}) on all {} parameters, 5 samples, {elapsed:.2?}",
            model.num_params()
        ),
    );
}

/// Weights plus biases per parameterized layer, from layer arithmetic.
fn expected_layers(net: &NetworkSpec) -> Vec<usize> {
    match net.name() {
        "lenet" => {
            // 28 → 24 → 12 → 8 → 4
            vec![
                6 * (25 + 1),
                16 * (6 * 25 + 1),
                16 * 4 * 4 * 120 + 120,
                120 * 84 + 84,
                84 * 10 + 10,
            ]
        }
        "alexnet" => {
            // 28 → 14 → 7, padding keeps size
            vec![
                64 * (9 + 1),
                192 * (64 * 9 + 1),
                384 * (192 * 9 + 1),
                384 * 7 * 7 * 4096 + 4096,
                4096 * 4096 + 4096,
                4096 * 10 + 10,
            ]
        }
        other => panic!("no reference for {other}"),
    }
}

#[test]
fn teacher_reconstruction_counts() {
    let mut pass = true;
    let mut detail = Vec::new();
    for (net, reference) in [
        (build_lenet_teacher(10).unwrap(), LENET_PARAMS),
        (build_alexnet_teacher(10).unwrap(), ALEXNET_PARAMS),
    ] {
        let ours = net.layer_param_counts();
        let expected = expected_layers(&net);
        let ok = net.num_params() == reference
            && ours.len() == expected.len()
            && ours.iter().zip(&expected).all(|((_, a), b)| a == b);
        if !ok {
            pass = false;
            let mut out = std::io::stdout().lock();
            writeln!(
                out,
                "  {} per-layer diff (label: ours vs expected):",
                net.name()
            )
            .unwrap();
            for i in 0..ours.len().max(expected.len()) {
                let a = ours
                    .get(i)
                    .map_or("-".to_string(), |(l, c)| format!("{l} {c}"));
                let b = expected.get(i).map_or("-".to_string(), |c| c.to_string());
                writeln!(out, "    {a} vs {b}").unwrap();
            }
        }
        detail.push(format!(
            "{} {} (reference {reference})",
            net.name(),
            net.num_params()
        ));
    }
    verdict(3, "teacher reconstruction counts", pass, &detail.join(", "));
}

fn prepared(cfg: &ExperimentConfig) -> Option<PreparedData> {
    match PreparedData::load(cfg) {
        Ok(d) => Some(d),
        Err(e) => {
            println!("cannot load MNIST from {}: {e}", cfg.data_root.display());
            None
        }
    }
}

fn arm_mean(report: &ExperimentReport, label: &str) -> f64 {
    100.0
        * report
            .arm(label)
            .unwrap_or_else(|| panic!("missing arm {label}"))
            .mean()
}

#[test]
fn distillation_gain() {
    let start = Instant::now();
    let cfg = ExperimentConfig::with_data_root(common::mnist_root());
    let Some(data) = prepared(&cfg) else {
        return verdict(4, "distillation gain", false, "MNIST subset unavailable");
    };
    let report = run_experiment_on(&cfg, &data, false).unwrap();
    let elapsed = start.elapsed();
    let teacher = report.arm("teacher (lenet)").unwrap().runs[0].accuracy;
    let base = arm_mean(&report, "baseline");
    let dist = arm_mean(&report, "distilled");
    let cmp = &report.comparisons[0];
    let gain = 100.0 * cmp.delta_mean;
    let pass = teacher >= TEACHER_MIN_ACCURACY
        && gain >= MIN_GAIN_POINTS
        && cmp.per_seed.p < MAX_P
        && elapsed < DISTILL_RUNTIME;
    verdict(
        4,
        "distillation gain",
        pass,
        &format!(
            "teacher {:.2}% (>= {:.0}%), baseline {base:.2}%, distilled {dist:.2}%, gain {gain:+.2} pts (>= {MIN_GAIN_POINTS}), p = {:.4} (< {MAX_P}), {} seeds, {elapsed:.0?}",
            100.0 * teacher,
            100.0 * TEACHER_MIN_ACCURACY,
            cmp.per_seed.p,
            cfg.seeds.len()
        ),
    );
}

fn ablation_config() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![1, 2, 3],
        ..ExperimentConfig::with_data_root(common::mnist_root())
    }
}

#[test]
fn encoding_ablation_ordering() {
    let cfg = ablation_config();
    let Some(data) = prepared(&cfg) else {
        return verdict(
            5,
            "encoding ablation ordering",
            false,
            "MNIST subset unavailable",
        );
    };
    let encodings = [
        EncodingKind::Amplitude,
        EncodingKind::Angle(RotationAxis::Y),
        EncodingKind::Basis,
    ];
    let report = ablate_encodings(&cfg, &encodings, &data, false).unwrap();
    let (amp, angle, qubit) = (
        arm_mean(&report, "amplitude"),
        arm_mean(&report, "angle"),
        arm_mean(&report, "qubit"),
    );
    verdict(
        5,
        "encoding ablation ordering",
        amp - angle >= ENCODING_GAP_POINTS && amp >= qubit,
        &format!(
            "amplitude {amp:.2}%, angle {angle:.2}%, qubit {qubit:.2}% (amplitude - angle = {:+.2} >= {ENCODING_GAP_POINTS}, amplitude >= qubit), 3 seeds",
            amp - angle
        ),
    );
}

#[test]
fn reducer_ablation_ordering() {
    let cfg = ablation_config();
    let Some(data) = prepared(&cfg) else {
        return verdict(
            6,
            "reducer ablation ordering",
            false,
            "MNIST subset unavailable",
        );
    };
    let reducers = [
        ReducerKind::FullyConnected,
        ReducerKind::AvgPool,
        ReducerKind::MaxPool,
    ];
    let report = ablate_reducers(&cfg, &reducers, &data, false).unwrap();
    let (fc, avg, max) = (
        arm_mean(&report, "fc"),
        arm_mean(&report, "avgpool"),
        arm_mean(&report, "maxpool"),
    );
    verdict(
        6,
        "reducer ablation ordering",
        fc > avg && avg > max,
        &format!("fc {fc:.2}% > avgpool {avg:.2}% > maxpool {max:.2}%, 3 seeds"),
    );
}

#[test]
fn shot_decoding_convergence() {
    let plus = {
        let a = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        Statevector::from_amplitudes(vec![a, a]).unwrap()
    };
    let within = (0..SHOT_TRIALS as u64)
        .filter(|&seed| {
            let m = measure_shots(&plus, SHOTS, seed).unwrap();
            (m.basis_probs[0] - 0.5).abs() <= SHOT_BAND
        })
        .count();
    let fraction = within as f64 / SHOT_TRIALS as f64;
    verdict(
        7,
        "shot-decoding convergence",
        fraction >= SHOT_MIN_FRACTION,
        &format!("{within}/{SHOT_TRIALS} trials within {SHOT_BAND} at N = {SHOTS} (fraction {fraction:.3} >= {SHOT_MIN_FRACTION})"),
    );
}

#[test]
fn loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(2..12);
        let s: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let t: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y = rng.random_range(0..c);
        let tau = rng.random_range(0.5..8.0);
        let ce_only =
            distill_loss(Some(&t), &s, y, &DistillConfig::new(tau, 0.0).unwrap()).unwrap();
        let kd_only =
            distill_loss(Some(&t), &s, y, &DistillConfig::new(tau, 1.0).unwrap()).unwrap();
        let mixed = DistillConfig::new(tau, rng.random_range(0.0..=1.0)).unwrap();
        let same = distill_loss(Some(&s), &s, y, &mixed).unwrap();
        worst = worst
            .max((ce_only.total - ce_only.ce).abs())
            .max((kd_only.total - kd_only.kd).abs())
            .max(same.kd.abs());
    }
    verdict(
        8,
        "loss identities",
        worst < LOSS_IDENTITY,
        &format!("max deviation {worst:.2e} (< {LOSS_IDENTITY:e}) over 100 logit pairs"),
    );
}

#[test]
fn pca_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(30..80);
        let data = common::correlated_data(n, 8, &mut rng);
        let k = rng.random_range(1..8);
        let basis = pca_fit(&data, n, 8, k).unwrap();
        let diff = common::projector_from_basis(basis.basis(), 8, k)
            - common::covariance_projector(&data, n, 8, k);
        worst = worst.max(diff.abs().max());
    }
    verdict(
        9,
        "PCA oracle equivalence",
        worst < PROJECTOR_AGREEMENT,
        &format!(
            "max projector difference {worst:.2e} (< {PROJECTOR_AGREEMENT:e}) over 20 datasets"
        ),
    );
}

#[test]
fn t_test_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(3..=10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.1..0.15)).collect();
        let t = paired_t_test(&b, &a).unwrap();
        worst = worst.max((t.p - common::t_two_tailed_by_quadrature(t.t, (n - 1) as f64)).abs());
    }
    verdict(
        10,
        "t-test oracle",
        worst < P_VALUE_AGREEMENT,
        &format!("max p-value difference {worst:.2e} (< {P_VALUE_AGREEMENT:e}) over 100 samples, n in 3..=10"),
    );
}
