use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qdistill::qsim::{
    build_student_circuit, gradient_adjoint, gradient_parameter_shift, measure_shots, run_circuit,
};
use qdistill_bench::{angles, state};
use std::hint::black_box;

fn bench_run_circuit(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_circuit");
    for qubits in [4, 8, 12] {
        let spec = build_student_circuit(qubits, 2).unwrap();
        let params = angles(spec.num_params());
        let input = state(qubits);
        group.bench_with_input(BenchmarkId::from_parameter(qubits), &qubits, |b, _| {
            b.iter(|| run_circuit(&spec, black_box(&params), &input).unwrap())
        });
    }
    group.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient");
    for qubits in [4, 8] {
        let spec = build_student_circuit(qubits, 2).unwrap();
        let params = angles(spec.num_params());
        let input = state(qubits);
        let weights = vec![0.5; qubits];
        group.bench_with_input(BenchmarkId::new("adjoint", qubits), &qubits, |b, _| {
            b.iter(|| gradient_adjoint(&spec, black_box(&params), &input, &weights).unwrap())
        });
        group.bench_with_input(
            BenchmarkId::new("parameter_shift", qubits),
            &qubits,
            |b, _| {
                b.iter(|| {
                    gradient_parameter_shift(&spec, black_box(&params), &input, &weights).unwrap()
                })
            },
        );
    }
    group.finish();
}

fn bench_shots(c: &mut Criterion) {
    let out = state(4);
    c.bench_function("measure_shots/4q/1024", |b| {
        b.iter(|| measure_shots(&out, 1024, black_box(7)).unwrap())
    });
}

criterion_group!(benches, bench_run_circuit, bench_gradients, bench_shots);
criterion_main!(benches);
