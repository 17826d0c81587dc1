//! Hybrid student model, optimizers, and the training loops for students and
//! teachers.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedArray};
use crate::cnn::{NetworkSpec, Tensor};
use crate::data::{Dataset, TeacherLogits};
use crate::distill::{distill_loss, DistillConfig, DistillLoss, PROB_FLOOR};
use crate::encode::{encode, encode_pullback, EncodingKind};
use crate::error::{Error, Result};
use crate::qsim::{
    expectation_observable, gradient_adjoint_diag, gradient_parameter_shift_diag, measure_analytic,
    measure_shots, run_circuit, CircuitSpec, MeasurementResult,
};
use crate::reduce::Reducer;
use crate::stats::{CountParameters, ParameterCounts};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_MAX_EPOCHS: usize = 1000;
pub const DEFAULT_PATIENCE: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_CLIP_NORM: f64 = 10.0;

/// Maps measured quantities to class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Readout {
    /// Trainable affine map from the Q Pauli-Z expectations.
    #[default]
    LinearHead,
    /// Log of the first C basis probabilities, renormalized.
    BasisProbs,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::LinearHead => "linear",
            Readout::BasisProbs => "basis-probs",
        })
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "linear-head" => Ok(Readout::LinearHead),
            "basis-probs" | "probs" => Ok(Readout::BasisProbs),
            other => Err(Error::Config(format!(
                "unknown readout {other:?} (expected linear or basis-probs)"
            ))),
        }
    }
}

impl TryFrom<String> for Readout {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Readout> for String {
    fn from(r: Readout) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum GradientEngine {
    #[default]
    Adjoint,
    /// Shift rule for circuit parameters; input-path gradients still come
    /// from the adjoint sweep.
    ParameterShift,
}

impl FromStr for GradientEngine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adjoint" => Ok(GradientEngine::Adjoint),
            "parameter-shift" | "shift" => Ok(GradientEngine::ParameterShift),
            other => Err(Error::Config(format!("unknown gradient engine {other:?}"))),
        }
    }
}

/// Reducer → encoder → circuit → readout, with one flat parameter vector
/// laid out as `[reducer | circuit | readout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    reducer: Reducer,
    encoding: EncodingKind,
    circuit: CircuitSpec,
    readout: Readout,
    num_classes: usize,
    params: Vec<f64>,
}

impl StudentModel {
    /// Circuit angles start uniform in `[-π, π)`; reducer and head use
    /// Glorot-uniform weights.
    pub fn new(
        reducer: Reducer,
        encoding: EncodingKind,
        circuit: CircuitSpec,
        readout: Readout,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let q = circuit.num_qubits();
        if reducer.target_dim() != encoding.input_dim(q) {
            return Err(Error::Config(format!(
                "{encoding} encoding on {q} qubits needs {} features, reducer emits {}",
                encoding.input_dim(q),
                reducer.target_dim()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if readout == Readout::BasisProbs && (1usize << q) < num_classes {
            return Err(Error::Config(format!(
                "basis-probs readout needs 2^{q} = {} >= {num_classes} classes",
                1usize << q
            )));
        }
        let mut model = Self {
            reducer,
            encoding,
            circuit,
            readout,
            num_classes,
            params: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = model.reducer.init_params(rng.random());
        params.extend(
            (0..model.circuit.num_params())
                .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)),
        );
        let limit = (6.0 / (q + num_classes) as f64).sqrt();
        let head = model.head_len();
        params.extend((0..head).map(|i| {
            if i < num_classes * q {
                rng.random_range(-limit..limit)
            } else {
                0.0
            }
        }));
        model.params = params;
        Ok(model)
    }

    pub fn reducer(&self) -> &Reducer {
        &self.reducer
    }

    pub fn reducer_mut(&mut self) -> &mut Reducer {
        &mut self.reducer
    }

    pub fn encoding(&self) -> EncodingKind {
        self.encoding
    }

    pub fn circuit(&self) -> &CircuitSpec {
        &self.circuit
    }

    pub fn readout(&self) -> Readout {
        self.readout
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_qubits(&self) -> usize {
        self.circuit.num_qubits()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "student has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn head_len(&self) -> usize {
        match self.readout {
            Readout::LinearHead => self.num_classes * (self.num_qubits() + 1),
            Readout::BasisProbs => 0,
        }
    }

    fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        let r = self.reducer.num_params();
        let c = r + self.circuit.num_params();
        [0..r, r..c, c..c + self.head_len()]
    }

    pub fn reducer_params(&self) -> &[f64] {
        &self.params[self.ranges()[0].clone()]
    }

    pub fn circuit_params(&self) -> &[f64] {
        &self.params[self.ranges()[1].clone()]
    }

    pub fn readout_params(&self) -> &[f64] {
        &self.params[self.ranges()[2].clone()]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn head_logits(&self, m: &MeasurementResult) -> Vec<f64> {
        match self.readout {
            Readout::LinearHead => {
                let q = self.num_qubits();
                let head = self.readout_params();
                let (w, b) = head.split_at(self.num_classes * q);
                (0..self.num_classes)
                    .map(|c| {
                        b[c] + w[c * q..(c + 1) * q]
                            .iter()
                            .zip(&m.expectations)
                            .map(|(a, e)| a * e)
                            .sum::<f64>()
                    })
                    .collect()
            }
            Readout::BasisProbs => {
                let p: Vec<f64> = m.basis_probs[..self.num_classes]
                    .iter()
                    .map(|v| v.max(PROB_FLOOR))
                    .collect();
                let ln_total = p.iter().sum::<f64>().ln();
                p.iter().map(|v| v.ln() - ln_total).collect()
            }
        }
    }

    fn prepare(&self, image: &[f64]) -> Result<(Vec<f64>, Vec<f64>, crate::qsim::Statevector)> {
        let (features, hidden) = self.reducer.reduce_cached(self.reducer_params(), image)?;
        let state = encode(self.encoding, &features, self.num_qubits())?;
        Ok((features, hidden, state))
    }

    /// Logits from analytic measurement.
    pub fn forward(&self, image: &[f64]) -> Result<Vec<f64>> {
        let (_, _, state) = self.prepare(image)?;
        let out = run_circuit(&self.circuit, self.circuit_params(), &state)?;
        Ok(self.head_logits(&measure_analytic(&out)))
    }

    /// Logits from `shots` seeded measurements.
    pub fn forward_shots(&self, image: &[f64], shots: usize, seed: u64) -> Result<Vec<f64>> {
        let (_, _, state) = self.prepare(image)?;
        let out = run_circuit(&self.circuit, self.circuit_params(), &state)?;
        Ok(self.head_logits(&measure_shots(&out, shots, seed)?))
    }

    /// Loss and gradient for one sample, accumulated into `grads`.
    pub fn backward_into(
        &self,
        image: &[f64],
        label: usize,
        teacher_logits: Option<&[f64]>,
        cfg: &DistillConfig,
        engine: GradientEngine,
        grads: &mut [f64],
    ) -> Result<DistillLoss> {
        let q = self.num_qubits();
        let [r_range, c_range, h_range] = self.ranges();
        let (features, hidden, state) = self.prepare(image)?;
        let out = run_circuit(&self.circuit, self.circuit_params(), &state)?;
        let m = measure_analytic(&out);
        let logits = self.head_logits(&m);
        let loss = distill_loss(teacher_logits, &logits, label, cfg)?;
        let dl = &loss.grad;

        let observable = match self.readout {
            Readout::LinearHead => {
                let head = self.readout_params();
                let w = &head[..self.num_classes * q];
                let g_head = &mut grads[h_range];
                let (g_w, g_b) = g_head.split_at_mut(self.num_classes * q);
                let mut de = vec![0.0; q];
                for c in 0..self.num_classes {
                    g_b[c] += dl[c];
                    for j in 0..q {
                        g_w[c * q + j] += dl[c] * m.expectations[j];
                        de[j] += dl[c] * w[c * q + j];
                    }
                }
                expectation_observable(q, &de)?
            }
            Readout::BasisProbs => {
                let probs = &m.basis_probs[..self.num_classes];
                let total: f64 = probs.iter().map(|v| v.max(PROB_FLOOR)).sum();
                let dl_sum: f64 = dl.iter().sum();
                let mut h = vec![0.0; 1 << q];
                for (k, &p) in probs.iter().enumerate() {
                    let dp_ln = if p >= PROB_FLOOR { dl[k] / p } else { 0.0 };
                    h[k] = dp_ln - dl_sum / total;
                }
                h
            }
        };

        let needs_input = self.reducer.num_params() > 0 && self.encoding.is_differentiable();
        let adjoint = if engine == GradientEngine::Adjoint || needs_input {
            Some(gradient_adjoint_diag(
                &self.circuit,
                self.circuit_params(),
                &state,
                &observable,
            )?)
        } else {
            None
        };
        let circuit_grads = match engine {
            GradientEngine::Adjoint => adjoint
                .as_ref()
                .expect("computed above")
                .param_grads
                .clone(),
            GradientEngine::ParameterShift => {
                if needs_input && !SHIFT_WARNED.swap(true, Ordering::Relaxed) {
                    log::warn!(
                        "parameter-shift engine: reducer gradients use the adjoint input path"
                    );
                }
                gradient_parameter_shift_diag(
                    &self.circuit,
                    self.circuit_params(),
                    &state,
                    &observable,
                )?
            }
        };
        grads[c_range]
            .iter_mut()
            .zip(&circuit_grads)
            .for_each(|(g, v)| *g += v);

        if needs_input {
            let input_grads = &adjoint.expect("needed for the input path").input_grads;
            let dfeat = encode_pullback(self.encoding, &features, q, input_grads)?;
            self.reducer.backward(
                self.reducer_params(),
                image,
                &hidden,
                &dfeat,
                &mut grads[r_range],
            );
        }
        Ok(loss)
    }

    /// Per-component gradient of one sample.
    pub fn backward(
        &self,
        image: &[f64],
        label: usize,
        teacher_logits: Option<&[f64]>,
        cfg: &DistillConfig,
        engine: GradientEngine,
    ) -> Result<StudentGradient> {
        let mut flat = vec![0.0; self.num_params()];
        let loss = self.backward_into(image, label, teacher_logits, cfg, engine, &mut flat)?;
        Ok(StudentGradient {
            loss,
            flat,
            ranges: self.ranges(),
        })
    }

    /// Arrays for the versioned checkpoint format.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut arrays = vec![
            NamedArray::vector("student.reducer", self.reducer_params().to_vec()),
            NamedArray::vector("student.circuit", self.circuit_params().to_vec()),
            NamedArray::vector("student.readout", self.readout_params().to_vec()),
        ];
        if let Some(b) = self.reducer.pca_basis() {
            arrays.extend(b.to_arrays());
        }
        arrays
    }

    /// Restores parameters (and a PCA basis, if present) from checkpoint arrays.
    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let [r, c, h] = self.ranges();
        let mut params = Vec::with_capacity(self.num_params());
        params.extend_from_slice(
            &checkpoint::find_array(arrays, "student.reducer", Some(&[r.len()]))?.data,
        );
        params.extend_from_slice(
            &checkpoint::find_array(arrays, "student.circuit", Some(&[c.len()]))?.data,
        );
        params.extend_from_slice(
            &checkpoint::find_array(arrays, "student.readout", Some(&[h.len()]))?.data,
        );
        if self.reducer.kind() == crate::reduce::ReducerKind::Pca {
            self.reducer
                .set_pca_basis(crate::reduce::PcaBasis::from_arrays(arrays)?)?;
        }
        self.set_params(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.to_arrays())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_arrays(&checkpoint::read_checkpoint(path)?)
    }
}

static SHIFT_WARNED: AtomicBool = AtomicBool::new(false);

impl CountParameters for StudentModel {
    fn parameter_counts(&self) -> ParameterCounts {
        let [r, c, h] = self.ranges();
        ParameterCounts {
            components: vec![
                ("reducer".to_string(), r.len()),
                ("circuit".to_string(), c.len()),
                ("readout".to_string(), h.len()),
            ],
        }
    }
}

/// Gradient of one sample, split by component.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGradient {
    pub loss: DistillLoss,
    pub flat: Vec<f64>,
    ranges: [std::ops::Range<usize>; 3],
}

impl StudentGradient {
    /// `None` for parameter-free (frozen) reducers.
    pub fn reducer(&self) -> Option<&[f64]> {
        let r = &self.ranges[0];
        (!r.is_empty()).then(|| &self.flat[r.clone()])
    }

    pub fn circuit(&self) -> &[f64] {
        &self.flat[self.ranges[1].clone()]
    }

    /// `None` for the head-free basis-probability readout.
    pub fn readout(&self) -> Option<&[f64]> {
        let r = &self.ranges[2];
        (!r.is_empty()).then(|| &self.flat[r.clone()])
    }
}

pub fn student_forward(model: &StudentModel, image: &[f64]) -> Result<Vec<f64>> {
    model.forward(image)
}

pub fn student_backward(
    model: &StudentModel,
    image: &[f64],
    label: usize,
    teacher_logits: Option<&[f64]>,
    cfg: &DistillConfig,
    engine: GradientEngine,
) -> Result<StudentGradient> {
    model.backward(image, label, teacher_logits, cfg, engine)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, num_params: usize, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn adam(num_params: usize, learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, num_params, learning_rate)
    }

    pub fn sgd(num_params: usize, learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, num_params, learning_rate)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer sized for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                params
                    .iter_mut()
                    .zip(grads)
                    .for_each(|(p, g)| *p -= self.learning_rate * g);
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powf(self.t as f64);
                let bc2 = 1.0 - self.beta2.powf(self.t as f64);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam (or plain SGD) update.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLoopConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gradient_engine: GradientEngine,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// L2 clipping threshold for the full gradient; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            gradient_engine: GradientEngine::Adjoint,
            optimizer: OptimizerKind::Adam,
            learning_rate: DEFAULT_LEARNING_RATE,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub kd: f64,
    pub ce: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<M> {
    /// Model with the parameters of the best validation epoch.
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Writes one JSON record per epoch.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for rec in history {
        serde_json::to_writer(&mut out, rec).map_err(|e| Error::format(path, 0, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut records = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::format(path, offset, e.to_string()))?,
            );
        }
        offset += line.len() as u64;
    }
    Ok(records)
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sums per-item `(loss parts, gradient)` in fixed-size chunks so the result
/// is independent of the thread count.
fn reduce_gradients<F>(items: &[usize], dim: usize, f: F) -> Result<([f64; 3], Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<[f64; 3]> + Sync,
{
    const CHUNK: usize = 4;
    let partials: Vec<Result<([f64; 3], Vec<f64>)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; dim];
            let mut acc = [0.0; 3];
            for &i in chunk {
                let parts = f(i, &mut g)?;
                acc.iter_mut().zip(parts).for_each(|(a, p)| *a += p);
            }
            Ok((acc, g))
        })
        .collect();
    let mut total = vec![0.0; dim];
    let mut acc = [0.0; 3];
    for p in partials {
        let (a, g) = p?;
        acc.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
    }
    Ok((acc, total))
}

fn clip(grads: &mut [f64], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
}

fn with_sample(e: Error, key: usize) -> Error {
    match e {
        Error::DegenerateInput(m) => Error::DegenerateInput(format!("sample {key}: {m}")),
        other => other,
    }
}

/// Generic epoch loop with early stopping on validation accuracy.
fn run_epochs<M: Clone>(
    mut model: M,
    train_len: usize,
    loop_cfg: &TrainLoopConfig,
    params_of: impl Fn(&mut M) -> &mut Vec<f64>,
    batch_grad: impl Fn(&M, &[usize], u64) -> Result<([f64; 3], Vec<f64>)>,
    val_accuracy: impl Fn(&M) -> Result<f64>,
) -> Result<FitResult<M>> {
    let n_params = params_of(&mut model).len();
    let mut opt = OptimizerState::new(loop_cfg.optimizer, n_params, loop_cfg.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, M)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=loop_cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_len).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut ChaCha8Rng::seed_from_u64(mix_seed(loop_cfg.seed, epoch as u64)),
        );
        let mut sums = [0.0; 3];
        for (b, batch) in order.chunks(loop_cfg.batch_size).enumerate() {
            let step_seed = mix_seed(loop_cfg.seed, ((epoch as u64) << 32) | b as u64);
            let (parts, mut grads) = batch_grad(&model, batch, step_seed)?;
            sums.iter_mut().zip(parts).for_each(|(s, p)| *s += p);
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            clip(&mut grads, loop_cfg.clip_norm);
            opt.step(params_of(&mut model), &grads)?;
        }
        let val = val_accuracy(&model)?;
        let n = train_len as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: sums[0] / n,
            kd: sums[1] / n,
            ce: sums[2] / n,
            val_accuracy: val,
        });
        log::debug!("epoch {epoch}: loss {:.5} val {:.4}", sums[0] / n, val);
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= loop_cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_accuracy, best_epoch, model) = best.expect("at least one epoch");
    Ok(FitResult {
        model,
        history,
        best_epoch,
        best_val_accuracy,
        stopped_early,
    })
}

/// Trains a student on `train`, early-stopping on `val` accuracy.
///
/// Teacher logits are looked up by sample key; the KD term is skipped when
/// `teacher` is `None`, which requires `cfg.alpha == 0`.
pub fn fit(
    model: StudentModel,
    train: &Dataset,
    val: &Dataset,
    teacher: Option<&TeacherLogits>,
    cfg: &DistillConfig,
    loop_cfg: &TrainLoopConfig,
) -> Result<FitResult<StudentModel>> {
    loop_cfg.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if teacher.is_none() && cfg.alpha > 0.0 {
        return Err(Error::Config(
            "distillation weight alpha > 0 requires teacher logits".into(),
        ));
    }
    if let Some(t) = teacher {
        t.check_coverage(train)?;
    }
    if model.reducer().needs_fit() {
        return Err(Error::State(
            "pca reducer must be fitted before training".into(),
        ));
    }
    let labels = train.labels();
    let keys = train.keys();
    run_epochs(
        model,
        train.len(),
        loop_cfg,
        |m| &mut m.params,
        |m, batch, _| {
            reduce_gradients(batch, m.num_params(), |i, g| {
                let t = teacher.map(|t| t.get(keys[i]).expect("coverage checked"));
                let l = m
                    .backward_into(
                        train.image(i),
                        labels[i],
                        t,
                        cfg,
                        loop_cfg.gradient_engine,
                        g,
                    )
                    .map_err(|e| with_sample(e, keys[i]))?;
                Ok([l.total, l.kd, l.ce])
            })
        },
        |m| Ok(evaluate_student(m, val, None)?.accuracy),
    )
}

/// Predictions and per-sample correctness on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub correct: Vec<bool>,
    pub accuracy: f64,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

fn evaluation(predictions: Vec<usize>, labels: &[usize]) -> Result<Evaluation> {
    let correct: Vec<bool> = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| p == l)
        .collect();
    let accuracy = crate::stats::accuracy(&predictions, labels)?;
    Ok(Evaluation {
        predictions,
        correct,
        accuracy,
    })
}

/// `shots = Some((n, seed))` samples measurements; `None` is analytic.
pub fn evaluate_student(
    model: &StudentModel,
    ds: &Dataset,
    shots: Option<(usize, u64)>,
) -> Result<Evaluation> {
    let predictions = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let logits = match shots {
                Some((n, seed)) => {
                    model.forward_shots(ds.image(i), n, mix_seed(seed, ds.keys()[i] as u64))
                }
                None => model.forward(ds.image(i)),
            };
            logits
                .map(|l| argmax(&l))
                .map_err(|e| with_sample(e, ds.keys()[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluation(predictions, ds.labels())
}

/// A frozen classical teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTeacher {
    pub net: NetworkSpec,
    pub params: Vec<f64>,
}

impl TrainedTeacher {
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.net.forward(&self.params, batch)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<Evaluation> {
        let logits = self.logits(ds.images())?;
        evaluation(logits.rows().map(argmax).collect(), ds.labels())
    }

    /// One row per sample of `ds`, keyed by sample key.
    pub fn logits_table(&self, ds: &Dataset) -> Result<TeacherLogits> {
        let logits = self.logits(ds.images())?;
        let mut table =
            TeacherLogits::new(self.net.name().replace('/', "-"), self.net.num_classes())?;
        for (row, &key) in logits.rows().zip(ds.keys()) {
            table.insert(key, row.to_vec())?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.net.to_arrays(&self.params)?)
    }

    pub fn load(net: NetworkSpec, path: &Path) -> Result<Self> {
        let params = net.params_from_arrays(&checkpoint::read_checkpoint(path)?)?;
        Ok(Self { net, params })
    }
}

/// Trains a teacher with plain cross-entropy and early stopping on `val`.
pub fn fit_teacher(
    net: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    loop_cfg: &TrainLoopConfig,
) -> Result<FitResult<TrainedTeacher>> {
    loop_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let teacher = TrainedTeacher {
        net: net.clone(),
        params: net.init_params(mix_seed(loop_cfg.seed, 0x7EAC)),
    };
    run_epochs(
        teacher,
        train.len(),
        loop_cfg,
        |t| &mut t.params,
        |t, batch, step_seed| {
            let x = train.batch(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let (loss, mut grads) =
                t.net
                    .cross_entropy_grad(&t.params, &x, &labels, Some(step_seed))?;
            // Back to summed form; the loop divides by the batch size.
            let n = batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= n);
            Ok(([loss * n, 0.0, loss * n], grads))
        },
        |t| Ok(t.evaluate(val)?.accuracy),
    )
}
