//! Dimensionality reduction from images to encoder inputs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedArray};
use crate::cnn::Shape3;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

pub const DEFAULT_HIDDEN_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReducerKind {
    #[default]
    FullyConnected,
    CenterCrop,
    Pca,
    MaxPool,
    AvgPool,
}

impl ReducerKind {
    pub const ALL: [ReducerKind; 5] = [
        ReducerKind::FullyConnected,
        ReducerKind::CenterCrop,
        ReducerKind::Pca,
        ReducerKind::MaxPool,
        ReducerKind::AvgPool,
    ];

    pub fn is_trainable(self) -> bool {
        self == ReducerKind::FullyConnected
    }
}

impl fmt::Display for ReducerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReducerKind::FullyConnected => "fc",
            ReducerKind::CenterCrop => "crop",
            ReducerKind::Pca => "pca",
            ReducerKind::MaxPool => "maxpool",
            ReducerKind::AvgPool => "avgpool",
        })
    }
}

impl FromStr for ReducerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fc" | "fully-connected" => Ok(ReducerKind::FullyConnected),
            "crop" | "center-crop" => Ok(ReducerKind::CenterCrop),
            "pca" => Ok(ReducerKind::Pca),
            "maxpool" | "max" => Ok(ReducerKind::MaxPool),
            "avgpool" | "avg" => Ok(ReducerKind::AvgPool),
            other => Err(Error::Config(format!(
                "unknown reducer {other:?} (expected fc, crop, pca, maxpool or avgpool)"
            ))),
        }
    }
}

impl TryFrom<String> for ReducerKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReducerKind> for String {
    fn from(k: ReducerKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Two-layer tanh network `D → hidden → target`.
///
/// Parameter layout: `W1 [hidden × D]`, `b1`, `W2 [target × hidden]`, `b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcReducer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub target_dim: usize,
}

impl FcReducer {
    pub fn new(input_dim: usize, hidden_dim: usize, target_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || target_dim == 0 {
            return Err(Error::Config(format!(
                "fc reducer dimensions must be positive, got {input_dim} -> {hidden_dim} -> {target_dim}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            target_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.hidden_dim * (self.input_dim + 1) + self.target_dim * (self.hidden_dim + 1)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.num_params()];
        let (w1, rest) = p.split_at_mut(self.hidden_dim * self.input_dim);
        let l1 = (6.0 / (self.input_dim + self.hidden_dim) as f64).sqrt();
        w1.iter_mut().for_each(|w| *w = rng.random_range(-l1..l1));
        let w2 = &mut rest[self.hidden_dim..self.hidden_dim + self.target_dim * self.hidden_dim];
        let l2 = (6.0 / (self.hidden_dim + self.target_dim) as f64).sqrt();
        w2.iter_mut().for_each(|w| *w = rng.random_range(-l2..l2));
        p
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = params.split_at(self.hidden_dim * self.input_dim);
        let (b1, rest) = rest.split_at(self.hidden_dim);
        let (w2, b2) = rest.split_at(self.target_dim * self.hidden_dim);
        (w1, b1, w2, b2)
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "fc reducer expects {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "fc reducer expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Returns `(output, hidden activations)`.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(params, x)?;
        let (w1, b1, w2, b2) = self.split(params);
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|j| (b1[j] + dot(&w1[j * self.input_dim..(j + 1) * self.input_dim], x)).tanh())
            .collect();
        let out = (0..self.target_dim)
            .map(|k| b2[k] + dot(&w2[k * self.hidden_dim..(k + 1) * self.hidden_dim], &hidden))
            .collect();
        Ok((out, hidden))
    }

    /// Adds the parameter gradient of `⟨dout, output⟩` to `grads`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        hidden: &[f64],
        dout: &[f64],
        grads: &mut [f64],
    ) {
        let (_, _, w2, _) = self.split(params);
        let (d, h, t) = (self.input_dim, self.hidden_dim, self.target_dim);
        let (g_w1, rest) = grads.split_at_mut(h * d);
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, g_b2) = rest.split_at_mut(t * h);
        let mut dh = vec![0.0; h];
        for k in 0..t {
            let dk = dout[k];
            g_b2[k] += dk;
            for j in 0..h {
                g_w2[k * h + j] += dk * hidden[j];
                dh[j] += dk * w2[k * h + j];
            }
        }
        for j in 0..h {
            let dz = dh[j] * (1.0 - hidden[j] * hidden[j]);
            if dz == 0.0 {
                continue;
            }
            g_b1[j] += dz;
            g_w1[j * d..(j + 1) * d]
                .iter_mut()
                .zip(x)
                .for_each(|(g, xi)| *g += dz * xi);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fully connected reduction of a flattened image.
pub fn reduce_fc(fc: &FcReducer, params: &[f64], image: &[f64]) -> Result<Vec<f64>> {
    fc.forward(params, image).map(|(out, _)| out)
}

/// Central `side × side` window of a single-channel `height × width` image.
pub fn reduce_center_crop(
    image: &[f64],
    height: usize,
    width: usize,
    side: usize,
) -> Result<Vec<f64>> {
    check_plane(image, height, width)?;
    if side == 0 || side > height || side > width {
        return Err(Error::Shape(format!(
            "crop side {side} does not fit a {height}x{width} image"
        )));
    }
    let top = (height - side) / 2;
    let left = (width - side) / 2;
    let mut out = Vec::with_capacity(side * side);
    for r in top..top + side {
        out.extend_from_slice(&image[r * width + left..r * width + left + side]);
    }
    Ok(out)
}

/// Non-overlapping pooling to an `out_side × out_side` grid. The image sides
/// must be divisible by `out_side`.
pub fn reduce_pool(
    image: &[f64],
    height: usize,
    width: usize,
    mode: PoolMode,
    out_side: usize,
) -> Result<Vec<f64>> {
    check_plane(image, height, width)?;
    if out_side == 0 || height % out_side != 0 || width % out_side != 0 {
        return Err(Error::Shape(format!(
            "a {height}x{width} image cannot be pooled to {out_side}x{out_side} without remainder"
        )));
    }
    let (wh, ww) = (height / out_side, width / out_side);
    let norm = 1.0 / (wh * ww) as f64;
    let mut out = Vec::with_capacity(out_side * out_side);
    for by in 0..out_side {
        for bx in 0..out_side {
            let mut acc = match mode {
                PoolMode::Max => f64::NEG_INFINITY,
                PoolMode::Avg => 0.0,
            };
            for r in by * wh..(by + 1) * wh {
                for &v in &image[r * width + bx * ww..r * width + (bx + 1) * ww] {
                    match mode {
                        PoolMode::Max => acc = acc.max(v),
                        PoolMode::Avg => acc += v,
                    }
                }
            }
            out.push(match mode {
                PoolMode::Max => acc,
                PoolMode::Avg => acc * norm,
            });
        }
    }
    Ok(out)
}

fn check_plane(image: &[f64], height: usize, width: usize) -> Result<()> {
    if image.len() != height * width {
        return Err(Error::Shape(format!(
            "image has {} values, expected {height}x{width}",
            image.len()
        )));
    }
    Ok(())
}

/// Zero-pads a plane symmetrically (extra row/column at the bottom/right).
pub fn pad_plane(
    image: &[f64],
    height: usize,
    width: usize,
    new_height: usize,
    new_width: usize,
) -> Vec<f64> {
    let top = (new_height - height) / 2;
    let left = (new_width - width) / 2;
    let mut out = vec![0.0; new_height * new_width];
    for r in 0..height {
        let dst = (r + top) * new_width + left;
        out[dst..dst + width].copy_from_slice(&image[r * width..(r + 1) * width]);
    }
    out
}

/// Channel-averaged single plane of a `c × h × w` image.
pub fn grayscale(image: &[f64], shape: Shape3) -> Vec<f64> {
    if shape.c == 1 {
        return image.to_vec();
    }
    let plane = shape.h * shape.w;
    let inv = 1.0 / shape.c as f64;
    (0..plane)
        .map(|i| (0..shape.c).map(|c| image[c * plane + i]).sum::<f64>() * inv)
        .collect()
}

/// Principal axes fitted on a training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    dim: usize,
    target_dim: usize,
    mean: Vec<f64>,
    /// `dim × target_dim`, column `j` is the `j`-th component.
    basis: Vec<f64>,
    /// All covariance eigenvalues, descending.
    eigenvalues: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.basis[i * self.target_dim + j])
            .collect()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Fraction of total variance carried by the kept components.
    pub fn explained_variance_ratio(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        if total == 0.0 {
            return 0.0;
        }
        let kept: f64 = self.eigenvalues[..self.target_dim]
            .iter()
            .map(|v| v.max(0.0))
            .sum();
        kept / total
    }

    /// `B · z + mean`.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                self.mean[i]
                    + dot(
                        &self.basis[i * self.target_dim..(i + 1) * self.target_dim],
                        z,
                    )
            })
            .collect()
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        vec![
            NamedArray::vector("pca.mean", self.mean.clone()),
            NamedArray {
                name: "pca.basis".into(),
                shape: vec![self.dim, self.target_dim],
                data: self.basis.clone(),
            },
            NamedArray::vector("pca.eigenvalues", self.eigenvalues.clone()),
        ]
    }

    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let basis = checkpoint::find_array(arrays, "pca.basis", None)?;
        let &[dim, target_dim] = basis.shape.as_slice() else {
            return Err(Error::Shape(format!(
                "pca.basis has rank {}",
                basis.shape.len()
            )));
        };
        let mean = checkpoint::find_array(arrays, "pca.mean", Some(&[dim]))?;
        let eig = checkpoint::find_array(arrays, "pca.eigenvalues", Some(&[dim]))?;
        Ok(Self {
            dim,
            target_dim,
            mean: mean.data.clone(),
            basis: basis.data.clone(),
            eigenvalues: eig.data.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.to_arrays())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arrays(&checkpoint::read_checkpoint(path)?)
    }
}

/// Top `target_dim` principal axes of the `n × dim` row-major matrix `data`.
///
/// Each axis is signed so that its largest-magnitude entry is positive.
/// Components whose eigenvalue is numerically zero are replaced by zero
/// columns.
pub fn pca_fit(data: &[f64], n: usize, dim: usize, target_dim: usize) -> Result<PcaBasis> {
    if data.len() != n * dim {
        return Err(Error::Shape(format!(
            "{} values do not form a {n}x{dim} matrix",
            data.len()
        )));
    }
    if target_dim == 0 || target_dim > dim {
        return Err(Error::Config(format!(
            "pca target {target_dim} outside 1..={dim}"
        )));
    }
    if n <= target_dim {
        return Err(Error::Config(format!(
            "pca needs more samples ({n}) than components ({target_dim})"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);

    // Population covariance, upper triangle computed row by row in parallel.
    let centered: Vec<f64> = data
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let mut cov = vec![0.0; dim * dim];
    cov.par_chunks_mut(dim).enumerate().for_each(|(i, out)| {
        for row in centered.chunks_exact(dim) {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            out[i..]
                .iter_mut()
                .zip(&row[i..])
                .for_each(|(c, xj)| *c += xi * xj);
        }
        out[i..].iter_mut().for_each(|c| *c *= inv_n);
    });
    for i in 0..dim {
        for j in 0..i {
            cov[i * dim + j] = cov[j * dim + i];
        }
    }

    let (eigenvalues, vectors) = symmetric_eigen(&cov, dim);
    let tol = 1e-12 * eigenvalues[0].abs().max(f64::MIN_POSITIVE) * dim as f64;
    let mut basis = vec![0.0; dim * target_dim];
    let mut padded = 0;
    for j in 0..target_dim {
        if eigenvalues[j] <= tol {
            padded += 1;
            continue;
        }
        let v = &vectors[j * dim..(j + 1) * dim];
        let pivot = v.iter().enumerate().fold(
            0,
            |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
        );
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            basis[i * target_dim + j] = sign * v[i];
        }
    }
    if padded > 0 {
        log::warn!(
            "pca: covariance has only {} nonzero eigenvalues, {padded} of {target_dim} components zero-padded",
            target_dim - padded
        );
    }
    Ok(PcaBasis {
        dim,
        target_dim,
        mean,
        basis,
        eigenvalues,
    })
}

/// `Bᵀ (x − mean)`.
pub fn pca_transform(image: &[f64], basis: &PcaBasis) -> Result<Vec<f64>> {
    if image.len() != basis.dim {
        return Err(Error::Shape(format!(
            "pca basis expects {} features, got {}",
            basis.dim,
            image.len()
        )));
    }
    let t = basis.target_dim;
    let mut out = vec![0.0; t];
    for (i, (x, m)) in image.iter().zip(&basis.mean).enumerate() {
        let c = x - m;
        if c == 0.0 {
            continue;
        }
        out.iter_mut()
            .zip(&basis.basis[i * t..(i + 1) * t])
            .for_each(|(o, b)| *o += c * b);
    }
    Ok(out)
}

/// Configured reducer bound to an input image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Reducer {
    kind: ReducerKind,
    input: Shape3,
    target_dim: usize,
    fc: Option<FcReducer>,
    pca: Option<PcaBasis>,
}

impl Reducer {
    /// `hidden_dim` is only used by the fully connected reducer. Crop and
    /// pooling need a square `target_dim`.
    pub fn new(
        kind: ReducerKind,
        input: Shape3,
        target_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        if input.is_empty() || target_dim == 0 {
            return Err(Error::Config(
                "reducer input and target must be non-empty".into(),
            ));
        }
        let fc = match kind {
            ReducerKind::FullyConnected => {
                Some(FcReducer::new(input.len(), hidden_dim, target_dim)?)
            }
            ReducerKind::CenterCrop | ReducerKind::MaxPool | ReducerKind::AvgPool => {
                let side = square_side(target_dim).ok_or_else(|| {
                    Error::Config(format!(
                        "{kind} reducer needs a square target, got {target_dim}"
                    ))
                })?;
                if side > input.h || side > input.w {
                    return Err(Error::Config(format!(
                        "{kind} target {side}x{side} exceeds the {}x{} image",
                        input.h, input.w
                    )));
                }
                None
            }
            ReducerKind::Pca => {
                if target_dim > input.h * input.w {
                    return Err(Error::Config(format!(
                        "pca target {target_dim} exceeds image size"
                    )));
                }
                None
            }
        };
        Ok(Self {
            kind,
            input,
            target_dim,
            fc,
            pca: None,
        })
    }

    pub fn kind(&self) -> ReducerKind {
        self.kind
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn fc(&self) -> Option<&FcReducer> {
        self.fc.as_ref()
    }

    pub fn pca_basis(&self) -> Option<&PcaBasis> {
        self.pca.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.fc.map_or(0, |f| f.num_params())
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.fc.map_or_else(Vec::new, |f| f.init_params(seed))
    }

    pub fn needs_fit(&self) -> bool {
        self.kind == ReducerKind::Pca && self.pca.is_none()
    }

    /// Fits PCA on training images (`[N, c, h, w]` flattened); no-op for
    /// other kinds.
    pub fn fit(&mut self, train_images: &[f64]) -> Result<()> {
        if self.kind != ReducerKind::Pca {
            return Ok(());
        }
        let len = self.input.len();
        if len == 0 || train_images.len() % len != 0 {
            return Err(Error::Shape(
                "training images do not match reducer input".into(),
            ));
        }
        let n = train_images.len() / len;
        let planes: Vec<f64> = train_images
            .chunks_exact(len)
            .flat_map(|img| grayscale(img, self.input))
            .collect();
        self.pca = Some(pca_fit(
            &planes,
            n,
            self.input.h * self.input.w,
            self.target_dim,
        )?);
        Ok(())
    }

    pub fn set_pca_basis(&mut self, basis: PcaBasis) -> Result<()> {
        if self.kind != ReducerKind::Pca
            || basis.dim != self.input.h * self.input.w
            || basis.target_dim != self.target_dim
        {
            return Err(Error::Shape(format!(
                "pca basis {}x{} does not fit this {} reducer",
                basis.dim, basis.target_dim, self.kind
            )));
        }
        self.pca = Some(basis);
        Ok(())
    }

    /// Reduces one `c × h × w` image.
    pub fn reduce(&self, params: &[f64], image: &[f64]) -> Result<Vec<f64>> {
        self.reduce_cached(params, image).map(|(out, _)| out)
    }

    /// Also returns the hidden activations of the fully connected reducer.
    pub(crate) fn reduce_cached(
        &self,
        params: &[f64],
        image: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if image.len() != self.input.len() {
            return Err(Error::Shape(format!(
                "reducer expects {} values per image, got {}",
                self.input.len(),
                image.len()
            )));
        }
        if let Some(fc) = &self.fc {
            return fc.forward(params, image);
        }
        let (h, w) = (self.input.h, self.input.w);
        let plane = grayscale(image, self.input);
        let out = match self.kind {
            ReducerKind::CenterCrop => reduce_center_crop(&plane, h, w, self.side())?,
            ReducerKind::MaxPool | ReducerKind::AvgPool => {
                let side = self.side();
                let (ph, pw) = (h.next_multiple_of(side), w.next_multiple_of(side));
                let mode = if self.kind == ReducerKind::MaxPool {
                    PoolMode::Max
                } else {
                    PoolMode::Avg
                };
                if (ph, pw) == (h, w) {
                    reduce_pool(&plane, h, w, mode, side)?
                } else {
                    reduce_pool(&pad_plane(&plane, h, w, ph, pw), ph, pw, mode, side)?
                }
            }
            ReducerKind::Pca => {
                let basis = self
                    .pca
                    .as_ref()
                    .ok_or_else(|| Error::State("pca reducer used before fitting".into()))?;
                pca_transform(&plane, basis)?
            }
            ReducerKind::FullyConnected => unreachable!("handled above"),
        };
        Ok((out, Vec::new()))
    }

    /// Adds the reducer parameter gradient for output cotangent `dout`.
    pub(crate) fn backward(
        &self,
        params: &[f64],
        image: &[f64],
        hidden: &[f64],
        dout: &[f64],
        grads: &mut [f64],
    ) {
        if let Some(fc) = &self.fc {
            fc.backward(params, image, hidden, dout, grads);
        }
    }

    fn side(&self) -> usize {
        square_side(self.target_dim).expect("validated in new")
    }
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| i as f64).collect()
    }

    #[test]
    fn kind_strings() {
        for k in ReducerKind::ALL {
            assert_eq!(k.to_string().parse::<ReducerKind>().unwrap(), k);
        }
        assert!("conv".parse::<ReducerKind>().is_err());
    }

    #[test]
    fn fc_zero_weights_and_identity() {
        let fc = FcReducer::new(2, 2, 2).unwrap();
        assert_eq!(
            reduce_fc(&fc, &vec![0.0; fc.num_params()], &[3.0, -1.0]).unwrap(),
            vec![0.0, 0.0]
        );
        // W1 = I, W2 = I: output = tanh(x), identity to first order for small x.
        let p = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let x = [1e-4, -2e-4];
        let out = reduce_fc(&fc, &p, &x).unwrap();
        assert!((out[0] - x[0]).abs() < 1e-11 && (out[1] - x[1]).abs() < 1e-11);
        assert!(reduce_fc(&fc, &p[1..], &x).is_err());
    }

    #[test]
    fn fc_backward_matches_finite_differences() {
        let fc = FcReducer::new(5, 3, 4).unwrap();
        let params = fc.init_params(4);
        let x = [0.3, -0.2, 0.9, 0.1, -0.7];
        let dout = [0.5, -1.0, 0.25, 2.0];
        let (_, hidden) = fc.forward(&params, &x).unwrap();
        let mut grads = vec![0.0; fc.num_params()];
        fc.backward(&params, &x, &hidden, &dout, &mut grads);
        let f = |p: &[f64]| dot(&reduce_fc(&fc, p, &x).unwrap(), &dout);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let fp = f(&p);
            p[i] -= 2.0 * h;
            let numeric = (fp - f(&p)) / (2.0 * h);
            assert!((numeric - grads[i]).abs() < 1e-8, "param {i}");
        }
    }

    #[test]
    fn center_crop_windows() {
        let img = ramp(28, 28);
        let out = reduce_center_crop(&img, 28, 28, 4).unwrap();
        assert_eq!(out[0], (12 * 28 + 12) as f64);
        assert_eq!(out[15], (15 * 28 + 15) as f64);
        let out = reduce_center_crop(&img, 28, 28, 16).unwrap();
        assert_eq!(out[0], (6 * 28 + 6) as f64);
        assert_eq!(out[255], (21 * 28 + 21) as f64);
        let small = ramp(4, 4);
        assert_eq!(reduce_center_crop(&small, 4, 4, 4).unwrap(), small);
        assert!(matches!(
            reduce_center_crop(&small, 4, 4, 5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let img = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            reduce_pool(&img, 2, 2, PoolMode::Avg, 1).unwrap(),
            vec![2.5]
        );
        assert_eq!(
            reduce_pool(&img, 2, 2, PoolMode::Max, 1).unwrap(),
            vec![4.0]
        );
        let c = vec![0.7; 28 * 28];
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let out = reduce_pool(&c, 28, 28, mode, 4).unwrap();
            assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-15));
        }
        assert!(matches!(
            reduce_pool(&c, 28, 28, PoolMode::Avg, 16),
            Err(Error::Shape(_))
        ));
        let x = ramp(8, 8);
        let scaled: Vec<f64> = x.iter().map(|v| -3.0 * v).collect();
        let a = reduce_pool(&x, 8, 8, PoolMode::Avg, 2).unwrap();
        let b = reduce_pool(&scaled, 8, 8, PoolMode::Avg, 2).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((v + 3.0 * u).abs() < 1e-12);
        }
    }

    #[test]
    fn eight_qubit_pooling_pads_to_32() {
        let r = Reducer::new(ReducerKind::AvgPool, Shape3::new(1, 28, 28), 256, 0).unwrap();
        let out = r.reduce(&[], &vec![1.0; 784]).unwrap();
        assert_eq!(out.len(), 256);
        // Two padded pixels per side: the border windows are empty.
        assert_eq!(out[0], 0.0);
        assert_eq!(out[17], 1.0);
        assert_eq!(out.iter().sum::<f64>(), 784.0 / 4.0);
        let plane = pad_plane(&[1.0], 1, 1, 3, 3);
        assert_eq!(plane, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pca_diagonal_line() {
        let data = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let b = pca_fit(&data, 3, 2, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let c = b.component(0);
        assert!((c[0] - s).abs() < 1e-12 && (c[1] - s).abs() < 1e-12);
        assert!((b.explained_variance_ratio() - 1.0).abs() < 1e-12);
        assert_eq!(pca_transform(b.mean(), &b).unwrap(), vec![0.0]);
    }

    #[test]
    fn pca_isotropic_is_orthonormal() {
        let data = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let b = pca_fit(&data, 4, 2, 2).unwrap();
        let (u, v) = (b.component(0), b.component(1));
        assert!((dot(&u, &u) - 1.0).abs() < 1e-8);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-8);
        assert!(dot(&u, &v).abs() < 1e-8);
        assert!((b.explained_variance_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_degenerate_pads_with_zeros() {
        let data = [1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 3.0, 3.0, 0.0, 4.0, 4.0, 0.0];
        let b = pca_fit(&data, 4, 3, 2).unwrap();
        assert!(b.component(1).iter().all(|v| *v == 0.0));
        assert!(pca_fit(&data, 2, 6, 2).is_err());
        assert!(pca_fit(&data, 4, 3, 4).is_err());
        assert!(pca_fit(&data[..6], 2, 3, 2).is_err());
    }

    #[test]
    fn pca_unfitted_is_a_state_error() {
        let r = Reducer::new(ReducerKind::Pca, Shape3::new(1, 4, 4), 4, 0).unwrap();
        assert!(r.needs_fit());
        assert!(matches!(r.reduce(&[], &[0.0; 16]), Err(Error::State(_))));
    }

    #[test]
    fn pca_basis_persists() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..40 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = pca_fit(&data, 40, 6, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.qdck");
        b.save(&path).unwrap();
        assert_eq!(PcaBasis::load(&path).unwrap(), b);
    }

    #[test]
    fn only_fc_has_parameters() {
        let shape = Shape3::new(1, 28, 28);
        for k in ReducerKind::ALL {
            let r = Reducer::new(k, shape, 16, 32).unwrap();
            assert_eq!(r.num_params() > 0, k.is_trainable());
        }
        assert_eq!(
            Reducer::new(ReducerKind::FullyConnected, shape, 16, 32)
                .unwrap()
                .num_params(),
            32 * 785 + 16 * 33
        );
        assert!(Reducer::new(ReducerKind::CenterCrop, shape, 8, 0).is_err());
    }

    #[test]
    fn color_images_are_averaged_for_frozen_reducers() {
        let shape = Shape3::new(3, 4, 4);
        let mut img = vec![0.0; 48];
        img[..16].fill(3.0);
        let r = Reducer::new(ReducerKind::AvgPool, shape, 4, 0).unwrap();
        assert!(r.reduce(&[], &img).unwrap().iter().all(|v| *v == 1.0));
    }
}
