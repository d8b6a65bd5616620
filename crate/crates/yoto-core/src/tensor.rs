//! Dense rank-1/rank-2 f32 tensors and the kernels behind all model math.
//!
//! Layout is row-major. Reductions accumulate in f32 in a fixed ascending
//! index order, so every operation is bit-deterministic for a given input.
//! Rank is capped at 2: attention works on explicit per-head slices instead
//! of higher-rank tensors.

use crate::error::{Result, YotoError};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// Dense f32 tensor, rank 1 or 2, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(YotoError::InvalidArgument(format!(
            "tensor rank must be 1 or 2, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(YotoError::InvalidArgument(format!(
            "tensor dimensions must be positive, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(YotoError::InvalidArgument(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                expect
            )));
        }
        let t = Tensor { shape, data };
        t.debug_check_finite("new");
        Ok(t)
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector construction")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable element access; the caller keeps elements finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at(&self, i: usize) -> f32 {
        self.data[i]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element is exactly +0.0 (bit pattern zero).
    pub fn is_bitwise_zero(&self) -> bool {
        self.data.iter().all(|v| v.to_bits() == 0)
    }

    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    #[inline]
    fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.is_finite(), "non-finite value produced by {op}");
    }
}

fn binary_shape_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(YotoError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Matrix product of an m×k and a k×n tensor.
///
/// The loop order is i-k-j: for each output element the summation over k
/// runs in ascending index order, bit-identical to a naive i-j-k triple
/// loop, while the innermost j loop stays vectorizable.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(YotoError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    t.debug_check_finite("matmul");
    Ok(t)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = a.data.clone();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let t = Tensor {
        shape: a.shape.clone(),
        data: out,
    };
    t.debug_check_finite("softmax_rows");
    t
}

/// Per-row normalization to mean 0 / variance 1, then affine: `g ⊙ x̂ + b`.
///
/// Variance is the population variance; `eps` keeps the constant-row case
/// finite (a constant row normalizes to zeros and the output is the bias).
pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(YotoError::InvalidArgument(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let n = a.cols();
    if gain.rank() != 1 || gain.len() != n {
        return Err(YotoError::ShapeMismatch {
            op: "layer_norm/gain",
            lhs: a.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    if bias.rank() != 1 || bias.len() != n {
        return Err(YotoError::ShapeMismatch {
            op: "layer_norm/bias",
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; a.len()];
    for (r, row) in a.data.chunks(n).enumerate() {
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            orow[j] = gain.data[j] * ((row[j] - mean) * inv) + bias.data[j];
        }
    }
    let t = Tensor {
        shape: a.shape.clone(),
        data: out,
    };
    t.debug_check_finite("layer_norm");
    Ok(t)
}

/// Elementwise sum. Plain IEEE addition, so `add(a, b)` and `add(b, a)` are
/// bit-identical; adding a +0.0 tensor returns the other operand bit-exactly
/// (the lone IEEE exception, -0.0 + 0.0 = +0.0, cannot arise from the
/// generators used in this crate).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_shape_check("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    let t = Tensor {
        shape: a.shape.clone(),
        data,
    };
    t.debug_check_finite("add");
    Ok(t)
}

/// Elementwise difference; `sub(x, x)` is exactly zero in IEEE arithmetic.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_shape_check("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    let t = Tensor {
        shape: a.shape.clone(),
        data,
    };
    t.debug_check_finite("sub");
    Ok(t)
}

/// Scalar multiple. `alpha == 0.0` short-circuits to exact +0.0 everywhere
/// (0.0 * -x would otherwise yield -0.0); `alpha == 1.0` is a bitwise copy.
pub fn scale(alpha: f32, a: &Tensor) -> Tensor {
    if alpha == 0.0 {
        return Tensor::zeros(&a.shape);
    }
    let data = a.data.iter().map(|x| alpha * x).collect();
    let t = Tensor {
        shape: a.shape.clone(),
        data,
    };
    t.debug_check_finite("scale");
    t
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

pub fn transpose(a: &Tensor) -> Tensor {
    if a.rank() == 1 {
        return a.clone();
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// Mean of each row: an m×n tensor reduces to a rank-1 tensor of length m.
pub fn row_mean(a: &Tensor) -> Tensor {
    let n = a.cols();
    let data = a
        .data
        .chunks(n)
        .map(|row| row.iter().sum::<f32>() / n as f32)
        .collect();
    Tensor {
        shape: vec![a.rows()],
        data,
    }
}

/// Tensor of N(0, std²) draws (Irwin-Hall approximation, see [`SeededRng`]).
///
/// `std == 0` yields exact zeros; the rng state still advances one draw per
/// element so downstream draws do not depend on `std`.
pub fn rng_normal(rng: &mut SeededRng, shape: &[usize], std: f32) -> Result<Tensor> {
    check_shape(shape)?;
    if std < 0.0 {
        return Err(YotoError::InvalidArgument(format!(
            "std must be non-negative, got {std}"
        )));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let z = rng.next_normal();
        if std == 0.0 {
            data.push(0.0);
        } else {
            data.push((z * std as f64) as f32);
        }
    }
    Tensor::new(shape.to_vec(), data)
}
