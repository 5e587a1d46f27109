//! Dense row-major tensors and the arithmetic the rest of the crate builds on.
//!
//! Values are held as `f32` regardless of the storage dtype; an `F16` tensor
//! only ever holds values exactly representable in half precision. Every
//! operation widens to `f64`, computes, and rounds once on the way out.

use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine_similarity`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            other => Err(Error::Dtype(other.to_string())),
        }
    }

    fn round(self, x: f64) -> f32 {
        match self {
            DType::F32 => x as f32,
            DType::F16 => f16::from_f64(x).to_f32(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds an `F32` tensor. Every dimension must be positive and the
    /// buffer length must equal the product of the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor {
            shape,
            dtype: DType::F32,
            data,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` for rank-2 tensors.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    /// Converts to another storage dtype. Narrowing to `F16` rounds to
    /// nearest and fails if a finite value overflows half precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Tensor> {
        if dtype == self.dtype {
            return Ok(self.clone());
        }
        let data = self
            .data
            .iter()
            .map(|&x| {
                let y = dtype.round(x as f64);
                if x.is_finite() && !y.is_finite() {
                    Err(Error::Overflow { op: "to_dtype" })
                } else {
                    Ok(y)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype,
            data,
        })
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, dtype: DType, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, dtype, data }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} has a zero dimension"
        )));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} needs {expected} elements, buffer has {len}"
        )));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            key: None,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Output dtype for a binary elementwise op: `F16` only when both inputs are.
fn promote(a: DType, b: DType) -> DType {
    if a == DType::F16 && b == DType::F16 {
        DType::F16
    } else {
        DType::F32
    }
}

/// Rounds one 64-bit result. Overflow from finite operands is an error;
/// non-finite operands propagate.
#[inline]
fn round_checked(x: f64, dtype: DType, inputs_finite: bool, op: &'static str) -> Result<f32> {
    let y = dtype.round(x);
    if !y.is_finite() && inputs_finite {
        return Err(Error::Overflow { op });
    }
    Ok(y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    let dtype = promote(a.dtype, b.dtype);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            round_checked(
                x as f64 + y as f64,
                dtype,
                x.is_finite() && y.is_finite(),
                "add",
            )
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), dtype, data))
}

/// `a - b`, elementwise.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    let dtype = promote(a.dtype, b.dtype);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            round_checked(
                x as f64 - y as f64,
                dtype,
                x.is_finite() && y.is_finite(),
                "sub",
            )
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), dtype, data))
}

/// `c * a`. A zero coefficient yields exact positive zeros.
pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(Error::NonFiniteCoefficient(c));
    }
    if c == 0.0 {
        return Ok(Tensor::from_parts_unchecked(
            a.shape.clone(),
            a.dtype,
            vec![0.0; a.numel()],
        ));
    }
    let data = a
        .data
        .iter()
        .map(|&x| round_checked(c * x as f64, a.dtype, x.is_finite(), "scale"))
        .collect::<Result<_>>()?;
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), a.dtype, data))
}

/// `a + c * b`, rounded once. The output is `F32` unless both inputs are `F16`.
pub fn add_scaled(a: &Tensor, b: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(Error::NonFiniteCoefficient(c));
    }
    same_shape(a, b)?;
    let dtype = promote(a.dtype, b.dtype);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            round_checked(
                x as f64 + c * y as f64,
                dtype,
                x.is_finite() && y.is_finite(),
                "add_scaled",
            )
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), dtype, data))
}

/// `Σ cᵢ · tᵢ` accumulated in 64-bit and rounded once to `F32`.
///
/// A single term goes through [`scale`], so the one-element combination is
/// bit-identical to scaling.
pub fn linear_combination(terms: &[(&Tensor, f64)]) -> Result<Tensor> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::InvalidTensor("empty linear combination".into()))?;
    if let Some(&(_, c)) = terms.iter().find(|(_, c)| !c.is_finite()) {
        return Err(Error::NonFiniteCoefficient(c));
    }
    if rest.is_empty() {
        return scale(first.0, first.1)?.to_dtype(DType::F32);
    }
    for (t, _) in rest {
        same_shape(first.0, t)?;
    }
    let n = first.0.numel();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = first.0.data[i];
        let mut acc = first.1 * x0 as f64;
        let mut finite = x0.is_finite();
        for (t, c) in rest {
            let x = t.data[i];
            finite &= x.is_finite();
            acc += c * x as f64;
        }
        data.push(round_checked(acc, DType::F32, finite, "linear_combination")?);
    }
    Ok(Tensor::from_parts_unchecked(
        first.0.shape.clone(),
        DType::F32,
        data,
    ))
}

/// Row-major matrix product with a 64-bit accumulator per output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        key: None,
        left: a.shape.clone(),
        right: b.shape.clone(),
    };
    let (m, k) = a.matrix_dims().ok_or_else(mismatch)?;
    let (k2, n) = b.matrix_dims().ok_or_else(mismatch)?;
    if k != k2 {
        return Err(mismatch());
    }
    let finite = !a.has_non_finite() && !b.has_non_finite();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p] as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv as f64;
            }
        }
    }
    let data = out
        .into_iter()
        .map(|x| round_checked(x, DType::F32, finite, "matmul"))
        .collect::<Result<_>>()?;
    Ok(Tensor::from_parts_unchecked(vec![m, n], DType::F32, data))
}

/// Cosine similarity of the flattened tensors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    cosine_f64(&a.to_f64(), &b.to_f64())
}

pub(crate) fn cosine_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() < MIN_NORM || nb.sqrt() < MIN_NORM {
        return Err(Error::ZeroNorm);
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b this is
    // exactly na, so self-similarity is exactly 1.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub l2_norm: f64,
    pub max_abs: f64,
    pub mean: f64,
    pub fraction_zero: f64,
}

pub fn stats(a: &Tensor) -> TensorStats {
    let n = a.numel();
    let (mut sq, mut max_abs, mut sum, mut zeros) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for &x in &a.data {
        let x = x as f64;
        sq += x * x;
        max_abs = max_abs.max(x.abs());
        sum += x;
        if x == 0.0 {
            zeros += 1;
        }
    }
    TensorStats {
        l2_norm: sq.sqrt(),
        max_abs,
        mean: sum / n as f64,
        fraction_zero: zeros as f64 / n as f64,
    }
}

/// Spacing between `|x|` and the next larger `f32`.
pub fn ulp_f32(x: f32) -> f64 {
    let ax = x.abs();
    if !ax.is_finite() {
        return f64::NAN;
    }
    if ax == f32::MAX {
        return (ax as f64) - (f32::from_bits(ax.to_bits() - 1) as f64);
    }
    f32::from_bits(ax.to_bits() + 1) as f64 - ax as f64
}

/// `|actual - expected|` measured in float32 ulps at magnitude `scale`.
///
/// Rounding error of an f32 add or subtract is bounded by the ulp of the
/// largest operand, so `scale` should be the largest magnitude that took
/// part in producing `actual`.
pub fn ulps_at_scale(actual: f32, expected: f32, scale: f32) -> f64 {
    let scale = scale.abs().max(actual.abs()).max(expected.abs());
    let diff = (actual as f64 - expected as f64).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / ulp_f32(scale)
}
