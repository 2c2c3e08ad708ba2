//! Scalar and array primitives shared by every other module.
//!
//! All tensor data is stored as `f64`. A [`DType`] tag says how results are
//! rounded after each primitive operation, which lets the same code path
//! emulate single precision or bfloat16 deterministically on any CPU.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type emulated by rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    /// bfloat16: 8 significant bits, single-precision exponent range.
    Bf16,
}

impl DType {
    /// Bytes per element on the wire, used by the communication cost model.
    pub fn element_bytes(self) -> u64 {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::Bf16 => 2,
        }
    }

    /// Precision of intermediate arithmetic inside kernels. bf16 kernels
    /// accumulate in f32; stored and transferred values stay bf16.
    pub fn accum(self) -> DType {
        match self {
            DType::Bf16 => DType::F32,
            other => other,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        round_to_dtype(x, self)
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::Bf16 => "bf16",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f64" | "float64" => Ok(DType::F64),
            "f32" | "float32" => Ok(DType::F32),
            "bf16" | "bfloat16" | "bf16emu" => Ok(DType::Bf16),
            other => Err(Error::arg(format!("unknown dtype `{other}`"))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const BF16_PRECISION: i32 = 8;
const BF16_MIN_EXP: i32 = -126;
// (2 - 2^-7) * 2^127
const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

/// Round `x` to the nearest value representable in `dtype` (ties to even).
pub fn round_to_dtype(x: f64, dtype: DType) -> f64 {
    match dtype {
        DType::F64 => x,
        DType::F32 => x as f32 as f64,
        DType::Bf16 => round_bf16(x),
    }
}

fn round_bf16(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let exp = exponent_of(x).max(BF16_MIN_EXP);
    // Power-of-two scaling is exact, so the only rounding is round_ties_even.
    let quantum = 2f64.powi(exp - (BF16_PRECISION - 1));
    let r = (x / quantum).round_ties_even() * quantum;
    if r.abs() > BF16_MAX {
        f64::INFINITY.copysign(x)
    } else {
        r
    }
}

/// floor(log2(|x|)) for finite nonzero x.
fn exponent_of(x: f64) -> i32 {
    let bits = x.abs().to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal: far below the bf16 range, clamped by the caller anyway.
        -1075 + (64 - (bits & ((1u64 << 52) - 1)).leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

/// Stable log-sum-exp. The empty vector yields `-inf`.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidData("NaN in logsumexp input".into()));
    }
    Ok(logsumexp_unchecked(xs))
}

pub(crate) fn logsumexp_unchecked(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// logsumexp of the union of two disjoint sets given their logsumexps.
/// `-inf` is the identity.
pub fn lse_combine(a: f64, b: f64) -> Result<f64> {
    if a.is_nan() || b.is_nan() {
        return Err(Error::InvalidData("NaN in lse_combine".into()));
    }
    Ok(lse_combine_unchecked(a, b))
}

#[inline]
pub(crate) fn lse_combine_unchecked(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-major dense tensor with a dtype tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    /// Builds a tensor and rounds every element to `dtype`. NaN is rejected.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| x.is_nan()) {
            return Err(Error::InvalidData(format!("NaN at flat index {i}")));
        }
        let data = if dtype == DType::F64 {
            data
        } else {
            data.into_iter().map(|x| dtype.round(x)).collect()
        };
        Ok(Tensor { shape, data, dtype })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, DType::F64)
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], dtype }
    }

    pub fn filled(shape: Vec<usize>, value: f64, dtype: DType) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![dtype.round(value); numel], dtype }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Re-rounds the data to another dtype.
    pub fn with_dtype(&self, dtype: DType) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| dtype.round(x)).collect(),
            dtype,
        }
    }

    /// The four extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            s => Err(Error::shape(format!("expected a rank-4 tensor, got shape {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok([a, b, c]),
            s => Err(Error::shape(format!("expected a rank-3 tensor, got shape {s:?}"))),
        }
    }

    /// Contiguous last-axis slice of a rank-4 tensor.
    pub fn row(&self, b: usize, h: usize, i: usize) -> &[f64] {
        let [_, nh, n, d] = self.dims4_unchecked();
        let off = ((b * nh + h) * n + i) * d;
        &self.data[off..off + d]
    }

    pub fn row_mut(&mut self, b: usize, h: usize, i: usize) -> &mut [f64] {
        let [_, nh, n, d] = self.dims4_unchecked();
        let off = ((b * nh + h) * n + i) * d;
        &mut self.data[off..off + d]
    }

    /// Rows `start..end` along axis 2 of a rank-4 tensor, as one slice.
    pub fn rows(&self, b: usize, h: usize, start: usize, end: usize) -> &[f64] {
        let [_, nh, n, d] = self.dims4_unchecked();
        let base = (b * nh + h) * n * d;
        &self.data[base + start * d..base + end * d]
    }

    fn dims4_unchecked(&self) -> [usize; 4] {
        let s = &self.shape;
        [s[0], s[1], s[2], s[3]]
    }

    /// Copy of rows `start..end` along axis 2 of a rank-4 tensor.
    pub fn slice_axis2(&self, start: usize, end: usize) -> Result<Tensor> {
        let [b, nh, n, d] = self.dims4()?;
        if start > end || end > n {
            return Err(Error::arg(format!("slice {start}..{end} out of range for axis of {n}")));
        }
        let mut data = Vec::with_capacity(b * nh * (end - start) * d);
        for bi in 0..b {
            for h in 0..nh {
                data.extend_from_slice(self.rows(bi, h, start, end));
            }
        }
        Ok(Tensor { shape: vec![b, nh, end - start, d], data, dtype: self.dtype })
    }

    /// Concatenates rank-4 tensors along axis 2.
    pub fn concat_axis2(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::arg("nothing to concatenate"))?;
        let [b, nh, _, d] = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let [pb, pnh, pn, pd] = p.dims4()?;
            if (pb, pnh, pd) != (b, nh, d) {
                return Err(Error::shape("concat parts disagree on batch/head/feature extents"));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(b * nh * total * d);
        for bi in 0..b {
            for h in 0..nh {
                for p in parts {
                    let pn = p.shape[2];
                    data.extend_from_slice(p.rows(bi, h, 0, pn));
                }
            }
        }
        Ok(Tensor { shape: vec![b, nh, total, d], data, dtype: first.dtype })
    }

    /// Extracts head `h` as a tensor with a single head.
    pub fn head(&self, h: usize) -> Result<Tensor> {
        let [b, nh, n, d] = self.dims4()?;
        if h >= nh {
            return Err(Error::arg(format!("head {h} out of range ({nh} heads)")));
        }
        let mut data = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            data.extend_from_slice(self.rows(bi, h, 0, n));
        }
        Ok(Tensor { shape: vec![b, 1, n, d], data, dtype: self.dtype })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Deterministic tensor with i.i.d. entries uniform on `[-sqrt(3), sqrt(3)) * scale`
/// (zero mean, standard deviation `scale`).
///
/// The generator is ChaCha8 keyed with `seed` as a little-endian u64 in the
/// first eight key bytes (remaining bytes zero). Each element consumes one
/// `u64`; its top 53 bits give `u in [0, 1)` and the element is
/// `(2u - 1) * sqrt(3) * scale`. Other implementations can reproduce the
/// stream from that description alone.
pub fn seeded_random_tensor(shape: &[usize], seed: u64, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::arg(format!("scale must be positive, got {scale}")));
    }
    let numel: usize = shape.iter().product();
    let mut rng = seeded_rng(seed);
    let half_width = 3f64.sqrt() * scale;
    let data = (0..numel)
        .map(|_| (2.0 * unit_f64(&mut rng) - 1.0) * half_width)
        .collect();
    Tensor::from_f64(shape.to_vec(), data)
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[inline]
pub(crate) fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
