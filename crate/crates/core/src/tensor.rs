//! Dense rank-4 NCHW tensors.

use std::fmt;
use std::ops::{AddAssign, Index, IndexMut};

use crate::error::{Error, Result};

/// Stabilizer added to the variance before taking the square root in every
/// normalization statistic.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnknownDType(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type of a [`Tensor`].
pub trait Element:
    num_traits::Float
    + AddAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr, $rsc:expr, $csc:expr) => {{
        let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
            if rows == 0 || cols == 0 {
                0
            } else {
                (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
            }
        };
        assert!(span($m, $k, $rsa, $csa) as usize <= $a.len(), "gemm: lhs out of bounds");
        assert!(span($k, $n, $rsb, $csb) as usize <= $b.len(), "gemm: rhs out of bounds");
        assert!(span($m, $n, $rsc, $csc) as usize <= $c.len(), "gemm: out out of bounds");
    }};
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: all three operands were bounds-checked against their strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: all three operands were bounds-checked against their strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

/// Extents of a rank-4 tensor: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn spatial(&self) -> usize {
        self.0[2] * self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    pub fn with_c(mut self, c: usize) -> Self {
        self.0[1] = c;
        self
    }
    pub fn with_n(mut self, n: usize) -> Self {
        self.0[0] = n;
        self
    }

    /// Row-major strides with zero stride on unit dims, for broadcasting.
    pub(crate) fn broadcast_strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        let full = [c * h * w, h * w, w, 1];
        let mut out = [0; 4];
        for i in 0..4 {
            out[i] = if self.0[i] == 1 { 0 } else { full[i] };
        }
        out
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidDims(format!(
                "{} elements do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, [n, c, h, w]: [usize; 4]) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + h) * ws + w
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, lhs: self.shape, rhs: other.shape });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `index` along the batch axis, kept as a rank-4 tensor with N = 1.
    pub fn batch_item(&self, index: usize) -> Self {
        let per = self.shape.numel() / self.shape.n().max(1);
        Self {
            shape: self.shape.with_n(1),
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }

    /// Concatenate tensors along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidDims("cannot stack an empty batch".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if s.0[1..] != first.shape.0[1..] {
                return Err(Error::ShapeMismatch { op: "stack_batch", lhs: first.shape, rhs: s });
            }
            n += s.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: first.shape.with_n(n), data })
    }

    /// Channel slice `[start, start + len)`.
    pub fn channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape.0;
        if start + len > c || len == 0 {
            return Err(Error::InvalidDims(format!("channels {start}..{} of {}", start + len, c)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Self { shape: Shape::new(n, len, h, w), data })
    }
}

impl<T: Element> Index<[usize; 4]> for Tensor<T> {
    type Output = T;
    fn index(&self, idx: [usize; 4]) -> &T {
        &self.data[self.offset(idx)]
    }
}

impl<T: Element> IndexMut<[usize; 4]> for Tensor<T> {
    fn index_mut(&mut self, idx: [usize; 4]) -> &mut T {
        let o = self.offset(idx);
        &mut self.data[o]
    }
}

/// Per-(sample, channel) spatial statistics; `std` includes [`NORM_EPS`] under
/// the square root and uses the population variance.
pub fn reduce_stats<T: Element>(t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = t.shape();
    let hw = shape.spatial();
    if hw == 0 {
        return Err(Error::DegenerateSpatial(shape));
    }
    let groups = shape.n() * shape.c();
    let mut mean = Vec::with_capacity(groups);
    let mut std = Vec::with_capacity(groups);
    for chunk in t.data().chunks_exact(hw) {
        let (m, s) = group_stats(chunk);
        mean.push(T::from_f64(m));
        std.push(T::from_f64(s));
    }
    let out = Shape::new(shape.n(), shape.c(), 1, 1);
    Ok((Tensor::from_vec(out, mean)?, Tensor::from_vec(out, std)?))
}

/// Mean and stabilized std of one spatial plane, accumulated in f64.
pub(crate) fn group_stats<T: Element>(plane: &[T]) -> (f64, f64) {
    let m = plane.len() as f64;
    let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / m;
    let var = plane
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / m;
    (mean, (var + NORM_EPS).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_ramp() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (m, s) = reduce_stats(&t).unwrap();
        assert_eq!(m.data(), &[2.5]);
        // population variance of 1..4 is 1.25
        assert!((s.data()[0] - (1.25f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((s.data()[0] - 1.11804).abs() < 1e-5);
    }

    #[test]
    fn stats_of_constant() {
        let t = Tensor::full(Shape::new(1, 2, 3, 3), 7.0f64);
        let (m, s) = reduce_stats(&t).unwrap();
        assert!(m.data().iter().all(|&v| v == 7.0));
        for &v in s.data() {
            assert!((v - 1e-5f64.sqrt()).abs() < 1e-12);
            assert!((v - 3.1623e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn stats_per_sample() {
        let t = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![0.0f64, 0.0, 1.0, 3.0]).unwrap();
        let (m, s) = reduce_stats(&t).unwrap();
        assert_eq!(m.data(), &[0.0, 2.0]);
        assert!((s.data()[0] - 1e-5f64.sqrt()).abs() < 1e-15);
        assert!((s.data()[1] - (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_reject_empty_plane() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 3, 0, 4));
        assert!(matches!(reduce_stats(&t), Err(Error::DegenerateSpatial(_))));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0f32; 3]).is_err());
    }

    #[test]
    fn channel_slice() {
        let t = Tensor::from_fn(Shape::new(2, 3, 1, 2), |[n, c, _, w]| (n * 100 + c * 10 + w) as f64);
        let s = t.channels(1, 2).unwrap();
        assert_eq!(s.data(), &[10.0, 11.0, 20.0, 21.0, 110.0, 111.0, 120.0, 121.0]);
    }
}
